import math

import numpy as np
import pytest

import oracles
from fmgteleop.stats import (anova_oneway, f_sf, studentized_range_quantile, studentized_range_sf, tukey_hsd,
                             tukey_table)


def test_anova_hand_example():
    # means 2, 3, 4; SSB = 3 * (1 + 0 + 1) = 6 on 2 df; SSW = 3 * 2 = 6 on 6 df; F = 3 / 1
    F, p = anova_oneway([[1, 2, 3], [2, 3, 4], [3, 4, 5]])
    assert abs(F - 3.0) <= 1e-9
    # for dfn = 2 the F tail has the closed form (1 + 2F/dfd)^(-dfd/2) = 2^-3
    assert abs(p - 0.125) <= 1e-3
    assert p == pytest.approx(oracles.f_sf_quadrature(3.0, 2, 6), abs=1e-9)


def _anova_by_definition(groups):
    allv = [v for g in groups for v in g]
    grand = sum(allv) / len(allv)
    means = [sum(g) / len(g) for g in groups]
    ssb = sum(len(g) * (m - grand) ** 2 for g, m in zip(groups, means))
    ssw = sum((v - m) ** 2 for g, m in zip(groups, means) for v in g)
    return (ssb / (len(groups) - 1)) / (ssw / (len(allv) - len(groups)))


def test_anova_random_groups_against_definition_and_quadrature():
    rng = np.random.default_rng(0)
    for _ in range(10):
        k = int(rng.integers(2, 5))
        groups = [rng.normal(rng.normal(0, 0.5), 1, size=int(rng.integers(3, 9))).tolist() for _ in range(k)]
        F, p = anova_oneway(groups)
        assert F == pytest.approx(_anova_by_definition(groups), rel=1e-12)
        dfd = sum(map(len, groups)) - k
        assert p == pytest.approx(oracles.f_sf_quadrature(F, k - 1, dfd, n=20_000), abs=1e-6)


def test_anova_degenerate_cases():
    assert anova_oneway([[1, 1], [1, 1]]) == (0.0, 1.0)
    F, p = anova_oneway([[1, 1], [2, 2]])
    assert math.isinf(F) and p == 0.0
    with pytest.raises(ValueError):
        anova_oneway([[1, 2, 3]])
    with pytest.raises(ValueError):
        anova_oneway([[1], [2, 3]])
    assert f_sf(0.0, 2, 3) == 1.0


# Published 95% points of the studentized range
Q95 = [((2, 10), 3.151), ((3, 12), 3.773), ((4, 20), 3.958), ((5, 30), 4.102), ((3, 60), 3.399)]


@pytest.mark.parametrize("kd,expected", Q95)
def test_studentized_range_quantiles_match_tables(kd, expected):
    k, df = kd
    q = studentized_range_quantile(0.95, k, df)
    assert q == pytest.approx(expected, abs=0.02)
    assert studentized_range_sf(q, k, df) == pytest.approx(0.05, abs=2e-3)


def test_tukey_flags_separated_groups():
    rng = np.random.default_rng(1)
    a, b = rng.normal(0, 1, 50), rng.normal(10, 1, 50)
    rows = tukey_hsd([a, b])
    assert len(rows) == 2 and all(r.significant for r in rows)
    assert all(r.p < 1e-3 for r in rows)
    r = next(r for r in rows if (r.a, r.b) == (0, 1))
    assert r.lower <= r.diff <= r.upper < 0


def test_tukey_identical_groups_not_significant():
    g = np.random.default_rng(2).normal(0, 1, 50)
    rows = tukey_hsd([g, g.copy(), g.copy()])
    assert not any(r.significant for r in rows)
    assert all(r.diff == 0 and r.p == 1.0 for r in rows)


def test_tukey_table_is_antisymmetric_and_renders():
    rng = np.random.default_rng(3)
    groups = [rng.normal(m, 1, 20) for m in (0, 0.3, 2)]
    rows = tukey_hsd(groups)
    lookup = {(r.a, r.b): r for r in rows}
    assert len(rows) == 6
    for (a, b), r in lookup.items():
        back = lookup[(b, a)]
        assert back.diff == -r.diff and back.q == r.q and back.p == r.p and back.significant == r.significant
    text = tukey_table(rows, ["tcn", "fcnn", "cnn"])
    assert len(text.splitlines()) == 4 and "tcn - cnn" in text
    with pytest.raises(ValueError):
        tukey_hsd(groups, alpha=1.0)
