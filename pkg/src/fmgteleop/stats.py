"""One-way ANOVA and Tukey's honestly-significant-difference test."""

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import betainc

MC_DRAWS = 1_000_000
MC_SEED = 20240


def _groups(groups):
    out = [np.asarray(g, dtype=np.float64).ravel() for g in groups]
    if len(out) < 2:
        raise ValueError("need at least two groups")
    if any(len(g) < 2 for g in out):
        raise ValueError("every group needs at least two samples")
    return out


def _sums_of_squares(groups):
    n_total = sum(len(g) for g in groups)
    grand = math.fsum(math.fsum(g) for g in groups) / n_total
    means = [math.fsum(g) / len(g) for g in groups]
    ssb = math.fsum(len(g) * (m - grand) ** 2 for g, m in zip(groups, means))
    ssw = math.fsum(math.fsum((g - m) ** 2) for g, m in zip(groups, means))
    return means, ssb, ssw, n_total


def f_sf(F, dfn, dfd):
    """Upper tail P(X > F) of the F distribution via the regularized incomplete beta."""
    if F <= 0:
        return 1.0
    if math.isinf(F):
        return 0.0
    return float(betainc(dfd / 2.0, dfn / 2.0, dfd / (dfd + dfn * F)))


def anova_oneway(groups):
    """Returns ``(F, p)``. Data with no spread at all gives ``F = 0, p = 1``."""
    groups = _groups(groups)
    _, ssb, ssw, n = _sums_of_squares(groups)
    dfb, dfw = len(groups) - 1, n - len(groups)
    if ssb == 0:
        return 0.0, 1.0
    if ssw == 0:
        return math.inf, 0.0
    F = (ssb / dfb) / (ssw / dfw)
    return F, f_sf(F, dfb, dfw)


@lru_cache(maxsize=32)
def _studentized_range_draws(k, df, draws, seed):
    rng = np.random.default_rng([seed, k, df])
    out = np.empty(draws)
    chunk = 100_000
    for i in range(0, draws, chunk):
        m = min(chunk, draws - i)
        z = rng.standard_normal((m, k))
        s = np.sqrt(rng.chisquare(df, size=m) / df)
        out[i : i + m] = (z.max(axis=1) - z.min(axis=1)) / s
    out.sort()
    return out


def studentized_range_quantile(p, k, df, draws=MC_DRAWS, seed=MC_SEED):
    """Monte-Carlo estimate of the ``p`` quantile of the studentized range q(k, df)."""
    return float(np.quantile(_studentized_range_draws(k, df, draws, seed), p))


def studentized_range_sf(q, k, df, draws=MC_DRAWS, seed=MC_SEED):
    sample = _studentized_range_draws(k, df, draws, seed)
    return float(len(sample) - np.searchsorted(sample, q, side="left")) / len(sample)


@dataclass(frozen=True)
class TukeyRow:
    a: int
    b: int
    diff: float  # mean(a) - mean(b)
    q: float
    p: float
    lower: float
    upper: float
    significant: bool


def tukey_hsd(groups, alpha=0.05, draws=MC_DRAWS, seed=MC_SEED):
    """All ordered pairs (a, b), a != b, with Tukey-Kramer standard errors.

    The table lists both orientations so that ``diff(a, b) == -diff(b, a)``.
    """
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    groups = _groups(groups)
    means, _, ssw, n = _sums_of_squares(groups)
    k, df = len(groups), n - len(groups)
    msw = ssw / df
    q_crit = studentized_range_quantile(1 - alpha, k, df, draws, seed)
    rows = []
    for a in range(k):
        for b in range(k):
            if a == b:
                continue
            diff = means[a] - means[b]
            se = math.sqrt(msw / 2.0 * (1.0 / len(groups[a]) + 1.0 / len(groups[b])))
            if se == 0:
                q = 0.0 if diff == 0 else math.inf
            else:
                q = abs(diff) / se
            p = studentized_range_sf(q, k, df, draws, seed)
            half = q_crit * se
            rows.append(TukeyRow(a, b, diff, q, p, diff - half, diff + half, q > q_crit))
    return rows


def tukey_table(rows, names=None):
    """Text rendering of the unique pairs (a < b)."""
    name = (lambda i: names[i]) if names else str
    lines = [f"{'pair':<20} {'diff':>10} {'q':>10} {'p':>8}  sig"]
    for r in rows:
        if r.a < r.b:
            lines.append(f"{name(r.a) + ' - ' + name(r.b):<20} {r.diff:>10.4f} {r.q:>10.3f} {r.p:>8.4f}  "
                         f"{'yes' if r.significant else 'no'}")
    return "\n".join(lines)
