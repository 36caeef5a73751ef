"""Flat ``key = value`` configuration files (one pair per line, ``#`` comments)."""

from pathlib import Path


class ConfigError(ValueError):
    pass


def parse_kv(text, source="<config>"):
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def load_kv(path):
    path = Path(path)
    return parse_kv(path.read_text(encoding="utf-8"), str(path))


def format_kv(values):
    return "".join(f"{k} = {v}\n" for k, v in values.items())


def check_keys(values, allowed, what="config"):
    unknown = sorted(set(values) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown {what} key(s): {', '.join(unknown)}")
