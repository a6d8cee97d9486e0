"""Flat key = value configuration files for the CLI harness.

Grammar: one `key = value` pair per line; `#` starts a comment; blank lines
ignored. Values are integers, reals, comma-separated integer lists (N_list,
k) or bare strings. Unknown keys and malformed lines are rejected with a
line-numbered diagnostic.
"""

from __future__ import annotations

from pathlib import Path

from .experiments import ExperimentSpec

__all__ = ["ConfigError", "parse_config", "load_spec"]

_INT_KEYS = {"snap_every"}
_FLOAT_KEYS = {"dt", "T", "epsilon", "a", "b", "m", "lambda", "x0"}
_LIST_KEYS = {"N_list", "k"}
_STR_KEYS = {"problem", "dt_rule", "scheme", "out_prefix", "tau_mode", "xi_phase"}
ALL_KEYS = _INT_KEYS | _FLOAT_KEYS | _LIST_KEYS | _STR_KEYS


class ConfigError(ValueError):
    """Malformed configuration; carries a line/field diagnostic."""


def _parse_value(key: str, raw: str, lineno: int):
    raw = raw.strip()
    try:
        if key in _INT_KEYS:
            return int(raw)
        if key in _FLOAT_KEYS:
            return float(raw)
        if key in _LIST_KEYS:
            return tuple(int(tok) for tok in raw.replace(" ", "").split(",") if tok)
        return raw
    except ValueError:
        raise ConfigError(f"line {lineno}: cannot parse value {raw!r} for key {key!r}") from None


def parse_config(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line.rstrip()!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in ALL_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r} "
                              f"(known: {', '.join(sorted(ALL_KEYS))})")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, raw, lineno)
    return values


def load_spec(path) -> ExperimentSpec:
    """Read a config file into an ExperimentSpec."""
    text = Path(path).read_text()
    values = parse_config(text)
    if "problem" not in values:
        raise ConfigError("missing required key 'problem'")
    kwargs = {"id": values.pop("problem")}
    rename = {"lambda": "lam"}
    for key, val in values.items():
        kwargs[rename.get(key, key)] = val
    try:
        return ExperimentSpec(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
