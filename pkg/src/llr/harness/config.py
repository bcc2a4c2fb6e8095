"""JSON run configuration with strict keys and k/255 radii."""

import json
from fractions import Fraction

from llr.errors import ConfigError


def parse_epsilon(value):
    """A float radius or a fraction string such as ``"8/255"``."""
    if isinstance(value, bool):
        raise ConfigError(f"epsilon must be a number or 'k/255', got {value!r}")
    if isinstance(value, (int, float)):
        eps = float(value)
    elif isinstance(value, str):
        try:
            eps = float(Fraction(value.strip()))
        except (ValueError, ZeroDivisionError) as exc:
            raise ConfigError(f"cannot parse epsilon {value!r}") from exc
    else:
        raise ConfigError(f"epsilon must be a number or 'k/255', got {value!r}")
    if eps < 0:
        raise ConfigError(f"epsilon must be non-negative, got {value!r}")
    return eps


def reject_unknown(d, allowed, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object, got {type(d).__name__}")
    extra = set(d) - set(allowed)
    if extra:
        raise ConfigError(f"{where}: unknown key(s) {sorted(extra)}")


def load_config(path):
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return data


def dump_config(data, path):
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")
