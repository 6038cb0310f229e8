"""Flat ``section.key = value`` config text, and seed fan-out.

Config files are one assignment per line; ``#`` starts a comment. Values are
parsed as int, float, bool (``true``/``false``), comma-separated tuples, or
left as strings.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError

SEED_STREAMS = ("data", "augment", "init")


def parse_value(text: str):
    text = text.strip()
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", "null", ""):
        return None
    if "," in text:
        return tuple(parse_value(part) for part in text.split(",") if part.strip())
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, (tuple, list)):
        return ", ".join(format_value(v) for v in value) + ("," if len(value) == 1 else "")
    return str(value)


def parse_config(text: str, source="<config>") -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = parse_value(value)
    return out


def format_config(values: dict) -> str:
    return "".join(f"{k} = {format_value(v)}\n" for k, v in values.items())


def section(values: dict, name: str) -> dict:
    prefix = name + "."
    return {k[len(prefix):]: v for k, v in values.items() if k.startswith(prefix)}


def derive_seeds(seed: int) -> dict[str, int]:
    """Split one root seed into independent 32-bit seeds for data, augmentation and init.

    Stream ``k`` (in ``SEED_STREAMS`` order) is the first word of
    ``numpy.random.SeedSequence(seed).spawn(3)[k].generate_state(1)``.
    """
    children = np.random.SeedSequence(int(seed)).spawn(len(SEED_STREAMS))
    return {name: int(child.generate_state(1)[0]) for name, child in zip(SEED_STREAMS, children)}
