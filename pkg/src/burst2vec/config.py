"""Flat key=value config files.

One `key = value` per line, `#` comments, blank lines ignored. Keys are
namespaced by dotted prefixes (train.lr, model.proj_dim, synth.n_clips) so a
single file can drive every subcommand. No nesting, no quoting rules; the
format exists to keep config diffs and docs trivial.
"""

from __future__ import annotations

from pathlib import Path


class ConfigError(ValueError):
    pass


def parse_config_text(text: str, origin: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected key = value, got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        value = value.strip()
        if not key:
            raise ConfigError(f"{origin}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{origin}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def load_config(path) -> dict[str, str]:
    p = Path(path)
    return parse_config_text(p.read_text(encoding="utf-8"), origin=str(p))


def section(mapping: dict[str, str], prefix: str) -> dict[str, str]:
    """Keys under `prefix.`, with the prefix stripped."""
    head = prefix + "."
    return {k[len(head):]: v for k, v in mapping.items() if k.startswith(head)}


def parse_bool(value: str) -> bool:
    low = value.lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {value!r}")


def parse_int_tuple(value: str) -> tuple[int, ...]:
    try:
        return tuple(int(v.strip()) for v in value.split(",") if v.strip())
    except ValueError as e:
        raise ConfigError(f"not a comma-separated int list: {value!r}") from e


_MISSING = object()


def take(mapping: dict[str, str], key: str, convert, default=_MISSING):
    """Pop `key` from the mapping, converting it; error on bad values.
    Leftover keys after all takes indicate typos and are the caller's job
    to reject."""
    if key not in mapping:
        if default is _MISSING:
            raise ConfigError(f"missing required config key {key!r}")
        return default
    raw = mapping.pop(key)
    try:
        return convert(raw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from e


def reject_unknown(mapping: dict[str, str], context: str):
    if mapping:
        raise ConfigError(f"unknown {context} config keys: {', '.join(sorted(mapping))}")
