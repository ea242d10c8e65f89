"""Flat ``key = value`` config files mapped onto dataclass fields."""

from dataclasses import fields

from .errors import ConfigError


def _coerce(name, raw, typ):
    typ = typ if isinstance(typ, type) else {"int": int, "float": float, "str": str, "bool": bool}.get(typ, str)
    try:
        if typ is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return low in ("true", "1")
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot read {raw!r} as {typ.__name__}") from None
    return raw


def parse_config(text, cls, allowed_extra=()):
    """Build ``cls`` from config text; unknown keys are errors.

    Blank lines and lines starting with ``#`` are ignored.  Keys listed in
    ``allowed_extra`` are returned separately as raw strings.
    """
    types = {f.name: f.type for f in fields(cls)}
    values, extra = {}, {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key in extra or key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        if key in types:
            values[key] = _coerce(key, raw, types[key])
        elif key in allowed_extra:
            extra[key] = raw
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    return cls(**values), extra


def read_config(path, cls, allowed_extra=()):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, cls, allowed_extra)


def format_config(obj):
    return "".join(f"{f.name} = {getattr(obj, f.name)}\n" for f in fields(obj))
