"""Flat ``key = value`` configuration files with dotted keys.

Blank lines and ``#`` comments are skipped.  Overrides (``key=value``) are
applied after the file, last writer wins.  Unknown keys are rejected.
"""

import dataclasses
import typing


class ConfigError(ValueError):
    def __init__(self, message, line=None, source=None):
        where = ""
        if source is not None:
            where = f"{source}:"
        if line is not None:
            where += f"{line}: "
        elif where:
            where += " "
        super().__init__(where + message)
        self.line = line


def parse_lines(text, source=None):
    """Return ``[(key, raw_value, line_number)]`` for every assignment line."""
    out = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", lineno, source)
        key, value = (part.strip() for part in line.split("=", 1))
        if not key or any(ch.isspace() for ch in key):
            raise ConfigError(f"malformed key {key!r}", lineno, source)
        out.append((key, value, lineno))
    return out


def parse_override(text):
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like key=value")
    key, value = (part.strip() for part in text.split("=", 1))
    return key, value


def config_keys(cls):
    return {f.metadata.get("key", f"trainer.{f.name}"): f for f in dataclasses.fields(cls)}


def coerce(value, annotation, key):
    origin = typing.get_origin(annotation)
    args = typing.get_args(annotation)
    if origin in (typing.Union, getattr(__import__("types"), "UnionType", None)) and type(None) in args:
        if value.lower() in ("", "none", "null"):
            return None
        annotation = next(a for a in args if a is not type(None))
        origin = typing.get_origin(annotation)
        args = typing.get_args(annotation)
    try:
        if annotation is bool:
            lowered = value.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if annotation is int:
            return int(value)
        if annotation is float:
            return float(value)
        if annotation is str:
            return value
        if origin is tuple or annotation is tuple:
            item = args[0] if args else str
            parts = [p.strip() for p in value.split(",") if p.strip()]
            return tuple(coerce(p, item, key) for p in parts)
    except ValueError:
        raise ConfigError(f"{key}: cannot interpret {value!r} as {getattr(annotation, '__name__', annotation)}") from None
    raise ConfigError(f"{key}: unsupported field type {annotation}")


def format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(format_value(v) for v in value)
    if value is None:
        return "none"
    return str(value)


def build(cls, assignments, source=None):
    """Construct dataclass ``cls`` from ``(key, raw, line)`` triples."""
    fields = config_keys(cls)
    hints = typing.get_type_hints(cls)
    values = {}
    for key, raw, line in assignments:
        if key not in fields:
            raise ConfigError(f"unknown key {key!r}", line, source)
        f = fields[key]
        try:
            values[f.name] = coerce(raw, hints[f.name], key)
        except ConfigError as exc:
            raise ConfigError(str(exc), line, source) from None
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), source=source) from None


def load(cls, text, overrides=(), source=None):
    assignments = parse_lines(text, source)
    for item in overrides:
        key, value = parse_override(item)
        assignments.append((key, value, None))
    return build(cls, assignments, source)


def dump(obj):
    """Resolved config text; parsing it back yields an equal object."""
    lines = []
    for key, f in config_keys(type(obj)).items():
        lines.append(f"{key} = {format_value(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def to_dict(obj):
    return {key: getattr(obj, f.name) for key, f in config_keys(type(obj)).items()}
