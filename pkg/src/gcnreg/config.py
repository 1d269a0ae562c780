"""Flat ``key = value`` config text with one section per module.

Files override dataclass defaults and command-line flags override files.  The
same text is embedded in checkpoints as the config snapshot.
"""

import configparser
import dataclasses

from .errors import ContractError, ParseError


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    return str(value)


def _coerce(raw, default, key):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("true", "yes", "1", "on"):
                return True
            if raw.lower() in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.split(",") if x.strip())
    except ValueError:
        raise ContractError(f"bad value for {key}: {raw!r}") from None
    return raw


def update(obj, values, section=""):
    """Return a copy of dataclass ``obj`` with string ``values`` coerced in."""
    names = {f.name for f in dataclasses.fields(obj)}
    changes = {}
    for key, raw in values.items():
        if key not in names:
            raise ContractError(f"unknown key {section + '.' if section else ''}{key}")
        default = getattr(obj, key)
        if dataclasses.is_dataclass(default):
            raise ContractError(f"{key} is a section, not a value")
        changes[key] = raw if not isinstance(raw, str) else _coerce(raw, default, key)
    return dataclasses.replace(obj, **changes)


def to_text(sections):
    """Render ``{section: dataclass}`` as config text."""
    parser = configparser.ConfigParser(interpolation=None)
    for name, obj in sections.items():
        parser[name] = {
            f.name: _format_value(getattr(obj, f.name))
            for f in dataclasses.fields(obj)
            if not dataclasses.is_dataclass(getattr(obj, f.name))
        }
    lines = []
    for name in parser.sections():
        lines.append(f"[{name}]")
        lines.extend(f"{k} = {v}" for k, v in parser[name].items())
        lines.append("")
    return "\n".join(lines)


def parse_text(text):
    """``{section: {key: raw string}}``."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ParseError(str(exc).splitlines()[0], getattr(exc, "lineno", None)) from None
    return {name: dict(parser[name]) for name in parser.sections()}


def apply(sections, parsed):
    """Apply parsed text onto ``{section: dataclass}``; unknown sections are errors."""
    out = dict(sections)
    for name, values in parsed.items():
        if name not in out:
            raise ContractError(f"unknown config section [{name}]")
        out[name] = update(out[name], values, name)
    return out
