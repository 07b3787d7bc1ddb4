"""INI-style configuration: ``key = value`` lines in per-module sections.

Sections: ``[train]``, ``[scheme]``, ``[recognizer]``, ``[transcriber]``,
``[separator]``. Values are Python literals (numbers, lists, booleans);
anything that does not parse as a literal is kept as a string.
"""

from __future__ import annotations

import ast
import configparser
import os
from dataclasses import fields

from .errors import DomainError

ENV_VAR = "JOINTIST_CONFIG"
SECTIONS = ("train", "scheme", "recognizer", "transcriber", "separator")


def _value(text):
    lowered = text.strip().lower()
    if lowered in ("true", "yes", "on"):
        return True
    if lowered in ("false", "no", "off"):
        return False
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text.strip()


def read_config(path=None):
    """``{section: {key: value}}``; falls back to ``$JOINTIST_CONFIG``."""
    path = path or os.environ.get(ENV_VAR)
    if not path:
        return {s: {} for s in SECTIONS}
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise OSError(f"cannot read config file {path}")
    unknown = set(parser.sections()) - set(SECTIONS)
    if unknown:
        raise DomainError(f"unknown config sections: {sorted(unknown)}")
    return {s: {k: _value(v) for k, v in parser[s].items()} if parser.has_section(s) else {}
            for s in SECTIONS}


def build(cls, values, **overrides):
    """Instantiate dataclass ``cls`` from config ``values`` and overrides."""
    names = {f.name for f in fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise DomainError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    merged = dict(values)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return cls(**merged)
