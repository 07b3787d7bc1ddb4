"""MIDI program to instrument-class mapping.

The 129 program slots (0-127 plus 128 for drums) collapse onto 39
instrument classes. The table lives in ``data/midi_map.tsv`` so it can be
diffed against its source by eye.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .errors import DomainError

N_PROGRAMS = 129
N_CLASSES = 39
DRUM_PROGRAM = 128
DRUMS = 38


@dataclass(frozen=True)
class MapRow:
    program_lo: int
    program_hi: int
    name: str
    index: int
    unpitched: bool


def _read_table():
    text = resources.files(__package__).joinpath("data/midi_map.tsv").read_text()
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    rows = []
    for rec in csv.reader(lines, delimiter="\t"):
        lo, hi, name, index, unpitched = rec
        rows.append(MapRow(int(lo), int(hi), name, int(index), unpitched == "1"))
    return tuple(rows)


ROWS = _read_table()

_PROGRAM_TO_INDEX = np.full(N_PROGRAMS, -1, dtype=np.int64)
_NAMES = [None] * N_CLASSES
_UNPITCHED = np.zeros(N_CLASSES, dtype=bool)
_FIRST_PROGRAM = [None] * N_CLASSES
for _row in ROWS:
    _PROGRAM_TO_INDEX[_row.program_lo:_row.program_hi + 1] = _row.index
    if _NAMES[_row.index] not in (None, _row.name):
        raise RuntimeError(f"conflicting names for class {_row.index}")
    _NAMES[_row.index] = _row.name
    _UNPITCHED[_row.index] = _row.unpitched
    if _FIRST_PROGRAM[_row.index] is None:
        _FIRST_PROGRAM[_row.index] = _row.program_lo
assert (_PROGRAM_TO_INDEX >= 0).all() and None not in _NAMES
NAMES = tuple(_NAMES)


def _check_index(index):
    if not 0 <= int(index) < N_CLASSES:
        raise DomainError(f"instrument index {index} outside [0, {N_CLASSES - 1}]")
    return int(index)


def map_program(program):
    """Return the instrument class for a MIDI program (128 means drums)."""
    if not 0 <= int(program) < N_PROGRAMS:
        raise DomainError(f"program {program} outside [0, {DRUM_PROGRAM}]")
    return int(_PROGRAM_TO_INDEX[int(program)])


def instrument_name(index):
    return NAMES[_check_index(index)]


def instrument_slug(index):
    """Filesystem-friendly name, e.g. ``"chr_percussion"``."""
    name = instrument_name(index).lower().replace(".", "")
    return "_".join(name.split())


def index_from_slug(slug):
    for i in range(N_CLASSES):
        if instrument_slug(i) == slug:
            return i
    raise DomainError(f"unknown instrument name {slug!r}")


def is_unpitched(index):
    return bool(_UNPITCHED[_check_index(index)])


def representative_program(index):
    """Lowest program mapping to ``index``; used when writing MIDI."""
    return _FIRST_PROGRAM[_check_index(index)]


def condition_vector(indices):
    """39-dim float32 indicator with ones at ``indices``."""
    vec = np.zeros(N_CLASSES, dtype=np.float32)
    for i in indices:
        vec[_check_index(i)] = 1.0
    return vec


def indices_from_vector(vec, threshold=0.5):
    vec = np.asarray(vec)
    if vec.shape != (N_CLASSES,):
        raise DomainError(f"expected a {N_CLASSES}-dim vector, got {vec.shape}")
    return {int(i) for i in np.flatnonzero(vec >= threshold)}
