"""Shared generators for tests."""

import numpy as np

from jointist.symbolic import NoteEvent


def random_note_list(rng, n_frames=500, n_notes=20, instrument=0, min_gap=2, pitches=None):
    """Notes on the 10 ms grid with >= ``min_gap`` frames between same-pitch notes."""
    pitches = pitches if pitches is not None else range(21, 109)
    pitches = list(pitches)
    busy_until = {}
    notes = []
    for _ in range(n_notes):
        pitch = int(rng.choice(pitches))
        earliest = max(0, busy_until.get(pitch, -min_gap) + min_gap)
        if earliest >= n_frames - 1:
            continue
        on = int(rng.integers(earliest, min(earliest + 60, n_frames - 1)))
        off = int(rng.integers(on + 1, min(on + 80, n_frames) + 1))
        busy_until[pitch] = off
        notes.append(NoteEvent(pitch, on / 100, off / 100, instrument))
    return sorted(notes)
