"""Deterministic toy multi-instrument corpus.

Each piece draws a few instruments from a pool, writes note sequences on a
0.125 s grid (quantised to 10 ms), and renders every stem with additive
synthesis and an ADSR envelope. Drums are filtered noise bursts.
"""

from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from . import dsp, symbolic, taxonomy
from .errors import DomainError
from .symbolic import NoteEvent

DEFAULT_POOL = (0, 8, 10, 19, 29, 38)
GRID_S = 0.125
REST_S = 0.25                          # notes stay this far from both ends of a piece
MANIFEST = "manifest.tsv"
SPLITS = ("train", "validation", "test")


@dataclass(frozen=True)
class Timbre:
    partials: tuple          # relative amplitude of harmonics 1..n
    attack: float
    decay: float
    sustain: float           # level after decay, relative to peak
    release: float
    pitch_range: tuple       # inclusive MIDI range
    polyphonic: bool = False
    gain: float = 0.25


TIMBRES = {
    0: Timbre((1.0, 0.5, 0.33, 0.25, 0.2, 0.16, 0.14, 0.12), 0.005, 0.6, 0.25, 0.08,
              (48, 84), polyphonic=True, gain=0.2),
    8: Timbre((1.0, 0.7, 0.45, 0.3, 0.2, 0.1), 0.003, 0.25, 0.1, 0.05,
              (40, 76), polyphonic=True, gain=0.2),
    10: Timbre((1.0, 0.25, 0.08), 0.01, 0.2, 0.7, 0.05, (28, 50), gain=0.35),
    19: Timbre((0.4, 0.7, 1.0, 0.9, 0.75, 0.6, 0.45, 0.3), 0.03, 0.1, 0.8, 0.06,
               (55, 82), gain=0.2),
    29: Timbre((1.0, 0.08, 0.03), 0.04, 0.1, 0.9, 0.08, (60, 96), gain=0.3),
}
# drum kit: MIDI key -> (lowpass cutoff Hz, decay seconds, pitched thump Hz)
DRUM_KIT = {36: (150.0, 0.12, 60.0), 38: (3000.0, 0.08, 0.0), 42: (8000.0, 0.03, 0.0)}


def timbre_for(index):
    """Timbre for ``index``; classes without a hand-made recipe get a derived one."""
    if index in TIMBRES:
        return TIMBRES[index]
    rolloff = 0.6 + 0.25 * (index % 7)
    odd_only = index % 3 == 0
    partials = tuple(0.0 if odd_only and k % 2 == 0 else k ** -rolloff for k in range(1, 9))
    low = 36 + 3 * (index % 8)
    return Timbre(partials, 0.005 + 0.005 * (index % 4), 0.15 + 0.05 * (index % 5),
                  0.3 + 0.1 * (index % 6), 0.05, (low, low + 30))


@dataclass
class ToyPiece:
    mix: np.ndarray
    stems: dict
    notes: dict
    labels: np.ndarray
    seed: int
    duration_s: float
    piece_id: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def instruments(self):
        return sorted(self.notes)

    def roll(self, instrument):
        return symbolic.render_rolls(self.notes.get(instrument, []), self.duration_s, instrument)


def _frames(seconds):
    return int(round(seconds * symbolic.FRAMES_PER_SECOND))


def _pitched_notes(rng, inst, timbre, n_frames, first_step=0):
    notes = []
    lo, hi = timbre.pitch_range
    pitch = int(rng.integers(lo, hi + 1))
    n_steps = int(n_frames / (GRID_S * symbolic.FRAMES_PER_SECOND))
    step = first_step + int(rng.integers(0, 3))
    while step < n_steps:
        length = int(rng.integers(1, 5))
        on = _frames(step * GRID_S)
        off = min(_frames((step + length) * GRID_S) - 3, n_frames)
        if off - on >= 2:
            pitch = int(np.clip(pitch + rng.integers(-5, 6), lo, hi))
            voices = [pitch]
            if timbre.polyphonic and rng.random() < 0.4:
                second = pitch + int(rng.choice([4, 7]))
                if second <= hi:
                    voices.append(second)
            for p in voices:
                notes.append(NoteEvent(p, on / 100, off / 100, inst))
        step += length + int(rng.integers(0, 3))
    return notes


def _drum_notes(rng, n_frames, first_step=0):
    notes = []
    n_steps = int(n_frames / (GRID_S * symbolic.FRAMES_PER_SECOND))
    for step in range(first_step, n_steps):
        on = _frames(step * GRID_S)
        if on + 1 > n_frames:
            break
        pattern = [(36, 0.7 if step % 4 == 0 else 0.1), (38, 0.7 if step % 4 == 2 else 0.05),
                   (42, 0.6 if step % 2 == 0 else 0.15)]
        for key, prob in pattern:
            if rng.random() < prob:
                notes.append(NoteEvent(key, on / 100, (on + 1) / 100, taxonomy.DRUMS))
    return notes


def _envelope(n_on, n_total, timbre, sr):
    t = np.arange(n_total) / sr
    a = max(timbre.attack, 1.0 / sr)
    env = np.where(t < a, t / a,
                   timbre.sustain + (1 - timbre.sustain) * np.exp(-(t - a) / timbre.decay))
    if n_total > n_on:
        level = env[n_on - 1] if n_on > 0 else 0.0
        tail = np.arange(n_total - n_on) / sr
        env[n_on:] = level * np.exp(-tail / (timbre.release / 4))
    return env


def render_pitched(notes, timbre, n_samples, rng, sr=dsp.SAMPLE_RATE):
    out = np.zeros(n_samples)
    for note in notes:
        start = int(round(note.onset_s * sr))
        n_on = int(round(note.offset_s * sr)) - start
        n_total = min(n_on + int(timbre.release * sr), n_samples - start)
        n_on = min(n_on, n_total)
        t = np.arange(n_total) / sr
        f0 = 440.0 * 2.0 ** ((note.pitch - 69) / 12)
        wave = np.zeros(n_total)
        for k, amp in enumerate(timbre.partials, start=1):
            if amp and k * f0 < sr / 2:
                wave += amp * np.sin(2 * np.pi * k * f0 * t + rng.uniform(0, 2 * np.pi))
        out[start:start + n_total] += timbre.gain * wave * _envelope(n_on, n_total, timbre, sr)
    return out


def _one_pole_lowpass(x, cutoff, sr):
    alpha = 1.0 - np.exp(-2 * np.pi * cutoff / sr)
    return lfilter([alpha], [1.0, alpha - 1.0], x)


def render_drums(notes, n_samples, rng, sr=dsp.SAMPLE_RATE):
    out = np.zeros(n_samples)
    for note in notes:
        cutoff, decay, thump = DRUM_KIT.get(note.pitch, (2000.0, 0.06, 0.0))
        start = int(round(note.onset_s * sr))
        n = min(int(5 * decay * sr), n_samples - start)
        t = np.arange(n) / sr
        noise = rng.standard_normal(n)
        if cutoff < 4000:
            burst = _one_pole_lowpass(noise, cutoff, sr)
        else:
            burst = noise - _one_pole_lowpass(noise, cutoff / 4, sr)
        burst /= np.max(np.abs(burst)) + 1e-12
        if thump:
            burst = 0.3 * burst + np.sin(2 * np.pi * thump * t * (1 + 2 * np.exp(-t / 0.02)))
        out[start:start + n] += 0.3 * burst * np.exp(-t / decay)
    return out


def generate_piece(seed, duration_s=10.0, instrument_pool=DEFAULT_POOL, k_range=(2, 4),
                   rest_s=REST_S):
    """Build one :class:`ToyPiece`; identical seeds give identical pieces.

    Notes lie between ``rest_s`` (rounded down to the note grid) and
    ``duration_s - rest_s``, so every piece opens in silence and ends with
    decaying tails followed by near silence.
    """
    pool = sorted(set(int(i) for i in instrument_pool))
    if not pool:
        raise DomainError("instrument pool is empty")
    for i in pool:
        taxonomy.instrument_name(i)
    n_frames = symbolic._n_frames(duration_s)
    k_lo, k_hi = k_range
    if not 1 <= k_lo <= k_hi:
        raise DomainError(f"invalid k_range {k_range}")
    if not 0 <= 2 * rest_s < duration_s:
        raise DomainError(f"rest_s must be >= 0 and leave room for notes, got {rest_s}")
    first_step = int(rest_s / GRID_S + 1e-9)
    note_frames = n_frames - _frames(first_step * GRID_S)
    rng = np.random.default_rng(seed)
    k = int(rng.integers(k_lo, min(k_hi, len(pool)) + 1)) if k_lo <= len(pool) else len(pool)
    chosen = sorted(int(i) for i in rng.choice(pool, size=k, replace=False))
    n_samples = n_frames * dsp.HOP
    notes, stems = {}, {}
    for inst in chosen:
        inst_rng = np.random.default_rng([seed, inst])
        if taxonomy.is_unpitched(inst):
            inst_notes = _drum_notes(inst_rng, note_frames, first_step)
            if not inst_notes:
                start = _frames(first_step * GRID_S) / 100
                inst_notes = [NoteEvent(36, start, start + 0.01, inst)]
            wave = render_drums(inst_notes, n_samples, inst_rng)
        else:
            timbre = timbre_for(inst)
            inst_notes = _pitched_notes(inst_rng, inst, timbre, note_frames, first_step)
            if not inst_notes:
                mid = (timbre.pitch_range[0] + timbre.pitch_range[1]) // 2
                start = _frames(first_step * GRID_S) / 100
                inst_notes = [NoteEvent(mid, start, min(start + 0.5, note_frames / 100), inst)]
            wave = render_pitched(inst_notes, timbre, n_samples, inst_rng)
        notes[inst] = sorted(inst_notes)
        stems[inst] = wave.astype(np.float32)
    mix = np.sum([stems[i] for i in chosen], axis=0, dtype=np.float32)
    labels = taxonomy.condition_vector(chosen)
    return ToyPiece(mix, stems, notes, labels, int(seed), float(duration_s))


def spectral_centroid(samples, sr=dsp.SAMPLE_RATE):
    spec = np.abs(np.fft.rfft(samples))
    freqs = np.fft.rfftfreq(len(samples), 1.0 / sr)
    return float((spec * freqs).sum() / (spec.sum() + 1e-12))


# ---------------------------------------------------------------------------
# corpus on disk

def split_counts(n, ratios):
    """Largest-remainder apportionment of ``n`` items to ``ratios``."""
    ratios = np.asarray(ratios, dtype=np.float64)
    if len(ratios) != 3 or np.any(ratios < 0) or abs(ratios.sum() - 1.0) > 1e-9:
        raise DomainError(f"split ratios must be three non-negative numbers summing to 1, got {tuple(ratios)}")
    exact = ratios * n
    counts = np.floor(exact).astype(int)
    for i in np.argsort(-(exact - counts), kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


def write_piece(piece, directory):
    directory = Path(directory)
    (directory / "stems").mkdir(parents=True, exist_ok=True)
    dsp.write_wav(directory / "mix.wav", piece.mix)
    for inst, wave in piece.stems.items():
        dsp.write_wav(directory / "stems" / f"{taxonomy.instrument_slug(inst)}.wav", wave)
    symbolic.save_midi(piece.notes, directory / "notes.mid")


def _build(args):
    seed, duration, pool, k_range, directory = args
    write_piece(generate_piece(seed, duration, pool, k_range), directory)


def generate_corpus(out_dir, seed, n_pieces, split_ratios=(0.8, 0.1, 0.1),
                    duration_range=(10, 30), instrument_pool=DEFAULT_POOL, k_range=(2, 4),
                    jobs=1):
    """Write ``n_pieces`` pieces plus ``manifest.tsv`` under ``out_dir``.

    Returns the manifest rows as dicts. Durations are whole seconds drawn
    uniformly from ``duration_range``.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out}: {exc.strerror or exc}") from exc
    counts = split_counts(n_pieces, split_ratios)
    rng = np.random.default_rng(seed)
    order = rng.permutation(n_pieces)
    split_of = np.empty(n_pieces, dtype=object)
    split_of[order] = sum(([name] * c for name, c in zip(SPLITS, counts)), [])
    lo, hi = duration_range
    durations = rng.integers(int(lo), int(hi) + 1, size=n_pieces)
    seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n_pieces)]
    rows, tasks = [], []
    for i in range(n_pieces):
        piece_id = f"piece_{i:04d}"
        rows.append(dict(piece_id=piece_id, split=split_of[i], seed=seeds[i],
                         duration_s=float(durations[i]), path=piece_id))
        tasks.append((seeds[i], float(durations[i]), tuple(instrument_pool), tuple(k_range),
                      out / piece_id))
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            list(pool.map(_build, tasks))
    else:
        for task in tasks:
            _build(task)
    with open(out / MANIFEST, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else
                                ["piece_id", "split", "seed", "duration_s", "path"],
                                delimiter="\t", lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return rows


def load_manifest(path):
    """Manifest rows; ``path`` may be the corpus directory or the file."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh, delimiter="\t"))
    for row in rows:
        row["seed"] = int(row["seed"])
        row["duration_s"] = float(row["duration_s"])
        row["path"] = str(path.parent / row["path"])
    return rows


def load_piece(row):
    """Read a manifest row back into a :class:`ToyPiece`."""
    directory = Path(row["path"])
    mix = dsp.read_wav(directory / "mix.wav")
    notes = symbolic.load_midi(directory / "notes.mid")
    stems = {inst: dsp.read_wav(directory / "stems" / f"{taxonomy.instrument_slug(inst)}.wav")
             for inst in notes}
    return ToyPiece(mix, stems, notes, taxonomy.condition_vector(notes), row["seed"],
                    row["duration_s"], row["piece_id"])
