"""Note-level F1 at three aggregation levels, recognition mAP/F1, and SDR.

Undefined cells are ``None`` and never count as zero in an average.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import DomainError

ONSET_TOLERANCE = 0.05
OFFSET_RATIO = 0.2
OFFSET_MIN_TOLERANCE = 0.05
SDR_CAP = 100.0
# guards the tolerance comparisons against float round-off in onset differences
_TOL_SLACK = 1e-9


@dataclass(frozen=True)
class Counts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __add__(self, other):
        return Counts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)

    @property
    def n_ref(self):
        return self.tp + self.fn

    @property
    def n_est(self):
        return self.tp + self.fp


def prf(counts):
    """Precision, recall and F1; ``None`` when both note lists are empty."""
    if counts.n_ref == 0 and counts.n_est == 0:
        return None
    p = counts.tp / counts.n_est if counts.n_est else 0.0
    r = counts.tp / counts.n_ref if counts.n_ref else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def f1(counts):
    scores = prf(counts)
    return None if scores is None else scores[2]


def admissible(ref, est, onset_tol=ONSET_TOLERANCE, with_offset=False,
               offset_ratio=OFFSET_RATIO, offset_min_tol=OFFSET_MIN_TOLERANCE):
    """Boolean ``(len(ref), len(est))`` matrix of pairs allowed to match."""
    if onset_tol <= 0 or offset_min_tol <= 0:
        raise DomainError("tolerances must be positive")
    if not ref or not est:
        return np.zeros((len(ref), len(est)), dtype=bool)
    r = np.array([(n.pitch, n.onset_s, n.offset_s) for n in ref], dtype=np.float64)
    e = np.array([(n.pitch, n.onset_s, n.offset_s) for n in est], dtype=np.float64)
    ok = r[:, None, 0] == e[None, :, 0]
    ok &= np.abs(r[:, None, 1] - e[None, :, 1]) <= onset_tol + _TOL_SLACK
    if with_offset:
        tol = np.maximum(offset_min_tol, offset_ratio * (r[:, 2] - r[:, 1]))
        ok &= np.abs(r[:, None, 2] - e[None, :, 2]) <= tol[:, None] + _TOL_SLACK
    return ok


def match_notes(ref, est, onset_tol=ONSET_TOLERANCE, with_offset=False, **kw):
    """Maximum-cardinality matching; returns ``(pairs, Counts)``.

    ``pairs`` is a list of ``(ref index, est index)``.
    """
    ref, est = list(ref), list(est)
    pairs = kernels.max_matching(admissible(ref, est, onset_tol, with_offset, **kw))
    tp = len(pairs)
    return [tuple(p) for p in pairs.tolist()], Counts(tp, len(est) - tp, len(ref) - tp)


# ---------------------------------------------------------------------------
# corpus-level aggregation

LEVELS = ("flat", "piecewise", "instrumentwise")


def _mean(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def aggregate_f1(cells, level, excluded=frozenset(), excluded_pieces=frozenset()):
    """Aggregate ``{(piece, instrument): Counts}`` to one F1 score.

    ``excluded`` lists cells whose F1 is undefined by construction (a
    condition present in only one of reference/estimate) and
    ``excluded_pieces`` pieces whose piece-wise score is undefined for the
    same reason. Both still contribute to the flat score. Returns ``None``
    when nothing is defined.
    """
    if level not in LEVELS:
        raise DomainError(f"unknown aggregation level {level!r}")
    if not cells:
        return None
    if level == "flat":
        return f1(sum(cells.values(), Counts()))
    if level == "piecewise":
        per_piece = defaultdict(Counts)
        for (piece, _), c in cells.items():
            per_piece[piece] += c
        return _mean(f1(c) for piece, c in per_piece.items() if piece not in excluded_pieces)
    per_inst = defaultdict(list)
    for key, c in cells.items():
        if key not in excluded:
            per_inst[key[1]].append(f1(c))
    return _mean(_mean(scores) for scores in per_inst.values())


def per_instrument_f1(cells, excluded=frozenset()):
    per_inst = defaultdict(list)
    for key, c in cells.items():
        if key not in excluded:
            per_inst[key[1]].append(f1(c))
    return {inst: _mean(v) for inst, v in sorted(per_inst.items())}


# ---------------------------------------------------------------------------
# separation

def sdr(ref, est):
    """Plain energy-ratio SDR in dB, capped at +100; ``None`` for silent refs."""
    ref = np.asarray(ref, dtype=np.float64)
    est = np.asarray(est, dtype=np.float64)
    if ref.shape != est.shape:
        raise DomainError(f"reference {ref.shape} and estimate {est.shape} differ in length")
    signal = np.sum(ref ** 2)
    if signal == 0:
        return None
    noise = np.sum((ref - est) ** 2)
    if noise == 0:
        return SDR_CAP
    return float(min(SDR_CAP, 10 * np.log10(signal / noise)))


SDR_LEVELS = ("instrument", "piece", "source")


def aggregate_sdr(cells, level):
    """Aggregate ``{(piece, instrument): dB or None}``."""
    if level not in SDR_LEVELS:
        raise DomainError(f"unknown SDR level {level!r}")
    cells = {k: v for k, v in cells.items() if v is not None}
    if not cells:
        return None
    if level == "source":
        return float(np.mean(list(cells.values())))
    axis = 1 if level == "instrument" else 0
    groups = defaultdict(list)
    for key, v in cells.items():
        groups[key[axis]].append(v)
    return float(np.mean([np.mean(v) for v in groups.values()]))


# ---------------------------------------------------------------------------
# recognition

def average_precision(scores, labels):
    """Mean of precision@k over the ranks k of positive items."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if not labels.any():
        return None
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    ranks = np.flatnonzero(hits) + 1
    return float(np.mean(np.arange(1, len(ranks) + 1) / ranks))


def map_scores(probs, labels, threshold=0.5):
    """Macro/weighted mAP and F1 over classes with at least one positive.

    ``probs`` and ``labels`` are ``(n_items, n_classes)``.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.shape != labels.shape or probs.ndim != 2:
        raise DomainError(f"probabilities {probs.shape} vs labels {labels.shape}")
    if not np.all((labels == 0) | (labels == 1)):
        raise DomainError("labels must be multi-hot")
    aps, f1s, support = [], [], []
    for k in range(labels.shape[1]):
        pos = int(labels[:, k].sum())
        if pos == 0:
            continue
        aps.append(average_precision(probs[:, k], labels[:, k]))
        pred = probs[:, k] >= threshold
        tp = int(np.sum(pred & (labels[:, k] == 1)))
        fp = int(np.sum(pred & (labels[:, k] == 0)))
        f1s.append(f1(Counts(tp, fp, pos - tp)))
        support.append(pos)
    if not aps:
        return dict(macro_map=None, weighted_map=None, macro_f1=None, weighted_f1=None)
    w = np.asarray(support, dtype=np.float64)
    return dict(macro_map=float(np.mean(aps)), weighted_map=float(np.average(aps, weights=w)),
                macro_f1=float(np.mean(f1s)), weighted_f1=float(np.average(f1s, weights=w)))


# ---------------------------------------------------------------------------
# report

@dataclass
class MetricReport:
    flat_f1: dict = field(default_factory=dict)            # {"N": x, "N&O": y}
    piecewise_f1: dict = field(default_factory=dict)
    instrumentwise_f1: dict = field(default_factory=dict)
    per_instrument: dict = field(default_factory=dict)     # {"N": {inst: f1}, ...}
    sdr: dict = field(default_factory=dict)                # {"instrument": x, ...}
    recognition: dict = field(default_factory=dict)
    settings: dict = field(default_factory=dict)

    def rows(self):
        """Flat ``(section, key, value)`` rows; ``None`` means an undefined value.

        Sections that were not computed (no transcriber, no stems, no
        recognizer) are left out entirely.
        """
        from .taxonomy import instrument_slug
        out = [("settings", k, v) for k, v in self.settings.items()]
        for section, table in (("flat_f1", self.flat_f1), ("piecewise_f1", self.piecewise_f1),
                               ("instrumentwise_f1", self.instrumentwise_f1)):
            if table:
                out += [(section, mode, table.get(mode)) for mode in ("N", "N&O")]
        for mode, table in self.per_instrument.items():
            for inst, v in table.items():
                out.append((f"per_instrument_f1.{mode}", instrument_slug(inst), v))
        if self.sdr:
            out += [("sdr", level, self.sdr.get(level)) for level in SDR_LEVELS]
        if self.recognition:
            out += [("recognition", key, self.recognition.get(key))
                    for key in ("macro_map", "weighted_map", "macro_f1", "weighted_f1")]
        return out

    @staticmethod
    def _fmt(v):
        if v is None:
            return "absent"
        if isinstance(v, float):
            return f"{v:.6f}"
        return str(v)

    def to_text(self):
        lines, current = [], None
        for section, key, value in self.rows():
            if section != current:
                if current is not None:
                    lines.append("")
                lines.append(f"[{section}]")
                current = section
            lines.append(f"{key} = {self._fmt(value)}")
        return "\n".join(lines) + "\n"

    def to_table(self):
        lines = ["section\tkey\tvalue"]
        lines += [f"{s}\t{k}\t{self._fmt(v)}" for s, k, v in self.rows()]
        return "\n".join(lines) + "\n"

    def write(self, stem):
        """Write ``<stem>.txt`` and ``<stem>.tsv``."""
        from pathlib import Path
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        Path(f"{stem}.txt").write_text(self.to_text())
        Path(f"{stem}.tsv").write_text(self.to_table())

    def summary(self):
        """Table-shaped text: transcription F1, SDR, recognition."""
        f = self._fmt
        out = ["             Flat F1          Piece. F1        Inst. F1",
               "             N       N&O      N       N&O      N       N&O"]
        cells = []
        for table in (self.flat_f1, self.piecewise_f1, self.instrumentwise_f1):
            cells += [table.get("N"), table.get("N&O")]
        out.append("F1           " + " ".join(f"{_pct(v):>8}" for v in cells))
        if self.sdr:
            out.append("SDR (dB)     instrument " + f(self.sdr.get("instrument"))
                       + "  piece " + f(self.sdr.get("piece"))
                       + "  source " + f(self.sdr.get("source")))
        if self.recognition:
            out.append("Recognition  " + "  ".join(f"{k} {f(v)}" for k, v in self.recognition.items()))
        return "\n".join(out)


def _pct(v):
    return "N.A." if v is None else f"{100 * v:.1f}"


def evaluate_transcription(ref_by_piece, est_by_piece, onset_tol=ONSET_TOLERANCE, **kw):
    """Score ``{piece: {inst: notes}}`` estimates against references.

    A (piece, instrument) cell whose instrument appears on only one side is
    a false-positive/negative condition: it counts in the flat score but is
    undefined for the instrument-wise score, and makes its piece undefined
    for the piece-wise score.
    """
    report = MetricReport(settings=dict(onset_tolerance_s=onset_tol,
                                        offset_ratio=kw.get("offset_ratio", OFFSET_RATIO),
                                        offset_min_tolerance_s=kw.get("offset_min_tol",
                                                                      OFFSET_MIN_TOLERANCE)))
    for mode, with_offset in (("N", False), ("N&O", True)):
        cells, excluded, bad_pieces = {}, set(), set()
        for piece in sorted(set(ref_by_piece) | set(est_by_piece)):
            ref = ref_by_piece.get(piece, {})
            est = est_by_piece.get(piece, {})
            for inst in sorted(set(ref) | set(est)):
                _, counts = match_notes(ref.get(inst, []), est.get(inst, []), onset_tol,
                                        with_offset, **kw)
                cells[piece, inst] = counts
                if (inst in ref) != (inst in est):
                    excluded.add((piece, inst))
                    bad_pieces.add(piece)
        report.flat_f1[mode] = aggregate_f1(cells, "flat")
        report.piecewise_f1[mode] = aggregate_f1(cells, "piecewise", excluded, bad_pieces)
        report.instrumentwise_f1[mode] = aggregate_f1(cells, "instrumentwise", excluded)
        report.per_instrument[mode] = per_instrument_f1(cells, excluded)
    return report
