"""Training loops for every scheme in the grid, plus corpus evaluation.

Scheme ids:

``T`` / ``iT``
    transcriber only (``i`` evaluates with recognizer-predicted conditions)
``TS``
    transcriber and separator jointly from scratch
``pTS`` / ``ipTS``
    pretrained transcriber, then joint training
``S_only``
    separator fed an all-zero roll
``GT_upper_bound``
    separator fed ground-truth rolls

The recognizer is always trained on its own.
"""

from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import dsp, metrics, recognizer, separator, symbolic, synthdata, transcriber
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import DomainError
from .taxonomy import N_CLASSES, condition_vector

log = logging.getLogger(__name__)

class StopTraining(Exception):
    """Raised by a training callback to end the run early, keeping the weights."""


SCHEME_IDS = ("T", "iT", "TS", "pTS", "ipTS", "S_only", "GT_upper_bound")
_FUSION_TAG = {"sum": "s", "concat": "c", "spec_patch": "p"}


@dataclass
class TrainScheme:
    id: str = "T"
    fusion_mode: str = "sum"
    roll_form: str = "posterior"
    ste: bool = False
    pretrain_epochs: int | None = None
    joint_epochs: int | None = None

    def __post_init__(self):
        if self.id not in SCHEME_IDS:
            raise DomainError(f"unknown scheme {self.id!r}; expected one of {SCHEME_IDS}")
        # validates fusion/roll/ste combination
        separator.SeparatorConfig(fusion_mode=self.fusion_mode, roll_form=self.roll_form,
                                  ste=self.ste)

    @property
    def use_ir(self):
        return self.id in ("iT", "ipTS")

    @property
    def pretrained(self):
        return self.id in ("pTS", "ipTS")

    @property
    def trains_transcriber(self):
        return self.id in ("T", "iT", "TS", "pTS", "ipTS")

    @property
    def trains_separator(self):
        return self.id in ("TS", "pTS", "ipTS", "S_only", "GT_upper_bound")

    @property
    def roll_source(self):
        """Where the separator's roll comes from."""
        if not self.trains_separator:
            return None
        return {"S_only": "zeros", "GT_upper_bound": "ground_truth"}.get(self.id, "transcriber")

    @property
    def label(self):
        name = self.id
        if self.trains_separator and self.roll_source == "transcriber":
            name += f"({_FUSION_TAG[self.fusion_mode]})"
        if self.ste:
            name += " STE"
        elif self.roll_form == "binary":
            name += " bin"
        return name

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainConfig:
    lr_ir: float = 1e-3
    lr_t: float = 1e-3
    lr_mss: float = 1e-4
    batch_size: int = 6
    crop_s: float = 10.0
    epochs: int = 10
    seed: int = 0
    all_conditions: bool = False
    max_steps: int | None = None
    window_s: float = 10.0
    onset_threshold: float = 0.5
    frame_threshold: float = 0.5
    log_path: str | None = None

    def __post_init__(self):
        samples = self.crop_s * dsp.SAMPLE_RATE
        if abs(samples - round(samples)) > 1e-6 or round(samples) % dsp.HOP or samples <= 0:
            raise DomainError(f"crop_s={self.crop_s} is not a whole number of {dsp.HOP}-sample hops")
        if self.batch_size < 1 or self.epochs < 0:
            raise DomainError("batch_size must be >= 1 and epochs >= 0")

    @property
    def crop_frames(self):
        return int(round(self.crop_s * symbolic.FRAMES_PER_SECOND))

    @property
    def window_frames(self):
        return int(round(self.window_s * symbolic.FRAMES_PER_SECOND))


# ---------------------------------------------------------------------------
# data

@dataclass
class Prepared:
    piece: synthdata.ToyPiece
    mel: np.ndarray
    onset: dict = field(default_factory=dict)
    frame: dict = field(default_factory=dict)

    @property
    def n_frames(self):
        return self.mel.shape[0]


def load_corpus(corpus, split=None):
    """Pieces from a manifest path/directory, or a list of pieces as-is."""
    if isinstance(corpus, (str, Path)):
        rows = synthdata.load_manifest(corpus)
        if split is not None:
            rows = [r for r in rows if r["split"] == split]
        pieces = []
        for row in rows:
            piece = synthdata.load_piece(row)
            piece.extra["split"] = row["split"]
            pieces.append(piece)
        return pieces
    pieces = list(corpus)
    if split is not None and any("split" in p.extra for p in pieces):
        pieces = [p for p in pieces if p.extra.get("split") == split]
    return pieces


def prepare(pieces):
    out = []
    for piece in pieces:
        mel = dsp.logmel(dsp.hop_align(piece.mix)).astype(np.float32)
        prep = Prepared(piece, mel)
        for inst in piece.instruments:
            roll = piece.roll(inst)
            if roll.n_frames != prep.n_frames:
                raise DomainError(f"piece {piece.piece_id}: roll/feature frame mismatch")
            prep.onset[inst], prep.frame[inst] = roll.onset, roll.frame
        out.append(prep)
    return out


class Batcher:
    """Random (piece, instrument, crop) batches, reproducible from a seed.

    By default an epoch visits every piece once with one uniformly chosen
    instrument; with ``all_conditions`` it visits every (piece, instrument)
    pair once.
    """

    def __init__(self, prepared, cfg, rng):
        if not prepared:
            raise DomainError("empty corpus")
        self.prepared = prepared
        self.cfg = cfg
        self.rng = rng
        self.crop = min(cfg.crop_frames, min(p.n_frames for p in prepared))

    def epoch(self):
        if self.cfg.all_conditions:
            items = [(k, inst) for k, p in enumerate(self.prepared) for inst in p.piece.instruments]
        else:
            items = [(k, None) for k in range(len(self.prepared))]
        order = self.rng.permutation(len(items))
        for i in range(0, len(order), self.cfg.batch_size):
            yield self._batch([items[j] for j in order[i:i + self.cfg.batch_size]])

    def _batch(self, items):
        rows = []
        for k, inst in items:
            prep = self.prepared[k]
            if inst is None:
                insts = prep.piece.instruments
                inst = insts[self.rng.integers(len(insts))]
            start = int(self.rng.integers(0, prep.n_frames - self.crop + 1))
            rows.append((prep, inst, start))
        stop = lambda s: s + self.crop  # noqa: E731
        hop = dsp.HOP
        mel = np.stack([p.mel[s:stop(s)] for p, _, s in rows])
        onset = np.stack([p.onset[i][s:stop(s)] for p, i, s in rows])
        frame = np.stack([p.frame[i][s:stop(s)] for p, i, s in rows])
        mix = np.stack([p.piece.mix[s * hop:stop(s) * hop] for p, _, s in rows])
        stem = np.stack([p.piece.stems[i][s * hop:stop(s) * hop] for p, i, s in rows])
        cond = np.stack([condition_vector([i]) for _, i, _ in rows])
        labels = np.stack([_crop_labels(p, s, stop(s)) for p, _, s in _unique(rows)])
        t = torch.from_numpy
        return dict(mel=t(mel), onset=t(onset), frame=t(frame), mix=t(mix), stem=t(stem),
                    cond=t(cond), labels=t(labels),
                    rec_mel=t(np.stack([p.mel[s:stop(s)] for p, _, s in _unique(rows)])))


def _unique(rows):
    seen, out = set(), []
    for row in rows:
        if id(row[0]) not in seen:
            seen.add(id(row[0]))
            out.append(row)
    return out


def _crop_labels(prep, start, stop):
    active = [i for i in prep.piece.instruments if prep.frame[i][start:stop].any()]
    return condition_vector(active)


def _seed_everything(seed):
    torch.manual_seed(seed)
    return np.random.default_rng(seed)


def param_digest(module):
    """SHA-256 over all parameters and buffers, for change detection."""
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()


class RunLog:
    """Append-only text log (plus the ``logging`` module)."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def __call__(self, message):
        log.info(message)
        if self.path:
            with open(self.path, "a") as fh:
                fh.write(f"{time.strftime('%Y-%m-%dT%H:%M:%S')} {message}\n")


# ---------------------------------------------------------------------------
# recognizer

def train_recognizer(corpus, cfg=None, model_cfg=None, out=None, validation=None,
                     callback=None):
    """Adam on the recognition loss over random crops.

    Keeps the parameters with the best validation mAP (training mAP when no
    validation pieces exist), breaking ties by macro F1. ``callback(epoch, model, scores)`` runs after
    every epoch and may raise :class:`StopTraining`. Returns
    ``(model, history)``.
    """
    cfg = cfg or TrainConfig()
    rng = _seed_everything(cfg.seed)
    pieces = load_corpus(corpus, "train" if isinstance(corpus, (str, Path)) else None)
    if validation is None and isinstance(corpus, (str, Path)):
        validation = load_corpus(corpus, "validation")
    model = recognizer.Recognizer(model_cfg or recognizer.RecognizerConfig())
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr_ir)
    prepared = prepare(pieces)
    batcher = Batcher(prepared, cfg, rng)
    runlog = RunLog(cfg.log_path)
    val_prepared = prepare(validation) if validation else prepared
    history, best, best_state, step = [], None, None, 0
    for epoch in range(cfg.epochs):
        model.train()
        losses = []
        for batch in batcher.epoch():
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
            loss = recognizer.loss_ir(model(batch["rec_mel"][:, None]), batch["labels"])
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
            step += 1
        scores = recognition_scores(model, val_prepared, cfg.window_frames)
        history.append(dict(epoch=epoch, loss=float(np.mean(losses)) if losses else None,
                            **scores))
        runlog(f"recognizer epoch {epoch} loss {history[-1]['loss']} "
               f"mAP {scores['weighted_map']}")
        # mAP ties are common on small corpora; thresholded F1 breaks them
        score = tuple(-1.0 if scores.get(key) is None else scores[key]
                      for key in ("weighted_map", "macro_f1"))
        if best_state is None or score > best:
            best = score
            best_state = {k: v.clone() for k, v in model.state_dict().items()}
        if callback is not None:
            try:
                callback(epoch, model, scores)
            except StopTraining:
                break
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    if out:
        save_checkpoint(out, {"recognizer": model}, history=history)
    return model, history


def recognition_scores(model, prepared, window_frames=1000):
    probs = np.stack([recognizer.recognize_piece(model, p.mel, window_frames) for p in prepared])
    labels = np.stack([p.piece.labels for p in prepared])
    return metrics.map_scores(probs, labels)


# ---------------------------------------------------------------------------
# transcription + separation

def _separator_roll(scheme, batch, frame_post):
    source = scheme.roll_source
    if source == "zeros":
        return torch.zeros_like(batch["frame"])
    if source == "ground_truth":
        return batch["frame"]
    return frame_post


def _amt_stage(stage, scheme, cfg, batcher, models, opts, runlog, step0, callback, history):
    trans, sep = models.get("transcriber"), models.get("separator")
    train_t = scheme.trains_transcriber
    train_s = scheme.trains_separator and stage != "pretrain"
    epochs = _stage_epochs(stage, scheme, cfg)
    step = step0
    for epoch in range(epochs):
        for m in (trans, sep):
            if m is not None:
                m.train()
        sums = dict(loss=0.0, loss_t=0.0, loss_mss=0.0)
        n = 0
        for batch in batcher.epoch():
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
            if callback is not None:
                callback(stage, step, models)
                for m in (trans, sep):
                    if m is not None:
                        m.train()
            total = 0.0
            frame_post = None
            if train_t:
                onset, frame_post = trans(batch["mel"], batch["cond"])
                lt = transcriber.loss_t((onset, frame_post), (batch["onset"], batch["frame"]))
                total = total + lt
                sums["loss_t"] += lt.item()
            if train_s:
                roll = _separator_roll(scheme, batch, frame_post)
                wave, _ = sep(batch["mix"], batch["cond"], roll)
                ls = separator.loss_mss(wave, batch["stem"])
                total = total + ls
                sums["loss_mss"] += ls.item()
            for opt in opts.values():
                opt.zero_grad()
            total.backward()
            if train_t:
                opts["transcriber"].step()
            if train_s:
                opts["separator"].step()
            sums["loss"] += total.item()
            n += 1
            step += 1
        record = dict(stage=stage, epoch=epoch, steps=n,
                      **{k: (v / n if n else None) for k, v in sums.items()})
        history.append(record)
        runlog(f"{scheme.label} {stage} epoch {epoch} loss {record['loss']}")
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break
    return step


def _stage_epochs(stage, scheme, cfg):
    if stage == "pretrain":
        return scheme.pretrain_epochs if scheme.pretrain_epochs is not None else cfg.epochs // 2
    if scheme.joint_epochs is not None:
        return scheme.joint_epochs
    if scheme.pretrained:
        pre = scheme.pretrain_epochs if scheme.pretrain_epochs is not None else cfg.epochs // 2
        return max(cfg.epochs - pre, 0)
    return cfg.epochs


def train_amt(corpus, scheme=None, cfg=None, transcriber_cfg=None, separator_cfg=None,
              pretrained=None, out=None, callback=None, init=None):
    """Train the transcriber and/or separator per ``scheme``.

    ``pretrained`` (a checkpoint path or a :class:`Transcriber`) initialises
    the transcriber for ``pTS``/``ipTS``; without it a transcriber-only
    stage of ``pretrain_epochs`` runs first. ``init`` maps module names to
    starting modules; a module the scheme does not train is passed through
    unchanged. ``callback(stage, step, models)`` fires before every
    optimisation step. Returns ``(models, history)``.
    """
    scheme = scheme or TrainScheme()
    cfg = cfg or TrainConfig()
    init = dict(init or {})
    if pretrained is not None and not scheme.pretrained:
        raise DomainError(f"scheme {scheme.id} does not take a pretrained transcriber")
    rng = _seed_everything(cfg.seed)
    pieces = load_corpus(corpus, "train" if isinstance(corpus, (str, Path)) else None)
    batcher = Batcher(prepare(pieces), cfg, rng)
    runlog = RunLog(cfg.log_path)

    models, opts = {}, {}
    if scheme.trains_transcriber:
        models["transcriber"] = init.pop("transcriber", None) or transcriber.Transcriber(
            transcriber_cfg or transcriber.TranscriberConfig())
        opts["transcriber"] = torch.optim.Adam(models["transcriber"].parameters(), lr=cfg.lr_t)
    if scheme.trains_separator:
        sep = init.pop("separator", None)
        if sep is None:
            base = separator_cfg.to_dict() if separator_cfg else {}
            base.update(fusion_mode=scheme.fusion_mode, roll_form=scheme.roll_form,
                        ste=scheme.ste)
            sep = separator.Separator(separator.SeparatorConfig(**base))
        elif (sep.cfg.fusion_mode, sep.cfg.roll_form, sep.cfg.ste) != (
                scheme.fusion_mode, scheme.roll_form, scheme.ste):
            raise DomainError(f"initial separator does not match scheme {scheme.label}")
        models["separator"] = sep
        opts["separator"] = torch.optim.Adam(sep.parameters(), lr=cfg.lr_mss)
    passthrough = init

    if scheme.pretrained and pretrained is not None:
        src = pretrained
        if isinstance(src, (str, Path)):
            loaded, _ = load_checkpoint(src)
            if "transcriber" not in loaded:
                raise DomainError(f"{src} holds no transcriber")
            src = loaded["transcriber"]
        if src.cfg != models["transcriber"].cfg:
            models["transcriber"] = transcriber.Transcriber(src.cfg)
            opts["transcriber"] = torch.optim.Adam(models["transcriber"].parameters(),
                                                   lr=cfg.lr_t)
        models["transcriber"].load_state_dict(src.state_dict())
    elif scheme.pretrained and _stage_epochs("pretrain", scheme, cfg) == 0:
        raise DomainError(f"scheme {scheme.id} needs a pretrained transcriber or "
                          "pretrain_epochs > 0")
    stages = ["joint"]
    if scheme.pretrained and pretrained is None:
        stages.insert(0, "pretrain")

    history, step = [], 0
    try:
        for stage in stages:
            step = _amt_stage(stage, scheme, cfg, batcher, models, opts, runlog, step,
                              callback, history)
    except StopTraining:
        runlog(f"{scheme.label} stopped early at step {step}")
    models.update(passthrough)
    for m in models.values():
        m.eval()
    if out:
        save_checkpoint(out, models, scheme=scheme.to_dict(), history=history)
    return models, history


# ---------------------------------------------------------------------------
# evaluation

def _as_modules(checkpoints):
    if isinstance(checkpoints, dict):
        return dict(checkpoints), {}
    modules, meta = {}, {}
    for path in checkpoints:
        loaded, m = load_checkpoint(path)
        modules.update(loaded)
        meta.update(m)
    return modules, meta


def evaluate(checkpoints, corpus, split="test", use_ir=False, scheme=None, cfg=None):
    """Score a corpus split with whichever modules are supplied.

    ``checkpoints`` is a dict of modules or a list of checkpoint paths.
    With ``use_ir`` the conditions come from the recognizer; otherwise from
    the ground-truth labels. ``scheme`` fixes the separator's roll source
    (read from checkpoint metadata when omitted).
    """
    cfg = cfg or TrainConfig()
    modules, meta = _as_modules(checkpoints)
    if scheme is None and "scheme" in meta:
        scheme = TrainScheme(**meta["scheme"])
    rec = modules.get("recognizer")
    trans = modules.get("transcriber")
    sep = modules.get("separator")
    if use_ir and rec is None:
        raise DomainError("use_ir needs a recognizer")
    pieces = load_corpus(corpus, split)
    if not pieces:
        return metrics.MetricReport(settings=dict(split=split, pieces=0))
    prepared = prepare(pieces)
    roll_source = scheme.roll_source if scheme is not None else "transcriber"
    if sep is not None and roll_source == "transcriber" and trans is None:
        raise DomainError("separator needs transcriber rolls but no transcriber was given")

    ref_notes, est_notes, sdr_cells, probs = {}, {}, {}, []
    for i, prep in enumerate(prepared):
        piece = prep.piece
        key = piece.piece_id or f"piece_{i:04d}"
        if rec is not None:
            p = recognizer.recognize_piece(rec, prep.mel, cfg.window_frames)
            probs.append(p)
        conditions = (recognizer.predict_conditions(p) if use_ir else set(piece.instruments))
        rolls = {}
        if trans is not None:
            rolls = transcriber.transcribe_rolls(trans, prep.mel, conditions, cfg.window_frames)
            ref_notes[key] = piece.notes
            est_notes[key] = {inst: symbolic.decode_notes(r, cfg.onset_threshold,
                                                          cfg.frame_threshold)
                              for inst, r in rolls.items()}
        if sep is not None and conditions:
            sep_rolls = {}
            for inst in conditions:
                if roll_source == "ground_truth":
                    sep_rolls[inst] = prep.frame.get(inst, np.zeros((prep.n_frames, 88), np.float32))
                elif roll_source == "zeros":
                    sep_rolls[inst] = np.zeros((prep.n_frames, 88), np.float32)
                else:
                    sep_rolls[inst] = rolls[inst].frame
            estimates = separator.separate_piece(sep, piece.mix, sep_rolls, cfg.window_frames)
            n = len(dsp.hop_align(piece.mix))
            for inst in sorted(set(piece.instruments) | set(conditions)):
                ref = piece.stems.get(inst)
                est = estimates.get(inst)
                sdr_cells[key, inst] = (metrics.sdr(ref[:n], est) if ref is not None
                                        and est is not None else None)
    if trans is not None:
        report = metrics.evaluate_transcription(ref_notes, est_notes)
    else:
        report = metrics.MetricReport()
    report.settings.update(split=split, pieces=len(prepared), use_ir=use_ir,
                           scheme=scheme.label if scheme else "none")
    if sep is not None:
        report.sdr = {lvl: metrics.aggregate_sdr(sdr_cells, lvl) for lvl in metrics.SDR_LEVELS}
    if rec is not None:
        report.recognition = metrics.map_scores(np.stack(probs),
                                                np.stack([p.piece.labels for p in prepared]))
    return report


def scheme_grid():
    """Every scheme combination in the transcription/separation tables and ablations."""
    grid = [TrainScheme("T"), TrainScheme("iT"), TrainScheme("S_only"),
            TrainScheme("GT_upper_bound")]
    for sid in ("TS", "pTS", "ipTS"):
        for fusion in ("sum", "concat", "spec_patch"):
            for roll_form, ste in (("posterior", False), ("binary", False), ("binary", True)):
                grid.append(TrainScheme(sid, fusion, roll_form, ste))
    return grid
