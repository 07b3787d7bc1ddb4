"""Command-line entry point: ``jointist <verb> [flags]``.

Exit codes: 0 success, 1 invalid input (including unknown flags), 2 I/O
failure. Every verb parses and validates its flags before reading or writing
any file.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import taxonomy
from .errors import DomainError

log = logging.getLogger("jointist")

EXIT_OK, EXIT_DOMAIN, EXIT_IO = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_DOMAIN, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# flag parsing helpers

def _conditions(text):
    try:
        values = {int(v) for v in text.split(",") if v.strip()}
    except ValueError:
        values = None
    if values is None:
        # allow instrument slugs, e.g. "piano,drums"
        values = {taxonomy.index_from_slug(v.strip()) for v in text.split(",") if v.strip()}
    for v in values:
        if not 0 <= v < taxonomy.N_CLASSES:
            raise DomainError(f"condition {v} outside [0, {taxonomy.N_CLASSES - 1}]")
    return values


def _probability(name, value):
    if not 0.0 < value < 1.0:
        raise DomainError(f"--{name} must be in (0, 1), got {value}")
    return value


def _positive(name, value):
    if value is not None and value < 1:
        raise DomainError(f"--{name} must be >= 1, got {value}")
    return value


def _triple(text):
    try:
        parts = tuple(float(v) for v in text.split(","))
    except ValueError as exc:
        raise DomainError(f"expected three comma-separated numbers, got {text!r}") from exc
    if len(parts) != 3:
        raise DomainError(f"expected three comma-separated numbers, got {text!r}")
    return parts


def _common(p, seed=True):
    p.add_argument("--config", help="configuration file (default: $JOINTIST_CONFIG)")
    if seed:
        p.add_argument("--seed", type=int, default=0, help="seed for every random choice")
    p.add_argument("-v", "--verbose", action="store_true")


def _train_flags(p):
    p.add_argument("--data", required=True, help="corpus directory with manifest.tsv")
    p.add_argument("--out", required=True, help="checkpoint file to write")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--crop-s", type=float)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--tiny", action="store_true", help="use the small model presets")
    p.add_argument("--log", help="append-only run log")


def build_parser():
    parser = _Parser(prog="jointist", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    p = sub.add_parser("synth-data", help="write a seeded toy multi-instrument corpus")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True, help="number of pieces")
    p.add_argument("--min-duration", type=int, default=10)
    p.add_argument("--max-duration", type=int, default=30)
    p.add_argument("--k-min", type=int, default=2)
    p.add_argument("--k-max", type=int, default=4)
    p.add_argument("--pool", default=None, help="instrument indices, e.g. 0,8,10,19,29,38")
    p.add_argument("--splits", default="0.8,0.1,0.1", help="train,validation,test ratios")
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("train-ir", help="train the instrument recognizer")
    _common(p)
    _train_flags(p)
    p.add_argument("--lr", type=float)

    p = sub.add_parser("train-amt", help="train transcriber and/or separator for a scheme")
    _common(p)
    _train_flags(p)
    p.add_argument("--scheme", default=None, help="T, iT, TS, pTS, ipTS, S_only, GT_upper_bound")
    p.add_argument("--fusion", default=None, help="sum, concat or spec_patch")
    p.add_argument("--roll-form", default=None, help="posterior or binary")
    p.add_argument("--ste", action="store_true", default=None,
                   help="straight-through gradient through binary rolls")
    p.add_argument("--pretrained", help="transcriber checkpoint for pTS / ipTS")
    p.add_argument("--pretrain-epochs", type=int)
    p.add_argument("--lr-t", type=float)
    p.add_argument("--lr-mss", type=float)

    p = sub.add_parser("recognize", help="predict which instruments play in a recording")
    _common(p, seed=False)
    p.add_argument("audio")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", help="write per-class probabilities as TSV")

    for verb, help_text in (("transcribe", "audio to one MIDI file per instrument"),
                            ("separate", "audio to one waveform per instrument")):
        p = sub.add_parser(verb, help=help_text)
        _common(p, seed=False)
        p.add_argument("audio")
        p.add_argument("--ckpt", required=True)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--conditions", help="instrument indices or slugs, e.g. 0,38")
        p.add_argument("--use-ir", action="store_true", help="predict conditions first")
        p.add_argument("--ir-ckpt", help="recognizer checkpoint (default: --ckpt)")
        p.add_argument("--onset-threshold", type=float, default=0.5)
        p.add_argument("--frame-threshold", type=float, default=0.5)
        if verb == "separate":
            p.add_argument("--transcriber-ckpt", help="transcriber for the separator's rolls")
            p.add_argument("--midi", help="reference MIDI for ground-truth-roll separators")

    p = sub.add_parser("evaluate", help="score predictions against references")
    _common(p, seed=False)
    p.add_argument("--pred", help="directory of per-piece predictions (<piece>/*.mid, *.wav)")
    p.add_argument("--ref", help="reference corpus or directory of <piece>/notes.mid")
    p.add_argument("--ckpt", nargs="+", help="checkpoints to run on --data instead")
    p.add_argument("--data", help="corpus directory for --ckpt mode")
    p.add_argument("--split", default=None, help="train, validation or test")
    p.add_argument("--use-ir", action="store_true")
    p.add_argument("--out", help="report path stem (.txt and .tsv are written)")
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("export-hybrid", help="spectrogram + piano-roll feature tensor")
    _common(p)
    p.add_argument("audio")
    p.add_argument("--midi", required=True)
    p.add_argument("--out", required=True, help="output array file")
    p.add_argument("--feature", choices=("logmel", "stft"), default="logmel")
    return parser


# ---------------------------------------------------------------------------
# verbs

def _config(args):
    from .config import read_config
    return read_config(args.config)


def _model_cfg(cls, section, tiny):
    from .config import build
    if tiny:
        return cls.tiny(**section)
    return build(cls, section)


def _train_cfg(args, conf, **extra):
    from .config import build
    from .trainer import TrainConfig
    return build(TrainConfig, conf["train"], seed=args.seed, epochs=args.epochs,
                 batch_size=args.batch_size, crop_s=args.crop_s, max_steps=args.max_steps,
                 log_path=args.log, **extra)


def _synth_data(args):
    from . import synthdata
    for name in ("n", "jobs", "k_min", "max_duration", "min_duration"):
        _positive(name.replace("_", "-"), getattr(args, name))
    if args.min_duration > args.max_duration or args.k_min > args.k_max:
        raise DomainError("minimum exceeds maximum")
    splits = _triple(args.splits)
    pool = tuple(sorted(_conditions(args.pool))) if args.pool else synthdata.DEFAULT_POOL
    if args.k_max > len(pool):
        raise DomainError(f"--k-max {args.k_max} exceeds the pool size {len(pool)}")
    synthdata.split_counts(args.n, splits)
    rows = synthdata.generate_corpus(args.out, args.seed, args.n, splits,
                                     (args.min_duration, args.max_duration), pool,
                                     (args.k_min, args.k_max), args.jobs)
    print(f"wrote {len(rows)} pieces to {args.out}")


def _train_ir(args):
    from . import trainer
    from .recognizer import RecognizerConfig
    conf = _config(args)
    cfg = _train_cfg(args, conf, lr_ir=args.lr)
    model_cfg = _model_cfg(RecognizerConfig, conf["recognizer"], args.tiny)
    _, history = trainer.train_recognizer(args.data, cfg, model_cfg, out=args.out)
    best = max((h["weighted_map"] for h in history if h["weighted_map"] is not None),
               default=None)
    print(f"saved {args.out} (best weighted mAP {best})")


def _train_amt(args):
    from . import trainer
    from .config import build
    from .separator import SeparatorConfig
    from .transcriber import TranscriberConfig
    conf = _config(args)
    scheme = build(trainer.TrainScheme, conf["scheme"], id=args.scheme, fusion_mode=args.fusion,
                   roll_form=args.roll_form, ste=args.ste, pretrain_epochs=args.pretrain_epochs)
    cfg = _train_cfg(args, conf, lr_t=args.lr_t, lr_mss=args.lr_mss)
    tcfg = _model_cfg(TranscriberConfig, conf["transcriber"], args.tiny)
    scfg = _model_cfg(SeparatorConfig, conf["separator"], args.tiny)
    if args.pretrained and not Path(args.pretrained).is_file():
        raise FileNotFoundError(f"no such checkpoint: {args.pretrained}")
    trainer.train_amt(args.data, scheme, cfg, tcfg, scfg, pretrained=args.pretrained,
                      out=args.out)
    print(f"saved {args.out} ({scheme.label})")


def _load_modules(path, *names):
    from .checkpoint import load_checkpoint
    modules, meta = load_checkpoint(path)
    for name in names:
        if name not in modules:
            raise DomainError(f"{path} holds no {name}")
    return modules, meta


def _read_audio(path):
    from . import dsp
    audio = dsp.hop_align(dsp.read_wav(path))
    if len(audio) == 0:
        raise DomainError(f"{path}: shorter than one {dsp.HOP}-sample hop")
    return audio


def _recognize(args):
    from . import dsp, recognizer
    _probability("threshold", args.threshold)
    model = _load_modules(args.ckpt, "recognizer")[0]["recognizer"]
    probs = recognizer.recognize_piece(model, dsp.logmel(_read_audio(args.audio)))
    chosen = recognizer.predict_conditions(probs, args.threshold)
    for idx in sorted(chosen):
        print(f"{idx}\t{taxonomy.instrument_name(idx)}\t{probs[idx]:.4f}")
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        with open(args.out, "w") as fh:
            fh.write("index\tname\tprobability\tpredicted\n")
            for idx, p in enumerate(probs):
                fh.write(f"{idx}\t{taxonomy.instrument_name(idx)}\t{p:.6f}\t{int(idx in chosen)}\n")


def _resolve_conditions(args, audio):
    if args.conditions is not None:
        return _conditions(args.conditions)
    from . import dsp, recognizer
    model = _load_modules(args.ir_ckpt or args.ckpt, "recognizer")[0]["recognizer"]
    conditions = recognizer.predict_conditions(recognizer.recognize_piece(model, dsp.logmel(audio)))
    log.info("recognized conditions: %s", sorted(conditions))
    return conditions


def _check_io_flags(args):
    _probability("onset-threshold", args.onset_threshold)
    _probability("frame-threshold", args.frame_threshold)
    if args.conditions is not None:
        _conditions(args.conditions)
        if args.use_ir:
            raise DomainError("give either --conditions or --use-ir, not both")
    elif not args.use_ir:
        raise DomainError("one of --conditions or --use-ir is required")


def _transcribe(args):
    from . import symbolic, transcriber
    _check_io_flags(args)
    model = _load_modules(args.ckpt, "transcriber")[0]["transcriber"]
    audio = _read_audio(args.audio)
    conditions = _resolve_conditions(args, audio)
    notes = transcriber.transcribe_piece(model, audio, conditions, args.onset_threshold,
                                         args.frame_threshold)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for inst, events in sorted(notes.items()):
        path = out / f"{taxonomy.instrument_slug(inst)}.mid"
        symbolic.save_midi({inst: events}, path)
        print(f"{path}\t{len(events)} notes")


def _separate(args):
    from . import dsp, separator, symbolic, transcriber
    from .trainer import TrainScheme
    _check_io_flags(args)
    modules, meta = _load_modules(args.ckpt, "separator")
    scheme = TrainScheme(**meta["scheme"]) if "scheme" in meta else None
    source = scheme.roll_source if scheme else "transcriber"
    if source == "ground_truth" and not args.midi:
        raise DomainError("this separator was trained on ground-truth rolls; pass --midi")
    trans = None
    if source == "transcriber":
        if args.transcriber_ckpt:
            trans = _load_modules(args.transcriber_ckpt, "transcriber")[0]["transcriber"]
        elif "transcriber" in modules:
            trans = modules["transcriber"]
        else:
            raise DomainError("separator needs transcriber rolls; pass --transcriber-ckpt")
    audio = _read_audio(args.audio)
    conditions = _resolve_conditions(args, audio)
    n_frames = len(audio) // dsp.HOP
    if source == "transcriber":
        rolls = {i: r.frame for i, r in
                 transcriber.transcribe_rolls(trans, dsp.logmel(audio), conditions).items()}
    elif source == "ground_truth":
        ref = symbolic.load_midi(args.midi)
        duration = n_frames / symbolic.FRAMES_PER_SECOND
        rolls = {i: symbolic.render_rolls([n for n in ref.get(i, []) if n.onset_s < duration],
                                          duration, i).frame for i in conditions}
    else:
        rolls = {i: np.zeros((n_frames, symbolic.N_PITCHES), np.float32) for i in conditions}
    waves = separator.separate_piece(modules["separator"], audio, rolls)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for inst, wave in sorted(waves.items()):
        path = out / f"{taxonomy.instrument_slug(inst)}.wav"
        dsp.write_wav(path, wave)
        print(path)


def _piece_dirs(root, split=None):
    """``{piece_id: directory}`` from a manifest or from sub-directories."""
    from . import synthdata
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"no such directory: {root}")
    if (root / synthdata.MANIFEST).is_file():
        return {r["piece_id"]: Path(r["path"]) for r in synthdata.load_manifest(root)
                if split is None or r["split"] == split}
    return {d.name: d for d in sorted(root.iterdir()) if d.is_dir()}


def _evaluate_dirs(args):
    from concurrent.futures import ThreadPoolExecutor

    from . import dsp, metrics, symbolic
    refs = _piece_dirs(args.ref, args.split)
    preds = _piece_dirs(args.pred)

    def load(item):
        pid, ref_dir = item
        ref_notes = symbolic.load_midi(ref_dir / "notes.mid")
        est_notes = {}
        pred_dir = preds.get(pid)
        if pred_dir is None:
            log.warning("no predictions for %s; scoring it as empty", pid)
        else:
            for midi in sorted(pred_dir.glob("*.mid")):
                for inst, events in symbolic.load_midi(midi).items():
                    est_notes.setdefault(inst, []).extend(events)
        cells = {}
        # SDR is only scored for piece directories that hold predicted stems
        if pred_dir is not None and any(pred_dir.glob("*.wav")):
            for inst in sorted(set(ref_notes) | set(est_notes)):
                slug = taxonomy.instrument_slug(inst)
                est_wav = pred_dir / f"{slug}.wav"
                ref_wav = ref_dir / "stems" / f"{slug}.wav"
                if est_wav.is_file() and ref_wav.is_file():
                    r, e = dsp.read_wav(ref_wav), dsp.read_wav(est_wav)
                    n = min(len(r), len(e))
                    cells[pid, inst] = metrics.sdr(r[:n], e[:n])
                elif est_wav.is_file() or ref_wav.is_file():
                    cells[pid, inst] = None
        return pid, ref_notes, est_notes, cells

    with ThreadPoolExecutor(max(args.jobs, 1)) as pool:
        loaded = list(pool.map(load, sorted(refs.items())))
    ref_by_piece = {pid: r for pid, r, _, _ in loaded}
    est_by_piece = {pid: {i: sorted(v) for i, v in e.items()} for pid, _, e, _ in loaded}
    report = metrics.evaluate_transcription(ref_by_piece, est_by_piece)
    cells = {k: v for _, _, _, c in loaded for k, v in c.items()}
    if cells:
        report.sdr = {lvl: metrics.aggregate_sdr(cells, lvl) for lvl in metrics.SDR_LEVELS}
    report.settings.update(pieces=len(loaded), ref=str(args.ref), pred=str(args.pred))
    return report, Path(args.out) if args.out else Path(args.pred) / "report"


def _evaluate(args):
    from . import trainer
    _positive("jobs", args.jobs)
    dir_mode = args.pred is not None or args.ref is not None
    ckpt_mode = args.ckpt is not None or args.data is not None
    if dir_mode == ckpt_mode:
        raise DomainError("use either --pred/--ref or --ckpt/--data")
    if dir_mode:
        if not (args.pred and args.ref):
            raise DomainError("--pred and --ref go together")
        report, stem = _evaluate_dirs(args)
    else:
        if not (args.ckpt and args.data):
            raise DomainError("--ckpt and --data go together")
        if not args.out:
            raise DomainError("--out is required with --ckpt")
        report = trainer.evaluate(args.ckpt, args.data, split=args.split or "test",
                                  use_ir=args.use_ir)
        stem = Path(args.out)
    report.write(stem)
    print(report.summary())
    print(f"report: {stem}.txt")


def _export_hybrid(args):
    import torch

    from . import dsp, symbolic
    audio = _read_audio(args.audio)
    notes = symbolic.load_midi(args.midi)
    n_frames = len(audio) // dsp.HOP
    duration = n_frames / symbolic.FRAMES_PER_SECOND
    rolls = [symbolic.render_rolls([n for n in events if n.onset_s < duration], duration, inst)
             for inst, events in notes.items()]
    if args.feature == "logmel":
        spec = dsp.logmel(audio)
    else:
        spec = np.abs(dsp.stft(audio))
    torch.manual_seed(args.seed)
    module = dsp.HybridFeatures(spec.shape[-1])
    features = dsp.hybrid_features(spec, rolls, module)
    symbolic.save_array(args.out, features)
    print(f"{args.out}\t{features.shape}")


VERBS = {
    "synth-data": _synth_data,
    "train-ir": _train_ir,
    "train-amt": _train_amt,
    "recognize": _recognize,
    "transcribe": _transcribe,
    "separate": _separate,
    "evaluate": _evaluate,
    "export-hybrid": _export_hybrid,
}


def run(argv=None):
    """Run one command; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        VERBS[args.verb](args)
    except DomainError as exc:
        print(f"jointist {args.verb}: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    except OSError as exc:
        print(f"jointist {args.verb}: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
