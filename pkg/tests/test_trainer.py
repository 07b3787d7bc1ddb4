import numpy as np
import pytest
import torch

from jointist import config, metrics, separator, symbolic, synthdata, trainer, transcriber
from jointist.checkpoint import load_checkpoint, save_checkpoint
from jointist.errors import DomainError
from jointist.recognizer import RecognizerConfig
from jointist.separator import Separator, SeparatorConfig
from jointist.trainer import TrainConfig, TrainScheme, param_digest
from jointist.transcriber import Transcriber, TranscriberConfig


@pytest.fixture(scope="module")
def pieces():
    out = []
    for i, seed in enumerate((21, 22)):
        piece = synthdata.generate_piece(seed, 2.0, k_range=(2, 2))
        piece.piece_id = f"p{i}"
        out.append(piece)
    return out


def small_cfg(**kw):
    base = dict(crop_s=1.0, batch_size=2, epochs=1, seed=3, window_s=2.0)
    base.update(kw)
    return TrainConfig(**base)


TINY_T = TranscriberConfig.tiny()
TINY_S = SeparatorConfig.tiny()


def test_scheme_properties():
    assert TrainScheme("pTS", "concat").label == "pTS(c)"
    assert TrainScheme("TS", "sum", "binary", True).label == "TS(s) STE"
    assert TrainScheme("S_only").roll_source == "zeros"
    assert TrainScheme("GT_upper_bound").roll_source == "ground_truth"
    assert TrainScheme("T").roll_source is None
    assert TrainScheme("ipTS").use_ir and TrainScheme("ipTS").pretrained
    with pytest.raises(DomainError):
        TrainScheme("XY")
    with pytest.raises(DomainError):
        TrainScheme("TS", "sum", "posterior", True)


def test_scheme_grid_complete():
    grid = trainer.scheme_grid()
    labels = [s.label for s in grid]
    assert len(set(labels)) == len(labels) == 31
    for needed in ("T", "iT", "TS(s)", "TS(c)", "pTS(s)", "pTS(c)", "ipTS(s)", "S_only",
                   "GT_upper_bound", "pTS(p) STE", "TS(c) bin"):
        assert needed in labels


def test_train_config_validation():
    with pytest.raises(DomainError):
        TrainConfig(crop_s=0.0015)
    with pytest.raises(DomainError):
        TrainConfig(batch_size=0)


def test_batcher_is_seeded(pieces):
    prepared = trainer.prepare(pieces)
    a = list(trainer.Batcher(prepared, small_cfg(), np.random.default_rng(0)).epoch())
    b = list(trainer.Batcher(prepared, small_cfg(), np.random.default_rng(0)).epoch())
    for x, y in zip(a, b):
        for key in x:
            assert torch.equal(x[key], y[key])
    batch = a[0]
    assert batch["mel"].shape == (2, 100, 229) and batch["mix"].shape == (2, 16000)
    assert batch["cond"].sum(1).tolist() == [1.0, 1.0]
    all_k = next(trainer.Batcher(prepared, small_cfg(all_conditions=True),
                                 np.random.default_rng(0)).epoch())
    pairs = list(trainer.Batcher(prepared, small_cfg(all_conditions=True, batch_size=1),
                                 np.random.default_rng(0)).epoch())
    assert len(pairs) == 4 and all(b["mel"].shape[0] == 1 for b in pairs)
    assert all_k["mel"].shape[0] == 2


def test_all_conditions_epoch_visits_every_pair_once(pieces):
    prepared = trainer.prepare(pieces)
    seen = []
    for batch in trainer.Batcher(prepared, small_cfg(all_conditions=True, batch_size=3,
                                                     crop_s=2.0), np.random.default_rng(0)).epoch():
        for mix, cond in zip(batch["mix"], batch["cond"]):
            k = next(i for i, p in enumerate(pieces) if np.array_equal(p.mix, mix.numpy()))
            seen.append((k, int(cond.argmax())))
    expected = [(k, inst) for k, p in enumerate(pieces) for inst in p.instruments]
    assert sorted(seen) == sorted(expected)


def test_batch_targets_align_with_pieces(pieces):
    prepared = trainer.prepare(pieces)
    batch = next(trainer.Batcher(prepared, small_cfg(crop_s=2.0, batch_size=1),
                                 np.random.default_rng(1)).epoch())
    inst = int(batch["cond"][0].argmax())
    piece = next(p for p in pieces if inst in p.instruments
                 and np.array_equal(p.mix, batch["mix"][0].numpy()))
    np.testing.assert_array_equal(batch["frame"][0].numpy(), piece.roll(inst).frame)
    np.testing.assert_array_equal(batch["stem"][0].numpy(), piece.stems[inst])


def test_empty_corpus():
    with pytest.raises(DomainError):
        trainer.train_amt([], TrainScheme("T"), small_cfg(), TINY_T)


def test_scheme_t_leaves_separator_untouched(pieces):
    sep = Separator(TINY_S)
    trans = Transcriber(TINY_T)
    before_s, before_t = param_digest(sep), param_digest(trans)
    models, _ = trainer.train_amt(pieces, TrainScheme("T"), small_cfg(), TINY_T,
                                  init={"separator": sep, "transcriber": trans})
    assert param_digest(models["separator"]) == before_s
    assert param_digest(models["transcriber"]) != before_t


def test_s_only_leaves_transcriber_untouched(pieces):
    trans = Transcriber(TINY_T)
    before = param_digest(trans)
    models, _ = trainer.train_amt(pieces, TrainScheme("S_only"), small_cfg(), None, TINY_S,
                                  init={"transcriber": trans})
    assert param_digest(models["transcriber"]) == before
    assert "separator" in models


def test_pts_starts_from_checkpoint(pieces, tmp_path):
    pre, _ = trainer.train_amt(pieces, TrainScheme("T"), small_cfg(), TINY_T,
                               out=tmp_path / "t.ckpt")
    expected = param_digest(pre["transcriber"])
    seen = []

    def spy(stage, step, models):
        if step == 0:
            seen.append((stage, param_digest(models["transcriber"])))

    models, history = trainer.train_amt(pieces, TrainScheme("pTS"), small_cfg(), TINY_T, TINY_S,
                                        pretrained=tmp_path / "t.ckpt", callback=spy)
    assert seen == [("joint", expected)]
    assert {h["stage"] for h in history} == {"joint"}
    assert set(models) == {"transcriber", "separator"}


def test_pts_without_pretraining_source(pieces, tmp_path):
    with pytest.raises(DomainError):
        trainer.train_amt(pieces, TrainScheme("pTS", pretrain_epochs=0), small_cfg(), TINY_T,
                          TINY_S)
    save_checkpoint(tmp_path / "s.ckpt", {"separator": Separator(TINY_S)})
    with pytest.raises(DomainError):
        trainer.train_amt(pieces, TrainScheme("pTS"), small_cfg(), TINY_T, TINY_S,
                          pretrained=tmp_path / "s.ckpt")
    with pytest.raises(DomainError):
        trainer.train_amt(pieces, TrainScheme("T"), small_cfg(), TINY_T,
                          pretrained=tmp_path / "s.ckpt")


def test_pts_runs_pretrain_stage(pieces):
    _, history = trainer.train_amt(pieces, TrainScheme("pTS", pretrain_epochs=1, joint_epochs=1),
                                   small_cfg(), TINY_T, TINY_S)
    assert [h["stage"] for h in history] == ["pretrain", "joint"]
    assert history[0]["loss_mss"] == 0.0 and history[1]["loss_mss"] > 0


def test_fixed_seed_reproducible(pieces, tmp_path):
    runs = []
    for _ in range(2):
        models, history = trainer.train_amt(pieces, TrainScheme("TS"), small_cfg(epochs=2),
                                            TINY_T, TINY_S)
        report = trainer.evaluate(models, pieces, split=None, scheme=TrainScheme("TS"),
                                  cfg=small_cfg())
        runs.append((history, param_digest(models["transcriber"]), report.to_text()))
    assert runs[0] == runs[1]


def test_loss_terms_are_additive():
    """A disabled term contributes exactly zero gradient to the other module."""
    torch.manual_seed(0)
    mel, mix = torch.randn(1, 20, 229), torch.randn(1, 3200)
    cond = torch.zeros(1, 39)
    cond[0, 0] = 1
    for form, ste, expect_zero in (("binary", False, True), ("posterior", False, False),
                                   ("binary", True, False)):
        trans = Transcriber(TINY_T)
        sep = Separator(SeparatorConfig.tiny(roll_form=form, ste=ste))
        _, frame = trans(mel, cond)
        wave, _ = sep(mix, cond, frame)
        separator.loss_mss(wave, torch.zeros_like(wave)).backward()
        grads = [p.grad for p in trans.parameters() if p.grad is not None]
        total = sum(float(g.abs().sum()) for g in grads)
        assert (total == 0.0) == expect_zero, (form, ste, total)


def test_recognizer_training_and_checkpoint(pieces, tmp_path):
    model, history = trainer.train_recognizer(pieces, small_cfg(epochs=2),
                                              RecognizerConfig.tiny(), out=tmp_path / "r.ckpt")
    assert len(history) == 2 and history[0]["weighted_map"] is not None
    loaded, meta = load_checkpoint(tmp_path / "r.ckpt")
    assert param_digest(loaded["recognizer"]) == param_digest(model)
    assert meta["history"] == history
    again, history2 = trainer.train_recognizer(pieces, small_cfg(epochs=2), RecognizerConfig.tiny())
    assert history2 == history


def test_recognizer_callback_can_stop_early(pieces):
    calls = []

    def stop_after_two(epoch, model, scores):
        calls.append((epoch, scores["weighted_map"]))
        if epoch == 1:
            raise trainer.StopTraining

    model, history = trainer.train_recognizer(pieces, small_cfg(epochs=5),
                                              RecognizerConfig.tiny(), callback=stop_after_two)
    assert [c[0] for c in calls] == [0, 1] and len(history) == 2
    assert not model.training


def test_amt_callback_sees_every_step_and_can_stop(pieces, tmp_path):
    steps = []

    def stop_at_three(stage, step, models):
        steps.append((stage, step))
        assert set(models) == {"transcriber"}
        if step == 3:
            raise trainer.StopTraining

    models, history = trainer.train_amt(pieces, TrainScheme("T"), small_cfg(epochs=10), TINY_T,
                                        callback=stop_at_three, out=tmp_path / "t.ckpt")
    assert steps == [("joint", i) for i in range(4)]
    assert sum(h["steps"] for h in history) == 3
    assert not models["transcriber"].training
    loaded, _ = load_checkpoint(tmp_path / "t.ckpt")
    assert param_digest(loaded["transcriber"]) == param_digest(models["transcriber"])


def test_ground_truth_rolls_score_perfectly(pieces):
    ref = {p.piece_id: p.notes for p in pieces}
    est = {p.piece_id: {i: symbolic.decode_notes(p.roll(i)) for i in p.instruments}
           for p in pieces}
    report = metrics.evaluate_transcription(ref, est)
    for table in (report.flat_f1, report.piecewise_f1, report.instrumentwise_f1):
        assert table == {"N": 1.0, "N&O": 1.0}


def test_evaluate_without_separator_has_no_sdr(pieces):
    report = trainer.evaluate({"transcriber": Transcriber(TINY_T)}, pieces, split=None,
                              cfg=small_cfg())
    assert report.sdr == {} and "[sdr]" not in report.to_text()
    assert report.settings["pieces"] == 2


def test_evaluate_use_ir_needs_recognizer(pieces):
    with pytest.raises(DomainError):
        trainer.evaluate({"transcriber": Transcriber(TINY_T)}, pieces, split=None, use_ir=True)


def test_evaluate_scheme_roll_sources(pieces):
    sep = Separator(TINY_S)
    for sid in ("S_only", "GT_upper_bound"):
        report = trainer.evaluate({"separator": sep}, pieces, split=None,
                                  scheme=TrainScheme(sid), cfg=small_cfg())
        assert set(report.sdr) == set(metrics.SDR_LEVELS)
        assert report.flat_f1 == {}
    with pytest.raises(DomainError):
        trainer.evaluate({"separator": sep}, pieces, split=None, scheme=TrainScheme("TS"))


def test_run_log_appends(tmp_path, pieces):
    path = tmp_path / "run.log"
    trainer.train_amt(pieces, TrainScheme("T"), small_cfg(log_path=str(path)), TINY_T)
    first = path.read_text().splitlines()
    trainer.train_amt(pieces, TrainScheme("T"), small_cfg(log_path=str(path)), TINY_T)
    assert path.read_text().splitlines()[:len(first)] == first
    assert len(path.read_text().splitlines()) == 2 * len(first)


def test_checkpoint_errors(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(OSError):
        load_checkpoint(bad)
    torch.save({"version": 99}, tmp_path / "v.ckpt")
    with pytest.raises(DomainError):
        load_checkpoint(tmp_path / "v.ckpt")
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_config_file(tmp_path, monkeypatch):
    path = tmp_path / "c.ini"
    path.write_text("[train]\nepochs = 3\nlr_t = 0.01\nall_conditions = yes\n"
                    "[transcriber]\nconv_channels = (4, 8)\n")
    conf = config.read_config(path)
    cfg = config.build(TrainConfig, conf["train"], epochs=5, seed=None)
    assert (cfg.epochs, cfg.lr_t, cfg.all_conditions, cfg.seed) == (5, 0.01, True, 0)
    assert TranscriberConfig.tiny(**conf["transcriber"]).conv_channels == (4, 8)
    monkeypatch.setenv(config.ENV_VAR, str(path))
    assert config.read_config()["train"]["epochs"] == 3
    path.write_text("[bogus]\nx = 1\n")
    with pytest.raises(DomainError):
        config.read_config(path)
    with pytest.raises(DomainError):
        config.build(TrainConfig, {"nope": 1})
    with pytest.raises(OSError):
        config.read_config(tmp_path / "missing.ini")
