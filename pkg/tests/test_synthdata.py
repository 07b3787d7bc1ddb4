import os

import numpy as np
import pytest

from jointist import symbolic, synthdata, taxonomy
from jointist.errors import DomainError


def test_same_seed_identical():
    a = synthdata.generate_piece(5, 3.0)
    b = synthdata.generate_piece(5, 3.0)
    assert a.instruments == b.instruments and a.notes == b.notes
    assert a.mix.tobytes() == b.mix.tobytes()
    for inst in a.instruments:
        assert a.stems[inst].tobytes() == b.stems[inst].tobytes()
    assert synthdata.generate_piece(6, 3.0).mix.tobytes() != a.mix.tobytes()


def test_mix_is_sum_of_stems():
    for seed in range(5):
        piece = synthdata.generate_piece(seed, 3.0)
        total = np.sum([piece.stems[i] for i in piece.instruments], axis=0)
        assert np.max(np.abs(piece.mix - total)) <= 1e-6


def test_piece_contents():
    piece = synthdata.generate_piece(3, 4.0, k_range=(2, 4))
    assert 2 <= len(piece.instruments) <= 4
    assert set(piece.instruments) <= set(synthdata.DEFAULT_POOL)
    np.testing.assert_array_equal(piece.labels, taxonomy.condition_vector(piece.instruments))
    assert len(piece.mix) == 4 * 16000
    for inst, notes in piece.notes.items():
        assert notes and all(n.instrument == inst for n in notes)
        assert all(0 <= n.onset_s and n.offset_s <= 4.0 for n in notes)
        roll = piece.roll(inst)
        assert roll.n_frames == 400 and roll.onset.sum() > 0


def test_notes_survive_the_roll_round_trip():
    piece = synthdata.generate_piece(8, 5.0)
    for inst in piece.instruments:
        if taxonomy.is_unpitched(inst):
            continue
        assert symbolic.decode_notes(piece.roll(inst)) == piece.notes[inst]


def test_errors():
    with pytest.raises(DomainError):
        synthdata.generate_piece(0, 2.0, instrument_pool=())
    with pytest.raises(DomainError):
        synthdata.generate_piece(0, 2.0, k_range=(3, 1))
    with pytest.raises(DomainError):
        synthdata.generate_piece(0, 2.0, instrument_pool=(40,))


def test_distinct_spectral_centroids():
    """Each timbre recipe has its own brightness on a shared note."""
    centroids = []
    for inst in (0, 8, 10, 19, 29):
        timbre = synthdata.timbre_for(inst)
        notes = [symbolic.NoteEvent(60, 0.1, 0.9, inst)]
        wave = synthdata.render_pitched(notes, timbre, 16000, np.random.default_rng(0))
        centroids.append(synthdata.spectral_centroid(wave))
    gaps = np.diff(np.sort(centroids))
    assert np.all(gaps > 20.0), centroids


def test_drums_brighter_than_bass():
    piece = synthdata.generate_piece(1, 4.0, instrument_pool=(10, 38), k_range=(2, 2))
    assert synthdata.spectral_centroid(piece.stems[38]) > synthdata.spectral_centroid(piece.stems[10])


def test_split_counts():
    assert synthdata.split_counts(10, (0.8, 0.1, 0.1)) == [8, 1, 1]
    assert sum(synthdata.split_counts(7, (0.5, 0.25, 0.25))) == 7
    with pytest.raises(DomainError):
        synthdata.split_counts(10, (0.5, 0.5, 0.5))


def test_corpus_round_trip(tmp_path):
    rows = synthdata.generate_corpus(tmp_path / "c", seed=3, n_pieces=10,
                                     duration_range=(2, 3))
    assert [r["split"] for r in rows].count("train") == 8
    manifest = synthdata.load_manifest(tmp_path / "c")
    assert [r["piece_id"] for r in manifest] == [f"piece_{i:04d}" for i in range(10)]
    row = manifest[0]
    piece = synthdata.load_piece(row)
    fresh = synthdata.generate_piece(row["seed"], row["duration_s"])
    assert piece.notes == fresh.notes
    np.testing.assert_array_equal(piece.mix, fresh.mix)
    for inst in fresh.instruments:
        np.testing.assert_array_equal(piece.stems[inst], fresh.stems[inst])


def test_corpus_parallel_matches_serial(tmp_path):
    synthdata.generate_corpus(tmp_path / "a", seed=1, n_pieces=3, duration_range=(2, 2))
    synthdata.generate_corpus(tmp_path / "b", seed=1, n_pieces=3, duration_range=(2, 2), jobs=2)
    for name in ("manifest.tsv", "piece_0002/mix.wav", "piece_0001/notes.mid"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


@pytest.mark.skipif(os.geteuid() == 0, reason="root ignores directory permissions")
def test_unwritable_directory(tmp_path):
    locked = tmp_path / "locked"
    locked.mkdir(mode=0o500)
    with pytest.raises(OSError):
        synthdata.generate_corpus(locked / "c", seed=0, n_pieces=1, duration_range=(2, 2))


def test_unwritable_path_is_a_file(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        synthdata.generate_corpus(blocker / "c", seed=0, n_pieces=1, duration_range=(2, 2))
