import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from motok import corpus as C
from motok.errors import BoundsError, CountError, FormatError, VersionError


def test_zero_speed_zero_amplitude_gives_zero_root_channels():
    for cls in C.CLASSES:
        m = C.generate_motion(cls, speed=0.0, direction=0.3, amplitude=0.0, frames=50, seed=1)
        assert np.all(m.data[:, 0] == 0.0)
        assert np.all(m.data[:, 1] == 0.0)


def test_turn_left_increases_yaw():
    m = C.generate_motion("turn_left", speed=1.0, direction=np.pi / 2, amplitude=1.0,
                          frames=64, seed=2)
    assert m.data[-1, 2] - m.data[0, 2] > 0


def test_turn_right_decreases_yaw():
    m = C.generate_motion("turn_right", speed=1.0, direction=np.pi / 2, amplitude=1.0,
                          frames=64, seed=2)
    assert m.data[-1, 2] - m.data[0, 2] < 0


def test_generation_is_bitwise_deterministic():
    a = C.generate_motion("walk", 1.0, 0.0, 1.0, frames=64, seed=7)
    b = C.generate_motion("walk", 1.0, 0.0, 1.0, frames=64, seed=7)
    assert np.array_equal(a.data, b.data)
    assert a.caption == b.caption


def test_frames_out_of_range_rejected():
    with pytest.raises(BoundsError):
        C.generate_motion("walk", 1.0, 0.0, 1.0, frames=20, seed=0)
    with pytest.raises(BoundsError):
        C.generate_motion("walk", 1.0, 0.0, 1.0, frames=500, seed=0)


def test_split_counts():
    assert C.split_counts(100) == (80, 5, 15)
    assert C.split_counts(1) == (1, 0, 0)
    assert C.split_counts(16) == (14, 0, 2)
    assert sum(C.split_counts(37)) == 37


def test_caption_examples():
    assert C.caption_for("walk", "quick", "forward") == "a person walks quickly forward"
    assert C.caption_for("turn_left", "normal", "left") == "a person turns left"
    assert C.caption_for("run", "slow", "right") == "a person runs slowly to the right"


@settings(max_examples=200, deadline=None)
@given(st.sampled_from(C.VALID_TUPLES))
def test_caption_grammar_is_invertible(tup):
    assert C.parse_caption(C.caption_for(*tup)) == tup


def test_parse_rejects_garbage():
    with pytest.raises(FormatError):
        C.parse_caption("a robot dances")
    with pytest.raises(FormatError):
        C.parse_caption("a person walks sideways")


def test_build_and_load_roundtrip(tmp_path):
    manifest = C.build_corpus(20, seed=11, out_dir=tmp_path)
    assert manifest["count"] == 20
    corpus = C.load_corpus(tmp_path)
    assert len(corpus) == 20
    # roundtrip: denormalize(loaded) == raw within 1e-6
    rec_seed = int(np.random.SeedSequence([11, 0]).generate_state(1)[0])
    rng = np.random.default_rng(np.random.SeedSequence([11, 0, 1]))
    params = C.sample_params(rng, 64, 64, rec_seed)
    raw = C.generate_motion(params.class_id, params.speed, params.direction,
                            params.amplitude, params.frames, rec_seed)
    back = corpus.denormalize(corpus.records[0][0].data)
    assert np.max(np.abs(back - raw.data)) < 1e-5
    assert corpus.records[0][0].caption == raw.caption


def test_normalize_denormalize_roundtrip(tmp_path):
    C.build_corpus(10, seed=3, out_dir=tmp_path)
    corpus = C.load_corpus(tmp_path)
    raw = corpus.denormalize(corpus.records[3][0].data)
    again = corpus.normalize(raw)
    assert np.max(np.abs(again - corpus.records[3][0].data)) < 1e-6


def test_train_split_is_standardized(tmp_path):
    C.build_corpus(64, seed=5, out_dir=tmp_path)
    corpus = C.load_corpus(tmp_path)
    train, _, _ = corpus.splits()
    stacked = np.concatenate([corpus.records[i][0].data for i in train], axis=0)
    assert np.max(np.abs(stacked.mean(axis=0))) < 1e-3
    assert np.max(np.abs(stacked.std(axis=0) - 1.0)) < 1e-3


def test_corpus_determinism(tmp_path):
    C.build_corpus(8, seed=9, out_dir=tmp_path / "a")
    C.build_corpus(8, seed=9, out_dir=tmp_path / "b")
    assert (tmp_path / "a" / "motions.bin").read_bytes() == (tmp_path / "b" / "motions.bin").read_bytes()
    assert (tmp_path / "a" / "captions.txt").read_bytes() == (tmp_path / "b" / "captions.txt").read_bytes()
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()


def test_count_mismatch_detected(tmp_path):
    C.build_corpus(10, seed=1, out_dir=tmp_path)
    manifest_path = tmp_path / "manifest.json"
    text = manifest_path.read_text().replace('"count": 10', '"count": 9')
    manifest_path.write_text(text)
    with pytest.raises(CountError):
        C.load_corpus(tmp_path)


def test_corrupt_magic_is_format_error(tmp_path):
    C.build_corpus(4, seed=1, out_dir=tmp_path)
    p = tmp_path / "motions.bin"
    raw = bytearray(p.read_bytes())
    raw[:4] = b"XXXX"
    p.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        C.load_corpus(tmp_path)


def test_version_mismatch_detected(tmp_path):
    C.build_corpus(4, seed=1, out_dir=tmp_path)
    manifest_path = tmp_path / "manifest.json"
    text = manifest_path.read_text().replace('"version": "1"', '"version": "99"')
    manifest_path.write_text(text)
    with pytest.raises(VersionError):
        C.load_corpus(tmp_path)


def test_truncated_file_is_format_error(tmp_path):
    C.build_corpus(4, seed=1, out_dir=tmp_path)
    p = tmp_path / "motions.bin"
    p.write_bytes(p.read_bytes()[:-10])
    with pytest.raises(FormatError):
        C.load_corpus(tmp_path)


def test_std_strictly_positive(tmp_path):
    manifest = C.build_corpus(12, seed=2, out_dir=tmp_path)
    assert all(s > 0 for s in manifest["std"])
