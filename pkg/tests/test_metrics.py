import numpy as np
import pytest

from motok import corpus as C
from motok import metrics as M
from motok.errors import DataError


def test_motion_features_constant_channel():
    data = np.full((10, 2), 3.0, dtype=np.float32)
    f = M.motion_features(data)
    assert np.allclose(f[:4], [3.0, 0.0, 0.0, 0.0])


def test_motion_features_hand_computed():
    data = np.array([[0.0], [1.0], [2.0], [3.0]], dtype=np.float32)
    f = M.motion_features(data)
    assert f[0] == pytest.approx(1.5)
    assert f[1] == pytest.approx(np.sqrt(1.25), abs=1e-5)  # population std 1.118
    assert f[2] == pytest.approx(1.0)
    assert f[3] == pytest.approx(3.0)


def test_motion_features_needs_two_frames():
    with pytest.raises(DataError):
        M.motion_features(np.zeros((1, 4), dtype=np.float32))


def test_motion_features_caption_invariant_by_construction():
    rng = np.random.default_rng(0)
    data = rng.normal(size=(20, 8)).astype(np.float32)
    assert np.array_equal(M.motion_features(data), M.motion_features(data.copy()))


def test_toy_fid_identical_sets_zero():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(50, 6))
    assert M.toy_fid(a, a) == pytest.approx(0.0, abs=1e-6)


def test_toy_fid_unit_gaussians_closed_form():
    rng = np.random.default_rng(2)
    a = rng.normal(size=(400, 1))
    a = (a - a.mean()) / a.std(ddof=1)  # exact sample moments
    b = a.copy() + 3.0
    assert M.toy_fid(a, b) == pytest.approx(9.0, abs=1e-3)


def test_toy_fid_symmetry():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(40, 5))
    b = rng.normal(size=(40, 5)) + 0.5
    assert abs(M.toy_fid(a, b) - M.toy_fid(b, a)) < 1e-6


def test_toy_fid_translation_invariance_of_fit():
    rng = np.random.default_rng(4)
    a = rng.normal(size=(60, 4))
    b = rng.normal(size=(60, 4)) * 1.4
    shift = rng.normal(size=4)
    assert M.toy_fid(a, b) == pytest.approx(M.toy_fid(a + shift, b + shift), abs=1e-6)


def test_toy_fid_sample_size_error():
    with pytest.raises(DataError):
        M.toy_fid(np.zeros((1, 4)), np.zeros((10, 4)))


def test_classifier_on_known_params():
    m = C.generate_motion("run", speed=1.8, direction=0.0, amplitude=1.0, frames=80, seed=3)
    assert M.classify_motion(m.data) == ("run", "quick", "forward")
    m = C.generate_motion("turn_left", speed=0.5, direction=2.0, amplitude=1.0, frames=80, seed=4)
    assert M.classify_motion(m.data) == ("turn_left", "slow", "left")
    m = C.generate_motion("jump", speed=1.0, direction=np.pi, amplitude=1.0, frames=80, seed=5)
    assert M.classify_motion(m.data) == ("jump", "normal", "backward")
    m = C.generate_motion("walk", speed=1.0, direction=-np.pi / 2, amplitude=0.8, frames=80, seed=6)
    assert M.classify_motion(m.data) == ("walk", "normal", "right")


@pytest.fixture(scope="module")
def oracle_corpus(tmp_path_factory):
    path = tmp_path_factory.mktemp("oracle")
    C.build_corpus(300, seed=123, out_dir=path)
    return C.load_corpus(path)


def test_semantic_accuracy_oracle_self_consistency(oracle_corpus):
    corpus = oracle_corpus
    raws = [corpus.denormalize(rec.data) for rec, _ in corpus.records]
    caps = [rec.caption for rec, _ in corpus.records]
    assert M.semantic_accuracy(raws, caps) >= 0.99


def test_semantic_accuracy_chance_level_under_permutation(oracle_corpus):
    corpus = oracle_corpus
    raws = [corpus.denormalize(rec.data) for rec, _ in corpus.records]
    caps = [rec.caption for rec, _ in corpus.records]
    rng = np.random.default_rng(7)
    perm = rng.permutation(len(caps))
    acc = M.semantic_accuracy(raws, [caps[i] for i in perm])
    distinct = len({C.parse_caption(c) for c in caps})
    chance = 1.0 / distinct
    assert 0.5 * chance <= acc <= 1.5 * chance


def test_semantic_accuracy_empty_set_is_error():
    with pytest.raises(DataError):
        M.semantic_accuracy([], [])


def test_unparsable_caption_counts_as_mismatch():
    m = C.generate_motion("walk", 1.0, 0.0, 1.0, frames=64, seed=9)
    acc = M.semantic_accuracy([m.data, m.data], [m.caption, "gibberish text"])
    assert acc == pytest.approx(0.5)


def test_ci95_zero_for_single_repeat():
    assert M._ci95([3.0]) == 0.0
    assert M._ci95([1.0, 2.0, 3.0]) > 0.0
