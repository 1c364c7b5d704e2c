import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from mixnet_pad.features import (DESCRIPTORS, FeatureVector, extract, extract_manifest,
                                 hog_features, lbp_histogram, load_features, load_svm,
                                 mirror_permutation, multiscale_lbp, predict_score, save_features,
                                 save_svm, train_svm)
from mixnet_pad.features import _kernels
from mixnet_pad.features.svm import fit_calibration

def _image(seed, kind):
    rng = np.random.default_rng(seed)
    if kind == "noise":
        return rng.integers(0, 256, (64, 64)).astype(np.float64)
    if kind == "blocks":   # flat patches: many exact 0/45/90 degree gradients
        return np.kron(rng.integers(0, 4, (8, 8)), np.ones((8, 8))) * 60.0
    return np.cumsum(rng.normal(size=(64, 64)), axis=1) * 3.0


images64 = st.builds(_image, st.integers(0, 2**32 - 1), st.sampled_from(["noise", "blocks", "ramp"]))


def rand_image(seed, shape=(64, 64)):
    return np.random.default_rng(seed).integers(0, 256, shape).astype(np.float64)


# -- LBP ----------------------------------------------------------------------

def test_uniform_lut_sizes():
    assert _kernels.uniform_lut(8).max() + 1 == 59
    assert _kernels.uniform_lut(16).max() + 1 == 243


@pytest.mark.parametrize("seed", range(3))
def test_lbp_histogram_is_normalised(seed):
    h = lbp_histogram(rand_image(seed, (20, 17)))
    assert h.shape == (59,)
    assert (h >= 0).all()
    assert abs(h.sum() - 1) < 1e-9


def test_constant_image_single_bin():
    h = lbp_histogram(np.full((10, 10), 77.0))
    assert np.count_nonzero(h) == 1 and h.max() == 1.0


def test_checkerboard_frozen():
    # dark centres see 8 brighter neighbours (code 255, last uniform bin);
    # bright centres see 8 darker ones (code 0, bin 0); half of each.
    board = (np.indices((8, 8)).sum(axis=0) % 2) * 255.0
    h = lbp_histogram(board)
    expected = np.zeros(59)
    expected[0] = expected[57] = 0.5
    assert np.array_equal(h, expected)
    assert np.array_equal(h, oracles.lbp_histogram(board))


@pytest.mark.parametrize("seed", range(20))
def test_lbp_matches_double_loop_oracle(seed):
    img = rand_image(100 + seed, (16, 16))
    assert np.array_equal(lbp_histogram(img), oracles.lbp_histogram(img))


@pytest.mark.parametrize("points,radius", [(8, 2.0), (16, 2.0)])
def test_other_scales_match_oracle(points, radius):
    img = rand_image(5, (16, 16))
    assert np.array_equal(lbp_histogram(img, points, radius), oracles.lbp_histogram(img, points, radius))


def test_lbp_too_small():
    with pytest.raises(ValueError, match="too small"):
        lbp_histogram(np.zeros((2, 5)))


def test_numba_and_numpy_codes_agree():
    if not _kernels.HAVE_NUMBA:
        pytest.skip("numba not installed")
    img = rand_image(9)
    for p, r in [(8, 1.0), (8, 2.0), (16, 2.0)]:
        assert np.array_equal(_kernels.lbp_codes_numpy(img, p, r), _kernels.lbp_codes_numba(img, p, r))


def test_env_flag_forces_numpy(monkeypatch):
    import importlib
    monkeypatch.setenv("MIXNET_NO_NUMBA", "1")
    mod = importlib.reload(_kernels)
    try:
        assert mod.USE_NUMBA is False
    finally:
        monkeypatch.delenv("MIXNET_NO_NUMBA")
        importlib.reload(_kernels)


# -- multi-scale LBP -------------------------------------------------------------

@settings(max_examples=15, deadline=None)
@given(images64, st.integers(1, 1000))
def test_lbp_variants_offset_invariant(img, offset):
    assert np.array_equal(multiscale_lbp(img), multiscale_lbp(img + offset))
    assert np.array_equal(lbp_histogram(img), lbp_histogram(img + offset))


def test_mslbp_length_and_constant_image():
    f = multiscale_lbp(np.full((64, 64), 10.0))
    assert f.shape == (833,)
    parts = np.split(f, np.cumsum([59] * 10))
    assert [len(p) for p in parts] == [59] * 10 + [243]
    for p in parts:
        assert np.count_nonzero(p) == 1


def test_mslbp_wrong_size():
    with pytest.raises(ValueError, match="64x64"):
        multiscale_lbp(np.zeros((48, 48)))


# -- HOG --------------------------------------------------------------------------

def test_hog_length_and_block_norms():
    f = hog_features(rand_image(1))
    assert f.shape == (324,)
    for block in f.reshape(4, 81):
        assert np.linalg.norm(block) <= 1 + 1e-6


def test_constant_image_zero_hog():
    assert not hog_features(np.full((64, 64), 200.0)).any()


def test_vertical_step_frozen():
    img = np.zeros((64, 64))
    img[:, 24:] = 255.0
    cells = _kernels.hog_cells(img, 16)
    expected = np.zeros((4, 4, 9))
    expected[:, 1, 0] = 2 * 16 * 255.0   # columns 23 and 24, angle 0
    assert np.array_equal(cells, expected)
    assert np.array_equal(cells, oracles.hog_cells(img))
    f = hog_features(img).reshape(4, 9, 9)
    assert (f.sum(axis=1).argmax(axis=1) == 0).all()


@pytest.mark.parametrize("seed", range(5))
def test_hog_cells_match_oracle(seed):
    img = rand_image(200 + seed)
    assert np.allclose(_kernels.hog_cells(img, 16), oracles.hog_cells(img), rtol=0, atol=1e-9)
    assert np.allclose(_kernels.hog_cells_numpy(img, 16), oracles.hog_cells(img), rtol=0, atol=1e-9)


def test_vertical_gradient_ties_split():
    img = np.repeat(np.arange(64.0)[:, None], 64, axis=1)   # gradient straight down: 90 degrees
    cells = _kernels.hog_cells(img, 16)
    assert np.allclose(cells[..., 4], cells[..., 5]) and cells[..., 4].min() > 0


@settings(max_examples=20, deadline=None)
@given(images64)
def test_hog_mirror_permutation(img):
    perm = mirror_permutation()
    assert sorted(perm) == list(range(324))
    np.testing.assert_allclose(hog_features(img[:, ::-1].copy()), hog_features(img)[perm],
                               rtol=0, atol=1e-12)


def test_hog_wrong_size():
    with pytest.raises(ValueError, match="64x64"):
        hog_features(np.zeros((48, 48)))


# -- descriptors and files --------------------------------------------------------

@pytest.mark.parametrize("descriptor", sorted(DESCRIPTORS))
def test_extract_lengths(descriptor):
    fv = extract(rand_image(3), descriptor)
    assert fv.values.shape == (DESCRIPTORS[descriptor],)
    assert fv.descriptor_id == descriptor


def test_unknown_descriptor():
    with pytest.raises(ValueError, match="unknown descriptor"):
        extract(rand_image(0), "sift")


def test_feature_file_roundtrip(tmp_path):
    x = np.random.default_rng(0).random((5, 383))
    data, meta = save_features(x, "lbp59+hog324", tmp_path / "f")
    assert data.stat().st_size == 5 * 383 * 4
    y, desc = load_features(tmp_path / "f")
    assert desc == "lbp59+hog324"
    assert np.array_equal(y, x.astype("<f4"))


def test_manifest_features_cached(toy, tmp_path, monkeypatch):
    monkeypatch.setenv("MIXNET_CACHE", str(tmp_path / "cache"))
    sub = toy.with_records(toy.records[:6])
    a = extract_manifest(sub, "mslbp")
    assert a.shape == (6, 833)
    assert len(list((tmp_path / "cache").glob("*.f32"))) == 1
    b = extract_manifest(sub, "mslbp")
    assert np.allclose(a, b, atol=1e-6)


# -- SVM ----------------------------------------------------------------------------

def fvs(x, desc="test"):
    return [FeatureVector(row, desc) for row in np.asarray(x, dtype=float)]


def two_clusters():
    rng = np.random.default_rng(0)
    x = np.vstack([rng.normal(-2, 0.3, (20, 2)), rng.normal(2, 0.3, (20, 2))])
    return x, np.array([0] * 20 + [1] * 20)


def test_separable_training_accuracy():
    x, y = two_clusters()
    m = train_svm(fvs(x), y)
    assert ((m.decision(x) > 0).astype(int) == y).mean() == 1.0


def test_flipped_labels_reverse_ordering():
    from mixnet_pad.evalmetrics import ScoredSample, roc_and_eer
    rng = np.random.default_rng(1)
    x = rng.normal(size=(40, 3))
    y = (x[:, 0] + 0.5 * rng.normal(size=40) > 0).astype(int)
    m = train_svm(fvs(x), y, {"C": [1.0], "gamma": [0.5]})
    mf = train_svm(fvs(x), 1 - y, {"C": [1.0], "gamma": [0.5]})
    d, df = m.decision(x), mf.decision(x)
    assert np.allclose(d, -df, atol=1e-2)   # solver tolerance

    def auc(scores, labels):
        s = (scores - scores.min()) / (np.ptp(scores) or 1)
        return roc_and_eer([ScoredSample(str(i), float(v), int(t))
                            for i, (v, t) in enumerate(zip(s, labels))]).auc
    assert auc(df, y) == pytest.approx(1 - auc(d, y), abs=0.01)


def test_xor_needs_rbf():
    rng = np.random.default_rng(2)
    x = rng.uniform(-1, 1, (80, 2))
    y = ((x[:, 0] > 0) ^ (x[:, 1] > 0)).astype(int)
    m = train_svm(fvs(x), y)
    assert ((m.decision(x) > 0).astype(int) == y).mean() > 0.9


def test_single_class_rejected():
    with pytest.raises(ValueError, match="both"):
        train_svm(fvs(np.zeros((4, 2))), [1, 1, 1, 1])


def test_predict_score_sides_and_mismatch():
    x, y = two_clusters()
    m = train_svm(fvs(x), y)
    sv = m.svc.support_vectors_[m.svc.predict(m.svc.support_vectors_) == 1][0]
    assert predict_score(m, FeatureVector(sv, "test")) > 0.5
    assert predict_score(m, FeatureVector(np.array([-5.0, -5.0]), "test")) < 0.5
    with pytest.raises(ValueError, match="descriptor mismatch"):
        predict_score(m, FeatureVector(np.zeros(2), "mslbp"))


def test_threshold_set_at_training_eer():
    x, y = two_clusters()
    m = train_svm(fvs(x), y)
    s = m.scores(x)
    assert s[y == 1].min() >= m.decision_threshold > s[y == 0].max()


def test_calibration_midpoint():
    a, b = fit_calibration([-1.0, 1.0], [0, 1])
    assert 1 / (1 + np.exp(-b)) == pytest.approx(0.5, abs=0.05)


def test_svm_file_roundtrip(tmp_path):
    x, y = two_clusters()
    m = train_svm(fvs(x), y)
    save_svm(m, tmp_path / "svm.bin")
    back = load_svm(tmp_path / "svm.bin")
    assert np.array_equal(back.scores(x), m.scores(x))
    assert back.descriptor_id == "test" and back.kernel == "rbf"
    (tmp_path / "junk").write_bytes(b"\x80\x04K\x01.")
    with pytest.raises(ValueError):
        load_svm(tmp_path / "junk")
