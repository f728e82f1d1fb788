import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from skimage.metrics import structural_similarity

from trail._validation import ContractError
from trail.baselines import PGDConfig, pgd_attack
from trail.evaluation.metrics import asr, jpeg_defense, mean_ssim, ssim, transfer_matrix
from trail.evaluation.results import AttackResult


def _reference_ssim(a, b):
    return structural_similarity(
        a, b, data_range=1.0, channel_axis=0, gaussian_weights=True, sigma=1.5, use_sample_covariance=False
    )


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 0.5))
def test_ssim_matches_reference_implementation(seed, noise):
    rng = np.random.default_rng(seed)
    a = rng.random((3, 32, 32))
    b = np.clip(a + noise * rng.standard_normal(a.shape), 0, 1)
    assert ssim(a, b) == pytest.approx(_reference_ssim(a, b), abs=1e-6)


def test_ssim_identity_and_symmetry():
    rng = np.random.default_rng(0)
    a, b = rng.random((3, 24, 24)), rng.random((3, 24, 24))
    assert ssim(a, a) == pytest.approx(1.0)
    assert ssim(a, b) == pytest.approx(ssim(b, a))
    assert -1 <= ssim(a, b) <= 1


def test_ssim_accepts_tensors():
    a = torch.rand(3, 16, 16)
    assert ssim(a, a.clone()) == pytest.approx(1.0)


@pytest.mark.parametrize("b_shape", [(3, 32, 31), (1, 32, 32)])
def test_ssim_shape_mismatch(b_shape):
    with pytest.raises(ContractError):
        ssim(np.zeros((3, 32, 32)), np.zeros(b_shape))


def test_ssim_rejects_batches():
    with pytest.raises(ContractError):
        ssim(np.zeros((2, 3, 16, 16)), np.zeros((2, 3, 16, 16)))


def test_mean_ssim():
    rng = np.random.default_rng(1)
    X, Y = rng.random((3, 3, 16, 16)), rng.random((3, 3, 16, 16))
    assert mean_ssim(X, Y) == pytest.approx(np.mean([_reference_ssim(a, b) for a, b in zip(X, Y)]), abs=1e-6)


@pytest.mark.parametrize("quality", [0, 101, 75.5, "75"])
def test_jpeg_quality_validated(quality):
    with pytest.raises(ContractError):
        jpeg_defense(np.zeros((3, 8, 8)), quality)


def test_jpeg_high_quality_near_lossless():
    from trail.data import make_toy_dataset

    X, _ = make_toy_dataset(5, seed=1)
    for x in X:
        assert ssim(x, jpeg_defense(x, 100)) > 0.95


def test_jpeg_double_compression_stable():
    from trail.data import make_toy_dataset

    X, _ = make_toy_dataset(5, seed=2)
    for x in X:
        once = jpeg_defense(x, 75)
        twice = jpeg_defense(once, 75)
        assert abs(ssim(x, once) - ssim(x, twice)) < 0.05


def test_jpeg_keeps_tensor_type():
    out = jpeg_defense(torch.rand(3, 16, 16), 80)
    assert isinstance(out, torch.Tensor) and out.shape == (3, 16, 16)


def test_jpeg_weakens_small_pgd():
    """Against a tiny perturbation, JPEG should not help the attacker."""
    from conftest import LinearClassifier
    from trail.data import make_toy_dataset

    X, y = make_toy_dataset(40, seed=3)
    clf = LinearClassifier((3, 32, 32), seed=1)
    X_t = torch.from_numpy(X)
    y_pred = clf.predict(X)  # attack the classifier's own labels so every start is "clean-correct"
    adv = pgd_attack(clf, X_t, torch.from_numpy(y_pred), PGDConfig(epsilon=2 / 255, step_size=0.5 / 255, steps=10)).numpy()
    plain = np.mean(clf.predict(adv) != y_pred)
    defended = np.mean(clf.predict(np.stack([jpeg_defense(a, 75) for a in adv])) != y_pred)
    assert defended <= plain + 0.05


def _result(i, y, preds, jpeg=None, surrogate="a"):
    return AttackResult(i, "trail", surrogate, y, preds, 0.9, jpeg_predictions=jpeg or {})


def test_asr_counts_misclassifications():
    rs = [_result(0, 1, {"a": 1, "b": 2}), _result(1, 3, {"a": 0, "b": 3}), _result(2, 5, {"a": 4, "b": 4})]
    assert asr(rs, "a") == pytest.approx(2 / 3)
    assert asr(rs, "b") == pytest.approx(2 / 3)


def test_asr_errors():
    with pytest.raises(ContractError):
        asr([], "a")
    with pytest.raises(KeyError):
        asr([_result(0, 1, {"a": 1})], "zzz")


def test_clean_asr_is_one_minus_accuracy():
    from conftest import LinearClassifier

    rng = np.random.default_rng(0)
    X = rng.random((30, 3, 8, 8)).astype(np.float32)
    y = rng.integers(0, 10, 30)
    clf = LinearClassifier((3, 8, 8))
    pred = clf.predict(X)
    rs = [_result(i, int(y[i]), {"lin": int(pred[i])}) for i in range(30)]
    assert asr(rs, "lin") == 1 - np.mean(pred == y)


def test_transfer_matrix_and_average():
    rs = [_result(0, 1, {"a": 0, "b": 1, "c": 0}), _result(1, 1, {"a": 0, "b": 0, "c": 1})]
    matrix, avg = transfer_matrix({"a": rs})
    assert matrix == {"a": {"a": 1.0, "b": 0.5, "c": 0.5}}
    assert avg["a"] == pytest.approx(0.5)


def test_transfer_average_absent_without_black_box():
    matrix, avg = transfer_matrix({"a": [_result(0, 1, {"a": 0})]})
    assert avg["a"] is None


def test_transfer_matrix_missing_cell():
    rs = [_result(0, 1, {"a": 0, "b": 1}), _result(1, 1, {"a": 0})]
    with pytest.raises(ContractError):
        transfer_matrix({"a": rs})


def test_ssim_rejects_tiny_images():
    with pytest.raises(ContractError):
        ssim(np.zeros((3, 8, 8)), np.zeros((3, 8, 8)))
