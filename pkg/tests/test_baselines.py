import numpy as np
import pytest
import torch
from torch.nn import functional as F

from conftest import LinearClassifier
from trail._validation import ConfigurationError
from trail.baselines import PGDAttack, PGDConfig, fgsm_attack, match_ssim_epsilon, pgd_attack

SHAPE = (3, 16, 16)


@pytest.fixture
def data():
    gen = torch.Generator().manual_seed(0)
    X = 0.1 + 0.8 * torch.rand(16, *SHAPE, generator=gen)
    clf = LinearClassifier(SHAPE, seed=3)
    return clf, X, torch.from_numpy(clf.predict(X))


def _reference_pgd(clf, x, y, eps, step, steps):
    """Plain loop with explicit clipping, kept separate from the library code."""
    x_adv = x.clone()
    for _ in range(steps):
        x_adv.requires_grad_(True)
        loss = F.nll_loss(clf.log_proba(x_adv), y, reduction="sum")
        (g,) = torch.autograd.grad(loss, x_adv)
        x_adv = x_adv.detach() + step * g.sign()
        x_adv = torch.clamp(x_adv, x - eps, x + eps).clamp(0.0, 1.0)
    return x_adv


@pytest.mark.parametrize("kw", [{"epsilon": -0.1}, {"steps": 0}, {"epsilon": 0.1, "step_size": 0.2}, {"targeted": True}])
def test_config_validation(kw):
    with pytest.raises(ConfigurationError):
        PGDConfig(**kw)


def test_matches_reference_loop(data):
    clf, X, y = data
    out = pgd_attack(clf, X, y, PGDConfig(8 / 255, 2 / 255, 10))
    ref = _reference_pgd(clf, X, y, 8 / 255, 2 / 255, 10)
    assert torch.allclose(out, ref, atol=1e-6)


def test_within_ball_and_range(data):
    clf, X, y = data
    for eps in (1 / 255, 4 / 255, 16 / 255):
        out = pgd_attack(clf, X, y, PGDConfig(eps, eps / 4, 10, random_start=True))
        assert (out - X).abs().max() <= eps + 1e-6
        assert out.min() >= 0 and out.max() <= 1


def test_zero_epsilon_identity(data):
    clf, X, y = data
    assert torch.equal(pgd_attack(clf, X, y, PGDConfig(0.0, 1.0, 5)), X)


def test_single_image(data):
    clf, X, y = data
    assert pgd_attack(clf, X[0], int(y[0]), PGDConfig()).shape == SHAPE


def test_white_box_strong_at_large_budget(data):
    clf, X, y = data
    out = PGDAttack(clf, epsilon=16 / 255, steps=20).transform(X, y)
    assert np.mean(clf.predict(out) != y.numpy()) >= 0.9


def test_fgsm_is_one_step(data):
    clf, X, y = data
    assert torch.allclose(fgsm_attack(clf, X, y, 4 / 255), _reference_pgd(clf, X, y, 4 / 255, 4 / 255, 1), atol=1e-6)


def test_targeted_moves_towards_target(data):
    clf, X, y = data
    target = int((y[0] + 1) % 10)
    cfg = PGDConfig(32 / 255, 4 / 255, 20, targeted=True, target_label=target)
    before = clf.log_proba(X[:1])[0, target].item()
    after = clf.log_proba(pgd_attack(clf, X[:1], y[:1], cfg))[0, target].item()
    assert after > before


def test_estimator_default_step(data):
    clf, _, _ = data
    assert PGDAttack(clf, epsilon=8 / 255).config().step_size == pytest.approx(2 / 255)


def test_ssim_matching(data):
    clf, X, y = data
    eps, achieved = match_ssim_epsilon(clf, X, y, 0.9, iters=10, quantize=False)
    assert abs(achieved - 0.9) < 0.02
    assert 0 < eps < 32 / 255
