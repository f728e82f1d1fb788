import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from trail._validation import ConfigurationError, ContractError
from trail.codec import identity_codec
from trail.denoiser import DenoiserModel, ZeroDenoiser
from trail.evaluation.bound import BoundParams, bound_rhs, drift_samples, verify_bound
from trail.schedule import build_linear_schedule


def test_rhs_example():
    log_inv = math.log(10) * 1.3010299956639813  # = log(20)
    expected = 0.5 * (0.5 + 16 + 2 * math.sqrt(16 * math.log(20)) + 2 * math.log(20))
    assert bound_rhs(BoundParams(C=1.0, d_z=16, delta=0.05, sigma_sq_tstar=0.5)) == pytest.approx(expected)
    assert log_inv == pytest.approx(math.log(20))


@pytest.mark.parametrize("kw", [{"delta": 0.0}, {"delta": 1.0}, {"C": -1.0}, {"d_z": 0}])
def test_params_validated(kw):
    base = dict(C=1.0, d_z=4, delta=0.1, sigma_sq_tstar=0.1)
    base.update(kw)
    with pytest.raises(ConfigurationError):
        BoundParams(**base)


params = st.tuples(st.floats(0, 100), st.integers(1, 10000), st.floats(1e-4, 0.99), st.floats(1e-4, 1.0))


@settings(max_examples=100, deadline=None)
@given(params, st.floats(1.01, 3.0))
def test_rhs_monotone(p, factor):
    C, d, delta, s2 = p
    base = bound_rhs(BoundParams(C, d, delta, s2))
    assert bound_rhs(BoundParams(C * factor + 1e-3, d, delta, s2)) >= base
    assert bound_rhs(BoundParams(C, d + 1, delta, s2)) > base
    assert bound_rhs(BoundParams(C, d, delta, min(s2 * factor, 1.0))) >= base
    assert bound_rhs(BoundParams(C, d, min(delta * factor, 0.999), s2)) <= base


def test_zero_denoiser_drift_is_pure_noise():
    # with eps_hat = 0 the chain is linear; drift at t*=1 is (1/sqrt(alpha)) * sqrt(1-alpha) * eps, minus z shift
    s = build_linear_schedule(80)
    z = torch.zeros(4000, 16, dtype=torch.float64)
    d = drift_samples(ZeroDenoiser(80), z, 1, s, torch.Generator().manual_seed(0))
    expected = 16 * (1 - s.alpha_bar(1)) / s.alpha(1)
    assert d.mean().item() == pytest.approx(expected, rel=0.05)


def test_trials_zero_rejected():
    den = DenoiserModel(latent_shape=(3, 32, 32), channels=8, t_dim=16, epochs=0).fit(torch.zeros(1, 3, 32, 32))
    with pytest.raises(ContractError):
        verify_bound(den, identity_codec(), den.schedule_, torch.rand(2, 3, 32, 32), [2], trials=0)


def test_untrained_rejected():
    den = DenoiserModel(latent_shape=(3, 32, 32), channels=8, t_dim=16, epochs=0).fit(torch.zeros(1, 3, 32, 32))
    with pytest.raises(ContractError):
        verify_bound(den, identity_codec(), den.schedule_, torch.rand(2, 3, 32, 32), [2], trials=10)


def test_report_structure_and_drift_growth():
    den = DenoiserModel(latent_shape=(3, 32, 32), channels=8, t_dim=16, epochs=0).fit(torch.zeros(1, 3, 32, 32))
    den.trained_ = True
    X = torch.rand(8, 3, 32, 32, generator=torch.Generator().manual_seed(0))
    report = verify_bound(den, identity_codec(), den.schedule_, X, [2, 4, 8], trials=40, seed=1)
    assert report["d_z"] == 3 * 32 * 32 and report["codec_mode"] == "identity"
    assert [r["t_star"] for r in report["rows"]] == [2, 4, 8]
    drifts = [r["mean_sq_drift"] for r in report["rows"]]
    assert drifts == sorted(drifts)
    bounds = [r["bound"] for r in report["rows"]]
    assert bounds == sorted(bounds)
    assert report["pass"] == all(r["violation_rate"] <= 0.1 for r in report["rows"])
