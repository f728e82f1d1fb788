"""Attack strength vs. fidelity as the noising depth t* varies."""

from __future__ import annotations

import copy
import warnings

import numpy as np
from scipy.stats import spearmanr

from trail._validation import ContractError
from trail.data import quantize
from trail.evaluation.metrics import mean_ssim


def sweep_tstar(attack, X, y, t_stars, indices=None):
    """Rows ``{"t_star", "asr", "ssim"}`` for a :class:`~trail.tta.TrailAttack`
    re-run at each ``t_star`` with everything else fixed. ASR is against the
    attack's own surrogate."""
    t_stars = [int(t) for t in t_stars]
    if len(t_stars) < 2 or len(set(t_stars)) != len(t_stars):
        raise ContractError("sweep needs at least two distinct t* values")
    X = np.asarray(X)
    y = np.asarray(y)
    rows = []
    for t_star in t_stars:
        # shallow copy: sklearn.clone would drop the fitted sub-models
        est = copy.copy(attack).set_params(t_star=t_star)
        adv = quantize(est.transform(X, y, indices=indices))
        pred = attack.surrogate.predict(adv)
        rows.append({"t_star": t_star, "asr": float(np.mean(pred != y)), "ssim": mean_ssim(X, adv)})
    return rows


def trend(rows):
    """Spearman correlations of (t*, ASR) and (t*, SSIM); NaN when a column is constant."""
    t = [r["t_star"] for r in rows]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rho_asr = spearmanr(t, [r["asr"] for r in rows]).statistic
        rho_ssim = spearmanr(t, [r["ssim"] for r in rows]).statistic
    return float(rho_asr), float(rho_ssim)
