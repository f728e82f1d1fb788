"""Image-quality and attack-success metrics."""

from __future__ import annotations

import io
from functools import lru_cache

import numpy as np
import torch
from PIL import Image
from torch.nn import functional as F

from trail._validation import ContractError


@lru_cache(maxsize=None)
def _gaussian_window(size=11, sigma=1.5):
    coords = np.arange(size, dtype=np.float64) - size // 2
    g = np.exp(-(coords**2) / (2 * sigma**2))
    g /= g.sum()
    return torch.from_numpy(np.outer(g, g))


def ssim(x, x_hat, data_range=1.0):
    """Mean SSIM of two (C, H, W) images.

    11x11 Gaussian window with sigma 1.5, K1=0.01, K2=0.03, computed per
    channel over valid (unpadded) windows and averaged. Evaluated in float64.
    """
    a = torch.as_tensor(np.asarray(x) if not isinstance(x, torch.Tensor) else x).detach().double()
    b = torch.as_tensor(np.asarray(x_hat) if not isinstance(x_hat, torch.Tensor) else x_hat).detach().double()
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.ndim != 3:
        raise ContractError("ssim expects single (C, H, W) images")
    if min(a.shape[1:]) < 11:
        raise ContractError("ssim needs images of at least 11x11 pixels")
    c = a.shape[0]
    win = _gaussian_window().expand(c, 1, 11, 11)
    a = a.unsqueeze(0)
    b = b.unsqueeze(0)

    def filt(v):
        return F.conv2d(v, win, groups=c)

    mu_a, mu_b = filt(a), filt(b)
    s_aa = filt(a * a) - mu_a**2
    s_bb = filt(b * b) - mu_b**2
    s_ab = filt(a * b) - mu_a * mu_b
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * s_ab + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (s_aa + s_bb + c2)
    return float((num / den).mean())


def mean_ssim(X, X_hat):
    return float(np.mean([ssim(a, b) for a, b in zip(X, X_hat)]))


def jpeg_defense(x_hat, quality=75):
    """JPEG encode/decode round trip of a (C, H, W) image in [0, 1].

    Chroma is kept at full resolution (4:4:4) so ``quality`` alone sets the
    strength; 4:2:0 subsampling would smear the small coloured shapes even
    at quality 100.
    """
    if not isinstance(quality, (int, np.integer)) or not 1 <= quality <= 100:
        raise ContractError(f"JPEG quality must be an integer in [1, 100], got {quality!r}")
    arr = np.asarray(x_hat.detach().cpu() if isinstance(x_hat, torch.Tensor) else x_hat)
    arr = np.clip(np.rint(arr * 255), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="RGB").save(buf, format="JPEG", quality=int(quality), subsampling=0)
    buf.seek(0)
    with Image.open(buf) as im:
        out = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    out = out.transpose(2, 0, 1).copy()
    return torch.from_numpy(out) if isinstance(x_hat, torch.Tensor) else out


def asr(results, target):
    """Fraction of results whose prediction on ``target`` differs from the true label."""
    results = list(results)
    if not results:
        raise ContractError("asr needs at least one result")
    flags = []
    for r in results:
        if target not in r.success:
            raise KeyError(f"unknown target {target!r}")
        flags.append(bool(r.success[target]))
    return float(np.mean(flags))


def transfer_matrix(results_by_surrogate, targets=None):
    """ASR table ``{surrogate: {target: asr}}`` and black-box averages.

    The average for a surrogate excludes its own (white-box) column and is
    ``None`` when there is no other target.
    """
    matrix = {}
    averages = {}
    for surrogate, results in results_by_surrogate.items():
        results = list(results)
        if not results:
            raise ContractError(f"no results for surrogate {surrogate!r}")
        cols = targets if targets is not None else sorted(results[0].success)
        row = {}
        for target in cols:
            if any(target not in r.success for r in results):
                raise ContractError(f"missing cell ({surrogate}, {target})")
            row[target] = asr(results, target)
        matrix[surrogate] = row
        black_box = [v for k, v in row.items() if k != surrogate]
        averages[surrogate] = float(np.mean(black_box)) if black_box else None
    return matrix, averages
