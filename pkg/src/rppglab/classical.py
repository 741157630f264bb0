"""Conventional pulse extractors: skin masking, spatial averaging, CHROM, POS, ICA."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import signal as sps

from .metrics import BAND, power_spectrum
from .optics import PulseTrace, VideoTensor

log = logging.getLogger(__name__)

CR_RANGE = (133.0, 173.0)
CB_RANGE = (77.0, 127.0)
WINDOW_S = 1.6
POS_PROJECTION = np.array([[0.0, 1.0, -1.0], [-2.0, 1.0, 1.0]])


class SkinMaskError(ValueError):
    pass


@dataclass
class RgbTrace:
    """Spatially averaged skin colour, ``(T, 3)``."""

    values: np.ndarray
    fs: float

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValueError(f"trace must be (T, 3), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("trace contains non-finite values")
        if len(v) < 2 * self.fs:
            raise ValueError(f"trace of {len(v)} samples is shorter than 2 s at {self.fs} Hz")
        self.values = v

    def __len__(self) -> int:
        return len(self.values)


def rgb_to_crcb(rgb: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """BT.601 Cr, Cb of 0-255 RGB."""
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    return (r - y) * 0.713 + 128.0, (b - y) * 0.564 + 128.0


def skin_mask(video: VideoTensor, cr_range=CR_RANGE, cb_range=CB_RANGE) -> np.ndarray:
    """Boolean ``(H, W)`` mask of skin pixels in the temporal-mean frame."""
    if video.frames.size == 0:
        raise SkinMaskError("empty video")
    cr, cb = rgb_to_crcb(video.frames.mean(axis=0) * 255.0)
    mask = (cr >= cr_range[0]) & (cr <= cr_range[1]) & (cb >= cb_range[0]) & (cb <= cb_range[1])
    if not mask.any():
        raise SkinMaskError(
            f"no pixel falls inside Cr {cr_range} / Cb {cb_range}; "
            "override the thresholds via the cr_range/cb_range config entries")
    return mask


def spatial_average(video: VideoTensor, mask: np.ndarray | None = None) -> RgbTrace:
    if mask is None:
        mask = skin_mask(video)
    if not mask.any():
        raise SkinMaskError("mask is empty")
    return RgbTrace(video.frames[:, mask, :].mean(axis=1), video.fs)


def _window_len(fs: float) -> int:
    return int(math.ceil(WINDOW_S * fs))


def chrom(trace: RgbTrace) -> PulseTrace:
    """Chrominance method with Hann-weighted 50% overlap-add."""
    c = trace.values
    n = len(c)
    L = _window_len(trace.fs)
    L += L % 2
    hop = L // 2
    win = sps.get_window("hann", L)
    out = np.zeros(n)
    for start in range(0, n - L + 1, hop):
        seg = c[start:start + L]
        mu = seg.mean(axis=0)
        cn = seg / np.where(mu > 0, mu, 1.0) - 1.0
        x = 3.0 * cn[:, 0] - 2.0 * cn[:, 1]
        y = 1.5 * cn[:, 0] + cn[:, 1] - 1.5 * cn[:, 2]
        sy = y.std()
        s = x - (x.std() / sy) * y if sy > 0 else x
        out[start:start + L] += win * s
    return PulseTrace(out, trace.fs)


def pos(trace: RgbTrace) -> PulseTrace:
    """Plane-orthogonal-to-skin projection with stride-1 overlap-add."""
    c = trace.values
    n = len(c)
    L = _window_len(trace.fs)
    if n < L:
        raise ValueError("trace shorter than one POS window")
    windows = sliding_window_view(c, L, axis=0)            # (nw, 3, L)
    mu = windows.mean(axis=2, keepdims=True)
    cn = windows / np.where(mu > 0, mu, 1.0)
    s = np.einsum("ij,wjl->wil", POS_PROJECTION, cn)        # (nw, 2, L)
    s1, s2 = s[:, 0], s[:, 1]
    sd1, sd2 = s1.std(axis=1), s2.std(axis=1)
    alpha = np.divide(sd1, sd2, out=np.zeros_like(sd1), where=sd2 > 0)
    h = s1 + alpha[:, None] * s2
    h -= h.mean(axis=1, keepdims=True)
    out = np.zeros(n)
    for start in range(len(h)):
        out[start:start + L] += h[start]
    return PulseTrace(out, trace.fs)


def _whiten(x: np.ndarray):
    cov = x @ x.T / x.shape[1]
    evals, evecs = np.linalg.eigh(cov)
    keep = evals > 1e-12 * max(evals.max(), 1e-300)
    evals, evecs = evals[keep], evecs[:, keep]
    return (evecs / np.sqrt(evals)).T @ x


def fastica_deflation(x: np.ndarray, seed: int = 0, max_iter: int = 200, tol: float = 1e-6):
    """FastICA, one unit at a time, tanh contrast.

    ``x`` is ``(channels, samples)``.  Returns ``(sources, converged)``;
    on non-convergence the last iterate of that unit is kept.
    """
    z = _whiten(x - x.mean(axis=1, keepdims=True))
    m = z.shape[0]
    rng = np.random.default_rng(seed)
    W = np.zeros((m, m))
    converged = True
    for c in range(m):
        w = rng.standard_normal(m)
        w -= W[:c].T @ (W[:c] @ w)
        w /= np.linalg.norm(w)
        for _ in range(max_iter):
            u = w @ z
            g = np.tanh(u)
            w_new = (z * g).mean(axis=1) - (1.0 - g * g).mean() * w
            w_new -= W[:c].T @ (W[:c] @ w_new)
            w_new /= np.linalg.norm(w_new)
            done = abs(abs(w_new @ w) - 1.0) < tol
            w = w_new
            if done:
                break
        else:
            converged = False
        W[c] = w
    return W @ z, converged


def ica(trace: RgbTrace, seed: int = 0, max_iter: int = 200, tol: float = 1e-6) -> PulseTrace:
    """Blind source separation; returns the source with the largest in-band peak."""
    if len(trace) < 256:
        raise ValueError("ICA needs at least 256 samples")
    x = sps.detrend(trace.values, axis=0, type="linear")
    sd = x.std(axis=0)
    x = np.divide(x, sd, out=np.zeros_like(x), where=sd > 0)
    sources, converged = fastica_deflation(x.T, seed=seed, max_iter=max_iter, tol=tol)
    if not converged:
        log.info("FastICA did not converge in %d iterations", max_iter)
    best, best_peak = 0, -1.0
    for k, src in enumerate(sources):
        f, pw = power_spectrum(src, trace.fs)
        sel = (f >= BAND[0]) & (f <= BAND[1])
        peak = pw[sel].max() / max(pw.sum(), 1e-300)
        if peak > best_peak:
            best, best_peak = k, peak
    out = sources[best]
    if np.dot(out, x[:, 1]) < 0:
        out = -out
    return PulseTrace(out, trace.fs, meta={"converged": converged, "component": best})


EXTRACTORS = {"pos": pos, "chrom": chrom, "ica": ica}


def extract(video: VideoTensor, method: str, mask: np.ndarray | None = None) -> PulseTrace:
    """Skin mask, spatial average and the named extractor in one call."""
    try:
        fn = EXTRACTORS[method]
    except KeyError:
        raise ValueError(f"unknown classical method {method!r}; choose from {sorted(EXTRACTORS)}") from None
    return fn(spatial_average(video, mask))
