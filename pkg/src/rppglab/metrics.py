"""Band-pass filtering, windowed heart-rate estimation and error metrics.

Evaluation protocol: filter the pulse estimate to 0.7-2.5 Hz, slide 30 s
windows with a 1 s stride, take the periodogram peak per window as the heart
rate, and compare against ground truth with MAE, RMSE, waveform PCC and SNR.
Group-level bias is the population standard deviation of per-group errors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import signal as sps

BAND = (0.7, 2.5)
SNR_BAND = (0.75, 2.5)
SNR_HALF_WIDTH = 0.1
WINDOW_S = 30.0
STRIDE_S = 1.0
RESOLUTION_BPM = 0.5
GROUPS = ("F1-2", "F3-4", "F5-6")


# ---------------------------------------------------------------------------
# Filtering
# ---------------------------------------------------------------------------

def _zero_phase_edges(lo: float, hi: float, fs: float, order: int) -> tuple[float, float]:
    """Design edges whose forward-backward response is -3 dB at ``lo``/``hi``.

    Filtering twice squares the magnitude, so each pass must sit at -1.5 dB
    at the requested cutoffs.  Solved in the bilinear-prewarped domain, where
    the band-pass prototype frequency is ``(w^2 - w0^2) / (w * B)``.
    """
    k = (math.sqrt(2.0) - 1.0) ** (1.0 / (2 * order))
    a, b = math.tan(math.pi * lo / fs), math.tan(math.pi * hi / fs)
    width = (b - a) / k
    centre2 = a * b
    w_hi = (width + math.sqrt(width * width + 4 * centre2)) / 2
    w_lo = centre2 / w_hi
    return fs / math.pi * math.atan(w_lo), fs / math.pi * math.atan(w_hi)


def butterworth_bandpass(x, fs: float, lo: float = BAND[0], hi: float = BAND[1],
                         order: int = 2) -> np.ndarray:
    """Zero-phase Butterworth band-pass with -3 dB points at ``lo`` and ``hi``."""
    if fs <= 2 * hi:
        raise ValueError(f"fs={fs} Hz too low for a {hi} Hz upper cutoff")
    f_lo, f_hi = _zero_phase_edges(lo, hi, fs, order)
    if f_hi >= fs / 2:
        raise ValueError(f"fs={fs} Hz too low for zero-phase design at {hi} Hz")
    sos = sps.butter(order, [f_lo, f_hi], btype="bandpass", fs=fs, output="sos")
    return sps.sosfiltfilt(sos, np.asarray(x, dtype=float))


def bandpass_response(freqs, fs: float, lo: float = BAND[0], hi: float = BAND[1],
                      order: int = 2) -> np.ndarray:
    """Amplitude gain of the forward-backward filter at ``freqs``.

    The zero-phase cascade applies the single-pass response twice, so its gain
    is ``|H|^2``; in decibels use ``20 * log10``.
    """
    f_lo, f_hi = _zero_phase_edges(lo, hi, fs, order)
    sos = sps.butter(order, [f_lo, f_hi], btype="bandpass", fs=fs, output="sos")
    _, h = sps.sosfreqz(sos, worN=np.asarray(freqs, dtype=float), fs=fs)
    return np.abs(h) ** 2


# ---------------------------------------------------------------------------
# Spectra and heart rate
# ---------------------------------------------------------------------------

def nfft_for(fs: float, n: int, resolution_bpm: float = RESOLUTION_BPM) -> int:
    return max(n, int(round(fs * 60.0 / resolution_bpm)))


def power_spectrum(x, fs: float, resolution_bpm: float = RESOLUTION_BPM):
    """One-sided Hann-windowed periodogram zero-padded to ``resolution_bpm`` bins.

    The taper keeps sidelobe leakage out of the SNR mask and stops the
    peak of a drifting rate from hopping between sidelobes.
    """
    x = np.asarray(x, dtype=float)
    return sps.periodogram(x, fs=fs, window="hann", nfft=nfft_for(fs, len(x), resolution_bpm),
                           detrend="constant", scaling="spectrum")


def peak_frequency(x, fs: float, band=BAND, resolution_bpm: float = RESOLUTION_BPM) -> float:
    f, pxx = power_spectrum(x, fs, resolution_bpm)
    sel = (f >= band[0]) & (f <= band[1])
    if not np.any(pxx[sel] > 0):
        return float("nan")
    return float(f[sel][np.argmax(pxx[sel])])


def window_starts(n: int, fs: float, window_s: float = WINDOW_S, stride_s: float = STRIDE_S):
    win = int(round(window_s * fs))
    hop = int(round(stride_s * fs))
    if n < win:
        raise ValueError(f"signal of {n / fs:.1f} s is shorter than a {window_s} s window")
    return np.arange(0, n - win + 1, hop), win


@dataclass
class HrSeries:
    bpm: np.ndarray
    window_s: float = WINDOW_S
    stride_s: float = STRIDE_S

    def __post_init__(self):
        self.bpm = np.asarray(self.bpm, dtype=float)

    def __len__(self) -> int:
        return len(self.bpm)

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.bpm)


def estimate_hr(pulse, fs: float, window_s: float = WINDOW_S, stride_s: float = STRIDE_S,
                band=BAND, resolution_bpm: float = RESOLUTION_BPM) -> HrSeries:
    """Per-window periodogram peak inside ``band``, in BPM.

    An all-zero window yields NaN (a missing estimate).
    """
    x = np.asarray(pulse, dtype=float)
    starts, win = window_starts(len(x), fs, window_s, stride_s)
    out = np.empty(len(starts))
    for j, s in enumerate(starts):
        seg = x[s:s + win]
        out[j] = np.nan if not np.any(seg) else 60.0 * peak_frequency(seg, fs, band, resolution_bpm)
    return HrSeries(out, window_s, stride_s)


def hr_from_profile(profile, n: int, fs: float, window_s: float = WINDOW_S,
                    stride_s: float = STRIDE_S) -> HrSeries:
    """Ground-truth series: mean profile rate over each window."""
    starts, win = window_starts(n, fs, window_s, stride_s)
    bpm = profile.bpm_at(np.arange(n) / fs)
    return HrSeries(np.array([bpm[s:s + win].mean() for s in starts]), window_s, stride_s)


# ---------------------------------------------------------------------------
# Error metrics
# ---------------------------------------------------------------------------

def _aligned(est: HrSeries, gt: HrSeries) -> tuple[np.ndarray, np.ndarray]:
    e, g = np.asarray(getattr(est, "bpm", est), float), np.asarray(getattr(gt, "bpm", gt), float)
    if e.shape != g.shape:
        raise ValueError(f"series length mismatch: {e.shape} vs {g.shape}")
    ok = np.isfinite(e) & np.isfinite(g)
    return e[ok], g[ok]


def mae(est, gt) -> float:
    e, g = _aligned(est, gt)
    return float(np.mean(np.abs(e - g))) if len(e) else float("nan")


def rmse(est, gt) -> float:
    e, g = _aligned(est, gt)
    return float(np.sqrt(np.mean((e - g) ** 2))) if len(e) else float("nan")


def _np_sum(x):
    return np.sum(x, axis=-1)


def pearson_terms(p, q, sum_fn: Callable = _np_sum):
    """Numerator and the two variance terms of the Pearson coefficient.

    Written in raw-sum form over the last axis, so it runs unchanged on plain
    arrays and on differentiable tensors (pass a matching ``sum_fn``).
    """
    T = p.shape[-1]
    sp, sq = sum_fn(p), sum_fn(q)
    num = T * sum_fn(p * q) - sp * sq
    vp = T * sum_fn(p * p) - sp * sp
    vq = T * sum_fn(q * q) - sq * sq
    return num, vp, vq


def pcc(p, p_hat) -> float:
    p, q = np.asarray(p, float), np.asarray(p_hat, float)
    if p.shape != q.shape or p.ndim != 1 or len(p) < 2:
        raise ValueError("pcc needs two equal-length 1-D signals of length >= 2")
    num, vp, vq = pearson_terms(p, q)
    den = np.sqrt(vp * vq)
    if not den > 0:
        raise ValueError("pcc undefined: a signal has zero variance")
    return float(num / den)


def snr_from_spectrum(freqs, power, f_hr: float, band=SNR_BAND,
                      half_width: float = SNR_HALF_WIDTH) -> float:
    """``10 log10`` of in-mask over out-of-mask power inside ``band``.

    The mask covers ``f_hr +- half_width`` and ``2 f_hr +- half_width``.
    Returns ``inf`` when no power falls outside the mask.
    """
    f, pw = np.asarray(freqs, float), np.asarray(power, float)
    inband = (f >= band[0]) & (f <= band[1])
    mask = (np.abs(f - f_hr) <= half_width) | (np.abs(f - 2 * f_hr) <= half_width)
    signal_p = pw[inband & mask].sum()
    noise_p = pw[inband & ~mask].sum()
    if noise_p <= 0:
        return float("inf")
    if signal_p <= 0:
        return float("-inf")
    return float(10.0 * np.log10(signal_p / noise_p))


def snr(pulse, fs: float, gt_hr, window_s: float = WINDOW_S, stride_s: float = STRIDE_S,
        resolution_bpm: float = RESOLUTION_BPM) -> float:
    """Window-averaged SNR (dB) of a pulse estimate around the true rate.

    ``gt_hr`` is a scalar BPM or an :class:`HrSeries` aligned with the windows.
    """
    x = np.asarray(pulse, float)
    starts, win = window_starts(len(x), fs, window_s, stride_s)
    gt = np.broadcast_to(np.asarray(getattr(gt_hr, "bpm", gt_hr), float), (len(starts),))
    vals = []
    for s, hr in zip(starts, gt):
        if not np.isfinite(hr):
            continue
        f, pw = power_spectrum(x[s:s + win], fs, resolution_bpm)
        vals.append(snr_from_spectrum(f, pw, hr / 60.0))
    return float(np.mean(vals)) if vals else float("nan")


def windowed_pcc(est, ref, fs: float, window_s: float = WINDOW_S, stride_s: float = STRIDE_S) -> float:
    est, ref = np.asarray(est, float), np.asarray(ref, float)
    starts, win = window_starts(len(est), fs, window_s, stride_s)
    vals = []
    for s in starts:
        a, b = ref[s:s + win], est[s:s + win]
        if np.std(a) > 0 and np.std(b) > 0:
            vals.append(pcc(a, b))
    return float(np.mean(vals)) if vals else float("nan")


def population_std(values: Iterable[float]) -> float:
    v = np.asarray(list(values), float)
    return float(np.sqrt(np.mean((v - v.mean()) ** 2)))


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass
class SubjectMetrics:
    subject_id: str
    fitzpatrick: str
    group: str
    mae: float
    rmse: float
    pcc: float
    snr: float
    hr_est: np.ndarray = field(repr=False, default=None)
    hr_gt: np.ndarray = field(repr=False, default=None)


def evaluate_pulse(subject_id: str, fitzpatrick: str, group: str, estimate, fs: float,
                   gt_pulse, gt_hr: HrSeries, window_s: float = WINDOW_S,
                   stride_s: float = STRIDE_S, band=BAND) -> SubjectMetrics:
    """Apply the full protocol to one subject's pulse estimate."""
    est_f = butterworth_bandpass(estimate, fs, *band)
    ref_f = butterworth_bandpass(gt_pulse, fs, *band)
    hr = estimate_hr(est_f, fs, window_s, stride_s, band)
    return SubjectMetrics(
        subject_id, fitzpatrick, group,
        mae=mae(hr, gt_hr), rmse=rmse(hr, gt_hr),
        pcc=windowed_pcc(est_f, ref_f, fs, window_s, stride_s),
        snr=snr(est_f, fs, gt_hr, window_s, stride_s),
        hr_est=hr.bpm, hr_gt=np.asarray(gt_hr.bpm),
    )


def _summary(rows: Sequence[SubjectMetrics]) -> dict:
    def avg(name):
        vals = np.array([getattr(r, name) for r in rows], float)
        vals = vals[~np.isnan(vals)]
        return float(np.mean(vals)) if len(vals) else float("nan")
    return {"n": len(rows), "mae": avg("mae"), "rmse": avg("rmse"),
            "pcc": avg("pcc"), "snr": avg("snr")}


@dataclass
class MetricsReport:
    method: str
    subjects: list[SubjectMetrics]
    groups: dict[str, dict] = field(default_factory=dict)
    overall: dict = field(default_factory=dict)

    @classmethod
    def from_subjects(cls, method: str, rows: Sequence[SubjectMetrics]) -> "MetricsReport":
        groups = {g: _summary([r for r in rows if r.group == g])
                  for g in GROUPS if any(r.group == g for r in rows)}
        return cls(method, list(rows), groups, _summary(rows))

    @property
    def bias(self) -> dict:
        try:
            std_mae, std_rmse = bias_std(self)
        except ValueError:
            return {"std_mae": None, "std_rmse": None}
        return {"std_mae": std_mae, "std_rmse": std_rmse}


def bias_std(report) -> tuple[float, float]:
    """Population std of per-group MAE and RMSE.

    ``report`` is a :class:`MetricsReport` or a mapping group -> {mae, rmse}.
    """
    groups = report.groups if isinstance(report, MetricsReport) else report
    groups = {k: v for k, v in groups.items() if v.get("n", 1) > 0}
    if len(groups) < 2:
        raise ValueError("bias needs at least two groups with estimates")
    return (population_std(g["mae"] for g in groups.values()),
            population_std(g["rmse"] for g in groups.values()))
