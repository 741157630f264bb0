"""Dichromatic-reflection video simulator with ground-truth pulse.

Each skin pixel ``k`` is synthesised as

    C_k(t) = I0 * g_k * (1 + i(t)) * (u_c * c0 + u_s * s(t) + u_p * a * w_k * p(t)) + v_n(t)

where ``g_k`` is a radial face-like gain, ``w_k`` a per-pixel pulsatile
weight, ``i(t)``/``s(t)`` motion-induced intensity and specular modulations,
``p(t)`` the pulse and ``v_n`` Gaussian quantisation noise.  Frames are
clipped to [0, 1].
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter1d

log = logging.getLogger(__name__)

HR_MIN_BPM = 42.0
HR_MAX_BPM = 150.0

SCALES = ("I", "II", "III", "IV", "V", "VI")

# Versioned skin-tone table.  Invented constants: only their ordering matters
# to the experiments.  Colours are unnormalised linear RGB of the skin
# stationary reflection; c0 and the pulsatile scale fall monotonically I -> VI.
FITZPATRICK_TABLE_VERSION = 1
_SKIN_RGB = {
    "I": (1.00, 0.80, 0.72),
    "II": (1.00, 0.76, 0.64),
    "III": (1.00, 0.71, 0.55),
    "IV": (1.00, 0.65, 0.47),
    "V": (1.00, 0.58, 0.40),
    "VI": (1.00, 0.52, 0.36),
}
_C0 = {"I": 0.90, "II": 0.80, "III": 0.69, "IV": 0.57, "V": 0.46, "VI": 0.35}
_UP_SCALE = {"I": 1.0, "II": 0.9, "III": 0.8, "IV": 0.7, "V": 0.6, "VI": 0.5}
# share of the stationary term that is specular (s0 / c0)
_SPECULAR_SHARE = 0.08

U_P_BASE = (0.33, 0.77, 0.53)
U_S_DEFAULT = tuple(np.ones(3) / math.sqrt(3.0))
LUMA = np.array([0.299, 0.587, 0.114])


def parse_scale(scale) -> str:
    if isinstance(scale, (int, np.integer)) and 1 <= int(scale) <= 6:
        return SCALES[int(scale) - 1]
    s = str(scale).upper().removeprefix("F")
    if s.isdigit() and 1 <= int(s) <= 6:
        return SCALES[int(s) - 1]
    if s not in SCALES:
        raise ValueError(f"unknown Fitzpatrick scale {scale!r}")
    return s


def scale_index(scale) -> int:
    """1 (lightest) .. 6 (darkest)."""
    return SCALES.index(parse_scale(scale)) + 1


def scale_group(scale) -> str:
    i = scale_index(scale)
    return ("F1-2", "F3-4", "F5-6")[(i - 1) // 2]


@dataclass(frozen=True)
class FitzpatrickParams:
    u_c: tuple[float, float, float]
    c0: float
    up_scale: float


def fitzpatrick_params(scale) -> FitzpatrickParams:
    s = parse_scale(scale)
    rgb = np.asarray(_SKIN_RGB[s])
    u_c = rgb / np.linalg.norm(rgb)
    return FitzpatrickParams(tuple(float(v) for v in u_c), _C0[s], _UP_SCALE[s])


def stationary_decomposition(scale, u_s: Sequence[float] = U_S_DEFAULT):
    """Split ``u_c * c0`` into specular ``u_s * s0`` and diffuse ``u_d * d0``.

    Returns ``(s0, u_d, d0)``; raises if the split does not recombine.
    """
    fp = fitzpatrick_params(scale)
    u_s = np.asarray(u_s, dtype=float)
    combined = np.asarray(fp.u_c) * fp.c0
    s0 = _SPECULAR_SHARE * fp.c0
    diffuse = combined - u_s * s0
    d0 = float(np.linalg.norm(diffuse))
    u_d = diffuse / d0
    if np.any(u_d < 0):
        raise ValueError(f"diffuse colour of scale {scale} has a negative channel")
    if not np.allclose(u_s * s0 + u_d * d0, combined, rtol=0, atol=1e-12):
        raise AssertionError("stationary term does not recombine")
    return s0, u_d, d0


def luminance(frames: np.ndarray) -> float:
    """Mean luma of the temporal-mean frame of a (T, H, W, 3) array."""
    return float((np.asarray(frames).mean(axis=0) @ LUMA).mean())


# ---------------------------------------------------------------------------
# Pulse
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HrProfile:
    """Heart rate in BPM as knots ``(time_s, bpm)``.

    ``kind="linear"`` interpolates between knots, ``kind="step"`` holds each
    knot's value until the next one.  One knot means a constant rate.
    """

    knots: tuple[tuple[float, float], ...]
    kind: str = "linear"

    def __post_init__(self):
        if not self.knots:
            raise ValueError("HrProfile needs at least one knot")
        if self.kind not in ("linear", "step"):
            raise ValueError(f"unknown HrProfile kind {self.kind!r}")
        for _, bpm in self.knots:
            if not HR_MIN_BPM <= bpm <= HR_MAX_BPM:
                raise ValueError(f"heart rate {bpm} BPM outside [{HR_MIN_BPM}, {HR_MAX_BPM}]")

    @classmethod
    def constant(cls, bpm: float) -> "HrProfile":
        return cls(((0.0, float(bpm)),))

    @classmethod
    def linear(cls, start_bpm: float, end_bpm: float, duration_s: float) -> "HrProfile":
        return cls(((0.0, float(start_bpm)), (float(duration_s), float(end_bpm))))

    def bpm_at(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        times = np.array([k[0] for k in self.knots])
        bpms = np.array([k[1] for k in self.knots])
        if self.kind == "linear":
            return np.interp(t, times, bpms)
        idx = np.clip(np.searchsorted(times, t, side="right") - 1, 0, len(times) - 1)
        return bpms[idx]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "knots": [list(k) for k in self.knots]}

    @classmethod
    def from_dict(cls, d: dict) -> "HrProfile":
        return cls(tuple((float(a), float(b)) for a, b in d["knots"]), d.get("kind", "linear"))


@dataclass
class PulseTrace:
    samples: np.ndarray
    fs: float
    hr_profile: HrProfile | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        if self.fs <= 0:
            raise ValueError("fs must be positive")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.fs


def synth_pulse(hr: HrProfile, duration_s: float, fs: float, seed: int,
                harmonic: float = 0.3, phase_jitter: float = 0.05) -> PulseTrace:
    """Fundamental at the instantaneous heart rate plus one harmonic.

    The phase carries a small, smooth, seeded jitter that does not shift the
    spectral peak.  Output is zero-mean with unit standard deviation.
    """
    if duration_s <= 0:
        raise ValueError("duration must be positive")
    if fs < 20:
        raise ValueError(f"fs must be at least 20 Hz, got {fs}")
    n = int(round(duration_s * fs))
    t = np.arange(n) / fs
    bpm = hr.bpm_at(t)
    if np.any(bpm < HR_MIN_BPM) or np.any(bpm > HR_MAX_BPM):
        raise ValueError("heart rate profile leaves the 42-150 BPM range")
    freq = bpm / 60.0
    phase = 2 * np.pi * np.concatenate([[0.0], np.cumsum(0.5 * (freq[1:] + freq[:-1]) / fs)])
    rng = np.random.default_rng(seed)
    phase = phase + rng.uniform(0, 2 * np.pi)
    if phase_jitter > 0:
        jitter = gaussian_filter1d(rng.standard_normal(n), sigma=fs, mode="wrap")
        jitter *= phase_jitter / (jitter.std() + 1e-12)
        phase = phase + jitter
    theta = rng.uniform(-0.5 * np.pi, 0.5 * np.pi)
    p = np.sin(phase) + harmonic * np.sin(2 * phase + theta)
    p = p - p.mean()
    p = p / p.std()
    return PulseTrace(p, float(fs), hr)


# ---------------------------------------------------------------------------
# Scene and video
# ---------------------------------------------------------------------------

def _unit(v) -> tuple[float, float, float]:
    v = np.asarray(v, dtype=float)
    return tuple(float(x) for x in v / np.linalg.norm(v))


@dataclass(frozen=True)
class SceneConfig:
    I0: float = 1.0
    i_amp: float = 0.0
    i_freq: float = 0.3
    u_c: tuple[float, float, float] = field(default_factory=lambda: fitzpatrick_params("I").u_c)
    c0: float = 0.9
    u_s: tuple[float, float, float] = U_S_DEFAULT
    s_amp: float = 0.0
    s_freq: float = 0.2
    u_p: tuple[float, float, float] = U_P_BASE
    pulse_amp: float = 0.006
    noise_sigma: float = 0.0
    fitzpatrick: str = "I"
    seed: int = 0
    noise_seed: int | None = None
    falloff: float = 0.25
    heterogeneity: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "fitzpatrick", parse_scale(self.fitzpatrick))
        for name in ("u_c", "u_s", "u_p"):
            object.__setattr__(self, name, tuple(float(x) for x in getattr(self, name)))
        for name in ("u_c", "u_s"):
            norm = float(np.linalg.norm(getattr(self, name)))
            if abs(norm - 1.0) > 1e-9:
                raise ValueError(f"{name} must be a unit vector (norm {norm})")
        if self.I0 <= 0:
            raise ValueError("I0 must be positive")
        if self.noise_sigma < 0 or self.pulse_amp < 0:
            raise ValueError("noise_sigma and pulse_amp must be nonnegative")

    @classmethod
    def for_scale(cls, scale, **overrides) -> "SceneConfig":
        fp = fitzpatrick_params(scale)
        up = tuple(float(x) * fp.up_scale for x in U_P_BASE)
        kw = dict(u_c=fp.u_c, c0=fp.c0, u_p=up, fitzpatrick=parse_scale(scale))
        kw.update(overrides)
        return cls(**kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("u_c", "u_s", "u_p"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        return cls(**d)


@dataclass
class VideoTensor:
    """Frames ``(T, H, W, 3)`` in [0, 1] at ``fs`` frames per second."""

    frames: np.ndarray
    fs: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        f = np.asarray(self.frames)
        if f.ndim != 4 or f.shape[-1] != 3 or f.shape[0] < 1:
            raise ValueError(f"frames must be (T, H, W, 3), got {f.shape}")
        if f.size and (f.min() < 0 or f.max() > 1):
            raise ValueError("frame values must lie in [0, 1]")
        self.frames = f

    @property
    def shape(self):
        return self.frames.shape

    def __len__(self) -> int:
        return self.frames.shape[0]


def spatial_maps(cfg: SceneConfig, H: int, W: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel gain ``g_k`` and pulsatile weight ``w_k`` (both ``(H, W)``)."""
    yy, xx = np.meshgrid((np.arange(H) + 0.5) / H * 2 - 1,
                         (np.arange(W) + 0.5) / W * 2 - 1, indexing="ij")
    r2 = (xx ** 2 + yy ** 2) / 2.0  # 0 at the centre, ~1 at the corners
    gain = 1.0 - cfg.falloff * r2
    rng = np.random.default_rng([cfg.seed, 1])
    weight = (1.0 - 0.5 * cfg.falloff * r2) * (1.0 + cfg.heterogeneity * rng.standard_normal((H, W)))
    return gain, np.clip(weight, 0.0, None)


def motion_signals(cfg: SceneConfig, fs: float, T: int) -> tuple[np.ndarray, np.ndarray]:
    """The intensity ``i(t)`` and specular ``s(t)`` modulations."""
    rng = np.random.default_rng([cfg.seed, 2])
    phi_i, phi_s = rng.uniform(0, 2 * np.pi, size=2)
    t = np.arange(T) / fs
    i = cfg.i_amp * np.sin(2 * np.pi * cfg.i_freq * t + phi_i)
    s = cfg.s_amp * np.sin(2 * np.pi * cfg.s_freq * t + phi_s)
    return i, s


def synth_video(cfg: SceneConfig, pulse: PulseTrace, T: int, H: int, W: int) -> VideoTensor:
    if len(pulse) < T:
        raise ValueError(f"pulse has {len(pulse)} samples, need {T}")
    p = pulse.samples[:T]
    i, s = motion_signals(cfg, pulse.fs, T)
    gain, weight = spatial_maps(cfg, H, W)
    u_c, u_s, u_p = (np.asarray(v) for v in (cfg.u_c, cfg.u_s, cfg.u_p))

    # (T, 1, 1, 3) temporal colour terms, then per-pixel maps
    stationary = (u_c * cfg.c0)[None, None, None, :]
    specular = (s[:, None] * u_s)[:, None, None, :]
    pulsatile = (p[:, None] * u_p * cfg.pulse_amp)[:, None, None, :] * weight[None, :, :, None]
    frames = cfg.I0 * gain[None, :, :, None] * (1.0 + i)[:, None, None, None] \
        * (stationary + specular + pulsatile)
    if cfg.noise_sigma > 0:
        seed = cfg.noise_seed if cfg.noise_seed is not None else cfg.seed + 7919
        frames = frames + np.random.default_rng([seed, 3]).normal(0.0, cfg.noise_sigma, frames.shape)
    clipped = (frames < 0) | (frames > 1)
    frac = float(clipped.mean())
    frames = np.clip(frames, 0.0, 1.0)
    warn = frac > 0.05
    if warn:
        log.warning("%.1f%% of samples clipped; scene is ill-scaled", 100 * frac)
    meta = {"fitzpatrick": cfg.fitzpatrick, "clip_fraction": frac, "clip_warning": warn,
            "gain": gain, "pulse_weight": weight}
    return VideoTensor(frames, pulse.fs, meta)


# ---------------------------------------------------------------------------
# Pseudo targets
# ---------------------------------------------------------------------------

def tone_ratio(source_scale, target_scale) -> np.ndarray:
    src, dst = fitzpatrick_params(source_scale), fitzpatrick_params(target_scale)
    return np.asarray(dst.u_c) * dst.c0 / (np.asarray(src.u_c) * src.c0)


def pseudo_target(video: VideoTensor, target_scale, source_scale=None, seed: int = 0) -> VideoTensor:
    """Recolour to ``target_scale`` and destroy temporal pulse correspondence.

    The temporal-mean frame is recoloured channelwise by the table ratio; the
    residuals (motion, noise and pulse) are recoloured the same way but put
    back in a seeded random temporal order.
    """
    source_scale = source_scale or video.meta.get("fitzpatrick")
    if source_scale is None:
        raise ValueError("source skin scale unknown; pass source_scale")
    ratio = tone_ratio(source_scale, target_scale)
    frames = video.frames
    mean_frame = frames.mean(axis=0)
    perm = np.random.default_rng(seed).permutation(frames.shape[0])
    out = (mean_frame[None] + (frames - mean_frame[None])[perm]) * ratio
    meta = {k: v for k, v in video.meta.items()}
    meta.update(fitzpatrick=parse_scale(target_scale), pseudo_target=True)
    return VideoTensor(np.clip(out, 0.0, 1.0), video.fs, meta)


# ---------------------------------------------------------------------------
# Cohorts and datasets
# ---------------------------------------------------------------------------

VITAL_SCALE_COUNTS = (5, 16, 14, 11, 5, 7)
DARK_SCALES = ("V", "VI")


def _largest_remainder(weights: Sequence[float], n: int) -> list[int]:
    w = np.asarray(weights, dtype=float)
    raw = w / w.sum() * n
    counts = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - counts), kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


def random_scene(scale, rng: np.random.Generator, noise_sigma: float = 2e-3,
                 motion: float = 1.0, seed: int | None = None) -> SceneConfig:
    """Draw subject-level nuisance parameters for a scene of ``scale``."""
    return SceneConfig.for_scale(
        scale,
        I0=float(rng.uniform(0.85, 1.0)),
        i_amp=float(motion * rng.uniform(0.002, 0.01)),
        i_freq=float(rng.uniform(0.1, 2.4)),
        s_amp=float(motion * rng.uniform(0.001, 0.006)),
        s_freq=float(rng.uniform(0.1, 2.4)),
        pulse_amp=float(rng.uniform(0.004, 0.008)),
        noise_sigma=noise_sigma,
        seed=int(seed if seed is not None else rng.integers(2**31)),
    )


def random_hr(rng: np.random.Generator, lo: float = 50.0, hi: float = 110.0,
              duration_s: float | None = None, drift: float = 0.0) -> HrProfile:
    start = float(rng.uniform(lo, hi))
    if drift and duration_s:
        end = float(np.clip(start + rng.uniform(-drift, drift), HR_MIN_BPM, HR_MAX_BPM))
        return HrProfile.linear(start, end, duration_s)
    return HrProfile.constant(start)


def ubfc_like_scales(n: int, seed: int, dark_fraction: float = 0.05) -> list[str]:
    """Light-dominated training mix: ``round(dark_fraction * n)`` subjects at V-VI."""
    rng = np.random.default_rng([seed, 11])
    n_dark = int(round(dark_fraction * n))
    light = rng.choice(["I", "II", "III", "IV"], size=n - n_dark, p=[0.3, 0.4, 0.2, 0.1])
    dark = rng.choice(DARK_SCALES, size=n_dark)
    scales = [str(s) for s in light] + [str(s) for s in dark]
    return [scales[i] for i in rng.permutation(n)]


def vital_like_scales(n: int = 58) -> list[str]:
    """Balanced evaluation mix proportional to 5/16/14/11/5/7 across I-VI."""
    counts = _largest_remainder(VITAL_SCALE_COUNTS, n)
    return [s for s, c in zip(SCALES, counts) for _ in range(c)]


def build_cohort(scales: Sequence[str], seed: int, noise_sigma: float = 2e-3,
                 hr_range: tuple[float, float] = (50.0, 110.0), motion: float = 1.0,
                 duration_s: float | None = None, drift: float = 0.0):
    """One ``(SceneConfig, HrProfile)`` pair per entry of ``scales``."""
    out = []
    for k, scale in enumerate(scales):
        rng = np.random.default_rng([seed, 101, k])
        scene = random_scene(scale, rng, noise_sigma=noise_sigma, motion=motion,
                             seed=int(np.random.SeedSequence([seed, k]).generate_state(1)[0]))
        out.append((scene, random_hr(rng, *hr_range, duration_s=duration_s, drift=drift)))
    return out


@dataclass
class Subject:
    """An in-memory simulated subject."""

    subject_id: str
    video: VideoTensor
    pulse: PulseTrace
    scene: SceneConfig
    split: str = "train"

    @property
    def fitzpatrick(self) -> str:
        return self.scene.fitzpatrick


def simulate_subject(subject_id: str, scene: SceneConfig, hr: HrProfile, duration_s: float,
                     fs: float, size: int, quantize: bool = False, split: str = "train") -> Subject:
    pulse = synth_pulse(hr, duration_s, fs, seed=scene.seed)
    video = synth_video(scene, pulse, len(pulse), size, size)
    if quantize:
        video.frames = np.round(video.frames * 255.0) / 255.0
    video.frames = video.frames.astype(np.float32)
    return Subject(subject_id, video, pulse, scene, split)


def assign_splits(n: int, split_ratios: dict[str, float], seed: int) -> list[str]:
    names = list(split_ratios)
    counts = _largest_remainder([split_ratios[k] for k in names], n)
    for name, c in zip(names, counts):
        if c < 1:
            raise ValueError(f"split {name!r} would receive no subjects (n={n})")
    labels = [name for name, c in zip(names, counts) for _ in range(c)]
    perm = np.random.default_rng([seed, 23]).permutation(n)
    return [labels[i] for i in np.argsort(perm)]


def make_dataset(entries: Sequence[tuple[SceneConfig, HrProfile]], split_ratios: dict[str, float],
                 seed: int, out_dir, duration_s: float = 32.0, fs: float = 30.0, size: int = 16,
                 quantize: bool = False, prefix: str = "s") -> dict:
    """Simulate every entry, write RVID files plus sidecars, and update the manifest.

    ``out_dir/manifest.json`` lists every subject with its split and scale;
    an existing manifest is extended, and a repeated subject id is an error.
    """
    from .harness.rvid import write_subject

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / "manifest.json"
    manifest = {"version": 1, "subjects": []}
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())
    known = {s["id"] for s in manifest["subjects"]}
    splits = assign_splits(len(entries), split_ratios, seed)
    for k, ((scene, hr), split) in enumerate(zip(entries, splits)):
        sid = f"{prefix}{k:03d}"
        if sid in known:
            raise ValueError(f"duplicate subject id {sid!r}")
        known.add(sid)
        subj = simulate_subject(sid, scene, hr, duration_s, fs, size, quantize, split)
        rel = Path(split) / f"{sid}.rvid"
        write_subject(out_dir / rel, subj, seed=scene.seed)
        manifest["subjects"].append({
            "id": sid, "split": split, "fitzpatrick": scene.fitzpatrick,
            "group": scale_group(scene.fitzpatrick), "path": rel.as_posix(),
        })
    manifest["subjects"].sort(key=lambda s: s["id"])
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def with_overrides(scene: SceneConfig, **kw) -> SceneConfig:
    return replace(scene, **kw)
