"""RVID video container and its JSON sidecar.

Layout (all integers u32 little-endian)::

    offset  0  magic  b"RVID"
            4  version (1)
            8  T
           12  H
           16  W
           20  C (3)
           24  fps numerator
           28  fps denominator
           32  T*H*W*C float32 LE, t-major, row-major, channel-last

The sidecar shares the stem with a ``.json`` suffix and holds the pulse
samples, heart-rate profile, Fitzpatrick scale, scene parameters and seed.
"""

from __future__ import annotations

import json
import struct
from fractions import Fraction
from pathlib import Path

import numpy as np

from ..optics import HrProfile, PulseTrace, SceneConfig, Subject, VideoTensor

MAGIC = b"RVID"
VERSION = 1
HEADER = struct.Struct("<4s7I")


class RvidFormatError(ValueError):
    """Malformed RVID file; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})")


def fps_fraction(fs: float) -> Fraction:
    return Fraction(fs).limit_denominator(1001)


def encode_rvid(frames: np.ndarray, fs: float) -> bytes:
    frames = np.asarray(frames)
    if frames.ndim != 4 or frames.shape[-1] != 3:
        raise ValueError(f"frames must be (T, H, W, 3), got {frames.shape}")
    t, h, w, c = frames.shape
    fps = fps_fraction(fs)
    header = HEADER.pack(MAGIC, VERSION, t, h, w, c, fps.numerator, fps.denominator)
    return header + np.ascontiguousarray(frames, dtype="<f4").tobytes()


def decode_rvid(data: bytes) -> tuple[np.ndarray, float]:
    if len(data) < HEADER.size:
        raise RvidFormatError(f"truncated header: {len(data)} of {HEADER.size} bytes", len(data))
    magic, version, t, h, w, c, num, den = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise RvidFormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise RvidFormatError(f"unsupported version {version}", 4)
    if c != 3:
        raise RvidFormatError(f"channel count must be 3, got {c}", 20)
    if min(t, h, w) < 1:
        raise RvidFormatError(f"empty dimensions T={t} H={h} W={w}", 8)
    if num == 0 or den == 0:
        raise RvidFormatError("frame rate must be positive", 24 if num == 0 else 28)
    expected = t * h * w * c * 4
    payload = len(data) - HEADER.size
    if payload != expected:
        raise RvidFormatError(f"payload is {payload} bytes, header declares {expected}",
                              HEADER.size + min(payload, expected))
    frames = np.frombuffer(data, dtype="<f4", offset=HEADER.size).reshape(t, h, w, c)
    if not np.all(np.isfinite(frames)) or frames.min() < 0 or frames.max() > 1:
        bad = int(np.flatnonzero(~((frames >= 0) & (frames <= 1)))[0])
        raise RvidFormatError("sample outside [0, 1]", HEADER.size + 4 * bad)
    return frames.copy(), num / den


def write_rvid(path, frames: np.ndarray, fs: float) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(encode_rvid(frames, fs))


def read_rvid(path) -> tuple[np.ndarray, float]:
    return decode_rvid(Path(path).read_bytes())


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def write_subject(path, subject: Subject, seed: int) -> None:
    write_rvid(path, subject.video.frames, subject.video.fs)
    side = {
        "id": subject.subject_id,
        "split": subject.split,
        "fitzpatrick": subject.scene.fitzpatrick,
        "fs": subject.pulse.fs,
        "pulse": [float(x) for x in subject.pulse.samples],
        "hr_profile": subject.pulse.hr_profile.to_dict(),
        "scene": subject.scene.to_dict(),
        "seed": int(seed),
    }
    sidecar_path(path).write_text(json.dumps(side, sort_keys=True) + "\n")


def read_subject(path) -> Subject:
    frames, fs = read_rvid(path)
    side = json.loads(sidecar_path(path).read_text())
    scene = SceneConfig.from_dict(side["scene"])
    pulse = PulseTrace(np.asarray(side["pulse"]), side["fs"], HrProfile.from_dict(side["hr_profile"]))
    video = VideoTensor(frames, fs, {"fitzpatrick": scene.fitzpatrick})
    return Subject(side["id"], video, pulse, scene, side.get("split", "train"))
