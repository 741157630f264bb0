"""Estimator (PRN) and translation generator at configurable scale.

Both models consume channel-last video batches ``(N, T, H, W, 3)``.
"""

from __future__ import annotations

import numpy as np

from ..autodiff import DiffTensor, ops
from .layers import BatchNorm, Conv3d, Linear, Module, seeds_for


class ConvBnRelu(Module):
    def __init__(self, cin: int, cout: int, seed: int):
        self.conv = Conv3d(cin, cout, seed=seed, bias=False)
        self.bn = BatchNorm(cout)

    def __call__(self, x):
        return ops.relu(self.bn(self.conv(x)))


class ResidualBlock(Module):
    """conv-bn-relu-conv-bn plus a skip path, then relu.

    A 1x1x1 projection carries the skip when channel counts differ.
    """

    def __init__(self, cin: int, cout: int, seed: int):
        s = seeds_for(seed, 3)
        self.conv1 = Conv3d(cin, cout, seed=s[0], bias=False)
        self.bn1 = BatchNorm(cout)
        self.conv2 = Conv3d(cout, cout, seed=s[1], bias=False)
        self.bn2 = BatchNorm(cout)
        self.skip = Conv3d(cin, cout, kernel=1, seed=s[2], bias=False) if cin != cout else None

    def __call__(self, x):
        h = ops.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        skip = self.skip(x) if self.skip is not None else x
        return ops.relu(h + skip)


class PrnModel(Module):
    """Residual 3D-conv pulse estimator: one value per input frame.

    The estimator sees the frames as they are, static skin colour
    included; that appearance dependence is what the skin-tone
    augmentation is meant to address.  Each block is followed by
    ``(1, 2, 2)`` average pooling, so the temporal axis is never
    subsampled.  The head averages over space and maps each frame's
    feature vector to a scalar.
    """

    def __init__(self, channels=(8, 16, 32), seed: int = 0):
        s = seeds_for(seed, len(channels) + 1)
        cin = 3
        self.blocks = []
        for c, bs in zip(channels, s):
            self.blocks.append(ResidualBlock(cin, c, bs))
            cin = c
        self.head = Linear(cin, 1, seed=s[-1])
        self.channels = tuple(channels)

    def __call__(self, x) -> DiffTensor:
        x = x if isinstance(x, DiffTensor) else DiffTensor(np.asarray(x, dtype=np.float64))
        if x.ndim != 5 or x.shape[-1] != 3:
            raise ValueError(f"expected (N, T, H, W, 3), got {x.shape}")
        h = x
        for block in self.blocks:
            h = block(h)
            if h.shape[2] % 2 == 0 and h.shape[3] % 2 == 0:
                h = ops.avg_pool3d(h, (1, 2, 2))
        h = ops.mean(h, axis=(2, 3))                     # (N, T, C)
        y = self.head(h)                                 # (N, T, 1)
        return ops.reshape(y, y.shape[:2])

    def predict(self, frames: np.ndarray, clip_len: int = 64) -> np.ndarray:
        """Pulse estimate for a whole ``(T, H, W, 3)`` video, clip by clip.

        Each clip's output is standardised before concatenation because the
        Pearson-trained estimator is only defined up to a positive affine map.
        A trailing partial clip is evaluated as the last full-length clip.
        """
        was = self.training
        self.eval()
        frames = np.asarray(frames, dtype=np.float64)
        n = len(frames)
        if n < clip_len:
            clip_len = n
        out = np.zeros(n)
        starts = list(range(0, n - clip_len + 1, clip_len))
        if starts[-1] + clip_len < n:
            starts.append(n - clip_len)
        done = 0
        for s in starts:
            y = self(frames[None, s:s + clip_len]).value[0]
            sd = y.std()
            y = (y - y.mean()) / sd if sd > 0 else y - y.mean()
            out[max(s, done):s + clip_len] = y[max(s, done) - s:]
            done = s + clip_len
        self.train(was)
        return out


def _logit(x: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    x = np.clip(x, eps, 1.0 - eps)
    return np.log(x) - np.log1p(-x)


class GeneratorModel(Module):
    """Encoder, residual transformer and decoder; output shape equals input.

    The network predicts a residual in logit space:
    ``out = sigmoid(logit(x) + r(x))``.  The last convolution starts at zero,
    so a freshly built generator is the identity map on ``(0, 1)`` inputs.
    """

    def __init__(self, base: int = 8, n_blocks: int = 2, seed: int = 0):
        s = seeds_for(seed, 4 + n_blocks + 2)
        self.enc = [ConvBnRelu(3, base, s[0]), ConvBnRelu(base, 2 * base, s[1])]
        self.res = [ResidualBlock(2 * base, 2 * base, s[2 + i]) for i in range(n_blocks)]
        self.dec = [ConvBnRelu(2 * base, base, s[2 + n_blocks]),
                    ConvBnRelu(base, base, s[3 + n_blocks])]
        self.out = Conv3d(base, 3, seed=s[4 + n_blocks], zero=True)
        self.base = base
        self.n_blocks = n_blocks

    def __call__(self, x) -> DiffTensor:
        x = x if isinstance(x, DiffTensor) else DiffTensor(np.asarray(x, dtype=np.float64))
        if x.ndim != 5 or x.shape[-1] != 3:
            raise ValueError(f"expected (N, T, H, W, 3), got {x.shape}")
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise ValueError(f"spatial size must be divisible by 4, got {x.shape[2:4]}")
        h = x
        for layer in self.enc:
            h = ops.avg_pool3d(layer(h), (1, 2, 2))
        for block in self.res:
            h = block(h)
        for layer in self.dec:
            h = layer(ops.upsample_nearest(h, 2))
        r = self.out(h)
        # the logit of a constant input carries no gradient into G's parameters
        return ops.sigmoid(r + _logit(x.value))

    def translate(self, frames: np.ndarray, clip_len: int = 64) -> np.ndarray:
        """Apply G to a whole ``(T, H, W, 3)`` video in eval mode, clip by clip."""
        was = self.training
        self.eval()
        frames = np.asarray(frames, dtype=np.float64)
        n = len(frames)
        clip_len = min(clip_len, n)
        out = np.empty_like(frames)
        starts = list(range(0, n - clip_len + 1, clip_len))
        if starts[-1] + clip_len < n:
            starts.append(n - clip_len)
        for s in starts:
            out[s:s + clip_len] = self(frames[None, s:s + clip_len]).value[0]
        self.train(was)
        return out
