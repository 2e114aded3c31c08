"""Corruption kernel, reconstruction reward, group advantages, frozen features."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .numkernel import SeededRng, Tensor

FEATURE_BANK_SEED = 0x5EEDF00D
NUM_FILTERS = 8


@dataclass(frozen=True)
class CorruptionSpec:
    xi: float
    vocab_size: int

    def __post_init__(self):
        if not 0.0 <= self.xi <= 1.0:
            raise ValueError("xi must lie in [0, 1]")
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be positive")


@dataclass(frozen=True)
class RewardWeights:
    lambda_p: float = 0.5

    def __post_init__(self):
        if self.lambda_p < 0:
            raise ValueError("lambda_p must be nonnegative")


def corrupt(x_star, spec: CorruptionSpec, rng: SeededRng) -> np.ndarray:
    """Keep each token with probability 1-xi, else swap in a uniform draw from the other K-1 tokens.

    Works on any integer array; positions are corrupted independently.
    """
    x = np.asarray(x_star, dtype=np.int64)
    k = spec.vocab_size
    if x.size and (x.min() < 0 or x.max() >= k):
        raise ValueError("token out of vocabulary")
    if spec.xi > 0 and k == 1:
        raise ValueError("no replacement token exists")
    u = rng.uniform(x.shape)
    flip = u < spec.xi
    # offset in 1..K-1 added mod K never lands on the original token
    offset = rng.integers(1, max(k, 2), size=x.shape)
    return np.where(flip, (x + offset) % k, x)


def corruption_pmf(spec: CorruptionSpec, kept: bool) -> float:
    if kept:
        return 1.0 - spec.xi
    if spec.vocab_size == 1:
        if spec.xi > 0:
            raise ValueError("no replacement token exists")
        return 0.0
    return spec.xi / (spec.vocab_size - 1)


class FrozenFeatureBank:
    """Eight fixed 3x3 filters (zero padding) followed by tanh.

    The convolution is materialized as a dense ``(S*S, 8*S*S)`` matrix so
    the features of a batch are one matmul, differentiable through
    :class:`Tensor` when the input is one.
    """

    def __init__(self, seed: int = FEATURE_BANK_SEED):
        rng = SeededRng(seed, 0)
        self.filters = rng.normal((NUM_FILTERS, 3, 3)) / 3.0

    @lru_cache(maxsize=4)
    def conv_matrix(self, size: int) -> np.ndarray:
        n = size * size
        mat = np.zeros((n, NUM_FILTERS, size, size))
        for f in range(NUM_FILTERS):
            for dy in range(3):
                for dx in range(3):
                    w = self.filters[f, dy, dx]
                    for y in range(size):
                        sy = y + dy - 1
                        if not 0 <= sy < size:
                            continue
                        for x in range(size):
                            sx = x + dx - 1
                            if 0 <= sx < size:
                                mat[sy * size + sx, f, y, x] += w
        return mat.reshape(n, NUM_FILTERS * n)

    def features(self, images):
        """(B, 1, S, S) images -> (B, 8*S*S) features; Tensor in, Tensor out."""
        if isinstance(images, Tensor):
            b, size = images.shape[0], images.shape[-1]
            return (images.reshape(b, size * size) @ self.conv_matrix(size)).tanh()
        images = np.asarray(images, dtype=np.float64)
        b, size = images.shape[0], images.shape[-1]
        # plain arrays take the direct 3x3 correlation; same values as the matrix form
        padded = np.pad(images.reshape(b, size, size), ((0, 0), (1, 1), (1, 1)))
        shifts = np.stack([padded[:, dy:dy + size, dx:dx + size] for dy in range(3) for dx in range(3)], axis=1)
        resp = self.filters.reshape(NUM_FILTERS, 9) @ shifts.reshape(b, 9, size * size)
        return np.tanh(resp.reshape(b, NUM_FILTERS * size * size))

    def pooled(self, images: np.ndarray) -> np.ndarray:
        """16-d summary per image: spatial mean and spatial std of each filter response."""
        images = np.asarray(images, dtype=np.float64)
        b = images.shape[0]
        f = self.features(images).reshape(b, NUM_FILTERS, -1)
        return np.concatenate([f.mean(axis=-1), f.std(axis=-1)], axis=1)


_DEFAULT_BANK: FrozenFeatureBank | None = None


def default_bank() -> FrozenFeatureBank:
    global _DEFAULT_BANK
    if _DEFAULT_BANK is None:
        _DEFAULT_BANK = FrozenFeatureBank()
    return _DEFAULT_BANK


def perceptual_loss(decoded, reference, bank: FrozenFeatureBank | None = None):
    """Mean squared difference of frozen features, averaged over the batch; Tensor-aware."""
    bank = bank or default_bank()
    fd = bank.features(decoded)
    fr = bank.features(np.asarray(reference.data if isinstance(reference, Tensor) else reference))
    diff = fd - fr
    return (diff * diff).mean()


def reward_batch(decoded: np.ndarray, reference: np.ndarray, w: RewardWeights,
                 bank: FrozenFeatureBank | None = None) -> np.ndarray:
    """Per-image reward ``-(MSE + lambda_p * feature MSE)`` for (B, 1, S, S) arrays."""
    decoded = np.asarray(decoded, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if decoded.shape != reference.shape:
        raise ValueError("shape mismatch between decoded and reference images")
    b = decoded.shape[0]
    mse = ((decoded - reference) ** 2).reshape(b, -1).mean(axis=1)
    if w.lambda_p == 0:
        return -mse
    bank = bank or default_bank()
    fd = bank.features(decoded) - bank.features(reference)
    return -(mse + w.lambda_p * (fd * fd).mean(axis=1))


def reward_groups(decoded: np.ndarray, reference: np.ndarray, w: RewardWeights,
                  bank: FrozenFeatureBank | None = None) -> np.ndarray:
    """Rewards of (B, G, 1, S, S) decodes against their (B, 1, S, S) references -> (B, G).

    Equal to :func:`reward_batch` on the repeated references, with each
    reference's features computed once.
    """
    decoded = np.asarray(decoded, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    b, g = decoded.shape[:2]
    if decoded.shape[2:] != reference.shape[1:] or reference.shape[0] != b:
        raise ValueError("shape mismatch between decoded and reference images")
    diff = decoded - reference[:, None]
    mse = (diff * diff).reshape(b, g, -1).mean(axis=-1)
    if w.lambda_p == 0:
        return -mse
    bank = bank or default_bank()
    fd = bank.features(decoded.reshape((b * g,) + decoded.shape[2:])).reshape(b, g, -1)
    fd = fd - bank.features(reference)[:, None]
    return -(mse + w.lambda_p * (fd * fd).mean(axis=-1))


def reward(decoded: np.ndarray, reference: np.ndarray, w: RewardWeights,
           bank: FrozenFeatureBank | None = None) -> float:
    decoded = np.asarray(decoded, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if decoded.shape != reference.shape:
        raise ValueError("shape mismatch between decoded and reference images")
    return float(reward_batch(decoded[None], reference[None], w, bank)[0])


def group_advantages(rewards, max_clip: float = 5.0) -> np.ndarray:
    """Group-normalized advantages with population std, a 1e-8 std floor, then clipping."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.shape[-1] < 2:
        raise ValueError("group size must be at least 2")
    mean = r.mean(axis=-1, keepdims=True)
    centered = r - mean
    std = np.sqrt((centered * centered).mean(axis=-1, keepdims=True))
    safe = np.where(std < 1e-8, 1.0, std)
    adv = np.where(std < 1e-8, 0.0, centered / safe)
    return np.clip(adv, -max_clip, max_clip)
