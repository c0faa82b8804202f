"""Per-modality front ends that map raw inputs to frame-synchronous features.

Visual frames arrive at 25 Hz, filterbank frames at 100 Hz; stacking four
adjacent filterbank frames puts audio on the visual frame grid.  Phoneme ids
are expanded to frame rate by their durations before embedding lookup.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Module, glorot, init_normal, init_zeros

FBANK_DIM = 26
STACK = 4
STACKED_DIM = FBANK_DIM * STACK


class VocabularyError(ValueError):
    pass


def stack_fbank(fbank: np.ndarray) -> np.ndarray:
    """Concatenate groups of four filterbank frames (row t = rows 4t..4t+3).

    A ragged tail is completed by repeating the final frame.
    """
    fbank = np.asarray(fbank, dtype=np.float64)
    if fbank.ndim != 2:
        raise ad.ShapeError(f"expected a (frames, bins) array, got shape {fbank.shape}")
    n, bins = fbank.shape
    if n == 0:
        return np.zeros((0, bins * STACK))
    groups = -(-n // STACK)
    short = groups * STACK - n
    if short:
        fbank = np.concatenate([fbank, np.repeat(fbank[-1:], short, axis=0)], axis=0)
    return fbank.reshape(groups, bins * STACK)


class AudioEncoder(Module):
    """A single affine projection of stacked filterbank frames."""

    def __init__(self, dim: int, rng: np.random.Generator, in_dim: int = STACKED_DIM):
        self.weight = glorot(rng, in_dim, dim)
        self.bias = init_zeros((dim,))

    def __call__(self, stacked) -> Tensor:
        stacked = stacked if isinstance(stacked, Tensor) else Tensor(stacked)
        if stacked.shape[-1] != self.weight.shape[0]:
            raise ad.ShapeError(
                f"audio encoder expects {self.weight.shape[0]} input dims, got {stacked.shape}"
            )
        return ad.linear(stacked, self.weight, self.bias)


class VisualEncoder(Module):
    """Temporal conv (3 taps) -> spatial 3x3 conv + GELU -> global mean pool -> linear."""

    def __init__(self, dim: int, rng: np.random.Generator, roi: int = 16, channels: int = 8):
        self.roi = roi
        self.temporal = ad.parameter(np.array([0.0, 1.0, 0.0]) + rng.normal(0, 0.05, 3))
        self.temporal_bias = init_zeros(())
        self.spatial = init_normal(rng, (9, channels), 1.0 / 3.0)
        self.spatial_bias = init_zeros((channels,))
        self.proj = glorot(rng, channels, dim)
        self.proj_bias = init_zeros((dim,))

    def __call__(self, frames) -> Tensor:
        """``frames``: (..., T, H, W) in [0, 1]; returns (..., T, dim)."""
        x = np.asarray(frames.data if isinstance(frames, Tensor) else frames, dtype=np.float64)
        if x.shape[-2:] != (self.roi, self.roi):
            raise ad.ShapeError(f"visual frames must be {self.roi}x{self.roi}, got {x.shape}")
        lead, t = x.shape[:-3], x.shape[-3]
        dim = self.proj.shape[1]
        if t == 0:
            return Tensor(np.zeros(lead + (0, dim)))
        flat = x.reshape(lead + (t, self.roi * self.roi))
        pad = [(0, 0)] * len(lead) + [(1, 1), (0, 0)]
        padded = np.pad(flat, pad)
        y = self.temporal_bias
        for k in range(3):
            tap = padded[..., k : k + t, :]
            y = ad.add(y, ad.mul(self.temporal[k], tap))
        r = self.roi
        grid = ad.reshape(y, lead + (t, r, r))
        taps = [
            ad.reshape(grid[..., di : di + r - 2, dj : dj + r - 2], lead + (t, (r - 2) ** 2, 1))
            for di in range(3)
            for dj in range(3)
        ]
        patches = ad.concat(taps, axis=-1)  # (..., T, P, 9)
        h = ad.gelu(ad.linear(patches, self.spatial, self.spatial_bias))
        pooled = ad.mean(h, axis=-2)
        return ad.linear(pooled, self.proj, self.proj_bias)


class TextEncoder(Module):
    """Phoneme embedding table."""

    def __init__(self, dim: int, vocab: int, rng: np.random.Generator):
        self.vocab = vocab
        self.table = init_normal(rng, (vocab, dim), 1.0)

    def __call__(self, ids) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        check_vocab(ids, self.vocab, "phoneme")
        if ids.size == 0:
            return Tensor(np.zeros(ids.shape + (self.table.shape[1],)))
        return ad.take_rows(self.table, ids)


def check_vocab(ids: np.ndarray, size: int, what: str) -> None:
    if ids.size == 0:
        return
    bad = ids[(ids < 0) | (ids >= size)]
    if bad.size:
        raise VocabularyError(f"{what} id {int(bad.flat[0])} outside vocabulary [0, {size})")


def expand_ids(ids, durations) -> np.ndarray:
    """Repeat each id by its (non-negative integer) duration."""
    ids = np.asarray(ids, dtype=np.int64)
    durations = np.asarray(durations, dtype=np.int64)
    if ids.shape != durations.shape:
        raise ad.ShapeError(f"ids {ids.shape} and durations {durations.shape} differ")
    if np.any(durations < 0):
        raise ad.ContractError("durations must be non-negative")
    return np.repeat(ids, durations)
