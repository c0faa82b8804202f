"""Fusion of modality features, modality dropout, span masking and the shared encoder.

Fused features are kept per modality until they are materialized, so that an
absent or dropped modality contributes literal zeros and never an arithmetic
result that merely rounds to zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, ShapeError, Tensor
from .nn import Module, glorot, init_normal, init_ones, init_zeros

MODALITIES = ("visual", "audio", "text")
VISUAL, AUDIO, TEXT = range(3)


@dataclass
class FusedFeatures:
    """Batch of fused inputs; ``parts[m]`` is (B, T, D) or None when nobody has modality m."""

    parts: tuple
    present: np.ndarray  # (B, 3) bool
    lengths: np.ndarray  # (B,) int
    dim: int
    mask: np.ndarray = field(default=None)  # (B, T) bool
    mask_embedding: Tensor | None = None

    def __post_init__(self):
        if self.mask is None:
            self.mask = np.zeros((len(self.lengths), self.frames), dtype=bool)

    @property
    def batch(self) -> int:
        return len(self.lengths)

    @property
    def frames(self) -> int:
        return next(p.shape[1] for p in self.parts if p is not None)

    @property
    def width(self) -> int:
        return 3 * self.dim

    def mask_set(self, b: int = 0) -> list[int]:
        return np.flatnonzero(self.mask[b]).tolist()

    def z_f(self) -> Tensor:
        """Materialize the (B, T, 3D) fused input, masked frames included."""
        shape = (self.batch, self.frames, self.dim)
        masked_any = self.mask_embedding is not None and self.mask.any()
        slices = []
        for m, part in enumerate(self.parts):
            if part is None:
                slices.append(Tensor(np.zeros(shape)))
                continue
            keep = self.present[:, m]
            piece = part if keep.all() else ad.where(keep[:, None, None], part, 0.0)
            if masked_any:
                sel = self.mask[:, :, None] & keep[:, None, None]
                if sel.any():
                    emb = self.mask_embedding[m * self.dim : (m + 1) * self.dim]
                    piece = ad.where(sel, emb, piece)
            slices.append(piece)
        return ad.concat(slices, axis=-1)


def _batched(z) -> Tensor | None:
    if z is None:
        return None
    z = z if isinstance(z, Tensor) else Tensor(z)
    if z.ndim == 2:
        z = ad.reshape(z, (1,) + z.shape)
    if z.ndim != 3:
        raise ShapeError(f"modality features must be (T, D) or (B, T, D), got {z.shape}")
    return z


def fuse(z_v=None, z_a=None, z_p=None, lengths=None) -> FusedFeatures:
    """Concatenate (visual, audio, text) features; missing modalities become zero slices."""
    parts = tuple(_batched(z) for z in (z_v, z_a, z_p))
    given = [p for p in parts if p is not None]
    if not given:
        raise ContractError("fuse needs at least one modality")
    ref = given[0].shape
    for p in given[1:]:
        if p.shape != ref:
            raise ShapeError(f"modality feature shapes differ: {ref} vs {p.shape}")
    batch, frames, dim = ref
    present = np.array([[p is not None for p in parts]] * batch, dtype=bool)
    if lengths is None:
        lengths = np.full(batch, frames, dtype=np.int64)
    lengths = np.asarray(lengths, dtype=np.int64)
    if lengths.shape != (batch,) or np.any(lengths > frames) or np.any(lengths < 0):
        raise ShapeError(f"lengths {lengths.tolist()} do not fit batch {batch} x {frames} frames")
    return FusedFeatures(parts=parts, present=present, lengths=lengths, dim=dim)


@dataclass(frozen=True)
class DropoutPolicy:
    """``one_of``: keep everything with ``keep_all_prob``, else drop one present modality
    uniformly.  ``independent``: drop each modality m with ``probs[m]``."""

    mode: str = "one_of"
    keep_all_prob: float = 0.5
    probs: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.mode not in ("one_of", "independent"):
            raise ValueError(f"unknown modality dropout mode {self.mode!r}")


_MAX_REDRAWS = 64


def modality_dropout(f: FusedFeatures, policy: DropoutPolicy, rng: np.random.Generator) -> FusedFeatures:
    present = f.present.copy()
    for b in range(f.batch):
        avail = np.flatnonzero(present[b])
        if len(avail) < 2:
            continue
        if policy.mode == "one_of":
            if rng.random() < policy.keep_all_prob:
                continue
            present[b, avail[rng.integers(len(avail))]] = False
            continue
        probs = np.asarray(policy.probs)[avail]
        for _ in range(_MAX_REDRAWS):
            drop = rng.random(len(avail)) < probs
            if not drop.all():
                break
        else:
            drop = np.ones(len(avail), dtype=bool)
            drop[rng.integers(len(avail))] = False
        present[b, avail[drop]] = False
    return replace(f, present=present)


@dataclass(frozen=True)
class MaskPolicy:
    start_prob: float = 0.08
    span_len: int = 10

    def __post_init__(self):
        if self.span_len < 1:
            raise ValueError("span_len must be at least 1")
        if not 0.0 <= self.start_prob <= 1.0:
            raise ValueError("start_prob must lie in [0, 1]")


def span_mask(length: int, frames: int, policy: MaskPolicy, rng: np.random.Generator) -> np.ndarray:
    mask = np.zeros(frames, dtype=bool)
    starts = np.flatnonzero(rng.random(length) < policy.start_prob)
    for s in starts:
        mask[s : min(s + policy.span_len, length)] = True
    return mask


def apply_span_mask(
    f: FusedFeatures, policy: MaskPolicy, rng: np.random.Generator, embedding: Tensor
) -> FusedFeatures:
    """Mark spans for prediction; their present slices are replaced by ``embedding``."""
    mask = np.stack([span_mask(int(n), f.frames, policy, rng) for n in f.lengths])
    return replace(f, mask=mask, mask_embedding=embedding)


# --------------------------------------------------------------- encoder


def sinusoid_table(length: int, width: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    rates = np.exp(-math.log(10000.0) * (np.arange(0, width, 2) / width))
    table = np.zeros((length, width))
    table[:, 0::2] = np.sin(pos * rates)
    table[:, 1::2] = np.cos(pos * rates[: width // 2])
    return table


class TransformerLayer(Module):
    def __init__(self, width: int, ffn: int, rng: np.random.Generator):
        self.ln1_g, self.ln1_b = init_ones((width,)), init_zeros((width,))
        self.wq, self.bq = glorot(rng, width, width), init_zeros((width,))
        # no key bias: it shifts every score of a query equally and softmax ignores it
        self.wk = glorot(rng, width, width)
        self.wv, self.bv = glorot(rng, width, width), init_zeros((width,))
        self.wo, self.bo = glorot(rng, width, width), init_zeros((width,))
        self.ln2_g, self.ln2_b = init_ones((width,)), init_zeros((width,))
        self.w1, self.b1 = glorot(rng, width, ffn), init_zeros((ffn,))
        self.w2, self.b2 = glorot(rng, ffn, width), init_zeros((width,))


class Transformer(Module):
    """Pre-norm self-attention stack with a learned positional table.

    ``mask_embedding`` is the learned vector substituted at masked frames.
    """

    def __init__(
        self,
        width: int,
        layers: int,
        heads: int,
        ffn: int,
        rng: np.random.Generator,
        max_len: int = 256,
        ln_eps: float = 1e-5,
    ):
        if width % heads:
            raise ValueError(f"width {width} not divisible by {heads} heads")
        self.heads = heads
        self.ln_eps = ln_eps
        self.pos = ad.parameter(sinusoid_table(max_len, width))
        self.mask_embedding = init_normal(rng, (width,), 1.0)
        self.layers = [TransformerLayer(width, ffn, rng) for _ in range(layers)]

    @property
    def width(self) -> int:
        return self.pos.shape[1]

    def __call__(self, x: Tensor, lengths=None) -> Tensor:
        squeeze = x.ndim == 2
        if squeeze:
            x = ad.reshape(x, (1,) + x.shape)
        batch, frames, width = x.shape
        if width != self.width:
            raise ShapeError(f"encoder width {self.width} does not match input {x.shape}")
        if frames > self.pos.shape[0]:
            raise ShapeError(f"{frames} frames exceed the positional table ({self.pos.shape[0]})")
        key_bias = None
        if lengths is not None:
            lengths = np.asarray(lengths)
            if np.any(lengths < frames):
                pad = np.arange(frames)[None, :] >= lengths[:, None]
                key_bias = np.where(pad, -1e9, 0.0)[:, None, None, :]
        h = ad.add(x, self.pos[:frames])
        for layer in self.layers:
            h = ad.add(h, self._attention(ad.layer_norm(h, layer.ln1_g, layer.ln1_b, self.ln_eps), layer, key_bias))
            inner = ad.gelu(ad.linear(ad.layer_norm(h, layer.ln2_g, layer.ln2_b, self.ln_eps), layer.w1, layer.b1))
            h = ad.add(h, ad.linear(inner, layer.w2, layer.b2))
        return ad.reshape(h, h.shape[1:]) if squeeze else h

    def _attention(self, x: Tensor, layer: TransformerLayer, key_bias) -> Tensor:
        batch, frames, width = x.shape
        dh = width // self.heads

        def split(t: Tensor) -> Tensor:
            return ad.transpose(ad.reshape(t, (batch, frames, self.heads, dh)), (0, 2, 1, 3))

        q = split(ad.linear(x, layer.wq, layer.bq))
        k = split(ad.matmul(x, layer.wk))
        v = split(ad.linear(x, layer.wv, layer.bv))
        scores = ad.mul(ad.matmul(q, ad.swap_last(k)), 1.0 / math.sqrt(dh))
        if key_bias is not None:
            scores = ad.add(scores, key_bias)
        ctx = ad.matmul(ad.softmax(scores, axis=-1), v)
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (batch, frames, width))
        return ad.linear(ctx, layer.wo, layer.bo)


def encode(f: FusedFeatures, params: Transformer) -> Tensor:
    if f.frames < 1:
        raise ShapeError("encode needs at least one frame")
    return params(f.z_f(), f.lengths)
