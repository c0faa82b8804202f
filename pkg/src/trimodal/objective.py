"""Masked unit prediction: cosine-similarity unit posteriors, per-kind losses and their mix."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .encoders import check_vocab
from .nn import Module, glorot, init_normal

KINDS = ("AV", "A", "AP", "P")
COSINE_EPS = 1e-8


class ConfigurationError(ValueError):
    pass


class PredictionHead(Module):
    """Projects contextual features and scores them against unit embeddings by cosine / tau."""

    def __init__(self, width: int, embed_dim: int, units: int, rng: np.random.Generator, tau: float = 0.1):
        if tau <= 0:
            raise ContractError(f"temperature must be positive, got {tau}")
        self.tau = tau
        self.proj = glorot(rng, width, embed_dim)
        self.unit_embedding = init_normal(rng, (units, embed_dim), 1.0)

    @property
    def units(self) -> int:
        return self.unit_embedding.shape[0]

    def logits(self, h: Tensor) -> Tensor:
        if self.tau <= 0:
            raise ContractError(f"temperature must be positive, got {self.tau}")
        z = ad.normalize(ad.matmul(h, self.proj), COSINE_EPS)
        e = ad.normalize(self.unit_embedding, COSINE_EPS)
        return ad.mul(ad.matmul(z, ad.transpose(e)), 1.0 / self.tau)


def unit_distribution(h_t, head: PredictionHead) -> np.ndarray:
    """p(u | h_t) for every unit u."""
    h = h_t if isinstance(h_t, Tensor) else Tensor(h_t)
    if h.ndim == 1:
        return ad.softmax(head.logits(ad.reshape(h, (1, -1))), axis=-1).data[0]
    return ad.softmax(head.logits(h), axis=-1).data


def masked_ce_per_sample(h_f: Tensor, targets: np.ndarray, mask: np.ndarray, head: PredictionHead) -> list:
    """Per-sample sums of -log p(u_t | h_t) over masked frames (plain 0.0 when none are masked).

    Only masked rows are gathered, so unmasked frames never enter the graph.
    """
    if h_f.ndim == 2:
        h_f = ad.reshape(h_f, (1,) + h_f.shape)
    targets = np.asarray(targets, dtype=np.int64).reshape(h_f.shape[:2])
    mask = np.asarray(mask, dtype=bool).reshape(h_f.shape[:2])
    check_vocab(targets[mask], head.units, "unit")
    rows_b, rows_t = np.nonzero(mask)
    if rows_b.size == 0:
        return [0.0] * h_f.shape[0]
    logp = ad.log_softmax(head.logits(ad.getitem(h_f, (rows_b, rows_t))), axis=-1)
    picked = ad.getitem(logp, (np.arange(rows_b.size), targets[rows_b, rows_t]))
    out = []
    for b in range(h_f.shape[0]):
        sel = np.flatnonzero(rows_b == b)
        out.append(ad.neg(ad.tsum(ad.getitem(picked, sel))) if sel.size else 0.0)
    return out


def masked_ce_loss(h_f: Tensor, target, mask_set, head: PredictionHead):
    """-sum over masked frames of log p(u_t | h_t) for one utterance; 0.0 for an empty mask."""
    frames = h_f.shape[-2]
    target = np.asarray(target, dtype=np.int64)
    if target.shape[-1] != frames:
        raise ad.ShapeError(f"target length {target.shape[-1]} differs from {frames} frames")
    mask = np.zeros(frames, dtype=bool)
    mask[np.asarray(list(mask_set), dtype=np.int64)] = True
    return masked_ce_per_sample(h_f, target, mask, head)[0]


def batch_mean(per_sample: list):
    """Average of per-sample losses; stays a plain float when nothing is differentiable."""
    tensors = [x for x in per_sample if isinstance(x, Tensor)]
    if not tensors:
        return 0.0
    total = tensors[0]
    for x in tensors[1:]:
        total = ad.add(total, x)
    return ad.mul(total, 1.0 / len(per_sample))


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ConfigurationError(f"{name} must be finite and non-negative, got {value}")


def total_loss(losses: dict, w: LossWeights) -> Tensor:
    """L_av + lambda1 L_a + lambda2 L_ap + lambda3 L_p; missing kinds contribute nothing."""
    total = losses.get("AV")
    for kind, lam in (("A", w.lambda1), ("AP", w.lambda2), ("P", w.lambda3)):
        term = losses.get(kind)
        if term is None:
            continue
        weighted = ad.mul(term, lam)
        total = weighted if total is None else ad.add(total, weighted)
    if total is None:
        return Tensor(0.0)
    return total if isinstance(total, Tensor) else Tensor(total)


@dataclass(frozen=True)
class SamplerConfig:
    ratios: tuple[float, float, float, float] = (0.25, 0.25, 0.25, 0.25)
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        r = np.asarray(self.ratios, dtype=np.float64)
        if r.shape != (4,) or np.any(r < 0) or not np.all(np.isfinite(r)) or r.sum() <= 0:
            raise ConfigurationError(f"sampling ratios must be 4 non-negative numbers with positive sum, got {self.ratios}")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be positive")

    @property
    def probabilities(self) -> np.ndarray:
        r = np.asarray(self.ratios, dtype=np.float64)
        return r / r.sum()


def sample_batch(corpora: dict, cfg: SamplerConfig, rng: np.random.Generator) -> list[tuple[str, int]]:
    """Draw (kind, index) slots: kind from the ratio distribution, record uniformly within it."""
    p = cfg.probabilities
    for kind, prob in zip(KINDS, p):
        if prob > 0 and len(corpora.get(kind, ())) == 0:
            raise ConfigurationError(f"sampling ratio for {kind} is positive but its corpus is empty")
    kinds = rng.choice(len(KINDS), size=cfg.batch_size, p=p)
    return [(KINDS[k], int(rng.integers(len(corpora[KINDS[k]])))) for k in kinds]


# --------------------------------------------------------------- optimizer


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8


@dataclass
class AdamState:
    step: int
    m: dict
    v: dict

    @classmethod
    def fresh(cls, params: dict) -> "AdamState":
        return cls(0, {k: np.zeros_like(p.data) for k, p in params.items()}, {k: np.zeros_like(p.data) for k, p in params.items()})


def adam_step(params: dict, grads: dict, state: AdamState, hyper: AdamHyper, lr: float | None = None) -> AdamState:
    """In-place bias-corrected Adam update of every named parameter."""
    lr = hyper.lr if lr is None else lr
    state.step += 1
    c1 = 1.0 - hyper.beta1**state.step
    c2 = 1.0 - hyper.beta2**state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ad.ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.data.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= hyper.beta1
        m += (1.0 - hyper.beta1) * g
        v *= hyper.beta2
        v += (1.0 - hyper.beta2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + hyper.eps)
    return state


def clip_global_norm(grads: dict, max_norm: float) -> float:
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm

