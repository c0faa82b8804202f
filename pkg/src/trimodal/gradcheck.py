"""Finite-difference check of the whole network: encoders, fusion, transformer and unit head."""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .backbone import encode
from .config import ModelConfig
from .model import Batch, TriModalModel
from .objective import batch_mean, masked_ce_per_sample


@dataclass
class GradcheckReport:
    max_rel_error: float
    parameters: int
    seconds: float


def full_model_gradcheck(cfg: ModelConfig, units: int, frames: int = 6, phonemes: int = 4, roi: int = 8, seed: int = 0) -> GradcheckReport:
    """Compare backprop gradients of the masked unit loss with central differences.

    Two samples carry all three modalities; the second is one frame shorter so
    padding is exercised, and fixed masked spans route gradients through the
    mask embedding.  The positional table is sized to ``frames`` because rows
    past the sequence never enter the loss.
    """
    t0 = time.perf_counter()
    model = TriModalModel(replace(cfg, max_len=frames), phonemes, units, roi)
    rng = np.random.default_rng([seed, 0x6C])
    lengths = np.array([frames, frames - 1])
    batch = Batch(
        visual=rng.uniform(size=(2, frames, roi, roi)),
        audio=rng.normal(size=(2, frames, 104)),
        text=rng.integers(0, phonemes, size=(2, frames)),
        present=np.ones((2, 3), dtype=bool),
        lengths=lengths,
        targets=rng.integers(0, units, size=(2, frames)),
        uids=[0, 1],
    )
    batch.targets[1, -1] = -1
    mask = np.zeros((2, frames), dtype=bool)
    mask[0, 1:3] = True
    mask[1, frames // 2 :] = True
    mask &= batch.targets >= 0

    def loss():
        f = model.fused(batch)
        f = replace(f, mask=mask, mask_embedding=model.encoder.mask_embedding)
        h = encode(f, model.encoder)
        return batch_mean(masked_ce_per_sample(h, batch.targets, mask, model.head))

    # a small nudge keeps zero-initialized biases away from GELU's symmetric point
    for p in model.parameters():
        p.data += 0.01 * rng.normal(size=p.shape)
    params = model.parameters()
    err = ad.finite_diff_check(loss, params, step=1e-5)
    return GradcheckReport(err, sum(p.data.size for p in params), time.perf_counter() - t0)
