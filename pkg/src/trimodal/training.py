"""Pretraining loop: sample a mixed batch, compute per-kind masked losses, weight, update."""

from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt_io
from .autodiff import NumericError
from .backbone import apply_span_mask, encode, modality_dropout
from .config import RunConfig, dumps, loads
from .model import TriModalModel, collate
from .objective import (
    KINDS,
    AdamHyper,
    AdamState,
    SamplerConfig,
    adam_step,
    batch_mean,
    clip_global_norm,
    masked_ce_per_sample,
    sample_batch,
    total_loss,
)

METRICS_HEADER = "step,L_av,L_a,L_ap,L_p,L_total,wall_ms"


class TrainingDiverged(NumericError):
    def __init__(self, message: str, step: int = -1, uids=()):
        super().__init__(message)
        self.step = step
        self.uids = list(uids)


def _fmt(x) -> str:
    return "nan" if x is None else repr(float(x))


def format_metrics(row: dict) -> str:
    vals = [str(row["step"])] + [_fmt(row["losses"].get(k)) for k in KINDS] + [_fmt(row["total"]), str(row["wall_ms"])]
    return ",".join(vals)


class Pretrainer:
    """Owns the model, optimizer state and step counter.

    Every random draw at step ``s`` comes from generators seeded with
    ``(seed, s, ...)``, so the step counter is the whole RNG state and a resumed
    run replays exactly what an uninterrupted one would.
    """

    def __init__(self, cfg: RunConfig, corpora: dict, phonemes: int, units: int, seed: int | None = None):
        self.cfg = cfg
        self.seed = cfg.seed if seed is None else seed
        self.corpora = {k: list(corpora.get(k, ())) for k in KINDS}
        self.phonemes = phonemes
        self.units = units
        self.model = TriModalModel(cfg.model, phonemes, units, cfg.corpus.roi)
        self.params = dict(self.model.named_parameters())
        self.adam = AdamState.fresh(self.params)
        self.hyper = AdamHyper(cfg.optim.lr, cfg.optim.beta1, cfg.optim.beta2, cfg.optim.eps)
        self.sampler = SamplerConfig(tuple(cfg.sampler.ratios), cfg.sampler.batch_size, self.seed)
        self.step = 0

    # ---------------------------------------------------------------- pieces

    def slots(self, step: int) -> list:
        return sample_batch(self.corpora, self.sampler, np.random.default_rng([self.seed, step, 0]))

    def kind_losses(self, step: int, slots: list) -> tuple[dict, list]:
        losses = {}
        uids = []
        for i, kind in enumerate(KINDS):
            picked = [self.corpora[kind][j] for k, j in slots if k == kind]
            if not picked:
                continue
            uids.extend(r.uid for r in picked)
            if kind not in self.cfg.loss.terms:
                continue
            rng = np.random.default_rng([self.seed, step, i + 1])
            batch = collate(picked, roi=self.model.roi)
            f = self.model.fused(batch)
            f = modality_dropout(f, self.cfg.dropout, rng)
            f = apply_span_mask(f, self.cfg.masking, rng, self.model.encoder.mask_embedding)
            h = encode(f, self.model.encoder)
            losses[kind] = batch_mean(masked_ce_per_sample(h, batch.targets, f.mask & (batch.targets >= 0), self.model.head))
        return losses, uids

    def learning_rate(self, step: int) -> float:
        warm = self.cfg.optim.warmup
        return self.cfg.optim.lr * min(1.0, (step + 1) / warm) if warm > 0 else self.cfg.optim.lr

    def train_step(self) -> dict:
        t0 = time.perf_counter()
        step = self.step
        slots = self.slots(step)
        try:
            losses, uids = self.kind_losses(step, slots)
        except NumericError as exc:
            uids = [self.corpora[k][j].uid for k, j in slots]
            raise TrainingDiverged(f"{exc} at step {step}; batch uids {uids}", step, uids) from exc
        total = total_loss(losses, self.cfg.loss.weights)
        value = total.item()
        if not np.isfinite(value):
            raise TrainingDiverged(f"non-finite loss {value} at step {step}; batch uids {uids}", step, uids)
        self.model.zero_grad()
        ad.backward(total)
        grads = {k: p.grad for k, p in self.params.items()}
        if self.cfg.optim.clip_norm > 0:
            clip_global_norm(grads, self.cfg.optim.clip_norm)
        adam_step(self.params, grads, self.adam, self.hyper, lr=self.learning_rate(step))
        self.step += 1
        wall = int(round((time.perf_counter() - t0) * 1000)) if self.cfg.train.wall_clock else 0
        return {
            "step": step,
            "losses": {k: (v.item() if isinstance(v, ad.Tensor) else float(v)) for k, v in losses.items()},
            "total": value,
            "wall_ms": wall,
            "uids": uids,
        }

    def run(self, steps: int, on_step=None) -> list[dict]:
        rows = []
        for _ in range(steps):
            row = self.train_step()
            rows.append(row)
            if on_step is not None:
                on_step(self, row)
        return rows

    # ----------------------------------------------------------- persistence

    def checkpoint(self) -> ckpt_io.Checkpoint:
        header = {
            "kind": "pretrain",
            "config": json.loads(dumps(self.cfg)),
            "seed": self.seed,
            "step": self.step,
            "adam_step": self.adam.step,
            "phonemes": self.phonemes,
            "units": self.units,
            "rng": {"scheme": "counter", "key": [self.seed, self.step]},
        }
        blocks = {}
        for name, p in self.params.items():
            blocks[f"param/{name}"] = p.data
        for name in self.params:
            blocks[f"adam_m/{name}"] = self.adam.m[name]
        for name in self.params:
            blocks[f"adam_v/{name}"] = self.adam.v[name]
        return ckpt_io.Checkpoint(header, blocks)

    def restore(self, ck: ckpt_io.Checkpoint) -> None:
        self.model.load_state_dict(ck.group("param"))
        m, v = ck.group("adam_m"), ck.group("adam_v")
        for name in self.params:
            self.adam.m[name][...] = m[name]
            self.adam.v[name][...] = v[name]
        self.adam.step = int(ck.header["adam_step"])
        self.step = int(ck.header["step"])
        self.seed = int(ck.header["seed"])

    @classmethod
    def from_checkpoint(cls, ck: ckpt_io.Checkpoint, corpora: dict) -> "Pretrainer":
        cfg = loads(json.dumps(ck.header["config"]))
        trainer = cls(cfg, corpora, ck.header["phonemes"], ck.header["units"], seed=ck.header["seed"])
        trainer.restore(ck)
        return trainer


def load_model(ck: ckpt_io.Checkpoint) -> TriModalModel:
    cfg = loads(json.dumps(ck.header["config"]))
    model = TriModalModel(cfg.model, ck.header["phonemes"], ck.header["units"], cfg.corpus.roi)
    model.load_state_dict(ck.group("param"))
    return model


def pretrain(cfg: RunConfig, corpora: dict, phonemes: int, units: int, seed: int | None = None, out_dir=None, steps: int | None = None):
    """Run the configured number of steps; optionally stream metrics and checkpoints to ``out_dir``."""
    trainer = Pretrainer(cfg, corpora, phonemes, units, seed)
    steps = cfg.train.steps if steps is None else steps
    sink = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        sink = (out_dir / "metrics.csv").open("w")
        sink.write(METRICS_HEADER + "\n")

    def on_step(tr: Pretrainer, row: dict) -> None:
        if sink is not None:
            sink.write(format_metrics(row) + "\n")
        every = cfg.train.checkpoint_every
        if out_dir is not None and every and tr.step % every == 0:
            ckpt_io.save(tr.checkpoint(), out_dir / f"step{tr.step:06d}.ckpt")

    try:
        rows = trainer.run(steps, on_step)
    except TrainingDiverged as exc:
        if out_dir is not None:
            (out_dir / "divergence.json").write_text(json.dumps({"error": str(exc), "step": exc.step, "uids": exc.uids}, indent=2) + "\n")
        raise
    finally:
        if sink is not None:
            sink.close()
    if out_dir is not None:
        ckpt_io.save(trainer.checkpoint(), out_dir / "final.ckpt")
    return trainer, rows
