"""Non-autoregressive phoneme-to-unit model: text encoder, duration predictor, unit decoder.

Encoder states are repeated by duration (ground truth while training,
rounded predictions at inference) and the decoder classifies every frame.
Each expanded frame also receives its relative position inside its phoneme,
which is what lets a per-frame decoder split a phoneme into sub-units.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .backbone import Transformer
from .encoders import check_vocab
from .nn import Module, glorot, init_normal, init_zeros
from .objective import AdamHyper, AdamState, adam_step


def expand_by_duration(states, durations) -> Tensor:
    """Repeat row i of ``states`` ``durations[i]`` times (zero drops the row)."""
    states = states if isinstance(states, Tensor) else Tensor(states)
    durations = np.asarray(durations, dtype=np.int64)
    if durations.shape != (states.shape[0],):
        raise ad.ShapeError(f"{len(durations)} durations for {states.shape[0]} states")
    if np.any(durations < 0):
        raise ContractError("durations must be non-negative")
    index = np.repeat(np.arange(states.shape[0]), durations)
    if index.size == 0:
        return Tensor(np.zeros((0,) + states.shape[1:]))
    return ad.take_rows(states, index)


def round_durations(predicted: np.ndarray) -> np.ndarray:
    """Nearest integer (halves round up), never below one frame."""
    return np.maximum(1, np.floor(np.asarray(predicted) + 0.5)).astype(np.int64)


def within_phoneme_progress(durations: np.ndarray) -> np.ndarray:
    if len(durations) == 0:
        return np.zeros(0)
    return np.concatenate([(np.arange(d) + 0.5) / d for d in durations if d > 0] or [np.zeros(0)])


@dataclass(frozen=True)
class P2UConfig:
    phonemes: int = 8
    units: int = 16
    dim: int = 32
    heads: int = 2
    enc_layers: int = 2
    dec_layers: int = 2
    max_len: int = 256
    lr: float = 3e-3
    warmup: int = 50
    steps: int = 600
    batch_size: int = 16
    duration_weight: float = 1.0
    seed: int = 0


class Phoneme2UnitModel(Module):
    def __init__(self, cfg: P2UConfig):
        rng = np.random.default_rng([cfg.seed, 0x9201])
        self.cfg = cfg
        d = cfg.dim
        self.embedding = init_normal(rng, (cfg.phonemes, d), 1.0)
        self.encoder = Transformer(d, cfg.enc_layers, cfg.heads, 2 * d, rng, max_len=cfg.max_len)
        self.duration_w = glorot(rng, d, 1)
        self.duration_b = ad.parameter(np.array([1.0]))
        self.progress = init_normal(rng, (d,), 1.0)
        self.decoder = Transformer(d, cfg.dec_layers, cfg.heads, 2 * d, rng, max_len=cfg.max_len)
        self.out_w = glorot(rng, d, cfg.units)
        self.out_b = init_zeros((cfg.units,))
        self.loss_history: list[float] = []

    # batched pieces --------------------------------------------------------

    def _encode(self, phonemes: list) -> tuple[Tensor, np.ndarray]:
        lengths = np.array([len(p) for p in phonemes], dtype=np.int64)
        ids = np.zeros((len(phonemes), max(1, lengths.max())), dtype=np.int64)
        for b, p in enumerate(phonemes):
            ids[b, : len(p)] = p
        states = self.encoder(ad.take_rows(self.embedding, ids), lengths)
        return states, lengths

    def _durations(self, states: Tensor) -> Tensor:
        out = ad.softplus(ad.linear(states, self.duration_w, self.duration_b))
        return ad.reshape(out, out.shape[:-1])

    def _decode(self, states: Tensor, durations: list) -> tuple[Tensor, np.ndarray]:
        frames = np.array([int(np.sum(d)) for d in durations], dtype=np.int64)
        width = max(1, frames.max())
        b_idx = np.zeros((len(durations), width), dtype=np.int64)
        p_idx = np.zeros_like(b_idx)
        prog = np.zeros((len(durations), width))
        for b, d in enumerate(durations):
            n = frames[b]
            b_idx[b] = b
            p_idx[b, :n] = np.repeat(np.arange(len(d)), d)
            prog[b, :n] = within_phoneme_progress(np.asarray(d))
        expanded = ad.getitem(states, (b_idx, p_idx))
        x = ad.add(expanded, ad.mul(prog[..., None], self.progress))
        h = self.decoder(x, frames)
        return ad.linear(h, self.out_w, self.out_b), frames

    # public ---------------------------------------------------------------

    def loss(self, phonemes: list, units: list, durations: list) -> Tensor:
        states, lengths = self._encode(phonemes)
        pred = self._durations(states)
        logits, frames = self._decode(states, durations)
        valid_f = np.arange(logits.shape[1])[None, :] < frames[:, None]
        tgt = np.zeros(valid_f.shape, dtype=np.int64)
        for b, u in enumerate(units):
            tgt[b, : len(u)] = u
        rows_b, rows_t = np.nonzero(valid_f)
        logp = ad.log_softmax(ad.getitem(logits, (rows_b, rows_t)), axis=-1)
        ce = ad.neg(ad.mean(ad.getitem(logp, (np.arange(rows_b.size), tgt[rows_b, rows_t]))))
        valid_p = np.arange(pred.shape[1])[None, :] < lengths[:, None]
        true_d = np.zeros(valid_p.shape)
        for b, d in enumerate(durations):
            true_d[b, : len(d)] = d
        pb, pl = np.nonzero(valid_p)
        err = ad.sub(ad.getitem(pred, (pb, pl)), true_d[pb, pl])
        mse = ad.mean(ad.square(err))
        return ad.add(ce, ad.mul(mse, self.cfg.duration_weight))

    def predict_durations(self, phonemes) -> np.ndarray:
        ids = np.asarray(phonemes, dtype=np.int64)
        check_vocab(ids, self.cfg.phonemes, "phoneme")
        if ids.size == 0:
            return np.zeros(0)
        states, _ = self._encode([ids])
        return self._durations(states).data[0]

    def infer(self, phonemes) -> tuple[np.ndarray, np.ndarray]:
        """Units and the (rounded, >= 1) durations used to produce them."""
        ids = np.asarray(phonemes, dtype=np.int64)
        check_vocab(ids, self.cfg.phonemes, "phoneme")
        if ids.size == 0:
            return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
        states, _ = self._encode([ids])
        durations = round_durations(self._durations(states).data[0])
        logits, frames = self._decode(states, [durations])
        units = logits.data[0, : frames[0]].argmax(axis=-1).astype(np.int64)
        if len(units) != int(durations.sum()):
            raise AssertionError("decoded length differs from the duration sum")
        return units, durations


def phoneme2unit_infer(model: Phoneme2UnitModel, phonemes) -> np.ndarray:
    return model.infer(phonemes)[0]


def phoneme2unit_train(pairs, cfg: P2UConfig) -> Phoneme2UnitModel:
    """Fit on (phonemes, units, durations) triples with teacher-forced durations."""
    pairs = list(pairs)
    if not pairs:
        raise ContractError("phoneme2unit training needs at least one pair")
    for ph, un, du in pairs:
        if int(np.sum(du)) != len(un) or len(du) != len(ph):
            raise ContractError("each pair needs one duration per phoneme summing to the unit count")
    model = Phoneme2UnitModel(cfg)
    params = dict(model.named_parameters())
    state = AdamState.fresh(params)
    hyper = AdamHyper(lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 0x7A1])
    for step in range(cfg.steps):
        idx = rng.integers(len(pairs), size=min(cfg.batch_size, len(pairs)))
        batch = [pairs[i] for i in idx]
        model.zero_grad()
        loss = model.loss([b[0] for b in batch], [b[1] for b in batch], [b[2] for b in batch])
        ad.backward(loss)
        lr = cfg.lr * min(1.0, (step + 1) / max(1, cfg.warmup))
        adam_step(params, {k: p.grad for k, p in params.items()}, state, hyper, lr=lr)
        model.loss_history.append(loss.item())
    return model


def config_dict(cfg: P2UConfig) -> dict:
    return asdict(cfg)
