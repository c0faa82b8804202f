"""In-memory orchestration of the stages the CLI runs one at a time."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .corpus import by_kind, generate
from .phoneme2unit import P2UConfig, Phoneme2UnitModel, phoneme2unit_train
from .tokenizer import Teacher, TokenizerModel, fit_tokenizer, tokenize


def p2u_config(cfg: RunConfig) -> P2UConfig:
    s = cfg.p2u
    return P2UConfig(
        phonemes=cfg.corpus.phonemes,
        units=cfg.tokenizer.k,
        dim=s.dim,
        heads=s.heads,
        enc_layers=s.enc_layers,
        dec_layers=s.dec_layers,
        lr=s.lr,
        warmup=s.warmup,
        steps=s.steps,
        batch_size=s.batch_size,
        duration_weight=s.duration_weight,
        seed=s.seed,
    )


def p2u_pairs(records) -> list:
    """(phonemes, units, durations) from tokenized AP records."""
    return [(r.phonemes, r.target, r.durations) for r in records if r.kind == "AP" and r.target is not None]


def fit_corpus_tokenizer(cfg: RunConfig, train_records) -> tuple[TokenizerModel, object]:
    teacher = Teacher(cfg.corpus, dim=cfg.tokenizer.teacher_dim, seed=cfg.tokenizer.seed)
    av = [r for r in train_records if r.kind == "AV"]
    t = cfg.tokenizer
    return fit_tokenizer(av, t.k, teacher, max_iters=t.max_iters, seed=t.seed, n_init=t.n_init)


def tokenize_all(records, model: TokenizerModel, p2u: Phoneme2UnitModel | None = None) -> list:
    """Tokenize every record; P records are left untouched when ``p2u`` is None."""
    out = []
    for r in records:
        if r.kind == "P" and p2u is None:
            out.append(r)
        else:
            out.append(tokenize(r, model, p2u))
    return out


@dataclass
class Prepared:
    splits: dict
    tokenizer: TokenizerModel
    p2u: Phoneme2UnitModel
    train: list

    @property
    def corpora(self) -> dict:
        return by_kind(self.train)


def prepare(cfg: RunConfig) -> Prepared:
    """Generate the corpus, fit the tokenizer and phoneme2unit model, and tokenize all training records."""
    splits = {k: [r for r, _ in v] for k, v in generate(cfg.corpus).items()}
    tok, _ = fit_corpus_tokenizer(cfg, splits["train"])
    first = tokenize_all(splits["train"], tok)
    p2u = phoneme2unit_train(p2u_pairs(first), p2u_config(cfg))
    train = tokenize_all(first, tok, p2u)
    return Prepared(splits, tok, p2u, train)


def unit_purity(units: np.ndarray, truth: np.ndarray) -> float:
    """Fraction of frames whose unit's majority latent label matches the frame's label."""
    units, truth = np.asarray(units), np.asarray(truth)
    hit = 0
    for u in np.unique(units):
        hit += np.bincount(truth[units == u]).max()
    return hit / len(units)
