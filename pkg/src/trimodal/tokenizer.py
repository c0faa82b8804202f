"""Shared discrete units for every corpus kind.

A fixed teacher maps visual and/or audio observations to per-frame features;
one k-means codebook turns those features into unit ids.  Audio-only and
audio-text records are tokenized from audio alone (the text never influences
their targets); text-only records go through a phoneme-to-unit model.
"""

from __future__ import annotations

import itertools
import json
import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .autodiff import ContractError
from .corpus import CorpusConfig, World
from .encoders import stack_fbank
from .records import KIND_INPUTS, Record

UTOK_MAGIC = b"UTOK"
UTOK_VERSION = 1
EXHAUSTIVE_SEEDS = 512


class MissingModelError(RuntimeError):
    pass


class TokenizerFormatError(ValueError):
    pass


# ------------------------------------------------------------------ k-means


@dataclass
class KMeansFit:
    centroids: np.ndarray
    distortion: float
    history: list  # distortion after each assignment step of the winning restart
    iterations: int


def _sq_dists(x: np.ndarray, c: np.ndarray, chunk: int = 2048) -> np.ndarray:
    out = np.empty((len(x), len(c)))
    for lo in range(0, len(x), chunk):
        diff = x[lo : lo + chunk, None, :] - c[None, :, :]
        out[lo : lo + chunk] = np.einsum("nkf,nkf->nk", diff, diff)
    return out


def _plusplus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    chosen = [int(rng.integers(n))]
    d2 = _sq_dists(x, x[chosen[-1] : chosen[-1] + 1])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            idx = next(i for i in range(n) if i not in chosen)
        chosen.append(idx)
        d2 = np.minimum(d2, _sq_dists(x, x[idx : idx + 1])[:, 0])
    return x[chosen].copy()


def _lloyd(x: np.ndarray, centroids: np.ndarray, max_iters: int) -> KMeansFit:
    k = len(centroids)
    labels = None
    history = []
    it = 0
    for it in range(1, max_iters + 1):
        d2 = _sq_dists(x, centroids)
        new_labels = d2.argmin(axis=1)
        best = d2[np.arange(len(x)), new_labels]
        distortion = float(best.sum())
        if history and distortion > history[-1] * (1 + 1e-12) + 1e-12:
            raise AssertionError(f"k-means distortion rose from {history[-1]} to {distortion}")
        history.append(distortion)
        if labels is not None and np.array_equal(labels, new_labels):
            break
        labels = new_labels
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, x)
        filled = counts > 0
        centroids = centroids.copy()
        centroids[filled] = sums[filled] / counts[filled, None]
        empty = np.flatnonzero(~filled)
        if empty.size:
            # farthest points (w.r.t. their current centroid) re-seed empty clusters
            order = np.argsort(-best, kind="stable")
            for cluster, point in zip(empty, order):
                centroids[cluster] = x[point]
    else:
        # iteration budget ran out after an update step: score the final centroids
        final = float(_sq_dists(x, centroids).min(axis=1).sum())
        if final > history[-1] * (1 + 1e-12) + 1e-12:
            raise AssertionError(f"k-means distortion rose from {history[-1]} to {final}")
        history.append(final)
    return KMeansFit(centroids, history[-1], history, it)


def kmeans_fit(features, k: int, max_iters: int = 100, seed: int = 0, n_init: int = 10) -> KMeansFit:
    """Lloyd iterations from k-means++ seeding, best of ``n_init`` restarts.

    When there are at most ``EXHAUSTIVE_SEEDS`` ways to pick K distinct points,
    each such pick is tried as a seed as well.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ContractError(f"features must be (N, F), got shape {x.shape}")
    if len(x) < k:
        raise ContractError(f"k-means needs at least K={k} points, got {len(x)}")
    if k < 1 or n_init < 1:
        raise ContractError("K and n_init must be positive")
    if not np.all(np.isfinite(x)):
        raise ContractError("k-means features must be finite")
    starts = [_plusplus(x, k, np.random.default_rng([seed, r])) for r in range(n_init)]
    distinct = np.unique(x, axis=0)
    if len(distinct) >= k and math.comb(len(distinct), k) <= EXHAUSTIVE_SEEDS:
        # small problems: also start from every K-subset of distinct points
        starts += [distinct[list(c)] for c in itertools.combinations(range(len(distinct)), k)]
    best = None
    for start in starts:
        fit = _lloyd(x, start, max_iters)
        if best is None or fit.distortion < best.distortion:
            best = fit
    return best


def kmeans_assign(features, centroids) -> np.ndarray:
    """Nearest centroid per row by squared distance; ties go to the lowest index."""
    x = np.asarray(features, dtype=np.float64)
    c = np.asarray(centroids, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != c.shape[1]:
        raise ContractError(f"feature width {x.shape} does not match centroids {c.shape}")
    if len(x) == 0:
        return np.zeros(0, dtype=np.int64)
    return _sq_dists(x, c).argmin(axis=1).astype(np.int64)


# ------------------------------------------------------------------ teacher


def _wiener(templates: np.ndarray, codes: np.ndarray, ridge: float) -> np.ndarray:
    """Linear map sending centered templates to codes, damped along directions
    where per-pixel noise of the given variance would dominate."""
    gram = templates.T @ templates
    scale = max(ridge, 1e-9 * np.trace(gram) / len(gram))
    return np.linalg.solve(gram + scale * np.eye(len(gram)), templates.T @ codes)


class Teacher:
    """Fixed linear read-out of the generator's templates.

    Each present modality is mapped to a per-unit code vector by a ridge
    read-out of its clean templates, regularized by the rendering noise; the teacher feature is the mean over the present
    modalities, so noise in the observations shows up as noise in the features.
    """

    def __init__(self, corpus: CorpusConfig, dim: int = 16, seed: int = 0):
        self.corpus = corpus
        self.dim = dim
        self.seed = seed
        world = World(corpus)
        rng = np.random.default_rng([seed, 0x7EAC])
        codes = rng.normal(0.0, 1.0, size=(corpus.latent_units, dim))
        vis = world.visual_templates.reshape(corpus.latent_units, -1)
        aud = world.audio_templates.reshape(corpus.latent_units, -1)
        self.vis_mean = vis.mean(axis=0)
        self.aud_mean = aud.mean(axis=0)
        n = corpus.latent_units
        self.visual_map = _wiener(vis - self.vis_mean, codes, (corpus.noise_level * corpus.visual_noise) ** 2 * n)
        self.audio_map = _wiener(aud - self.aud_mean, codes, (corpus.noise_level * corpus.audio_noise) ** 2 * n)

    def config(self) -> dict:
        return {"corpus": json.loads(self.corpus.canonical()), "dim": self.dim, "seed": self.seed}

    @classmethod
    def from_config(cls, cfg: dict) -> "Teacher":
        c = dict(cfg["corpus"])
        c["durations"] = tuple(c["durations"])
        return cls(CorpusConfig(**c), dim=cfg["dim"], seed=cfg["seed"])

    def features(self, visual=None, audio=None) -> np.ndarray:
        parts = []
        if visual is not None:
            v = np.asarray(visual, dtype=np.float64).reshape(len(visual), -1)
            parts.append((v - self.vis_mean) @ self.visual_map)
        if audio is not None:
            a = stack_fbank(audio)
            parts.append((a - self.aud_mean) @ self.audio_map)
        if not parts:
            raise ContractError("teacher needs visual or audio input")
        if len(parts) == 2 and len(parts[0]) != len(parts[1]):
            raise ContractError(f"visual ({len(parts[0])}) and audio ({len(parts[1])}) frame counts differ")
        return sum(parts) / len(parts)


@dataclass
class TokenizerModel:
    centroids: np.ndarray
    teacher: Teacher

    def __post_init__(self):
        if self.centroids.ndim != 2 or len(self.centroids) < 2:
            raise ContractError("a tokenizer needs at least two centroids")
        if not np.all(np.isfinite(self.centroids)):
            raise ContractError("centroids must be finite")

    @property
    def k(self) -> int:
        return len(self.centroids)

    def units(self, visual=None, audio=None) -> np.ndarray:
        return kmeans_assign(self.teacher.features(visual, audio), self.centroids)

    def save(self, path) -> None:
        path = Path(path)
        write_centroids(path, self.centroids)
        path.with_suffix(".json").write_text(json.dumps(self.teacher.config(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "TokenizerModel":
        path = Path(path)
        teacher = Teacher.from_config(json.loads(path.with_suffix(".json").read_text()))
        return cls(read_centroids(path), teacher)


def write_centroids(path, centroids: np.ndarray) -> None:
    c = np.ascontiguousarray(centroids, dtype="<f8")
    k, f = c.shape
    Path(path).write_bytes(UTOK_MAGIC + struct.pack("<III", UTOK_VERSION, k, f) + c.tobytes())


def read_centroids(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != UTOK_MAGIC:
        raise TokenizerFormatError(f"{path}: missing UTOK magic")
    version, k, f = struct.unpack_from("<III", raw, 4)
    if version != UTOK_VERSION:
        raise TokenizerFormatError(f"{path}: centroid table version {version}, expected {UTOK_VERSION}")
    body = raw[16:]
    if len(body) != k * f * 8:
        raise TokenizerFormatError(f"{path}: expected {k * f * 8} bytes of centroids, found {len(body)}")
    return np.frombuffer(body, dtype="<f8").reshape(k, f).astype(np.float64)


def fit_tokenizer(records, k: int, teacher: Teacher, max_iters: int = 100, seed: int = 0, n_init: int = 4) -> tuple[TokenizerModel, KMeansFit]:
    """Cluster teacher features of paired visual-audio records."""
    feats = [teacher.features(r.visual, r.audio) for r in records if r.visual is not None and r.audio is not None]
    if not feats:
        raise ContractError("tokenizer fitting needs visual-audio records")
    fit = kmeans_fit(np.concatenate(feats), k, max_iters=max_iters, seed=seed, n_init=n_init)
    return TokenizerModel(fit.centroids, teacher), fit


def tokenize(sample: Record, model: TokenizerModel, p2u=None) -> Record:
    """Attach target units to a raw record according to its kind.

    AV: units from visual+audio teacher features.  A and AP: units from audio
    alone.  P: phoneme2unit inference, which also fixes the frame durations.
    """
    if sample.kind not in KIND_INPUTS:
        raise ContractError(f"unknown source kind {sample.kind!r}")
    sample.check_kind()
    if sample.kind == "AV":
        return replace(sample, target=model.units(sample.visual, sample.audio))
    if sample.kind in ("A", "AP"):
        return replace(sample, target=model.units(None, sample.audio))
    if p2u is None:
        raise MissingModelError("text-only records need a phoneme2unit model")
    units, durations = p2u.infer(sample.phonemes)
    return replace(sample, target=units, durations=durations)
