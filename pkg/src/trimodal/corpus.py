"""Synthetic tri-modal corpora rendered from shared latent unit scripts.

Each utterance starts from a phoneme sequence drawn from a sticky Markov
chain.  Every phoneme owns a fixed duration and ``group_size`` latent units;
frame j of a d-frame phoneme p carries unit ``p * group_size + (group_size * j) // d``.
Visual frames show a dark elliptical opening sized per unit, audio is a per-unit
spectral template at four sub-frames per visual frame.  Both get Gaussian
perturbation scaled by ``noise_level``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .encoders import FBANK_DIM, STACK
from .records import KIND_INPUTS, Record, read_records, write_records

SPLITS = ("train", "labeled", "test")


@dataclass(frozen=True)
class CorpusConfig:
    sizes: dict = field(default_factory=lambda: {"AV": 200, "A": 200, "AP": 200, "P": 200})
    labeled: int = 200
    test: int = 200
    latent_units: int = 16
    group_size: int = 2
    roi: int = 16
    min_phonemes: int = 8
    max_phonemes: int = 12
    durations: tuple = (2, 3, 4)
    stickiness: float = 0.8
    noise_level: float = 1.0
    visual_noise: float = 0.25
    audio_noise: float = 0.5
    unit_contrast: float = 0.5
    envelope: float = 0.75
    seed: int = 0

    def __post_init__(self):
        for kind, n in self.sizes.items():
            if kind not in KIND_INPUTS or n < 0:
                raise ValueError(f"bad corpus size entry {kind}={n}")
        if self.latent_units % self.group_size:
            raise ValueError("latent_units must be a multiple of group_size")
        if min(self.durations) < 1:
            raise ValueError("phoneme durations must be at least one frame")
        if self.noise_level < 0 or self.visual_noise < 0 or self.audio_noise < 0:
            raise ValueError("noise scales must be non-negative")

    @property
    def phonemes(self) -> int:
        return self.latent_units // self.group_size

    def canonical(self) -> str:
        d = asdict(self)
        d["sizes"] = {k: int(self.sizes[k]) for k in sorted(self.sizes)}
        d["durations"] = list(self.durations)
        return json.dumps(d, sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()


@dataclass
class LatentScript:
    uid: int
    phonemes: np.ndarray
    durations: np.ndarray
    units: np.ndarray


class World:
    """Everything fixed by the generator seed: grammar, durations and rendering templates."""

    def __init__(self, cfg: CorpusConfig):
        self.cfg = cfg
        rng = np.random.default_rng([cfg.seed, 0xC0DE])
        n_ph = cfg.phonemes
        self.successor = rng.permutation(n_ph)
        self.duration_of = rng.choice(np.asarray(cfg.durations), size=n_ph)
        self.visual_templates = _mouth_shapes(cfg.latent_units, cfg.roi, rng)
        # shared spectral tilt carries most of the energy; units differ by a smaller part
        bins = np.arange(FBANK_DIM)
        tilt = cfg.envelope * (1.0 + 0.5 * np.cos(np.pi * bins / (FBANK_DIM - 1)))
        base = rng.normal(0.0, 1.0, size=(cfg.latent_units, 1, FBANK_DIM))
        wobble = rng.normal(0.0, 0.3, size=(cfg.latent_units, STACK, FBANK_DIM))
        self.audio_templates = tilt + cfg.unit_contrast * (base + wobble)  # (units, 4, 26)

    def units_for(self, phonemes: np.ndarray, durations: np.ndarray) -> np.ndarray:
        g = self.cfg.group_size
        out = []
        for p, d in zip(phonemes, durations):
            j = np.arange(d)
            out.append(p * g + (g * j) // d)
        return np.concatenate(out).astype(np.int64) if out else np.zeros(0, dtype=np.int64)

    def script(self, uid: int, rng: np.random.Generator) -> LatentScript:
        cfg = self.cfg
        n = int(rng.integers(cfg.min_phonemes, cfg.max_phonemes + 1))
        ph = np.empty(n, dtype=np.int64)
        ph[0] = rng.integers(cfg.phonemes)
        for i in range(1, n):
            if rng.random() < cfg.stickiness:
                ph[i] = self.successor[ph[i - 1]]
            else:
                ph[i] = rng.integers(cfg.phonemes)
        dur = self.duration_of[ph].astype(np.int64)
        return LatentScript(uid, ph, dur, self.units_for(ph, dur))

    def render_visual(self, units: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        sigma = self.cfg.noise_level * self.cfg.visual_noise
        frames = self.visual_templates[units] + rng.normal(0.0, 1.0, size=(len(units), self.cfg.roi, self.cfg.roi)) * sigma
        return np.clip(frames, 0.0, 1.0).astype(np.float32).astype(np.float64)

    def render_audio(self, units: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        sigma = self.cfg.noise_level * self.cfg.audio_noise
        clean = self.audio_templates[units].reshape(len(units) * STACK, FBANK_DIM)
        noisy = clean + rng.normal(0.0, 1.0, size=clean.shape) * sigma
        return noisy.astype(np.float32).astype(np.float64)


def _mouth_shapes(count: int, roi: int, rng: np.random.Generator) -> np.ndarray:
    """Dark ellipses on a lighter background, one (width, height) opening per unit.

    Units differ in area and in the balance of horizontal and vertical edges,
    which survives global pooling of local filter responses.
    """
    n_w = int(np.ceil(np.sqrt(count)))
    n_h = -(-count // n_w)
    widths = np.linspace(0.12, 0.42, n_w) * roi
    heights = np.linspace(0.08, 0.38, n_h) * roi if n_h > 1 else np.array([0.2 * roi])
    shapes = [(w, h) for w in widths for h in heights][:count]
    order = rng.permutation(count)
    c = (roi - 1) / 2.0
    yy, xx = np.mgrid[0:roi, 0:roi].astype(np.float64)
    out = np.empty((count, roi, roi))
    for u in range(count):
        w, h = shapes[order[u]]
        r = np.sqrt(((xx - c) / w) ** 2 + ((yy - c) / h) ** 2)
        inside = 1.0 / (1.0 + np.exp((r - 1.0) * 8.0))
        out[u] = 0.75 - 0.6 * inside
    return out


def utterance_rng(seed: int, split: str, uid: int) -> np.random.Generator:
    return np.random.default_rng([seed, SPLITS.index(split) + 1, uid])


def render(world: World, split: str, uid: int, kind: str) -> tuple[Record, LatentScript]:
    """Draw one script and export only the modalities ``kind`` carries.

    ``labeled``/``test`` utterances are AV records that also keep their
    ground-truth units as the target.
    """
    rng = utterance_rng(world.cfg.seed, split, uid)
    script = world.script(uid, rng)
    visual = world.render_visual(script.units, rng)
    audio = world.render_audio(script.units, rng)
    want_v, want_a, want_p = KIND_INPUTS[kind]
    rec = Record(
        uid=uid,
        kind=kind,
        visual=visual if want_v else None,
        audio=audio if want_a else None,
        phonemes=script.phonemes.copy() if want_p else None,
        durations=script.durations.copy() if kind == "AP" else None,
        target=script.units.copy() if split != "train" else None,
    )
    return rec, script


def generate(cfg: CorpusConfig) -> dict:
    """Render every split; returns {split: [(Record, LatentScript), ...]}."""
    world = World(cfg)
    out = {}
    uid = 0
    train = []
    for kind in ("AV", "A", "AP", "P"):
        for _ in range(int(cfg.sizes.get(kind, 0))):
            train.append(render(world, "train", uid, kind))
            uid += 1
    out["train"] = train
    for split, n in (("labeled", cfg.labeled), ("test", cfg.test)):
        out[split] = [render(world, split, uid + i, "AV") for i in range(n)]
        uid += n
    return out


def generate_corpus(cfg: CorpusConfig, out_dir) -> dict:
    """Write ``<split>.rec`` files plus ``manifest.json``; returns the manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    splits = generate(cfg)
    counts = {}
    for split, items in splits.items():
        records = [r for r, _ in items]
        write_records(out_dir / f"{split}.rec", records)
        counts[split] = {k: sum(r.kind == k for r in records) for k in ("AV", "A", "AP", "P")}
    manifest = {
        "format": "trimodal-corpus/1",
        "seed": cfg.seed,
        "config_hash": cfg.digest(),
        "config": json.loads(cfg.canonical()),
        "counts": counts,
        "files": {split: f"{split}.rec" for split in splits},
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_corpus(corpus_dir) -> tuple[dict, dict]:
    corpus_dir = Path(corpus_dir)
    manifest = json.loads((corpus_dir / "manifest.json").read_text())
    splits = {split: read_records(corpus_dir / name) for split, name in manifest["files"].items()}
    for split, records in splits.items():
        found = {k: sum(r.kind == k for r in records) for k in ("AV", "A", "AP", "P")}
        if found != manifest["counts"][split]:
            raise ValueError(f"{split}: manifest counts {manifest['counts'][split]} but found {found}")
    return manifest, splits


def config_from_manifest(manifest: dict) -> CorpusConfig:
    c = dict(manifest["config"])
    c["durations"] = tuple(c["durations"])
    return CorpusConfig(**c)


def by_kind(records) -> dict:
    out = {k: [] for k in ("AV", "A", "AP", "P")}
    for r in records:
        out[r.kind].append(r)
    return out
