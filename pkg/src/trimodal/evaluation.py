"""Noise mixing, WER, frame-level linear probes and embedding export."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .encoders import FBANK_DIM
from .model import TASK_MODALITIES, TriModalModel, collate, pooled_embeddings
from .nn import Module, init_zeros
from .objective import AdamHyper, AdamState, adam_step

# ------------------------------------------------------------------ noise

_BINS = np.arange(FBANK_DIM)
NOISE_PROFILES = {
    "babble": np.exp(-(((_BINS - 7.0) / 6.0) ** 2)) + 0.2,
    "speech": sum(np.exp(-(((_BINS - c) / 1.5) ** 2)) for c in (4.0, 11.0, 18.0)) + 0.1,
    "music": 0.15 + 0.85 * (np.cos(2 * np.pi * _BINS / 6.5) > 0.3) * np.linspace(0.4, 1.0, FBANK_DIM),
}


def noise_frames(kind: str, frames: int, rng: np.random.Generator) -> np.ndarray:
    """Colored Gaussian noise in the filterbank domain with a fixed spectral profile."""
    if kind not in NOISE_PROFILES:
        raise ContractError(f"unknown noise type {kind!r}")
    return rng.normal(0.0, 1.0, size=(frames, FBANK_DIM)) * NOISE_PROFILES[kind]


def power(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.mean(x * x))


def mix_noise(clean, noise, snr_db: float) -> np.ndarray:
    """Add ``noise`` scaled so that 10 log10(P_clean / P_scaled_noise) equals ``snr_db``.

    Noise is tiled or cropped along the first axis to the clean length.
    """
    clean = np.asarray(clean, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if len(noise) == 0:
        raise ContractError("noise is empty")
    if len(noise) != len(clean):
        reps = -(-len(clean) // len(noise))
        noise = np.concatenate([noise] * reps, axis=0)[: len(clean)]
    p_clean, p_noise = power(clean), power(noise)
    if p_clean == 0.0 or p_noise == 0.0:
        raise ContractError("clean signal and noise must both have non-zero power")
    scale = np.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0)))
    return clean + scale * noise


def measured_snr(clean, mixed) -> float:
    clean = np.asarray(clean, dtype=np.float64)
    return 10.0 * np.log10(power(clean) / power(np.asarray(mixed) - clean))


def add_noise_to_records(records, kind: str, snr_db: float, seed: int) -> list:
    out = []
    for r in records:
        if r.audio is None:
            out.append(r)
            continue
        rng = np.random.default_rng([seed, r.uid, sorted(NOISE_PROFILES).index(kind)])
        out.append(replace(r, audio=mix_noise(r.audio, noise_frames(kind, len(r.audio), rng), snr_db)))
    return out


def augment_with_noise(records, noise_types, snr_range, copies: int, seed: int) -> list:
    """Originals plus ``copies`` noisy versions of each, with noise type and SNR drawn per copy."""
    lo, hi = snr_range
    out = list(records)
    for c in range(copies):
        for r in records:
            if r.audio is None:
                continue
            rng = np.random.default_rng([seed, r.uid, c, 0xA6])
            kind = noise_types[int(rng.integers(len(noise_types)))]
            snr = float(rng.uniform(lo, hi))
            out.append(replace(r, audio=mix_noise(r.audio, noise_frames(kind, len(r.audio), rng), snr)))
    return out


# -------------------------------------------------------------------- WER


def edit_counts(reference, hypothesis) -> tuple[int, int, int]:
    """(substitutions, deletions, insertions) of a minimum-cost alignment, unit costs."""
    ref, hyp = list(reference), list(hypothesis)
    n, m = len(ref), len(hyp)
    # cost, subs, dels, ins per cell; ties prefer substitution, then deletion
    prev = [(j, 0, 0, j) for j in range(m + 1)]
    for i in range(1, n + 1):
        cur = [(i, 0, i, 0)]
        for j in range(1, m + 1):
            c, s, d, ins = prev[j - 1]
            diag = (c, s, d, ins) if ref[i - 1] == hyp[j - 1] else (c + 1, s + 1, d, ins)
            c, s, d, ins = prev[j]
            up = (c + 1, s, d + 1, ins)
            c, s, d, ins = cur[j - 1]
            left = (c + 1, s, d, ins + 1)
            cur.append(min((diag, up, left), key=lambda t: t[0]))
        prev = cur
    _, s, d, ins = prev[m]
    return s, d, ins


def wer(reference, hypothesis) -> float:
    if len(reference) == 0:
        raise ContractError("WER needs a non-empty reference")
    s, d, i = edit_counts(reference, hypothesis)
    return (s + d + i) / len(reference)


def corpus_wer(pairs) -> float:
    edits = total = 0
    for ref, hyp in pairs:
        if len(ref) == 0:
            raise ContractError("WER needs non-empty references")
        edits += sum(edit_counts(ref, hyp))
        total += len(ref)
    return edits / total


def collapse(units) -> list:
    out = []
    for u in units:
        if not out or out[-1] != u:
            out.append(int(u))
    return out


# ------------------------------------------------------------------ probes


class LinearProbe(Module):
    def __init__(self, width: int, classes: int):
        self.weight = init_zeros((width, classes))
        self.bias = init_zeros((classes,))

    def __call__(self, h: Tensor) -> Tensor:
        return ad.linear(h, self.weight, self.bias)


@dataclass
class ProbeReport:
    task: str
    frame_accuracy: float
    wer: float
    frames: int
    utterances: int
    extra: dict = field(default_factory=dict)


def _task_modalities(task: str) -> tuple:
    key = task.upper()
    if key not in TASK_MODALITIES:
        raise ContractError(f"unknown task {task!r}; expected one of {sorted(TASK_MODALITIES)}")
    return TASK_MODALITIES[key]


def check_task_records(records, task: str) -> None:
    use = _task_modalities(task)
    for r in records:
        have = (r.visual is not None, r.audio is not None, r.phonemes is not None)
        if any(u and not h for u, h in zip(use, have)):
            raise ContractError(f"task {task} needs inputs {use} but record {r.uid} ({r.kind}) lacks one")
        if r.target is None:
            raise ContractError(f"record {r.uid} has no ground-truth units for probing")


def frame_features(model: TriModalModel, records, task: str, chunk: int = 32):
    """Flattened valid-frame h_f and labels under the task's zeroing configuration."""
    use = _task_modalities(task)
    feats, labels, spans = [], [], []
    records = list(records)
    for lo in range(0, len(records), chunk):
        batch = collate(records[lo : lo + chunk], use, model.roi)
        h = model.contextual(batch).data
        for b, n in enumerate(batch.lengths):
            spans.append((sum(len(x) for x in labels), int(n)))
            feats.append(h[b, :n])
            labels.append(batch.targets[b, :n])
    return np.concatenate(feats), np.concatenate(labels), spans


def _standardize(x: np.ndarray, stats=None):
    if stats is None:
        stats = (x.mean(axis=0), x.std(axis=0) + 1e-6)
    return (x - stats[0]) / stats[1], stats


def fit_probe(feats: np.ndarray, labels: np.ndarray, classes: int, steps: int, lr: float, batch_frames: int, seed: int):
    x, stats = _standardize(feats)
    probe = LinearProbe(x.shape[1], classes)
    params = dict(probe.named_parameters())
    state = AdamState.fresh(params)
    hyper = AdamHyper(lr=lr, beta2=0.999)
    rng = np.random.default_rng([seed, 0x9B])
    for _ in range(steps):
        idx = rng.integers(len(x), size=min(batch_frames, len(x)))
        logp = ad.log_softmax(probe(Tensor(x[idx])), axis=-1)
        loss = ad.neg(ad.mean(ad.getitem(logp, (np.arange(len(idx)), labels[idx]))))
        probe.zero_grad()
        ad.backward(loss)
        adam_step(params, {k: p.grad for k, p in params.items()}, state, hyper)
    return probe, stats


def evaluate_probe(model, probe, stats, records, task: str) -> ProbeReport:
    feats, labels, spans = frame_features(model, records, task)
    x, _ = _standardize(feats, stats)
    pred = probe(Tensor(x)).data.argmax(axis=-1)
    pairs = [(collapse(labels[s : s + n]), collapse(pred[s : s + n])) for s, n in spans]
    return ProbeReport(task.upper(), float((pred == labels).mean()), corpus_wer(pairs), len(labels), len(spans))


@dataclass
class ProbeResult:
    probe: LinearProbe
    stats: tuple
    report: ProbeReport
    model: TriModalModel


def finetune_probe(model: TriModalModel, train_records, test_records, task: str, classes: int, cfg) -> ProbeResult:
    """Train a framewise linear classifier on h_f under ``task`` zeroing and report on ``test_records``.

    For tasks that hear audio, ``cfg.augment_snr`` adds noisy copies of the
    training records so the probe does not only ever see clean audio.
    With ``cfg.tune_encoder`` the encoder is first tuned jointly with a probe
    (every parameter the task's inputs reach receives gradients; removed
    modalities receive none) and the final probe is fit on the tuned features.
    """
    check_task_records(train_records, task)
    check_task_records(test_records, task)
    if cfg.augment_snr and _task_modalities(task)[1]:
        train_records = augment_with_noise(list(train_records), cfg.noise_types, cfg.augment_snr, cfg.augment_copies, cfg.seed)
    if cfg.tune_encoder:
        tune_encoder(model, train_records, task, classes, cfg)
    feats, labels, _ = frame_features(model, train_records, task)
    probe, stats = fit_probe(feats, labels, classes, cfg.steps, cfg.lr, cfg.batch_frames, cfg.seed)
    report = evaluate_probe(model, probe, stats, test_records, task)
    return ProbeResult(probe, stats, report, model)


def tune_step(model: TriModalModel, probe: LinearProbe, records, task: str) -> Tensor:
    """Loss of one joint encoder+probe step (gradients left in ``.grad``)."""
    batch = collate(records, _task_modalities(task), model.roi)
    h = model.contextual(batch)
    rows_b, rows_t = np.nonzero(batch.targets >= 0)
    logp = ad.log_softmax(probe(ad.getitem(h, (rows_b, rows_t))), axis=-1)
    loss = ad.neg(ad.mean(ad.getitem(logp, (np.arange(rows_b.size), batch.targets[rows_b, rows_t]))))
    model.zero_grad()
    probe.zero_grad()
    ad.backward(loss)
    return loss


def tune_encoder(model: TriModalModel, records, task: str, classes: int, cfg) -> list:
    records = list(records)
    probe = LinearProbe(3 * model.cfg.dim, classes)
    params = dict(model.named_parameters())
    params.update({f"probe.{k}": v for k, v in probe.named_parameters()})
    state = AdamState.fresh(params)
    hyper = AdamHyper(lr=cfg.tune_lr)
    rng = np.random.default_rng([cfg.seed, 0x7E])
    losses = []
    for _ in range(cfg.steps):
        idx = rng.integers(len(records), size=min(cfg.tune_batch, len(records)))
        loss = tune_step(model, probe, [records[i] for i in idx], task)
        adam_step(params, {k: p.grad for k, p in params.items()}, state, hyper)
        losses.append(loss.item())
    return losses


def noisy_reports(model, result: ProbeResult, test_records, task: str, noise_types, snr_grid, seed: int) -> dict:
    """WER/accuracy per (noise type, SNR) with noise mixed into the audio of the test set."""
    out = {}
    for kind in noise_types:
        for snr in snr_grid:
            noisy = add_noise_to_records(test_records, kind, snr, seed)
            rep = evaluate_probe(model, result.probe, result.stats, noisy, task)
            out[(kind, float(snr))] = rep
    return out


# ------------------------------------------------------------- embeddings


def pca_2d(points: np.ndarray) -> np.ndarray:
    """Project onto the top two principal axes, signs fixed so each axis' largest loading is positive."""
    x = np.asarray(points, dtype=np.float64)
    centered = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    axes = vt[:2]
    for i in range(len(axes)):
        if axes[i][np.argmax(np.abs(axes[i]))] < 0:
            axes[i] = -axes[i]
    proj = centered @ axes.T
    if proj.shape[1] < 2:
        proj = np.pad(proj, ((0, 0), (0, 2 - proj.shape[1])))
    return proj


VIEW_MODALITIES = {
    "av": (True, True, False),
    "a": (False, True, False),
    "v": (True, False, False),
    "p": (False, False, True),
    "ap": (False, True, True),
}


def export_embeddings(model: TriModalModel, items) -> list:
    """``items``: (record, view) pairs with view in av/a/v/p/ap.  Returns rows (x, y, view, uid)."""
    items = list(items)
    if len(items) < 2:
        raise ContractError("embedding export needs at least two samples")
    pooled = []
    for view in sorted({v for _, v in items}):
        subset = [(i, r) for i, (r, v) in enumerate(items) if v == view]
        emb = pooled_embeddings(model, [r for _, r in subset], VIEW_MODALITIES[view])
        pooled.extend(zip([i for i, _ in subset], emb))
    pooled.sort(key=lambda t: t[0])
    points = pca_2d(np.array([e for _, e in pooled]))
    return [(float(p[0]), float(p[1]), v, int(r.uid)) for p, (r, v) in zip(points, items)]


def write_embedding_rows(rows, path) -> None:
    with open(path, "w") as fh:
        fh.write("x,y,kind,id\n")
        for x, y, kind, uid in rows:
            fh.write(f"{x!r},{y!r},{kind},{uid}\n")


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-12)
    b = b / np.maximum(np.linalg.norm(b, axis=1, keepdims=True), 1e-12)
    return a @ b.T


def alignment_margin(model: TriModalModel, records, center: bool = True) -> dict:
    """Matched vs mismatched cosine similarity between audio-only and visual-only pooled h_f.

    With ``center`` each view's mean embedding over ``records`` is removed first,
    so the offset every sample of a view shares does not dominate the cosine.
    """
    records = list(records)
    if len(records) < 2:
        raise ContractError("alignment needs at least two paired records")
    emb_a = pooled_embeddings(model, records, VIEW_MODALITIES["a"])
    emb_v = pooled_embeddings(model, records, VIEW_MODALITIES["v"])
    if center:
        emb_a = emb_a - emb_a.mean(axis=0)
        emb_v = emb_v - emb_v.mean(axis=0)
    sim = cosine_matrix(emb_a, emb_v)
    n = len(records)
    matched = float(np.mean(np.diag(sim)))
    off = sim[~np.eye(n, dtype=bool)]
    mismatched = float(np.mean(off))
    return {"pairs": n, "matched": matched, "mismatched": mismatched, "margin": matched - mismatched}
