"""End-to-end acceptance suite.  Each test reports one PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v -s`` (the lines are also
repeated in the terminal summary without ``-s``).
"""

import itertools
import math
import time
from dataclasses import replace

import numpy as np
import pytest

from trimodal import autodiff as ad
from trimodal import checkpoint as ckpt_io
from trimodal.autodiff import Tensor
from trimodal.backbone import DropoutPolicy, encode, fuse, modality_dropout
from trimodal.config import ModelConfig, RunConfig, apply_overrides
from trimodal.corpus import CorpusConfig, World, generate, generate_corpus, utterance_rng
from trimodal.evaluation import (
    NOISE_PROFILES,
    add_noise_to_records,
    alignment_margin,
    finetune_probe,
    measured_snr,
    noisy_reports,
)
from trimodal.gradcheck import full_model_gradcheck
from trimodal.model import TriModalModel
from trimodal.objective import PredictionHead, masked_ce_per_sample
from trimodal.phoneme2unit import P2UConfig, phoneme2unit_train
from trimodal.pipeline import prepare
from trimodal.tokenizer import kmeans_fit
from trimodal.training import Pretrainer, pretrain

from conftest import tiny_config

RESULTS = []

# end-to-end run: all four kinds, uniform ratios, well under the 20k-step budget
E2E_STEPS = 15000
E2E_OVERRIDES = ["tokenizer.k=16", "masking.span_len=3", "masking.start_prob=0.2"]


def report(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS.append(line)
    print("\n" + line)
    assert ok, line


# ------------------------------------------------------------- 1. gradients


def test_criterion_01_full_model_gradcheck():
    rep = full_model_gradcheck(ModelConfig(dim=8, layers=2, heads=2), units=8, frames=6)
    ok = rep.max_rel_error < 1e-4 and rep.seconds < 60
    report(1, ok, f"max rel error {rep.max_rel_error:.2e} over {rep.parameters} parameters in {rep.seconds:.1f} s")


# -------------------------------------------------------------- 2. locality


def test_criterion_02_unmasked_frames_do_not_touch_the_loss():
    rng = np.random.default_rng(2)
    worst_delta, worst_grad, trials = 0.0, 0.0, 0
    for trial in range(25):
        frames, width, units = int(rng.integers(4, 12)), 12, 8
        head = PredictionHead(width, 6, units, rng)
        base = rng.normal(size=(2, frames, width))
        targets = rng.integers(0, units, size=(2, frames))
        mask = rng.random((2, frames)) < 0.4
        mask[:, 0] = True
        h = ad.parameter(base.copy())
        loss_tensors = masked_ce_per_sample(h, targets, mask, head)
        loss = ad.add(loss_tensors[0], loss_tensors[1])
        ad.backward(loss)
        worst_grad = max(worst_grad, float(np.abs(h.grad[~mask]).max(initial=0.0)))
        for b, t in zip(*np.nonzero(~mask)):
            bumped = base.copy()
            bumped[b, t] += rng.normal(size=width) * 100.0
            per = masked_ce_per_sample(Tensor(bumped), targets, mask, head)
            worst_delta = max(worst_delta, abs(ad.add(per[0], per[1]).item() - loss.item()))
            trials += 1
    ok = worst_delta == 0.0 and worst_grad == 0.0
    report(2, ok, f"{trials} perturbations: max loss change {worst_delta!r}, max unmasked gradient {worst_grad!r}")


# -------------------------------------------------------------- 3. ablation


def test_criterion_03_zero_weights_match_structural_removal():
    cfg = tiny_config("sampler.ratios=[1, 0, 0, 0]")
    prep = prepare(cfg)
    zeroed = apply_overrides(cfg, ["lambda1=0", "lambda2=0", "lambda3=0"])
    removed = replace(cfg, loss=replace(cfg.loss, terms=("AV",)))
    runs = []
    for c in (zeroed, removed):
        tr = Pretrainer(c, prep.corpora, c.corpus.phonemes, c.tokenizer.k)
        rows = tr.run(40)
        runs.append(([r["total"] for r in rows], {k: p.data.copy() for k, p in tr.params.items()}))
    same_losses = runs[0][0] == runs[1][0]
    same_params = all(np.array_equal(runs[0][1][k], runs[1][1][k]) for k in runs[0][1])
    report(3, same_losses and same_params, f"40 steps: loss streams identical={same_losses}, parameters bit-identical={same_params}")


# ------------------------------------------------------ 4. zero substitution


def test_criterion_04_dropping_equals_zero_fusion():
    rng = np.random.default_rng(4)
    cfg = ModelConfig(dim=8, layers=2, heads=2, visual_channels=4)
    model = TriModalModel(cfg, phonemes=8, units=16, roi=8)
    mismatches = 0
    for sample in range(100):
        frames = int(rng.integers(2, 10))
        z = [
            model.visual(rng.uniform(size=(1, frames, 8, 8))),
            model.audio(rng.normal(size=(1, frames, 104))),
            model.text(rng.integers(0, 8, size=(1, frames))),
        ]
        drop = sample % 3
        certain = DropoutPolicy("independent", probs=tuple(1.0 if m == drop else 0.0 for m in range(3)))
        dropped = encode(modality_dropout(fuse(*z), certain, rng), model.encoder).data
        zeros = [Tensor(np.zeros(p.shape)) if m == drop else p for m, p in enumerate(z)]
        zero_fused = encode(fuse(*zeros), model.encoder).data
        mismatches += not np.array_equal(dropped, zero_fused)
    report(4, mismatches == 0, f"100 samples, {mismatches} with any differing bit in h_f")


# ------------------------------------------------------------- 5. k-means


def optimal_1d(x: np.ndarray, k: int) -> float:
    """Best within-cluster sum of squares over every labelling of the points into k non-empty groups."""
    best = math.inf
    for labels in itertools.product(range(k), repeat=len(x)):
        labels = np.asarray(labels)
        if len(np.unique(labels)) < k:
            continue
        best = min(best, sum(((x[labels == j] - x[labels == j].mean()) ** 2).sum() for j in range(k)))
    return best


def test_criterion_05_kmeans_matches_exhaustive_oracle():
    rng = np.random.default_rng(5)
    worst_gap, instances = 0.0, 0
    # every size/K combination, with continuous, tied and integer-grid values
    for n in range(1, 9):
        for k in range(1, min(3, n) + 1):
            for trial in range(24):
                style = trial % 3
                if style == 0:
                    x = rng.normal(size=n) * 10
                elif style == 1:
                    x = rng.integers(0, 4, size=n).astype(float)
                else:
                    x = np.round(rng.uniform(-5, 5, size=n), 1)
                fit = kmeans_fit(x[:, None], k, seed=trial)
                opt = optimal_1d(x, k)
                worst_gap = max(worst_gap, (fit.distortion - opt) / max(1.0, opt))
                instances += 1
    monotone = 0
    for i in range(1000):
        n, f, k = int(rng.integers(3, 60)), int(rng.integers(1, 5)), int(rng.integers(1, 6))
        k = min(k, n)
        h = np.array(kmeans_fit(rng.normal(size=(n, f)) * rng.uniform(0.1, 10), k, seed=i, n_init=1).history)
        monotone += bool(np.all(np.diff(h) <= 1e-12 * np.maximum(1.0, h[:-1])))
    ok = worst_gap <= 1e-9 and monotone == 1000
    report(5, ok, f"{instances} exhaustive instances, worst relative gap {worst_gap:.1e}; {monotone}/1000 non-increasing histories")


# --------------------------------------------------------- 6. phoneme2unit


def test_criterion_06_phoneme2unit_mapping():
    cfg = CorpusConfig()
    world = World(cfg)
    pairs = []
    for uid in range(240):
        s = world.script(uid, utterance_rng(cfg.seed, "train", uid))
        pairs.append((s.phonemes, s.units, s.durations))
    train, held = pairs[:200], pairs[200:]
    t0 = time.perf_counter()
    model = phoneme2unit_train(train, P2UConfig(phonemes=cfg.phonemes, units=cfg.latent_units, steps=400))
    seconds = time.perf_counter() - t0
    hits = total = 0
    lengths_ok = True
    for ph, units, _ in held:
        pred, durations = model.infer(ph)
        lengths_ok &= len(pred) == int(durations.sum())
        n = min(len(pred), len(units))
        hits += int((pred[:n] == units[:n]).sum())
        total += max(len(pred), len(units))
    acc = hits / total
    ok = acc >= 0.95 and lengths_ok and seconds < 300
    report(6, ok, f"held-out frame accuracy {acc:.4f}, lengths equal duration sums={lengths_ok}, trained in {seconds:.1f} s")


# ---------------------------------------------------- 7/8. end-to-end model


@pytest.fixture(scope="module")
def pretrained():
    cfg = apply_overrides(RunConfig(), E2E_OVERRIDES)
    prep = prepare(cfg)
    assert all(len(v) > 0 for v in prep.corpora.values())
    assert cfg.sampler.ratios == (0.25, 0.25, 0.25, 0.25)
    t0 = time.perf_counter()
    trainer, _ = pretrain(cfg, prep.corpora, cfg.corpus.phonemes, cfg.tokenizer.k, steps=E2E_STEPS)
    return cfg, prep, trainer.model, time.perf_counter() - t0


def test_criterion_07_probe_quality_and_noise_ordering(pretrained):
    cfg, prep, model, seconds = pretrained
    lab, test = prep.splits["labeled"], prep.splits["test"]
    clean, at_zero = {}, {}
    for task in ("ASR", "AVSR", "VSR"):
        res = finetune_probe(model, lab, test, task, cfg.tokenizer.k, cfg.probe)
        clean[task] = res.report.frame_accuracy
        noisy = noisy_reports(model, res, test, task, sorted(NOISE_PROFILES), [0.0], cfg.probe.seed)
        at_zero[task] = {kind: rep.wer for (kind, _), rep in noisy.items()}
    accuracy_ok = all(a >= 0.90 for a in clean.values())
    ordering_ok = all(at_zero["AVSR"][k] <= at_zero["ASR"][k] <= at_zero["VSR"][k] for k in NOISE_PROFILES)
    acc_text = ", ".join(f"{t} {a:.3f}" for t, a in clean.items())
    wer_text = "; ".join(
        f"{k}: AVSR {at_zero['AVSR'][k]:.3f} ASR {at_zero['ASR'][k]:.3f} VSR {at_zero['VSR'][k]:.3f}" for k in sorted(NOISE_PROFILES)
    )
    report(7, accuracy_ok and ordering_ok, f"{E2E_STEPS} steps ({seconds:.0f} s); clean accuracy {acc_text}; 0 dB WER {wer_text}")


def test_criterion_08_cross_modal_alignment(pretrained):
    _, prep, model, _ = pretrained
    out = alignment_margin(model, prep.splits["test"])
    ok = out["pairs"] >= 200 and out["margin"] > 0.1
    report(8, ok, f"{out['pairs']} pairs: matched {out['matched']:.3f}, mismatched {out['mismatched']:.3f}, margin {out['margin']:.3f}")


# ------------------------------------------------------------ 9. noise SNR


def test_criterion_09_noise_harness_snr():
    cfg = CorpusConfig(sizes={"AV": 0, "A": 0, "AP": 0, "P": 0}, labeled=0, test=30)
    test = [r for r, _ in generate(cfg)["test"]]
    worst = 0.0
    for kind in sorted(NOISE_PROFILES):
        for snr in (-10.0, -5.0, 0.0, 5.0, 10.0):
            noisy = add_noise_to_records(test, kind, snr, seed=9)
            for r, n in zip(test, noisy):
                worst = max(worst, abs(measured_snr(r.audio, n.audio) - snr))
    report(9, worst <= 0.1, f"{3 * 5 * len(test)} mixes, worst |measured - target| = {worst:.2e} dB")


# --------------------------------------------------------- 10. reproducible


def test_criterion_10_reproducibility(tmp_path):
    small = CorpusConfig(sizes={"AV": 10, "A": 10, "AP": 10, "P": 10}, labeled=5, test=5)
    generate_corpus(small, tmp_path / "c1")
    generate_corpus(small, tmp_path / "c2")
    corpora_same = all((tmp_path / "c1" / f).read_bytes() == (tmp_path / "c2" / f).read_bytes() for f in ("train.rec", "labeled.rec", "test.rec", "manifest.json"))

    cfg = tiny_config("train.checkpoint_every=25")
    prep = prepare(cfg)
    for run in ("r1", "r2"):
        pretrain(cfg, prep.corpora, cfg.corpus.phonemes, cfg.tokenizer.k, out_dir=tmp_path / run, steps=50)
    files = ("metrics.csv", "step000025.ckpt", "step000050.ckpt", "final.ckpt")
    runs_same = all((tmp_path / "r1" / f).read_bytes() == (tmp_path / "r2" / f).read_bytes() for f in files)

    full = Pretrainer(cfg, prep.corpora, cfg.corpus.phonemes, cfg.tokenizer.k)
    full_rows = full.run(200)
    half = Pretrainer(cfg, prep.corpora, cfg.corpus.phonemes, cfg.tokenizer.k)
    head = half.run(100)
    ckpt_io.save(half.checkpoint(), tmp_path / "mid.ckpt")
    resumed = Pretrainer.from_checkpoint(ckpt_io.load(tmp_path / "mid.ckpt"), prep.corpora)
    tail = resumed.run(100)
    resume_same = [r["total"] for r in head + tail] == [r["total"] for r in full_rows]
    resume_same &= ckpt_io.to_bytes(resumed.checkpoint()) == ckpt_io.to_bytes(full.checkpoint())

    ok = corpora_same and runs_same and resume_same
    report(10, ok, f"corpora identical={corpora_same}, metrics+checkpoints identical={runs_same}, resume at 100 of 200 bit-exact={resume_same}")


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-v", "-s"]))
