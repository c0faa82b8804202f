import csv
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trimodal.autodiff import ContractError
from trimodal.config import ModelConfig, ProbeConfig
from trimodal.corpus import CorpusConfig, generate
from trimodal.evaluation import (
    NOISE_PROFILES,
    LinearProbe,
    add_noise_to_records,
    augment_with_noise,
    alignment_margin,
    check_task_records,
    collapse,
    corpus_wer,
    edit_counts,
    export_embeddings,
    finetune_probe,
    mix_noise,
    measured_snr,
    noise_frames,
    pca_2d,
    power,
    tune_step,
    wer,
    write_embedding_rows,
)
from trimodal.model import TriModalModel, collate


def test_zero_db_noise_matches_clean_power():
    rng = np.random.default_rng(0)
    clean = rng.normal(size=(40, 26))
    noise = noise_frames("babble", 40, rng)
    mixed = mix_noise(clean, noise, 0.0)
    assert power(mixed - clean) == pytest.approx(power(clean), rel=1e-9)


def test_high_snr_is_nearly_clean():
    rng = np.random.default_rng(1)
    clean = rng.normal(size=(30, 26)) + 3.0
    mixed = mix_noise(clean, noise_frames("music", 30, rng), 60.0)
    assert abs(power(mixed) - power(clean)) <= 1e-3 * power(clean)
    assert power(mixed - clean) == pytest.approx(1e-6 * power(clean), rel=1e-9)


@pytest.mark.parametrize("kind", sorted(NOISE_PROFILES))
@pytest.mark.parametrize("snr", [-10.0, -5.0, 0.0, 5.0, 10.0])
def test_measured_snr_on_grid(kind, snr):
    rng = np.random.default_rng([2, int(snr) + 20])
    clean = rng.normal(size=(64, 26))
    assert abs(measured_snr(clean, mix_noise(clean, noise_frames(kind, 64, rng), snr)) - snr) < 0.1


def test_noise_tiled_and_cropped():
    clean = np.ones((7, 2))
    noise = np.array([[1.0, -1.0], [-1.0, 1.0], [2.0, 0.0]])
    mixed = mix_noise(clean, noise, 10.0)
    assert mixed.shape == (7, 2)
    d = mixed - clean
    np.testing.assert_allclose(d[3:6], d[:3])
    assert measured_snr(clean, mix_noise(clean, np.ones((20, 2)), 5.0)) == pytest.approx(5.0)


def test_zero_power_is_rejected():
    with pytest.raises(ContractError):
        mix_noise(np.zeros((4, 2)), np.ones((4, 2)), 0.0)
    with pytest.raises(ContractError):
        mix_noise(np.ones((4, 2)), np.zeros((4, 2)), 0.0)
    with pytest.raises(ContractError):
        mix_noise(np.ones((4, 2)), np.zeros((0, 2)), 0.0)
    with pytest.raises(ContractError):
        noise_frames("traffic", 3, np.random.default_rng(0))


def test_wer_examples():
    assert wer(list("abc"), list("abc")) == 0.0
    assert wer(list("abc"), list("axc")) == pytest.approx(1 / 3)
    assert wer(list("abc"), []) == 1.0
    assert wer(["a"], list("xyz")) == 3.0
    assert edit_counts(list("abc"), list("ac")) == (0, 1, 0)
    assert edit_counts(list("ac"), list("abc")) == (0, 0, 1)
    with pytest.raises(ContractError):
        wer([], ["a"])
    with pytest.raises(ContractError):
        corpus_wer([([1], [1]), ([], [2])])


def levenshtein(a, b):
    """Textbook full-matrix recurrence."""
    d = np.zeros((len(a) + 1, len(b) + 1), dtype=int)
    d[:, 0] = np.arange(len(a) + 1)
    d[0, :] = np.arange(len(b) + 1)
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            d[i, j] = min(d[i - 1, j] + 1, d[i, j - 1] + 1, d[i - 1, j - 1] + (a[i - 1] != b[j - 1]))
    return d[-1, -1]


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=1, max_size=9), st.lists(st.integers(0, 3), max_size=9))
def test_wer_matches_levenshtein(ref, hyp):
    assert wer(ref, hyp) == levenshtein(ref, hyp) / len(ref)
    assert wer(ref, ref) == 0.0
    s, d, i = edit_counts(ref, hyp)
    # an alignment's edit counts must reconcile the two lengths
    assert len(ref) - d + i == len(hyp)


def test_corpus_wer_pools_edits():
    assert corpus_wer([([1, 2], [1, 2]), ([1, 2, 3, 4], [1, 9, 3])]) == pytest.approx(2 / 6)
    assert collapse([3, 3, 1, 1, 1, 3]) == [3, 1, 3]


def test_noise_only_touches_audio():
    cfg = CorpusConfig(sizes={"AV": 3, "A": 0, "AP": 0, "P": 2}, labeled=0, test=0)
    recs = [r for r, _ in generate(cfg)["train"]]
    noisy = add_noise_to_records(recs, "speech", 0.0, seed=3)
    again = add_noise_to_records(recs, "speech", 0.0, seed=3)
    for r, n, m in zip(recs, noisy, again):
        if r.audio is None:
            assert n is r
            continue
        assert np.array_equal(n.visual, r.visual)
        assert np.array_equal(n.audio, m.audio)
        assert abs(measured_snr(r.audio, n.audio)) < 1e-9


def test_augmentation_adds_noisy_copies_in_range():
    cfg = CorpusConfig(sizes={"AV": 0, "A": 0, "AP": 0, "P": 0}, labeled=5, test=0)
    recs = [r for r, _ in generate(cfg)["labeled"]]
    out = augment_with_noise(recs, ("babble", "music"), (0.0, 25.0), 2, seed=0)
    assert len(out) == 15 and out[:5] == recs
    for i, noisy in enumerate(out[5:]):
        clean = recs[i % 5]
        assert noisy.uid == clean.uid and np.array_equal(noisy.target, clean.target)
        assert 0.0 - 1e-9 <= measured_snr(clean.audio, noisy.audio) <= 25.0 + 1e-9
    assert not np.array_equal(out[5].audio, out[10].audio)
    assert augment_with_noise(recs, ("babble",), (0.0, 25.0), 0, seed=0) == recs


# ----------------------------------------------------------------- probes


@pytest.fixture(scope="module")
def probe_data():
    cfg = CorpusConfig(sizes={"AV": 0, "A": 0, "AP": 2, "P": 2}, labeled=24, test=24, latent_units=8)
    g = generate(cfg)
    lab = [r for r, _ in g["labeled"]]
    test = [r for r, _ in g["test"]]
    train = [r for r, _ in g["train"]]
    model = TriModalModel(ModelConfig(dim=8, layers=1, heads=2, visual_channels=2, embed_dim=4), 4, 8)
    return model, lab, test, train


def test_avsr_probe_sees_zero_text_slice(probe_data):
    model, lab, _, _ = probe_data
    fused = model.fused(collate(lab[:4], (True, True, False), model.roi))
    z = fused.z_f().data
    d = model.cfg.dim
    assert np.all(z[..., 2 * d :] == 0.0)
    assert np.any(z[..., :d] != 0.0)


def test_random_encoder_probe_is_at_chance(probe_data):
    model, lab, test, _ = probe_data
    rng = np.random.default_rng(0)
    # shuffled labels carry no information about the inputs
    shuffled_lab = [replace(r, target=rng.integers(0, 8, size=r.frames)) for r in lab]
    shuffled_test = [replace(r, target=rng.integers(0, 8, size=r.frames)) for r in test]
    rep = finetune_probe(model, shuffled_lab, shuffled_test, "AVSR", 8, ProbeConfig(steps=100)).report
    sd = np.sqrt((1 / 8) * (7 / 8) / rep.frames)
    assert abs(rep.frame_accuracy - 1 / 8) < 5 * sd + 0.03


def test_probe_report_fields(probe_data):
    model, lab, test, _ = probe_data
    rep = finetune_probe(model, lab, test, "asr", 8, ProbeConfig(steps=50)).report
    assert rep.task == "ASR"
    assert rep.utterances == len(test)
    assert rep.frames == sum(r.frames for r in test)
    assert 0.0 <= rep.frame_accuracy <= 1.0 and rep.wer >= 0.0


def test_vsr_tuning_gives_audio_encoder_zero_gradient(probe_data):
    model, lab, _, _ = probe_data
    probe = LinearProbe(3 * model.cfg.dim, 8)
    probe.weight.data[...] = np.random.default_rng(1).normal(size=probe.weight.shape)
    tune_step(model, probe, lab[:4], "VSR")
    for _, p in model.audio.named_parameters():
        assert np.all(p.grad == 0.0)
    for _, p in model.text.named_parameters():
        assert np.all(p.grad == 0.0)
    assert any(np.any(p.grad != 0.0) for _, p in model.visual.named_parameters())


def test_task_record_mismatch(probe_data):
    model, lab, test, train = probe_data
    ap = [r for r in train if r.kind == "AP"]
    with pytest.raises(ContractError):
        check_task_records(ap, "VSR")
    with pytest.raises(ContractError):
        finetune_probe(model, lab, [replace(test[0], target=None)], "ASR", 8, ProbeConfig(steps=1))
    with pytest.raises(ContractError):
        check_task_records(lab, "lipreading")


# ------------------------------------------------------------- embeddings


def test_pca_is_deterministic_and_sign_fixed():
    pts = np.random.default_rng(0).normal(size=(30, 6))
    a = pca_2d(pts)
    assert np.array_equal(a, pca_2d(pts.copy()))
    np.testing.assert_allclose(np.abs(pca_2d(-pts)), np.abs(a), atol=1e-12)
    assert pca_2d(np.array([[1.0], [2.0]])).shape == (2, 2)


def test_pca_preserves_centroid_ordering():
    rng = np.random.default_rng(5)
    centers = np.zeros((4, 10))
    centers[1, 0], centers[2, 0], centers[3, 1] = 10.0, 25.0, 40.0
    labels = np.repeat(np.arange(4), 15)
    pts = centers[labels] + rng.normal(scale=0.3, size=(60, 10))
    proj = pca_2d(pts)
    full = np.array([pts[labels == c].mean(axis=0) for c in range(4)])
    low = np.array([proj[labels == c].mean(axis=0) for c in range(4)])
    d_full = np.linalg.norm(full[:, None] - full[None], axis=-1)
    d_low = np.linalg.norm(low[:, None] - low[None], axis=-1)
    iu = np.triu_indices(4, 1)
    assert np.array_equal(np.argsort(d_full[iu]), np.argsort(d_low[iu]))


def test_export_embeddings_rows(tmp_path, probe_data):
    model, lab, _, train = probe_data
    ap = next(r for r in train if r.kind == "AP")
    items = [(lab[0], "av"), (lab[0], "a"), (lab[0], "v"), (ap, "p"), (ap, "ap"), (lab[1], "a")]
    rows = export_embeddings(model, items)
    assert [(k, u) for _, _, k, u in rows] == [(v, r.uid) for r, v in items]
    assert rows == export_embeddings(model, items)
    twice = export_embeddings(model, items + [(lab[0], "av")])
    assert twice[0][:2] == twice[-1][:2]
    write_embedding_rows(rows, tmp_path / "emb.csv")
    with open(tmp_path / "emb.csv") as fh:
        read = list(csv.DictReader(fh))
    assert list(read[0]) == ["x", "y", "kind", "id"]
    assert float(read[2]["x"]) == rows[2][0]
    with pytest.raises(ContractError):
        export_embeddings(model, items[:1])


def test_alignment_margin_shapes(probe_data):
    model, lab, _, _ = probe_data
    out = alignment_margin(model, lab)
    assert out["pairs"] == len(lab)
    assert out["margin"] == pytest.approx(out["matched"] - out["mismatched"])
    assert -1.0 <= out["matched"] <= 1.0
