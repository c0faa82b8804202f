import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trimodal.autodiff import ContractError
from trimodal.corpus import CorpusConfig, generate
from trimodal.records import Record, RecordFormatError
from trimodal.tokenizer import (
    MissingModelError,
    Teacher,
    TokenizerFormatError,
    TokenizerModel,
    kmeans_assign,
    kmeans_fit,
    read_centroids,
    tokenize,
    write_centroids,
)


def exhaustive_optimum(x, k):
    """Smallest within-cluster sum of squares over every labelling with K non-empty clusters."""
    best = np.inf
    for labels in itertools.product(range(k), repeat=len(x)):
        labels = np.array(labels)
        if len(set(labels.tolist())) < k:
            continue
        sse = sum(((x[labels == j] - x[labels == j].mean()) ** 2).sum() for j in range(k))
        best = min(best, sse)
    return best


def test_kmeans_two_pairs():
    fit = kmeans_fit(np.array([[0.0], [1.0], [10.0], [11.0]]), 2)
    assert sorted(fit.centroids[:, 0].tolist()) == [0.5, 10.5]
    assert fit.distortion == pytest.approx(exhaustive_optimum(np.array([0.0, 1.0, 10.0, 11.0]), 2))


def test_kmeans_n_equals_k():
    pts = np.random.default_rng(0).normal(size=(5, 3))
    fit = kmeans_fit(pts, 5)
    assert fit.distortion == 0.0
    assert sorted(map(tuple, fit.centroids)) == sorted(map(tuple, pts))


def test_kmeans_deterministic():
    pts = np.random.default_rng(1).normal(size=(60, 2))
    a, b = kmeans_fit(pts, 4, seed=3), kmeans_fit(pts, 4, seed=3)
    assert np.array_equal(a.centroids, b.centroids)


def test_kmeans_contract_errors():
    with pytest.raises(ContractError):
        kmeans_fit(np.zeros((2, 1)), 3)
    with pytest.raises(ContractError):
        kmeans_fit(np.array([[np.nan], [1.0]]), 1)


@settings(max_examples=150, deadline=None)
@given(
    st.lists(st.floats(-20, 20, allow_nan=False).map(lambda v: round(v, 2)), min_size=1, max_size=8),
    st.integers(1, 3),
    st.integers(0, 1000),
)
def test_kmeans_matches_exhaustive_partition_in_1d(values, k, seed):
    x = np.array(values)
    if len(x) < k:
        return
    fit = kmeans_fit(x[:, None], k, seed=seed, n_init=2)
    opt = exhaustive_optimum(x, k)
    assert fit.distortion <= opt + 1e-9 * max(1.0, opt)


def test_kmeans_history_non_increasing():
    rng = np.random.default_rng(2)
    for trial in range(200):
        n, f, k = int(rng.integers(5, 40)), int(rng.integers(1, 4)), int(rng.integers(1, 5))
        fit = kmeans_fit(rng.normal(size=(n, f)), k, seed=trial, n_init=1)
        h = np.array(fit.history)
        assert np.all(np.diff(h) <= 1e-12 * np.maximum(1.0, h[:-1]))


def test_kmeans_assign_examples():
    c = np.array([[0.0, 0.0], [2.0, 0.0], [4.0, 0.0], [7.0, 7.0]])
    assert kmeans_assign(c[3:4], c).tolist() == [3]
    assert kmeans_assign(np.array([[3.0, 0.0]]), c).tolist() == [1]
    assert kmeans_assign(np.zeros((0, 2)), c).shape == (0,)


def test_kmeans_assign_matches_brute_force():
    rng = np.random.default_rng(4)
    x, c = rng.normal(size=(20, 4)), rng.normal(size=(6, 4))
    brute = []
    for row in x:
        dists = [sum((row[j] - cen[j]) ** 2 for j in range(4)) for cen in c]
        brute.append(min(range(6), key=lambda i: (dists[i], i)))
    assert kmeans_assign(x, c).tolist() == brute


def test_centroid_file_round_trip(tmp_path):
    c = np.random.default_rng(0).normal(size=(7, 3))
    path = tmp_path / "units.utok"
    write_centroids(path, c)
    raw = path.read_bytes()
    assert raw[:4] == b"UTOK"
    assert np.frombuffer(raw[4:16], dtype="<u4").tolist() == [1, 7, 3]
    assert np.array_equal(read_centroids(path), c)
    path.write_bytes(raw[:-8])
    with pytest.raises(TokenizerFormatError):
        read_centroids(path)
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(TokenizerFormatError):
        read_centroids(path)


@pytest.fixture(scope="module")
def small_world():
    cfg = CorpusConfig(sizes={"AV": 20, "A": 5, "AP": 5, "P": 5}, labeled=0, test=0)
    recs = [r for r, _ in generate(cfg)["train"]]
    teacher = Teacher(cfg)
    feats = np.concatenate([teacher.features(r.visual, r.audio) for r in recs if r.kind == "AV"])
    model = TokenizerModel(kmeans_fit(feats, cfg.latent_units, n_init=2).centroids, teacher)
    return cfg, recs, model


def test_model_save_load(tmp_path, small_world):
    _, recs, model = small_world
    model.save(tmp_path / "tok.utok")
    back = TokenizerModel.load(tmp_path / "tok.utok")
    r = next(r for r in recs if r.kind == "AV")
    assert np.array_equal(back.units(r.visual, r.audio), model.units(r.visual, r.audio))


def test_ap_target_equals_a_target(small_world):
    _, recs, model = small_world
    ap = next(r for r in recs if r.kind == "AP")
    as_a = Record(uid=ap.uid, kind="A", visual=None, audio=ap.audio, phonemes=None, durations=None, target=None)
    assert np.array_equal(tokenize(ap, model).target, tokenize(as_a, model).target)
    # text plays no part in the target
    other = Record(
        uid=ap.uid, kind="AP", visual=None, audio=ap.audio,
        phonemes=(ap.phonemes + 1) % 8, durations=ap.durations, target=None,
    )
    assert np.array_equal(tokenize(other, model).target, tokenize(ap, model).target)


def test_tokenize_rejects_bad_records(small_world):
    _, recs, model = small_world
    av = next(r for r in recs if r.kind == "AV")
    bad = Record(uid=1, kind="AV", visual=av.visual, audio=av.audio, phonemes=np.array([1, 2]), durations=None, target=None)
    with pytest.raises(RecordFormatError, match="phonemes=yes"):
        tokenize(bad, model)
    p = next(r for r in recs if r.kind == "P")
    with pytest.raises(MissingModelError):
        tokenize(p, model)


def test_tokenize_deterministic_and_in_range(small_world):
    cfg, recs, model = small_world
    for r in recs:
        if r.kind == "P":
            continue
        a, b = tokenize(r, model).target, tokenize(r, model).target
        assert np.array_equal(a, b)
        assert len(a) == r.frames
        assert a.min() >= 0 and a.max() < model.k


def test_clean_corpus_clusters_with_zero_distortion():
    cfg = CorpusConfig(sizes={"AV": 12, "A": 0, "AP": 0, "P": 0}, labeled=0, test=0, noise_level=0.0)
    recs = [r for r, _ in generate(cfg)["train"]]
    teacher = Teacher(cfg)
    feats = np.concatenate([teacher.features(r.visual, r.audio) for r in recs])
    assert len(np.unique(np.round(feats, 9), axis=0)) == cfg.latent_units
    fit = kmeans_fit(feats, cfg.latent_units, n_init=2)
    assert fit.distortion < 1e-18
