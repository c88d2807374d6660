"""Acceptance gate: one pass/fail line per criterion, collected in the terminal summary."""

import time

import numpy as np
import pytest

from zsltag.catalog import Catalog
from zsltag.features import StandardizedFeatures, extract_mel
from zsltag.harness import config_from_dict, prepare, run_baseline, run_grid, train_model
from zsltag.metrics import (
    RankedPrediction,
    auc_score,
    average_precision,
    evaluate_annotation,
    evaluate_retrieval,
    precision_at_k,
    roc_auc,
)
from zsltag.model import (
    audio_forward_batch,
    backward,
    classifier_forward,
    embedding_forward,
    init_params,
    semantic_forward_batch,
    tiny_profile,
)
from zsltag.sideinfo import LikelihoodAnnotations, accumulate_attributes, build_attribute_table
from zsltag.split import make_manifest, make_setup, split_labels
from zsltag.synthetic import SyntheticSpec

from conftest import random_catalog, verdict
from test_features import SR, slaney_peak_frequencies
from test_metrics import brute_ap, brute_auc, brute_pk
from test_model import rel_err
from test_split import check_manifest, labels_catalog


def test_split_invariants():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    for _ in range(100):
        n, labels = int(rng.integers(20, 201)), int(rng.integers(5, 31))
        cat = random_catalog(rng, n, labels, max_card=int(rng.integers(1, 7)))
        m = make_manifest(cat, float(rng.uniform(0.1, 0.5)), seed=int(rng.integers(1 << 30)))
        check_manifest(cat, m)
    elapsed = time.perf_counter() - t0
    verdict(1, elapsed < 10, f"100 random catalogs satisfy the six split invariants and match brute force ({elapsed:.2f} s)")


def test_split_statistics():
    t0 = time.perf_counter()
    sizes = {(len(s), len(u)) for s, u in (split_labels(labels_catalog(157), 32 / 157, seed) for seed in range(5))}
    elapsed = time.perf_counter() - t0
    verdict(2, sizes == {(125, 32)} and elapsed < 1, f"157 labels at 32/157 -> |X|, |Y| = {sorted(sizes)} ({elapsed:.3f} s)")


def activation_pattern(params, x, w):
    """ReLU signs and max-pool winners; equal patterns mean no kink lies between two parameter values."""
    _, cache = audio_forward_batch(params, x)
    pat = [np.concatenate([(z > 0).ravel(), arg.ravel()]) for _, _, z, _, arg in cache["layers"]]
    if w is not None:
        pat.append((semantic_forward_batch(params, w)[0] > 0).ravel())
    return np.concatenate(pat)


def smooth_central_difference(f, params, name, idx, x, w, eps=1e-4):
    """Central difference, or None when the stencil crosses a ReLU or pooling kink."""
    t = params.tensors[name]
    old = t[idx]
    t[idx] = old + eps
    up, pat_up = f(), activation_pattern(params, x, w)
    t[idx] = old - eps
    down, pat_down = f(), activation_pattern(params, x, w)
    t[idx] = old
    if not np.array_equal(pat_up, pat_down):
        return None
    return (up - down) / (2 * eps)


def test_gradients():
    rng = np.random.default_rng(7)
    t0 = time.perf_counter()
    worst = {"hinge": 0.0, "bce": 0.0}
    checked = kinks = 0
    n_fixtures = 5
    for f in range(n_fixtures):
        emb = init_params(tiny_profile(12), 100 + f)
        x = rng.normal(size=(3, 130, 128))
        wp, wn = rng.normal(size=(3, 12)), rng.normal(size=(3, 12))
        # cosines lie in [-1, 1], so a margin above 2 keeps every sample on the active side of the hinge
        margin = 2.0 + float(rng.uniform(0.01, 1.0))
        cls = init_params(tiny_profile(1, n_classes=6), 200 + f)
        t = (rng.random((3, 6)) < 0.4).astype(float)
        for kind, p, w, loss in (
            ("hinge", emb, np.concatenate([wp, wn]), lambda p=emb, x=x, wp=wp, wn=wn, m=margin: embedding_forward(p, x, wp, wn, m)),
            ("bce", cls, None, lambda p=cls, x=x, t=t: classifier_forward(p, x, t)),
        ):
            grads = backward(p, loss()[1])
            for name, tensor in p.tensors.items():
                done = 0
                while done < 4:
                    idx = tuple(int(rng.integers(s)) for s in tensor.shape)
                    fd = smooth_central_difference(lambda: loss()[0], p, name, idx, x, w)
                    if fd is None:
                        kinks += 1
                        continue
                    worst[kind] = max(worst[kind], rel_err(grads[name][idx], fd))
                    done += 1
                    checked += 1
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-4 and elapsed < 30
    verdict(3, ok, f"{n_fixtures} hinge-active fixtures, {checked} coordinates, worst rel err hinge "
                   f"{worst['hinge']:.1e}, bce {worst['bce']:.1e}; {kinks} kink-straddling stencils redrawn ({elapsed:.1f} s)")


def test_metric_oracles():
    rng = np.random.default_rng(11)
    t0 = time.perf_counter()
    worst, symmetric, invariant = 0.0, True, True
    for k in range(1000):
        n = int(rng.integers(2, 51))
        truth = rng.random(n) < rng.uniform(0.1, 0.9)
        # both classes present
        truth[0], truth[-1] = True, False
        truth = truth[rng.permutation(n)]
        # every other fixture sits on a coarse grid to force ties
        scores = rng.integers(0, 6, n) / 5 if k % 2 else rng.normal(size=n)
        ids = [f"c{j:02d}" for j in rng.permutation(n)]
        p = RankedPrediction.from_arrays("s", ids, scores, truth)
        errs = [abs(roc_auc(p) - brute_auc(scores, truth)), abs(average_precision(p) - brute_ap(scores, truth, ids))]
        errs += [abs(precision_at_k(p, kk) - brute_pk(scores, truth, ids, kk)) for kk in (1, 5, 10)]
        worst = max(worst, *errs)
        symmetric &= abs(auc_score(-scores, truth) - (1 - auc_score(scores, truth))) <= 1e-12
        q = RankedPrediction.from_arrays("s", ids, np.exp(2 * scores) - 3, truth)
        invariant &= all(abs(f(p) - f(q)) <= 1e-12 for f in (roc_auc, average_precision, lambda r: precision_at_k(r, 5)))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and symmetric and invariant and elapsed < 10
    verdict(4, ok, f"1000 fixtures, max |metric - brute| {worst:.1e}, reverse symmetry {symmetric}, "
                   f"monotone invariance {invariant} ({elapsed:.2f} s)")


def test_mel_arithmetic():
    t0 = time.perf_counter()
    frames = extract_mel(np.zeros(66150), SR).n_frames
    t = np.arange(66150) / SR
    f = extract_mel(0.5 * np.sin(2 * np.pi * 440.0 * t), SR).frames
    peaks = slaney_peak_frequencies()
    expected = min(range(128), key=lambda k: abs(peaks[k] - 440.0))
    got = np.bincount(f[2:-2].argmax(axis=1)).argmax()
    elapsed = time.perf_counter() - t0
    ok = frames == 130 and np.all(f[2:-2].argmax(axis=1) == expected) and elapsed < 5
    verdict(5, ok, f"66150 samples -> {frames} frames; 440 Hz peaks in bin {got} (expected {expected}) ({elapsed:.2f} s)")


def test_attribute_table():
    # genre labels of six tracks and their instrument likelihoods; 0.5 means unannotated
    cat = Catalog.from_records([
        ("i1", ["rock"], None),
        ("i2", ["rock", "blues"], None),
        ("i3", ["jazz"], None),
        ("i4", ["jazz", "blues"], None),
        ("i5", ["blues"], None),
        ("i6", ["rock"], None),
    ])
    lik = LikelihoodAnnotations(("guitar", "piano", "sax", "drums"), (
        ("i1", "guitar", 0.9), ("i1", "drums", 0.8), ("i1", "piano", 0.1),
        ("i2", "guitar", 0.7), ("i2", "sax", 0.5), ("i2", "drums", 0.2),
        ("i3", "piano", 0.95), ("i3", "sax", 0.6), ("i3", "drums", 0.5),
        ("i4", "sax", 0.9), ("i4", "guitar", 0.3),
        ("i5", "guitar", 0.6), ("i5", "piano", 0.4), ("i5", "sax", 0.5),
        ("i6", "drums", 0.99), ("i6", "guitar", 0.5),
    ))
    # slots: guitar+ guitar- piano+ piano- sax+ sax- drums+ drums-
    counts = {
        "blues": [2, 1, 0, 1, 1, 0, 0, 1],
        "jazz": [0, 1, 1, 0, 2, 0, 0, 0],
        "rock": [2, 0, 0, 1, 0, 0, 2, 1],
    }
    r, h = 2 ** -0.5, 1.5 ** 0.5
    s = 2 ** 0.5
    # column z-scores with population std; the all-zero sax- column stays 0
    expected = {
        "blues": [r, r, -r, r, 0, 0, -r, r],
        "jazz": [-s, r, s, -s, h, 0, -r, -s],
        "rock": [r, -s, -r, r, -h, 0, s, r],
    }
    t = build_attribute_table(lik, cat)
    acc = accumulate_attributes(lik, cat)
    rows = {name: t.vectors[k] for k, name in enumerate(t.names)}
    raw = {name: acc[k] for k, name in enumerate(cat.label_names)}
    err = max(np.abs(rows[g] - expected[g]).max() for g in expected)
    ok = all(np.array_equal(raw[g], counts[g]) for g in counts) and err < 1e-9
    verdict(10, ok, f"hand-built 6 x 3 x 4 fixture, max |table - hand| {err:.1e}, 0.5 likelihoods ignored")


# -- synthetic benchmark: 30 labels, 6 unseen, 1000 tracks, cardinality 2, tiny profile --------


def bench_config(out, seed=0):
    return config_from_dict({"experiment": {"out": str(out), "seed": seed, "profile": "tiny"}, "synthetic": {}})


def zero_shot_scores(exp, train_setup):
    params, standardizer = train_model(exp, train_setup)
    feats = StandardizedFeatures(exp.features, standardizer)
    ann = make_setup(exp.manifest, exp.catalog, "B+C", "Y", purpose="annotation")
    ret = make_setup(exp.manifest, exp.catalog, "B+C", "Y", purpose="retrieval")
    return (evaluate_annotation(params, feats, exp.table, ann).metrics["AUC-i"],
            evaluate_retrieval(params, feats, exp.table, ret).metrics["AUC-l"])


@pytest.fixture(scope="module")
def bench(tmp_path_factory):
    out = tmp_path_factory.mktemp("bench")
    exp = prepare(bench_config(out))
    assert exp.config.synthetic == SyntheticSpec()
    t0 = time.perf_counter()
    train_model(exp, ("A+B", "X"))
    return exp, time.perf_counter() - t0


def test_zero_shot_generalization(bench):
    exp, elapsed = bench
    auc_i, auc_l = zero_shot_scores(exp, ("A+B", "X"))
    # the same architecture with a zero learning rate stays at its initialization, for reference
    cold = prepare(config_from_dict({"experiment": {"out": str(exp.out / "cold"), "seed": 0}, "synthetic": {},
                                     "train": {"max_epochs": 1, "learning_rate": 0.0}}))
    chance_i, chance_l = zero_shot_scores(cold, ("A+B", "X"))
    epochs = train_model(exp, ("A+B", "X"))[0].meta["epochs_run"]
    ok = auc_i > 0.80 and auc_l > 0.75 and epochs <= 200 and elapsed < 300
    verdict(6, ok, f"(A+B)-X -> (B+C)-Y AUC-i {auc_i:.4f} (> 0.80), AUC-l {auc_l:.4f} (> 0.75); "
                   f"untrained {chance_i:.3f} / {chance_l:.3f}; {epochs} epochs, {elapsed:.0f} s")


def test_trend_ab_vs_a(bench):
    exp0, _ = bench
    rows = []
    for seed in (0, 1, 2):
        exp = exp0 if seed == 0 else prepare(bench_config(exp0.out.parent / f"trend{seed}", seed))
        rows.append((zero_shot_scores(exp, ("A", "X"))[0], zero_shot_scores(exp, ("A+B", "X"))[0]))
    a, ab = np.mean(rows, axis=0)
    per_seed = ", ".join(f"{x:.3f}/{y:.3f}" for x, y in rows)
    verdict(7, ab >= a - 0.02, f"mean (B+C)-Y AUC-i over 3 seeds: (A+B)-X {ab:.4f} vs A-X {a:.4f} "
                               f"(need >= A-X - 0.02); per seed A/AB {per_seed}")


def test_baseline_comparison(bench):
    exp, _ = bench
    reports = run_baseline(exp.config)
    rows = {r.model: r.metrics["AUC-l"] for r in reports}
    both = [r.model for r in reports] == ["embedding", "classifier"] and (exp.out / "baseline.csv").exists()
    ok = both and rows["embedding"] >= rows["classifier"] - 0.02
    verdict(8, ok, f"A-X trained, B-X retrieval AUC-l: embedding {rows['embedding']:.4f}, "
                   f"classifier {rows['classifier']:.4f}")


def test_grid_determinism(bench, tmp_path):
    exp, _ = bench
    t0 = time.perf_counter()
    # first run resumes the checkpoints trained above; the second starts from an empty directory
    first = run_grid(exp.config)
    second = run_grid(bench_config(tmp_path / "fresh"))
    elapsed = time.perf_counter() - t0
    same = all(getattr(first, f).read_bytes() == getattr(second, f).read_bytes() for f in ("annotation_csv", "retrieval_csv"))
    rows = len(first.annotation) + len(first.retrieval)
    verdict(9, same and rows == 24 and elapsed < 600,
            f"two grid runs ({rows} report rows each) byte-identical: {same} ({elapsed:.0f} s)")
