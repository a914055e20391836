"""Acceptance criteria, one test each.

Every test appends a ``PASS``/``FAIL`` line to the summary printed at the end
of the pytest run, then asserts.
"""

import json
import statistics
import time
from pathlib import Path

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from proalign.cli import main
from proalign.core import PrototypeBank, Stage
from proalign.estimators import ProAlignEmbedder
from proalign.metrics import balanced_accuracy, confusion_matrix, weighted_f1
from proalign.pfam import (
    assign_patches,
    attention_weights,
    compute_patch_prototype_similarity,
    embed_slide,
    refine_prototypes,
)
from proalign.probe import ProbeConfig, predict, train_probe
from proalign.prototypes import build_initial_prototypes
from proalign.synth import SynthConfig, brute_force_pipeline, generate_synthetic_dataset

from reference import naive_balanced_accuracy, naive_weighted_f1
from test_metrics import random_prediction_set
from test_probe import max_gradient_rel_error, random_gradient_case


def record(log, number, title, ok, detail):
    log.append(f"{'PASS' if ok else 'FAIL'}  criterion {number}: {title} ({detail})")
    assert ok, detail


def test_criterion_1_pipeline_matches_oracle(acceptance_log):
    start = time.perf_counter()
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        n, d, k = int(rng.integers(1, 51)), int(rng.integers(1, 9)), int(rng.integers(1, 6))
        pool = rng.standard_normal((int(rng.integers(1, 51)), d)).astype(np.float32)
        texts = rng.standard_normal((k, d)).astype(np.float32)
        X = rng.standard_normal((n, d)).astype(np.float32)
        ours = embed_slide(X, build_initial_prototypes(pool, texts)).embedding.values
        ref = np.array(brute_force_pipeline(X, texts=texts, pool=pool))
        worst = max(worst, float(np.abs(ours - ref).max()))
    elapsed = time.perf_counter() - start
    record(acceptance_log, 1, "pipeline vs brute-force oracle", worst <= 1e-5 and elapsed < 5,
           f"max abs err {worst:.2e} <= 1e-5, {elapsed:.2f}s < 5s")


def test_criterion_2_worked_example(acceptance_log):
    X = np.array([[1, 1], [2, 0], [0, 3]], np.float32)
    P = PrototypeBank(Stage.INITIAL, np.array([[1, 2], [3, 1]], np.float32))
    s = compute_patch_prototype_similarity(X, P)
    asn = assign_patches(s)
    res = embed_slide(X, P)
    err = float(np.abs(res.embedding.values - [0, 3, 1.88080, 0.11920]).max())
    ok = (s.tolist() == [[3, 4], [2, 6], [6, 3]] and asn.patch_to_proto.tolist() == [1, 1, 0]
          and err <= 1e-4)
    record(acceptance_log, 2, "worked example", ok, f"max abs err {err:.1e} <= 1e-4")


def test_criterion_3_softmax_argmax_invariants(acceptance_log):
    start = time.perf_counter()
    failures = []
    for seed in range(1000):
        rng = np.random.default_rng(seed)
        n, d, k = int(rng.integers(1, 41)), int(rng.integers(1, 9)), int(rng.integers(1, 9))
        X = rng.standard_normal((n, d)).astype(np.float32)
        P = PrototypeBank(Stage.INITIAL, rng.standard_normal((k, d)).astype(np.float32))
        s = compute_patch_prototype_similarity(X, P)
        asn = assign_patches(s)
        w = attention_weights(asn, similarity=s)
        refined = refine_prototypes(X, s, asn, P, "s").matrix
        c = float(np.exp(rng.uniform(-6, 6)))
        scaled = assign_patches(compute_patch_prototype_similarity(X.astype(np.float64) * c, P))
        if not np.array_equal(scaled.patch_to_proto, asn.patch_to_proto):
            failures.append((seed, "scaling"))
        for j, idx in enumerate(asn.proto_members):
            if len(idx) == 0:
                if refined[j].tobytes() != P.matrix[j].tobytes():
                    failures.append((seed, "empty pass-through"))
            elif abs(w[idx].sum() - 1.0) > 1e-6:
                failures.append((seed, "weight sum"))
            elif len(idx) == 1 and refined[j].tobytes() != X[idx[0]].tobytes():
                failures.append((seed, "single pass-through"))
    elapsed = time.perf_counter() - start
    record(acceptance_log, 3, "softmax/argmax invariants on 1000 instances", not failures and elapsed < 10,
           f"{len(failures)} violations {failures[:3]}, {elapsed:.2f}s < 10s")


def test_criterion_4_synthetic_recovery(acceptance_log):
    start = time.perf_counter()
    with threadpool_limits(1):
        ds = generate_synthetic_dataset(SynthConfig(n_slides=(200, 60, 60), seed=0))
        train, y_train, recs = ds.split("train")
        est = ProAlignEmbedder(ds.texts, ds.descriptors, random_state=0)
        est.fit(train, slide_ids=[r.slide_id for r in recs])
        hits = total = 0
        feats = {}
        for name in ("train", "val", "test"):
            slides, labels, recs = ds.split(name)
            results = est.embed(slides, [r.slide_id for r in recs])
            for r, res in zip(recs, results):
                truth = ds.truth.patch_prototypes[r.slide_id]
                hits += int((res.assignment.patch_to_proto == truth).sum())
                total += len(truth)
            feats[name] = (np.vstack([res.embedding.values for res in results]).astype(np.float64), labels)
        recovery = hits / total
        baccs = []
        for seed in range(5):
            cfg = ProbeConfig("linear", feats["train"][0].shape[1], 4, learning_rate=1e-4, weight_decay=1e-5,
                              epochs=20, seed=seed)
            model = train_probe(*feats["train"], cfg, *feats["val"]).model
            x, y = feats["test"]
            baccs.append(balanced_accuracy(confusion_matrix(y, predict(model, x), 4)))
    elapsed = time.perf_counter() - start
    mean_bacc = float(np.mean(baccs))
    ok = recovery >= 0.95 and mean_bacc >= 0.90 and elapsed < 120
    record(acceptance_log, 4, "synthetic recovery and probe accuracy", ok,
           f"recovery {recovery:.4f} >= 0.95, test B acc mean {mean_bacc:.4f} >= 0.90, {elapsed:.1f}s < 120s")


def test_criterion_5_metrics_oracle(acceptance_log):
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        t, p, c = random_prediction_set(rng)
        cm = confusion_matrix(t, p, c)
        worst = max(worst,
                    abs(balanced_accuracy(cm) - naive_balanced_accuracy(t.tolist(), p.tolist(), c)),
                    abs(weighted_f1(cm) - naive_weighted_f1(t.tolist(), p.tolist(), c)))
    cm = np.array([[1, 1], [1, 2]])
    hand = abs(balanced_accuracy(cm) - 7 / 12) <= 1e-12 and abs(weighted_f1(cm) - 0.6) <= 1e-12
    record(acceptance_log, 5, "metrics vs naive reference", worst <= 1e-12 and hand,
           f"max diff {worst:.1e} <= 1e-12, hand case {'ok' if hand else 'wrong'}")


def test_criterion_6_gradient_check(acceptance_log):
    worst = max(max_gradient_rel_error(*random_gradient_case(seed)) for seed in range(50))
    record(acceptance_log, 6, "probe gradients vs central differences", worst < 1e-4,
           f"max rel err {worst:.2e} < 1e-4 over 50 probes")


def _snapshot(root: Path) -> dict:
    """Bytes of every artifact; run records (wall-clock duration) contribute their checksums only."""
    out = {}
    for p in sorted(root.rglob("*")):
        if not p.is_file():
            continue
        key = str(p.relative_to(root))
        if p.name.endswith("run_record.json") or p.name.endswith(".run.json"):
            out[key] = json.loads(p.read_text())["checksums"]
        else:
            out[key] = p.read_bytes()
    return out


def _run_all(root: Path, workers: int) -> dict:
    data, work = root / "data", root / "work"
    work.mkdir(parents=True)
    cmds = [
        ["synth", "--out", str(data), "--n-proto", "4", "--dim", "8", "--n-train", "12", "--n-val", "4",
         "--n-test", "4", "--patches-min", "10", "--patches-max", "40", "--bank-sizes", "2,4", "--seed", "3"],
        ["init-prototypes", "--manifest", str(data / "manifest.csv"), "--text-bank", str(data / "text_bank.json"),
         "--n-proto", "4", "--patches-per-proto", "30", "--out", str(work / "bank")],
        ["init-prototypes", "--manifest", str(data / "manifest.csv"), "--method", "kmeans", "--n-proto", "4",
         "--patches-per-proto", "30", "--out", str(work / "kbank")],
        ["embed", "--manifest", str(data / "manifest.csv"), "--prototypes", str(work / "bank"),
         "--out-dir", str(work / "emb"), "--workers", str(workers)],
        ["train", "--embeddings", str(work / "emb" / "embeddings.csv"), "--out-dir", str(work / "models"),
         "--epochs", "3", "--seeds", "0,1"],
        ["eval", "--embeddings", str(work / "emb" / "embeddings.csv"), "--models-dir", str(work / "models"),
         "--out", str(work / "metrics.json")],
        ["sweep", "--manifest", str(data / "manifest.csv"), "--text-bank", str(data / "text_bank_{n}.json"),
         "--n-proto-list", "2,4", "--patches-per-proto", "30", "--epochs", "2", "--seeds", "0,1",
         "--workers", str(workers), "--out-dir", str(work / "sweep")],
        ["allocmap", "--slide", str(data / "slides" / "slide_0000.paem"), "--prototypes", str(work / "bank"),
         "--out", str(work / "alloc.json")],
    ]
    for cmd in cmds:
        assert main(cmd) == 0, cmd
    return _snapshot(root)


def test_criterion_7_determinism(acceptance_log, tmp_path):
    runs = [_run_all(tmp_path / name, w) for name, w in (("a", 1), ("b", 1), ("c", 4))]
    same = runs[0] == runs[1] == runs[2]
    diff = sorted(k for k in runs[0] if not (runs[0][k] == runs[1].get(k) == runs[2].get(k)))
    record(acceptance_log, 7, "byte-identical reruns incl. --workers 4", same,
           f"{len(runs[0])} artifacts compared, differing: {diff[:3] or 'none'}")


def test_criterion_8_sweep(acceptance_log, tmp_path):
    data = tmp_path / "data"
    assert main(["synth", "--out", str(data), "--bank-sizes", "2,4,8,16,24,32"]) == 0
    code = main(["sweep", "--manifest", str(data / "manifest.csv"), "--text-bank",
                 str(data / "text_bank_{n}.json"), "--n-proto-list", "2,4,8,16,24,32",
                 "--out-dir", str(tmp_path / "sweep")])
    lines = (tmp_path / "sweep" / "sweep.csv").read_text().splitlines() if code == 0 else []
    header = lines[0].split(",") if lines else []
    ok = code == 0 and len(lines) == 7 and header == ["n_proto", "bacc_mean", "bacc_std", "f1_mean", "f1_std"]
    record(acceptance_log, 8, "prototype-count sweep table", ok, f"exit {code}, {max(len(lines) - 1, 0)} rows")


def test_criterion_9_throughput(acceptance_log):
    rng = np.random.default_rng(0)
    X = rng.standard_normal((10_000, 512)).astype(np.float32)
    P = PrototypeBank(Stage.INITIAL, rng.standard_normal((16, 512)).astype(np.float32))
    times = []
    with threadpool_limits(1):
        embed_slide(X, P)
        for _ in range(7):
            t = time.perf_counter()
            embed_slide(X, P)
            times.append(time.perf_counter() - t)
    median = statistics.median(times)
    record(acceptance_log, 9, "single-slide throughput", median < 0.1,
           f"median {1000 * median:.1f} ms < 100 ms single-threaded")
