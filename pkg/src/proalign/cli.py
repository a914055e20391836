"""Command-line entry point: ``proalign <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric error.
Every command writes a ``run_record.json`` (or ``<out>.run.json``) next to
its outputs.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .core import PrototypeInitConfig, SlideRecord
from .estimators import ProAlignEmbedder
from .exceptions import CountMismatch, DataError, EmptySlide, NumericError, ProAlignError, UsageError
from .io import (
    parse_manifest,
    parse_text_bank,
    read_paem,
    read_paem_header,
    read_prototype_bank,
    write_json,
    write_manifest,
    write_paem,
    write_prototype_bank,
    write_text_bank,
)
from .metrics import aggregate_runs, balanced_accuracy, confusion_matrix, metric_document, weighted_f1
from .pfam import allocation_report, embed_slide, pool_slide
from .probe import ProbeConfig, load_probe, predict, save_probe, train_probe
from .prototypes import kmeans_init, sample_training_patches, text_prototypes
from .synth import SynthConfig, generate_synthetic_dataset, resized_text_bank, write_synthetic_dataset

logger = logging.getLogger("proalign")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------- helpers

def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _workers(requested: int) -> int:
    cap = os.environ.get("PROALIGN_THREADS")
    if cap:
        try:
            return max(1, min(requested, int(cap)))
        except ValueError:
            pass
    return max(1, requested)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_run_record(path: Path, command: str, args, started: float, inputs, outputs, **extra) -> None:
    config = {k: v for k, v in vars(args).items() if k != "func"}
    base = path.parent
    checksums = {}
    for p in sorted({Path(o) for o in outputs}):
        try:
            key = str(p.relative_to(base))
        except ValueError:
            key = str(p)
        checksums[key] = _sha256(p)
    record = {
        "command": command,
        "version": __version__,
        "config": config,
        "seeds": extra.pop("seeds", [config.get("seed")] if "seed" in config else []),
        "inputs": [str(i) for i in inputs],
        "outputs": sorted(checksums),
        "checksums": checksums,
        "duration_seconds": round(time.perf_counter() - started, 6),
    }
    record.update(extra)
    write_json(record, path)


def _load_slide(path: str) -> np.ndarray:
    rows, _ = read_paem_header(path)
    if rows == 0:
        raise EmptySlide(f"{path}: slide has zero patches")
    return read_paem(path)


def _check_dims(records: Sequence[SlideRecord], dim: Optional[int] = None) -> tuple[int, list[tuple[str, str]]]:
    """Header-only scan; returns the shared dim and per-slide empty-file errors."""
    errors = []
    for r in records:
        rows, cols = read_paem_header(r.embedding_path)
        if rows == 0:
            errors.append((r.slide_id, "EmptySlide"))
            continue
        if dim is None:
            dim = cols
        elif cols != dim:
            raise DataError(f"slide {r.slide_id} has dim {cols}, expected {dim}")
    if dim is None:
        raise DataError("no readable slides")
    return dim, errors


def _split_records(manifest, split: str) -> list[SlideRecord]:
    if split == "all":
        return list(manifest.records)
    return manifest.split(split)


# --------------------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    started = time.perf_counter()
    cfg = SynthConfig(
        n_proto=args.n_proto,
        dim=args.dim,
        n_slides=(args.n_train, args.n_val, args.n_test),
        patches_per_slide=(args.patches_min, args.patches_max),
        center_separation=args.separation,
        noise_std=args.noise_std,
        n_classes=args.n_classes,
        mixture_alpha=args.mixture_alpha,
        seed=args.seed,
    )
    ds = generate_synthetic_dataset(cfg)
    out = write_synthetic_dataset(ds, args.out)
    outputs = [out / "manifest.csv", out / "text_bank.json", out / "planted_truth.json"]
    outputs += [out / r.embedding_path for r in ds.records]
    for m in sorted(set(args.bank_sizes or [])):
        path = out / f"text_bank_{m}.json"
        write_text_bank(resized_text_bank(ds, m, args.seed), path)
        outputs.append(path)
    _write_run_record(out / "run_record.json", "synth", args, started, [], outputs)
    print(f"wrote {len(ds.records)} slides to {out}")
    return 0


def _build_bank(manifest, method, n_proto, patches_per_proto, seed, normalize, text_bank=None,
                max_iters=100, tol=1e-6):
    cfg = PrototypeInitConfig(n_proto, patches_per_proto, seed, normalize)
    train = manifest.split("train")
    dim, errors = _check_dims(train)
    if errors:
        raise EmptySlide(f"train slide {errors[0][0]} has zero patches")
    descriptors = ()
    if method == "text":
        descriptors, texts = parse_text_bank(text_bank, n_proto)
        if texts.shape[1] != dim:
            raise DataError(f"text bank dim {texts.shape[1]} != slide dim {dim}")
    pool = sample_training_patches(manifest, cfg, _load_slide)
    if method == "text":
        bank = text_prototypes(pool.matrix, texts, tuple(descriptors), normalize)
    else:
        from .core import l2_normalize_rows

        matrix = l2_normalize_rows(pool.matrix)[0] if normalize else pool.matrix
        bank = kmeans_init(matrix, n_proto, seed, max_iters, tol)
    return bank, pool


def cmd_init_prototypes(args) -> int:
    started = time.perf_counter()
    if args.method == "text" and not args.text_bank:
        raise UsageError("--method text requires --text-bank")
    manifest = parse_manifest(args.manifest)
    bank, pool = _build_bank(manifest, args.method, args.n_proto, args.patches_per_proto, args.seed,
                             args.normalize, args.text_bank, args.max_iters, args.tol)
    stem = Path(args.out)
    stem.parent.mkdir(parents=True, exist_ok=True)
    outputs = write_prototype_bank(bank, stem, args.method, pool=pool, normalize=args.normalize,
                                   seed=args.seed, pool_rows=int(pool.matrix.shape[0]),
                                   pool_shortfall=int(pool.shortfall))
    inputs = [args.manifest] + ([args.text_bank] if args.text_bank else [])
    _write_run_record(stem.with_name(stem.name + ".run.json"), "init-prototypes", args, started,
                      inputs, outputs)
    print(f"wrote {bank.n_proto} prototypes ({args.method}) to {outputs[0]}")
    return 0


def cmd_embed(args) -> int:
    started = time.perf_counter()
    manifest = parse_manifest(args.manifest)
    records = _split_records(manifest, args.split)
    bank = normalize = None
    if args.baseline == "none":
        if not args.prototypes:
            raise UsageError("--prototypes is required unless --baseline is mean or max")
        bank, meta = read_prototype_bank(args.prototypes)
        normalize = bool(meta.get("normalize", False))
        dim, errors = _check_dims(records, bank.dim)
    else:
        dim, errors = _check_dims(records)
    failed = {sid for sid, _ in errors}
    todo = [r for r in records if r.slide_id not in failed]

    out = Path(args.out_dir)
    (out / "slides").mkdir(parents=True, exist_ok=True)
    if bank is not None:
        (out / "reports").mkdir(exist_ok=True)

    def work(rec: SlideRecord):
        x = _load_slide(rec.embedding_path)
        if bank is None:
            return pool_slide(x, args.baseline), None
        res = embed_slide(x, bank, rec.slide_id, normalize)
        report = allocation_report(res.assignment, res.similarity, bank, args.top_k, rec.slide_id)
        return res.embedding.values, report

    workers = _workers(args.workers)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(work, todo))
    else:
        results = [work(r) for r in todo]

    outputs, emb_records, by_split = [], [], {}
    for rec, (values, report) in zip(todo, results):
        rel = f"slides/{rec.slide_id}.paem"
        write_paem(values.reshape(1, -1), out / rel)
        outputs.append(out / rel)
        emb_records.append(SlideRecord(rec.slide_id, rel, rec.label, rec.split))
        by_split.setdefault(rec.split, []).append(values)
        if report is not None:
            path = out / "reports" / f"{rec.slide_id}.json"
            write_json(report.to_dict(), path)
            outputs.append(path)
    for split, rows in by_split.items():
        write_paem(np.vstack(rows), out / f"{split}.paem")
        outputs.append(out / f"{split}.paem")
    write_manifest(emb_records, out / "embeddings.csv")
    outputs.append(out / "embeddings.csv")

    inputs = [args.manifest] + ([args.prototypes] if args.prototypes else [])
    _write_run_record(out / "run_record.json", "embed", args, started, inputs, outputs,
                      errors=[{"slide_id": s, "error": e} for s, e in errors],
                      embedding_dim=int(len(results[0][0])) if results else None,
                      patch_dim=dim, workers_used=workers)
    print(f"embedded {len(todo)} slide(s) into {out}")
    if errors:
        for sid, err in errors:
            print(f"error: slide {sid}: {err}", file=sys.stderr)
        return EmptySlide.exit_code
    return 0


def _load_embeddings(manifest, split):
    recs = manifest.split(split)
    if not recs:
        return np.zeros((0, 0)), np.zeros(0, dtype=np.int64)
    x = np.vstack([read_paem(r.embedding_path).reshape(1, -1) for r in recs]).astype(np.float64)
    y = np.array([r.label for r in recs], dtype=np.int64)
    return x, y


def _probe_config(args, input_dim: int, n_classes: int, seed: int) -> ProbeConfig:
    return ProbeConfig(
        kind=args.probe,
        input_dim=input_dim,
        n_classes=n_classes,
        hidden_dim=args.hidden_dim,
        learning_rate=args.lr,
        weight_decay=args.weight_decay,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=seed,
    ).validate()


def _evaluate(model, x, y, n_classes) -> tuple[float, float]:
    cm = confusion_matrix(y, predict(model, x), n_classes)
    return balanced_accuracy(cm), weighted_f1(cm)


def cmd_train(args) -> int:
    started = time.perf_counter()
    manifest = parse_manifest(args.embeddings)
    n_classes = max(2, manifest.num_classes)
    x_tr, y_tr = _load_embeddings(manifest, "train")
    x_va, y_va = _load_embeddings(manifest, "val")
    if len(y_tr) == 0:
        raise DataError("no train embeddings")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    for seed in args.seeds:
        cfg = _probe_config(args, x_tr.shape[1], n_classes, seed)
        result = train_probe(x_tr, y_tr, cfg, x_va if len(y_va) else None, y_va if len(y_va) else None)
        model_path = out / f"probe_seed{seed}.bin"
        save_probe(result.model, cfg, model_path)
        log_path = out / f"train_log_seed{seed}.json"
        write_json({"config": asdict(cfg), "best_epoch": result.best_epoch,
                    "epochs": [asdict(e) for e in result.log]}, log_path)
        outputs += [model_path, log_path]
    _write_run_record(out / "run_record.json", "train", args, started, [args.embeddings], outputs,
                      seeds=list(args.seeds))
    print(f"trained {len(args.seeds)} {args.probe} probe(s) into {out}")
    return 0


def cmd_eval(args) -> int:
    started = time.perf_counter()
    manifest = parse_manifest(args.embeddings)
    x, y = _load_embeddings(manifest, args.split)
    if len(y) == 0:
        raise DataError(f"no {args.split} embeddings")
    models = sorted(Path(args.models_dir).glob("probe_seed*.bin"),
                    key=lambda p: int(p.stem.replace("probe_seed", "")))
    if not models:
        raise DataError(f"no probe_seed*.bin models in {args.models_dir}")
    seeds, baccs, f1s, configs = [], [], [], []
    for path in models:
        model, cfg, _ = load_probe(path)
        b, f = _evaluate(model, x, y, cfg.n_classes)
        seeds.append(cfg.seed)
        baccs.append(b)
        f1s.append(f)
        configs.append(asdict(cfg))
    doc = {
        "metrics": [
            metric_document("balanced_accuracy", args.split, baccs, seeds),
            metric_document("weighted_f1", args.split, f1s, seeds),
        ],
        "probe_configs": configs,
    }
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_json(doc, out)
    _write_run_record(out.with_name(out.stem + ".run.json"), "eval", args, started,
                      [args.embeddings] + [str(m) for m in models], [out], seeds=seeds)
    for m in doc["metrics"]:
        print(f"{m['metric']} ({args.split}): {m['mean_percent']:.2f} ± {m['std_percent']:.2f}")
    return 0


def cmd_sweep(args) -> int:
    started = time.perf_counter()
    counts = []
    for n in args.n_proto_list:
        if n in counts:
            logger.warning("duplicate prototype count %d ignored", n)
            continue
        counts.append(n)
    if any(n < 1 for n in counts):
        raise UsageError("prototype counts must be >= 1")
    if args.method == "text":
        if not args.text_bank:
            raise UsageError("--method text requires --text-bank")
        banks = {n: args.text_bank.format(n=n) for n in counts}
        for n, path in banks.items():
            if not Path(path).exists():
                raise DataError(f"text bank for {n} prototypes not found: {path}")
            if "{n}" not in args.text_bank:
                parse_text_bank(path, n)

    manifest = parse_manifest(args.manifest)
    dim, errors = _check_dims(manifest.records)
    if errors:
        raise EmptySlide(f"slide {errors[0][0]} has zero patches")
    slides = {r.slide_id: _load_slide(r.embedding_path) for r in manifest.records}
    n_classes = max(2, manifest.num_classes)
    split = {s: manifest.split(s) for s in ("train", "val", "test")}
    if not split["train"] or not split["test"]:
        raise DataError("sweep needs train and test slides")
    workers = _workers(args.workers)

    rows = []
    for n in counts:
        bank, _ = _build_bank(manifest, args.method, n, args.patches_per_proto, args.seed, args.normalize,
                              banks[n] if args.method == "text" else None)
        embedder = ProAlignEmbedder.from_bank(bank, normalize=args.normalize, n_jobs=workers)
        feats = {}
        for s, recs in split.items():
            if recs:
                feats[s] = (embedder.transform([slides[r.slide_id] for r in recs]).astype(np.float64),
                            np.array([r.label for r in recs], dtype=np.int64))
        baccs, f1s = [], []
        for seed in args.seeds:
            cfg = _probe_config(args, feats["train"][0].shape[1], n_classes, seed)
            val = feats.get("val", (None, None))
            result = train_probe(*feats["train"], cfg, *val)
            b, f = _evaluate(result.model, *feats["test"], n_classes)
            baccs.append(b)
            f1s.append(f)
        bm, bs = aggregate_runs(baccs)
        fm, fs = aggregate_runs(f1s)
        rows.append([n, f"{100 * bm:.2f}", f"{100 * bs:.2f}", f"{100 * fm:.2f}", f"{100 * fs:.2f}"])
        logger.info("n_proto=%d  B acc %.2f±%.2f  F1 %.2f±%.2f", n, 100 * bm, 100 * bs, 100 * fm, 100 * fs)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = out / "sweep.csv"
    with open(table, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n_proto", "bacc_mean", "bacc_std", "f1_mean", "f1_std"])
        w.writerows(rows)
    _write_run_record(out / "run_record.json", "sweep", args, started, [args.manifest], [table],
                      seeds=list(args.seeds), n_proto_list=counts, workers_used=workers)
    for r in rows:
        print(f"n_proto={r[0]:>3}  B acc {r[1]}±{r[2]}  F1 {r[3]}±{r[4]}")
    return 0


def cmd_allocmap(args) -> int:
    started = time.perf_counter()
    bank, meta = read_prototype_bank(args.prototypes)
    x = _load_slide(args.slide)
    if x.shape[1] != bank.dim:
        raise DataError(f"slide dim {x.shape[1]} != prototype dim {bank.dim}")
    slide_id = args.slide_id or Path(args.slide).stem
    res = embed_slide(x, bank, slide_id, bool(meta.get("normalize", False)))
    report = allocation_report(res.assignment, res.similarity, bank, args.top_k, slide_id)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_json(report.to_dict(), out)
    _write_run_record(out.with_name(out.stem + ".run.json"), "allocmap", args, started,
                      [args.slide, args.prototypes], [out])
    for p in report.prototypes:
        print(f"{p.index:>3} {p.name:<24} {p.patch_count:>6} {100 * p.proportion:6.2f}%")
    if report.empty_prototypes:
        print(f"empty prototypes: {', '.join(map(str, report.empty_prototypes))}")
    return 0


# --------------------------------------------------------------------------- parser

def _add_probe_flags(p):
    p.add_argument("--probe", choices=("linear", "mlp"), default="linear")
    p.add_argument("--hidden-dim", type=_positive, default=256)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--weight-decay", type=float, default=1e-5)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=_positive, default=32)
    p.add_argument("--seeds", type=_int_list, default=[0, 1, 2, 3, 4])


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="proalign", description="Cross-modal prototype allocation for slide embeddings.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-proto", type=_positive, default=16)
    p.add_argument("--dim", type=_positive, default=32)
    p.add_argument("--n-train", type=int, default=60)
    p.add_argument("--n-val", type=int, default=20)
    p.add_argument("--n-test", type=int, default=20)
    p.add_argument("--patches-min", type=_positive, default=50)
    p.add_argument("--patches-max", type=_positive, default=200)
    p.add_argument("--separation", type=float, default=4.0)
    p.add_argument("--noise-std", type=float, default=1.0)
    p.add_argument("--n-classes", type=_positive, default=4)
    p.add_argument("--mixture-alpha", type=float, default=0.3)
    p.add_argument("--bank-sizes", type=_int_list, default=None,
                   help="also write text_bank_<m>.json for each m (for sweeps)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("init-prototypes", help="build the initial prototype bank")
    p.add_argument("--manifest", required=True)
    p.add_argument("--text-bank")
    p.add_argument("--method", choices=("text", "kmeans"), default="text")
    p.add_argument("--n-proto", type=_positive, default=16)
    p.add_argument("--patches-per-proto", type=_positive, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--normalize", action="store_true")
    p.add_argument("--max-iters", type=_positive, default=100)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--out", required=True, help="output stem; writes <out>.paem and <out>.json")
    p.set_defaults(func=cmd_init_prototypes)

    p = sub.add_parser("embed", help="embed slides with a prototype bank")
    p.add_argument("--manifest", required=True)
    p.add_argument("--prototypes", help="bank stem written by init-prototypes")
    p.add_argument("--split", choices=("all", "train", "val", "test"), default="all")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--workers", type=_positive, default=1)
    p.add_argument("--baseline", choices=("none", "mean", "max"), default="none")
    p.add_argument("--top-k", type=_positive, default=3)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("train", help="train probes on slide embeddings")
    p.add_argument("--embeddings", required=True, help="embeddings.csv written by embed")
    p.add_argument("--out-dir", required=True)
    _add_probe_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate trained probes")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--models-dir", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--out", required=True, help="metrics JSON path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="prototype-count sweep")
    p.add_argument("--manifest", required=True)
    p.add_argument("--text-bank", help="bank path; may contain {n} for the prototype count")
    p.add_argument("--method", choices=("text", "kmeans"), default="text")
    p.add_argument("--n-proto-list", type=_int_list, default=[2, 4, 8, 16, 24, 32])
    p.add_argument("--patches-per-proto", type=_positive, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--normalize", action="store_true")
    p.add_argument("--workers", type=_positive, default=1)
    p.add_argument("--out-dir", required=True)
    _add_probe_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("allocmap", help="allocation report for one slide")
    p.add_argument("--slide", required=True, help="slide PAEM file")
    p.add_argument("--prototypes", required=True)
    p.add_argument("--slide-id")
    p.add_argument("--top-k", type=_positive, default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_allocmap)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with np.errstate(over="raise", invalid="raise"):
            return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ProAlignError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FloatingPointError, OverflowError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return NumericError.exit_code
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
