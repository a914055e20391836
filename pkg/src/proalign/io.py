"""On-disk formats: PAEM matrices, manifest CSV, text banks, split generation.

PAEM layout (all little-endian)::

    offset  size  field
    0       4     magic  b"PAEM"
    4       4     version  uint32 = 1
    8       4     dtype    uint32 = 1 (float32)
    12      8     rows     uint64
    20      8     cols     uint64
    28      4*rows*cols   payload, float32, row-major

Text banks are JSON documents::

    {"prototypes": [{"index": 0, "name": "...", "description": "...",
                     "embedding": [0.1, ...]}, ...]}

Banks written for a built prototype matrix may add ``"source_row"`` per
entry and a top-level ``"method"``; readers ignore unknown keys.
"""

from __future__ import annotations

import csv
import json
import os
import struct
from collections import defaultdict
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .core import (
    SPLITS,
    DatasetManifest,
    PrototypeBank,
    PrototypeDescriptor,
    SlideRecord,
    Stage,
    check_embedding_matrix,
    stack_rows,
    validate_embedding_matrix,
)
from .exceptions import (
    BadLabel,
    BadMagic,
    CountMismatch,
    DataError,
    DimMismatch,
    IndexGap,
    MissingColumn,
    TooFewSlides,
    TruncatedPayload,
    UnknownSplit,
    UnsupportedVersion,
)

PAEM_MAGIC = b"PAEM"
PAEM_VERSION = 1
PAEM_DTYPE_F32 = 1
_HEADER = struct.Struct("<4sIIQQ")
HEADER_SIZE = _HEADER.size

MANIFEST_COLUMNS = ("slide_id", "embedding_path", "label", "split")


# --------------------------------------------------------------------------- PAEM

def paem_bytes(m) -> bytes:
    arr = np.asarray(m)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    validate_embedding_matrix(arr)
    rows, cols = arr.shape
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return _HEADER.pack(PAEM_MAGIC, PAEM_VERSION, PAEM_DTYPE_F32, rows, cols) + payload


def write_paem(m, path) -> None:
    """Write a float32 matrix to ``path`` in PAEM format."""
    data = paem_bytes(m)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def parse_paem(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < 4 or buf[:4] != PAEM_MAGIC:
        raise BadMagic(f"{source}: not a PAEM file (magic {buf[:4]!r})")
    if len(buf) < HEADER_SIZE:
        raise TruncatedPayload(f"{source}: header truncated ({len(buf)} bytes)")
    _, version, dtype, rows, cols = _HEADER.unpack_from(buf)
    if version != PAEM_VERSION:
        raise UnsupportedVersion(f"{source}: version {version}")
    if dtype != PAEM_DTYPE_F32:
        raise UnsupportedVersion(f"{source}: dtype code {dtype}")
    need = 4 * rows * cols
    have = len(buf) - HEADER_SIZE
    if have < need:
        raise TruncatedPayload(f"{source}: {rows}x{cols} needs {need} payload bytes, found {have}")
    if have > need:
        raise DataError(f"{source}: {have - need} trailing bytes after payload")
    arr = np.frombuffer(buf, dtype="<f4", count=rows * cols, offset=HEADER_SIZE)
    arr = arr.reshape(rows, cols).astype(np.float32)
    validate_embedding_matrix(arr)
    return arr


def read_paem(path) -> np.ndarray:
    """Read and validate a PAEM file."""
    with open(path, "rb") as fh:
        buf = fh.read()
    return parse_paem(buf, str(path))


def read_paem_header(path) -> tuple[int, int]:
    """Return ``(rows, cols)`` without loading the payload."""
    with open(path, "rb") as fh:
        buf = fh.read(HEADER_SIZE)
    if buf[:4] != PAEM_MAGIC:
        raise BadMagic(f"{path}: not a PAEM file")
    if len(buf) < HEADER_SIZE:
        raise TruncatedPayload(f"{path}: header truncated")
    _, version, dtype, rows, cols = _HEADER.unpack(buf)
    if version != PAEM_VERSION or dtype != PAEM_DTYPE_F32:
        raise UnsupportedVersion(f"{path}: version {version}, dtype {dtype}")
    return rows, cols


# --------------------------------------------------------------------------- manifest

def parse_manifest(path, n_classes: Optional[int] = None) -> DatasetManifest:
    """Read a manifest CSV with header ``slide_id,embedding_path,label,split``.

    Relative embedding paths are resolved against the manifest's directory.
    """
    path = Path(path)
    base = path.parent
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in MANIFEST_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise MissingColumn(f"{path}: missing column(s) {', '.join(missing)}")
        records = []
        for lineno, row in enumerate(reader, start=2):
            try:
                label = int(row["label"])
            except (TypeError, ValueError):
                raise BadLabel(f"{path}:{lineno}: label {row['label']!r}") from None
            split = row["split"].strip()
            if split not in SPLITS:
                raise UnknownSplit(f"{path}:{lineno}: split {split!r}")
            emb = row["embedding_path"]
            if emb and not os.path.isabs(emb):
                emb = str(base / emb)
            records.append(SlideRecord(row["slide_id"], emb, label, split))
    return DatasetManifest(tuple(records), n_classes)


def write_manifest(records: Iterable[SlideRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for r in records:
            writer.writerow([r.slide_id, r.embedding_path, r.label, r.split])


# --------------------------------------------------------------------------- text banks

def parse_text_bank(path, expected_n_proto: Optional[int] = None):
    """Load prototype descriptors and their stacked text-embedding matrix.

    Returns:
        ``(descriptors, texts)`` with descriptors sorted by index and
        ``texts[j]`` the embedding of prototype ``j``.
    """
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    return text_bank_from_doc(doc, expected_n_proto, source=str(path))


def text_bank_from_doc(doc, expected_n_proto=None, source="<bank>"):
    entries = doc["prototypes"] if isinstance(doc, Mapping) else doc
    for e in entries:
        for key in ("index", "name", "description", "embedding"):
            if key not in e:
                raise MissingColumn(f"{source}: prototype entry lacks {key!r}")
    entries = sorted(entries, key=lambda e: int(e["index"]))
    indices = [int(e["index"]) for e in entries]
    if indices != list(range(len(entries))):
        seen = set(indices)
        if len(seen) != len(indices):
            raise IndexGap(f"{source}: duplicate prototype indices")
        gap = next(i for i in range(len(entries) + 1) if i not in seen)
        raise IndexGap(f"{source}: prototype index {gap} missing")
    if expected_n_proto is not None and len(entries) != expected_n_proto:
        raise CountMismatch(f"{source}: {len(entries)} prototypes, expected {expected_n_proto}")
    dims = {len(e["embedding"]) for e in entries}
    if len(dims) != 1:
        raise DimMismatch(f"{source}: embeddings have mixed dims {sorted(dims)}")
    descriptors = []
    for e in entries:
        vec = check_embedding_matrix(np.asarray(e["embedding"], dtype=np.float64).reshape(1, -1))[0]
        descriptors.append(PrototypeDescriptor(int(e["index"]), str(e["name"]), str(e["description"]), vec))
    texts = stack_rows([d.text_embedding for d in descriptors])
    return descriptors, texts


def text_bank_doc(descriptors: Sequence[PrototypeDescriptor], **extra) -> dict:
    doc = dict(extra)
    doc["prototypes"] = [
        {
            "index": d.index,
            "name": d.name,
            "description": d.description,
            "embedding": [float(v) for v in d.text_embedding],
        }
        for d in descriptors
    ]
    return doc


def write_text_bank(descriptors: Sequence[PrototypeDescriptor], path, **extra) -> None:
    write_json(text_bank_doc(descriptors, **extra), path)


def write_prototype_bank(bank: PrototypeBank, stem, method: str, pool=None, **meta) -> tuple[Path, Path]:
    """Write ``<stem>.paem`` (matrix) and ``<stem>.json`` (descriptor sidecar).

    When the sampling ``pool`` is given, each prototype built by patch-text
    contrast also records the slide and in-slide row of its chosen patch.
    """
    stem = Path(stem)
    mat_path = stem.with_name(stem.name + ".paem")
    side_path = stem.with_name(stem.name + ".json")
    write_paem(bank.matrix, mat_path)
    doc = text_bank_doc(bank.descriptors, method=method, n_proto=bank.n_proto, dim=bank.dim, **meta)
    if bank.source_rows is not None:
        for entry, row in zip(doc["prototypes"], bank.source_rows):
            entry["source_row"] = row
            if pool is not None:
                entry["source_slide"] = pool.slide_ids[row]
                entry["source_patch_row"] = int(pool.patch_rows[row])
    write_json(doc, side_path)
    return mat_path, side_path


def read_prototype_bank(stem) -> tuple[PrototypeBank, dict]:
    """Load a bank written by :func:`write_prototype_bank`.

    Returns:
        The bank and the sidecar's top-level metadata (``method``,
        ``normalize`` ...).
    """
    stem = Path(stem)
    if stem.suffix in (".paem", ".json"):
        stem = stem.with_suffix("")
    side_path = stem.with_name(stem.name + ".json")
    matrix = read_paem(stem.with_name(stem.name + ".paem"))
    with open(side_path, encoding="utf-8") as fh:
        doc = json.load(fh)
    descriptors, _ = text_bank_from_doc(doc, matrix.shape[0], source=str(side_path))
    entries = sorted(doc["prototypes"], key=lambda e: int(e["index"]))
    rows = [e.get("source_row") for e in entries]
    source_rows = tuple(rows) if all(r is not None for r in rows) else None
    meta = {k: v for k, v in doc.items() if k != "prototypes"}
    return PrototypeBank(Stage.INITIAL, matrix, tuple(descriptors), source_rows=source_rows), meta


def write_json(doc, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=2, sort_keys=False)
        fh.write("\n")
    os.replace(tmp, path)


# --------------------------------------------------------------------------- splits

def split_sizes(n: int, ratios: Sequence[float]) -> list[int]:
    """Floor each share, then hand out the remainder.

    Splits with a positive ratio that floored to zero are served first; any
    slides still left go to train, val, test in that order, one per split.
    """
    exact = [n * r for r in ratios]
    sizes = [int(np.floor(e + 1e-9)) for e in exact]
    remainder = n - sum(sizes)
    wanted = [i for i, r in enumerate(ratios) if r > 0]
    # each split takes at most one extra slide, so no split drifts by more than 1
    order = [i for i in wanted if sizes[i] == 0] + [i for i in wanted if sizes[i] > 0]
    for i in order[:remainder]:
        sizes[i] += 1
    return sizes


def make_splits(
    records: Iterable[tuple[str, int]],
    ratios: Sequence[float] = (0.6, 0.2, 0.2),
    seed: int = 0,
) -> dict[str, str]:
    """Stratified train/val/test assignment.

    Within each class the slide ids are sorted, shuffled with ``seed`` and cut
    contiguously at the ratio boundaries, so the result does not depend on
    input order.

    Returns:
        Mapping of slide id to split name.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three non-negative values summing to 1, got {ratios}")
    by_class: dict[int, list[str]] = defaultdict(list)
    for slide_id, label in records:
        by_class[int(label)].append(str(slide_id))
    n_wanted = sum(r > 0 for r in ratios)
    rng = np.random.default_rng(seed)
    out: dict[str, str] = {}
    for label in sorted(by_class):
        ids = sorted(by_class[label])
        if len(ids) < n_wanted:
            raise TooFewSlides(f"class {label} has {len(ids)} slide(s) for {n_wanted} nonempty splits")
        order = rng.permutation(len(ids))
        start = 0
        for name, size in zip(SPLITS, split_sizes(len(ids), ratios)):
            for k in order[start:start + size]:
                out[ids[k]] = name
            start += size
    return out
