"""Shared domain types and embedding-matrix helpers.

Embedding matrices are plain 2-D ``numpy`` arrays stored as float32. Any
reduction over them (dot products, softmax sums, means) is done in float64.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .exceptions import (
    BadLabel,
    DimMismatch,
    DuplicateSlideId,
    EmptyMatrix,
    NonFiniteValue,
    ShapeMismatch,
    UnknownSplit,
)

STORAGE_DTYPE = np.float32
ZERO_NORM = 1e-12

SPLITS = ("train", "val", "test")


def validate_embedding_matrix(data, rows: Optional[int] = None, dim: Optional[int] = None) -> None:
    """Check the embedding-matrix invariants, raising on the first violation.

    ``data`` may be 2-D, or flat together with the declared ``rows`` and
    ``dim``. Checks run in order: empty, shape, finiteness (row-major scan).
    """
    arr = np.asarray(data)
    if rows is None or dim is None:
        if arr.ndim != 2:
            raise ShapeMismatch(f"expected a 2-D matrix, got {arr.ndim}-D")
        rows = arr.shape[0] if rows is None else rows
        dim = arr.shape[1] if dim is None else dim
    if rows < 1 or dim < 1:
        raise EmptyMatrix(f"matrix has rows={rows}, dim={dim}")
    if arr.size != rows * dim:
        raise ShapeMismatch(f"declared {rows}x{dim} = {rows * dim} values, got {arr.size}")
    if arr.ndim == 2 and arr.shape != (rows, dim):
        raise ShapeMismatch(f"declared {rows}x{dim}, got {arr.shape[0]}x{arr.shape[1]}")
    flat = arr.reshape(rows, dim)
    bad = ~np.isfinite(flat)
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise NonFiniteValue(int(r), int(c))


def check_embedding_matrix(data, dim: Optional[int] = None, name: str = "matrix") -> np.ndarray:
    """Validate ``data`` and return it as a C-contiguous float32 matrix."""
    arr = np.asarray(data)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    validate_embedding_matrix(arr)
    if dim is not None and arr.shape[1] != dim:
        raise DimMismatch(f"{name} has dim {arr.shape[1]}, expected {dim}")
    return np.ascontiguousarray(arr, dtype=STORAGE_DTYPE)


def l2_normalize_rows(m) -> tuple[np.ndarray, np.ndarray]:
    """Scale each row to unit Euclidean norm.

    Rows whose norm is below ``1e-12`` are returned unchanged.

    Returns:
        The normalized float32 matrix and a boolean mask of the zero rows.
    """
    x = np.asarray(m)
    x64 = x.astype(np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", x64, x64))
    zero = norms < ZERO_NORM
    scale = np.where(zero, 1.0, norms)
    out = (x64 / scale[:, None]).astype(STORAGE_DTYPE)
    out[zero] = x[zero]
    return out, zero


class Stage(str, enum.Enum):
    INITIAL = "initial"
    REFINED = "refined"


@dataclass(frozen=True)
class PrototypeDescriptor:
    index: int
    name: str
    description: str
    text_embedding: np.ndarray


@dataclass(frozen=True)
class PrototypeBank:
    """Prototype matrix plus metadata.

    ``source_rows`` records, for a bank built by patch-text contrast, which
    pool row was added to each text embedding. ``slide_id`` is set on
    refined banks.
    """

    stage: Stage
    matrix: np.ndarray
    descriptors: tuple[PrototypeDescriptor, ...] = ()
    slide_id: Optional[str] = None
    source_rows: Optional[tuple[int, ...]] = None

    def __post_init__(self):
        validate_embedding_matrix(self.matrix)
        if self.descriptors and len(self.descriptors) != self.matrix.shape[0]:
            raise ShapeMismatch(
                f"{len(self.descriptors)} descriptors for {self.matrix.shape[0]} prototypes"
            )
        if self.stage is Stage.REFINED and self.slide_id is None:
            raise ValueError("a refined bank must record its slide id")

    @property
    def n_proto(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def names(self) -> list[str]:
        if self.descriptors:
            return [d.name for d in self.descriptors]
        return [f"prototype-{j}" for j in range(self.n_proto)]


@dataclass(frozen=True)
class AssignmentMap:
    patch_to_proto: np.ndarray
    best_similarity: np.ndarray
    proto_members: tuple[np.ndarray, ...]

    @property
    def n_patches(self) -> int:
        return len(self.patch_to_proto)

    @property
    def n_proto(self) -> int:
        return len(self.proto_members)


@dataclass(frozen=True)
class SlideEmbedding:
    slide_id: str
    n_proto: int
    dim: int
    values: np.ndarray

    def block(self, j: int) -> np.ndarray:
        return self.values[j * self.dim:(j + 1) * self.dim]


@dataclass(frozen=True)
class SlideRecord:
    slide_id: str
    embedding_path: str
    label: int
    split: str


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[SlideRecord, ...]
    n_classes: Optional[int] = None

    def __post_init__(self):
        seen = set()
        for rec in self.records:
            if rec.slide_id in seen:
                raise DuplicateSlideId(rec.slide_id)
            seen.add(rec.slide_id)
            if rec.split not in SPLITS:
                raise UnknownSplit(f"{rec.slide_id}: split {rec.split!r}")
            if rec.label < 0 or (self.n_classes is not None and rec.label >= self.n_classes):
                raise BadLabel(f"{rec.slide_id}: label {rec.label}")

    def split(self, name: str) -> list[SlideRecord]:
        if name not in SPLITS:
            raise UnknownSplit(name)
        return [r for r in self.records if r.split == name]

    def count(self, name: str) -> int:
        return len(self.split(name))

    @property
    def num_classes(self) -> int:
        if self.n_classes is not None:
            return self.n_classes
        return max(r.label for r in self.records) + 1


@dataclass(frozen=True)
class PrototypeInitConfig:
    n_proto: int = 16
    n_patch_per_proto: int = 100_000
    seed: int = 0
    normalize: bool = False
    n_total: int = field(init=False)

    def __post_init__(self):
        if self.n_proto < 1 or self.n_patch_per_proto < 1:
            raise ValueError("n_proto and n_patch_per_proto must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 unsigned bits")
        object.__setattr__(self, "n_total", self.n_proto * self.n_patch_per_proto)


def stack_rows(vectors: Sequence[np.ndarray]) -> np.ndarray:
    return np.ascontiguousarray(np.vstack(vectors), dtype=STORAGE_DTYPE)
