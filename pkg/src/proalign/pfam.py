"""Per-slide prototype refinement with parameter-free attention.

For a slide ``X`` (n x d) and an initial bank ``P`` (k x d):

1. ``S' = X P^T`` (float64),
2. each patch goes to its most similar prototype (ties to the lower index),
3. every non-empty prototype becomes the softmax(S')-weighted mean of its
   own patches; an empty prototype keeps its initial embedding,
4. the refined prototypes are concatenated into the slide embedding.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import (
    AssignmentMap,
    PrototypeBank,
    SlideEmbedding,
    Stage,
    l2_normalize_rows,
)
from .exceptions import DimMismatch, EmptySlide, ShapeMismatch


def _matrix(P) -> np.ndarray:
    return P.matrix if isinstance(P, PrototypeBank) else np.asarray(P)


def compute_patch_prototype_similarity(X, P) -> np.ndarray:
    """``(n, k)`` float64 matrix of patch/prototype dot products."""
    X = np.asarray(X)
    M = _matrix(P)
    if X.ndim != 2 or M.ndim != 2 or X.shape[1] != M.shape[1]:
        raise DimMismatch(f"patch dim {X.shape[-1]} != prototype dim {M.shape[-1]}")
    return X.astype(np.float64) @ M.astype(np.float64).T


def assign_patches(similarity) -> AssignmentMap:
    """Hard-assign every patch to its argmax prototype."""
    s = np.asarray(similarity, dtype=np.float64)
    n, k = s.shape
    labels = np.argmax(s, axis=1)
    best = s[np.arange(n), labels]
    order = np.argsort(labels, kind="stable")
    bounds = np.searchsorted(labels[order], np.arange(k + 1))
    members = tuple(order[bounds[j]:bounds[j + 1]] for j in range(k))
    return AssignmentMap(labels, best, members)


def attention_weights(asn: AssignmentMap, n_proto: Optional[int] = None, similarity=None) -> np.ndarray:
    """Softmax weight of every patch within its own prototype's member set.

    The logit of patch ``i`` is ``similarity[i, assigned(i)]``; without
    ``similarity`` the assignment's cached best scores are used. Per-prototype
    max subtraction leaves the weights unchanged.
    """
    k = asn.n_proto if n_proto is None else n_proto
    labels = asn.patch_to_proto
    if similarity is None:
        s = asn.best_similarity
    else:
        s = np.asarray(similarity, dtype=np.float64)[np.arange(len(labels)), labels]
    peak = np.full(k, -np.inf)
    np.maximum.at(peak, labels, s)
    e = np.exp(s - peak[labels])
    denom = np.bincount(labels, weights=e, minlength=k)
    return e / denom[labels]


def refine_prototypes(X, similarity, asn: AssignmentMap, P: PrototypeBank, slide_id: str = "") -> PrototypeBank:
    """Attention-pool each prototype's patches; keep empty prototypes as-is."""
    X = np.asarray(X)
    init = _matrix(P)
    if (X.shape[0] != asn.n_patches or init.shape[0] != asn.n_proto or X.shape[1] != init.shape[1]
            or np.shape(similarity) != (asn.n_patches, asn.n_proto)):
        raise ShapeMismatch("patches, assignment and prototype bank disagree in shape")
    weights = attention_weights(asn, init.shape[0], similarity)
    refined = init.astype(np.float32, copy=True)
    for j, idx in enumerate(asn.proto_members):
        if len(idx) == 0:
            continue
        block = X[idx].astype(np.float64)
        refined[j] = weights[idx] @ block
    descriptors = P.descriptors if isinstance(P, PrototypeBank) else ()
    return PrototypeBank(Stage.REFINED, refined, descriptors, slide_id=slide_id)


def build_slide_embedding(refined: PrototypeBank, slide_id: Optional[str] = None) -> SlideEmbedding:
    if refined.stage is not Stage.REFINED:
        raise ValueError("slide embeddings are built from a refined bank")
    values = np.ascontiguousarray(refined.matrix, dtype=np.float32).reshape(-1)
    return SlideEmbedding(slide_id if slide_id is not None else refined.slide_id,
                          refined.n_proto, refined.dim, values)


# --------------------------------------------------------------------------- reports

@dataclass(frozen=True)
class PrototypeAllocation:
    index: int
    name: str
    patch_count: int
    proportion: float
    top_patches: tuple[int, ...]
    top_similarities: tuple[float, ...]


@dataclass(frozen=True)
class AllocationReport:
    slide_id: str
    n_patches: int
    prototypes: tuple[PrototypeAllocation, ...]
    empty_prototypes: tuple[int, ...] = field(default=())

    def to_dict(self) -> dict:
        return {
            "slide_id": self.slide_id,
            "n_patches": self.n_patches,
            "prototypes": [
                {
                    "index": p.index,
                    "name": p.name,
                    "patch_count": p.patch_count,
                    "proportion": p.proportion,
                    "top_patches": [
                        {"patch": i, "similarity": s}
                        for i, s in zip(p.top_patches, p.top_similarities)
                    ],
                }
                for p in self.prototypes
            ],
            "empty_prototypes": list(self.empty_prototypes),
        }


def allocation_report(asn: AssignmentMap, similarity, P, top_k: int = 3, slide_id: str = "") -> AllocationReport:
    """Per-prototype patch counts, proportions and most similar members."""
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    s = np.asarray(similarity, dtype=np.float64)
    n = asn.n_patches
    names = P.names() if isinstance(P, PrototypeBank) else [f"prototype-{j}" for j in range(asn.n_proto)]
    rows = []
    for j, idx in enumerate(asn.proto_members):
        sims = s[idx, j]
        # descending similarity, ties to the lower patch index
        order = np.lexsort((idx, -sims))[:top_k]
        rows.append(PrototypeAllocation(
            index=j,
            name=names[j],
            patch_count=int(len(idx)),
            proportion=len(idx) / n if n else 0.0,
            top_patches=tuple(int(i) for i in idx[order]),
            top_similarities=tuple(float(v) for v in sims[order]),
        ))
    empty = tuple(j for j, idx in enumerate(asn.proto_members) if len(idx) == 0)
    return AllocationReport(slide_id, n, tuple(rows), empty)


# --------------------------------------------------------------------------- one slide

@dataclass(frozen=True)
class SlideResult:
    embedding: SlideEmbedding
    assignment: AssignmentMap
    similarity: np.ndarray
    refined: PrototypeBank


def embed_slide(X, P: PrototypeBank, slide_id: str = "", normalize: bool = False) -> SlideResult:
    """Run similarity, assignment, refinement and concatenation for one slide."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 2 or X.shape[0] == 0:
        raise EmptySlide(f"slide {slide_id!r} has no patches")
    if normalize:
        X, _ = l2_normalize_rows(X)
    s = compute_patch_prototype_similarity(X, P)
    asn = assign_patches(s)
    refined = refine_prototypes(X, s, asn, P, slide_id)
    return SlideResult(build_slide_embedding(refined, slide_id), asn, s, refined)


def pool_slide(X, method: str = "mean") -> np.ndarray:
    """Mean or max pooling over patches, the trivial MIL-style baselines."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 2 or X.shape[0] == 0:
        raise EmptySlide("slide has no patches")
    if method == "mean":
        return X.astype(np.float64).mean(axis=0).astype(np.float32)
    if method == "max":
        return X.max(axis=0)
    raise ValueError(f"unknown pooling method {method!r}")


def embed_slides(slides: Sequence[np.ndarray], P: PrototypeBank, slide_ids=None,
                 normalize: bool = False, n_jobs: int = 1) -> list[SlideResult]:
    """Embed many slides, optionally on a thread pool; output order is input order."""
    if slide_ids is None:
        slide_ids = [str(i) for i in range(len(slides))]
    jobs = list(zip(slides, slide_ids))
    if n_jobs <= 1 or len(jobs) < 2:
        return [embed_slide(x, P, sid, normalize) for x, sid in jobs]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=n_jobs) as ex:
        return list(ex.map(lambda job: embed_slide(job[0], P, job[1], normalize), jobs))
