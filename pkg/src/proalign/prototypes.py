"""Initial prototype construction.

Two routes build the bank ``P`` from a pool of training patches:

* patch-text contrast: each prototype is its text embedding plus the pool
  patch most similar to that text;
* a k-means baseline (k-means++ seeding followed by Lloyd iterations).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .core import (
    DatasetManifest,
    PrototypeBank,
    PrototypeDescriptor,
    PrototypeInitConfig,
    Stage,
    check_embedding_matrix,
    l2_normalize_rows,
)
from .exceptions import (
    DimMismatch,
    DimMismatchAcrossSlides,
    EmptyPool,
    EmptyTrainSplit,
    ShapeMismatch,
    TooFewPoints,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PatchSamplePool:
    """Sampled training patches with per-row provenance.

    Attributes:
        matrix: ``(rows, d)`` float32 pool.
        slide_ids: source slide of each row.
        patch_rows: row index of each patch inside its source slide.
        seed: generator seed used for sampling.
        quota: per-slide quota ``floor(n_total / N_train)``.
        shortfall: ``n_total - rows``; nonzero when some slides were too small.
    """

    matrix: np.ndarray
    slide_ids: tuple[str, ...]
    patch_rows: np.ndarray
    seed: int
    quota: int
    shortfall: int

    def __post_init__(self):
        if len(self.slide_ids) != self.matrix.shape[0] or len(self.patch_rows) != self.matrix.shape[0]:
            raise ShapeMismatch("provenance length must equal pool rows")


def sample_patch_pool(
    slides: Sequence[np.ndarray],
    n_total: int,
    seed: int = 0,
    slide_ids: Optional[Sequence[str]] = None,
) -> PatchSamplePool:
    """Draw ``min(floor(n_total / N), n_i)`` distinct rows from each slide.

    Rows are drawn uniformly without replacement and concatenated in slide
    order; inside a slide they are kept in ascending row order.
    """
    if len(slides) == 0:
        raise EmptyTrainSplit("no training slides to sample from")
    if slide_ids is None:
        slide_ids = [str(i) for i in range(len(slides))]
    dim = None
    for sid, x in zip(slide_ids, slides):
        if dim is None:
            dim = x.shape[1]
        elif x.shape[1] != dim:
            raise DimMismatchAcrossSlides(f"slide {sid} has dim {x.shape[1]}, expected {dim}")
    quota = n_total // len(slides)
    rng = np.random.default_rng(seed)
    blocks, ids, rows = [], [], []
    for sid, x in zip(slide_ids, slides):
        take = min(quota, x.shape[0])
        idx = np.sort(rng.choice(x.shape[0], size=take, replace=False))
        blocks.append(np.asarray(x, dtype=np.float32)[idx])
        ids.extend([sid] * take)
        rows.append(idx)
    matrix = np.ascontiguousarray(np.concatenate(blocks, axis=0), dtype=np.float32)
    if matrix.shape[0] == 0:
        raise EmptyPool("sampling produced an empty pool")
    shortfall = n_total - matrix.shape[0]
    if shortfall > 0:
        logger.info("patch pool short by %d rows (quota %d per slide)", shortfall, quota)
    return PatchSamplePool(
        matrix=matrix,
        slide_ids=tuple(ids),
        patch_rows=np.concatenate(rows).astype(np.int64),
        seed=seed,
        quota=quota,
        shortfall=shortfall,
    )


def sample_training_patches(
    manifest: DatasetManifest,
    cfg: PrototypeInitConfig,
    loader: Optional[Callable[[str], np.ndarray]] = None,
) -> PatchSamplePool:
    """Sample the prototype-learning pool from the manifest's train split."""
    if loader is None:
        from .io import read_paem as loader
    train = manifest.split("train")
    if not train:
        raise EmptyTrainSplit("manifest has no train slides")
    slides = [loader(r.embedding_path) for r in train]
    return sample_patch_pool(slides, cfg.n_total, cfg.seed, [r.slide_id for r in train])


def compute_patch_text_similarity(pool, texts) -> np.ndarray:
    """Dot-product similarity between every pool row and every text row.

    Returns:
        float64 array of shape ``(pool rows, text rows)``.
    """
    pool = np.asarray(pool)
    texts = np.asarray(texts)
    if pool.shape[1] != texts.shape[1]:
        raise DimMismatch(f"pool dim {pool.shape[1]} != text dim {texts.shape[1]}")
    return pool.astype(np.float64) @ texts.astype(np.float64).T


def build_initial_prototypes(
    pool,
    texts,
    descriptors: Sequence[PrototypeDescriptor] = (),
    similarity: Optional[np.ndarray] = None,
) -> PrototypeBank:
    """Prototype ``j`` = text ``j`` + the pool row most similar to it.

    Ties in the column argmax go to the smallest row index. The addition is a
    plain float32 add; no rescaling of either term.
    """
    pool = np.asarray(pool, dtype=np.float32)
    texts = np.asarray(texts, dtype=np.float32)
    if pool.shape[0] == 0:
        raise EmptyPool("cannot build prototypes from an empty pool")
    if similarity is None:
        similarity = compute_patch_text_similarity(pool, texts)
    if similarity.shape != (pool.shape[0], texts.shape[0]):
        raise ShapeMismatch(
            f"similarity shape {similarity.shape} does not match pool/texts "
            f"({pool.shape[0]}, {texts.shape[0]})"
        )
    best_rows = np.argmax(similarity, axis=0)
    matrix = texts + pool[best_rows]
    return PrototypeBank(
        Stage.INITIAL,
        np.ascontiguousarray(matrix, dtype=np.float32),
        tuple(descriptors),
        source_rows=tuple(int(i) for i in best_rows),
    )


def text_prototypes(pool, texts, descriptors=(), normalize: bool = False) -> PrototypeBank:
    """Patch-text contrast end to end, with optional row normalization."""
    pool = check_embedding_matrix(pool, name="pool")
    texts = check_embedding_matrix(texts, dim=pool.shape[1], name="texts")
    if normalize:
        pool, _ = l2_normalize_rows(pool)
        texts, _ = l2_normalize_rows(texts)
    return build_initial_prototypes(pool, texts, descriptors)


# --------------------------------------------------------------------------- k-means

@dataclass(frozen=True)
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    inertia_history: tuple[float, ...]
    n_iter: int

    @property
    def inertia(self) -> float:
        return self.inertia_history[-1]


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    chosen = [int(rng.integers(n))]
    closest = ((x - x[chosen[0]]) ** 2).sum(1)
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            probs = closest / total
            idx = int(rng.choice(n, p=probs))
        else:
            # every point coincides with a chosen centre
            free = np.setdiff1d(np.arange(n), chosen)
            idx = int(rng.choice(free))
        chosen.append(idx)
        closest = np.minimum(closest, ((x - x[idx]) ** 2).sum(1))
    return x[chosen].copy()


def lloyd_kmeans(pool, k: int, seed: int = 0, max_iters: int = 100, tol: float = 1e-6) -> KMeansResult:
    """k-means++ seeding followed by Lloyd iterations, all in float64.

    Stops once the largest centroid shift drops below ``tol`` or after
    ``max_iters`` updates. An empty cluster is moved onto the point lying
    farthest from its current centroid.
    """
    x = np.asarray(pool, dtype=np.float64)
    n = x.shape[0]
    if k < 1 or n < k:
        raise TooFewPoints(f"k-means needs at least k={k} points, pool has {n}")
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp(x, k, rng)
    history = []
    n_iter = 0
    for n_iter in range(1, max_iters + 1):
        d = _sq_dists(x, centroids)
        labels = np.argmin(d, axis=1)
        point_d = ((x - centroids[labels]) ** 2).sum(1)
        history.append(float(point_d.sum()))
        counts = np.bincount(labels, minlength=k)
        new = np.zeros_like(centroids)
        np.add.at(new, labels, x)
        taken = set()
        for j in range(k):
            if counts[j]:
                new[j] /= counts[j]
                continue
            order = np.argsort(-point_d, kind="stable")
            far = next(int(i) for i in order if int(i) not in taken)
            taken.add(far)
            new[j] = x[far]
            point_d[far] = 0.0
        shift = float(np.sqrt(((new - centroids) ** 2).sum(1)).max())
        centroids = new
        if shift < tol:
            break
    d = _sq_dists(x, centroids)
    labels = np.argmin(d, axis=1)
    history.append(float(((x - centroids[labels]) ** 2).sum()))
    return KMeansResult(centroids, labels, tuple(history), n_iter)


def kmeans_init(pool, k: int, seed: int = 0, max_iters: int = 100, tol: float = 1e-6) -> PrototypeBank:
    """k-means baseline bank; descriptors are synthesized as ``cluster-j``."""
    pool = check_embedding_matrix(pool, name="pool")
    result = lloyd_kmeans(pool, k, seed, max_iters, tol)
    matrix = result.centroids.astype(np.float32)
    descriptors = tuple(
        PrototypeDescriptor(j, f"cluster-{j}", f"k-means centroid {j}", matrix[j].copy())
        for j in range(k)
    )
    return PrototypeBank(Stage.INITIAL, np.ascontiguousarray(matrix), descriptors)
