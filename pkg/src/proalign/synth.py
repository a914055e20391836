"""Synthetic datasets with planted prototype structure, and a naive reference
implementation of the whole embedding chain for cross-checking.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import AssignmentMap, PrototypeDescriptor, SlideRecord
from .exceptions import BadConfig, LengthMismatch
from .io import make_splits, write_json, write_manifest, write_paem, write_text_bank


@dataclass(frozen=True)
class SynthConfig:
    """Generator settings.

    ``center_separation`` is the minimum pairwise distance between prototype
    centres in units of ``noise_std`` (units of 1 when ``noise_std`` is 0).
    Centres are uniform directions on a common sphere whose radius is set by
    that minimum distance.
    ``n_slides`` gives the train/val/test slide counts; classes are balanced
    and the split is stratified.
    """

    n_proto: int = 16
    dim: int = 32
    n_slides: tuple[int, int, int] = (60, 20, 20)
    patches_per_slide: tuple[int, int] = (50, 200)
    center_separation: float = 4.0
    noise_std: float = 1.0
    n_classes: int = 4
    mixture_alpha: float = 0.3
    text_noise: float = 0.1
    seed: int = 0

    def validate(self) -> "SynthConfig":
        lo, hi = self.patches_per_slide
        if self.n_proto < 1 or self.dim < 1:
            raise BadConfig("n_proto and dim must be >= 1")
        if not self.center_separation > 0:
            raise BadConfig("center_separation must be > 0")
        if lo < 1 or hi < lo:
            raise BadConfig("patches_per_slide must satisfy 1 <= lo <= hi")
        if self.noise_std < 0 or self.text_noise < 0 or not self.mixture_alpha > 0:
            raise BadConfig("noise levels must be >= 0 and mixture_alpha > 0")
        if self.n_classes < 1 or len(self.n_slides) != 3 or min(self.n_slides) < 0 or sum(self.n_slides) < 1:
            raise BadConfig("need n_classes >= 1 and non-negative slide counts")
        return self


@dataclass(frozen=True)
class PlantedTruth:
    centers: np.ndarray
    class_mixtures: np.ndarray
    slide_mixtures: dict[str, np.ndarray]
    patch_prototypes: dict[str, np.ndarray]

    def to_dict(self) -> dict:
        return {
            "centers": self.centers.astype(float).tolist(),
            "class_mixtures": self.class_mixtures.tolist(),
            "slides": {
                sid: {
                    "mixture": self.slide_mixtures[sid].tolist(),
                    "patch_prototypes": self.patch_prototypes[sid].tolist(),
                }
                for sid in self.slide_mixtures
            },
        }


@dataclass(frozen=True)
class SyntheticDataset:
    config: SynthConfig
    records: tuple[SlideRecord, ...]
    slides: dict[str, np.ndarray]
    descriptors: tuple[PrototypeDescriptor, ...]
    truth: PlantedTruth

    @property
    def texts(self) -> np.ndarray:
        return np.vstack([d.text_embedding for d in self.descriptors]).astype(np.float32)

    def split(self, name: str):
        recs = [r for r in self.records if r.split == name]
        return [self.slides[r.slide_id] for r in recs], np.array([r.label for r in recs], dtype=np.int64), recs


def _centers(rng, k, dim, min_dist):
    # equal norms make dot-product argmax agree with nearest-centre assignment
    c = rng.standard_normal((k, dim))
    c /= np.linalg.norm(c, axis=1, keepdims=True)
    if k < 2:
        return c * min_dist
    d = np.sqrt(((c[:, None, :] - c[None, :, :]) ** 2).sum(-1))
    closest = d[np.triu_indices(k, 1)].min()
    return c * (min_dist / closest)


def generate_synthetic_dataset(cfg: SynthConfig) -> SyntheticDataset:
    """Draw centres, text embeddings, class signatures and per-slide patches.

    Each class owns a Dirichlet(``mixture_alpha``) signature over prototypes;
    a slide draws every patch's prototype from its class signature and the
    patch embedding is that centre plus isotropic Gaussian noise.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    unit = cfg.noise_std if cfg.noise_std > 0 else 1.0
    k, dim = cfg.n_proto, cfg.dim
    centers = _centers(rng, k, dim, cfg.center_separation * unit)
    texts = (centers + cfg.text_noise * cfg.noise_std * rng.standard_normal((k, dim))).astype(np.float32)
    centers = centers.astype(np.float32)
    signatures = rng.dirichlet(np.full(k, cfg.mixture_alpha), size=cfg.n_classes)

    n_total = sum(cfg.n_slides)
    ids = [f"slide_{i:04d}" for i in range(n_total)]
    labels = [i % cfg.n_classes for i in range(n_total)]
    ratios = tuple(n / n_total for n in cfg.n_slides)
    splits = make_splits(zip(ids, labels), ratios, cfg.seed)

    lo, hi = cfg.patches_per_slide
    slides, mixtures, members, records = {}, {}, {}, []
    for sid, label in zip(ids, labels):
        n = int(rng.integers(lo, hi + 1))
        mix = signatures[label]
        z = rng.choice(k, size=n, p=mix)
        x = centers[z].astype(np.float64) + cfg.noise_std * rng.standard_normal((n, dim))
        slides[sid] = x.astype(np.float32)
        mixtures[sid] = mix
        members[sid] = z.astype(np.int64)
        records.append(SlideRecord(sid, f"slides/{sid}.paem", label, splits[sid]))

    descriptors = tuple(
        PrototypeDescriptor(j, f"proto-{j:02d}", f"synthetic tissue prototype {j}", texts[j])
        for j in range(k)
    )
    truth = PlantedTruth(centers, signatures, mixtures, members)
    return SyntheticDataset(cfg, tuple(records), slides, descriptors, truth)


def write_synthetic_dataset(ds: SyntheticDataset, out_dir) -> Path:
    """Write ``manifest.csv``, ``slides/*.paem``, ``text_bank.json``, ``planted_truth.json``."""
    out = Path(out_dir)
    (out / "slides").mkdir(parents=True, exist_ok=True)
    for rec in ds.records:
        write_paem(ds.slides[rec.slide_id], out / rec.embedding_path)
    write_manifest(ds.records, out / "manifest.csv")
    write_text_bank(ds.descriptors, out / "text_bank.json")
    doc = ds.truth.to_dict()
    doc["config"] = asdict(ds.config)
    write_json(doc, out / "planted_truth.json")
    return out


def resized_text_bank(ds: SyntheticDataset, m: int, seed: int = 0) -> tuple[PrototypeDescriptor, ...]:
    """A text bank with ``m`` entries for prototype-count sweeps.

    The first ``min(m, n_proto)`` entries are the planted texts. Any extra
    entries are decoys: the midpoint of two random planted centres plus text
    noise, standing in for proposed categories absent from the data.
    """
    if m < 1:
        raise BadConfig("bank size must be >= 1")
    cfg = ds.config
    k = cfg.n_proto
    base = list(ds.descriptors[:min(m, k)])
    rng = np.random.default_rng([seed, m])
    centers = ds.truth.centers.astype(np.float64)
    for j in range(k, m):
        a, b = rng.choice(k, size=2, replace=False) if k > 1 else (0, 0)
        vec = 0.5 * (centers[a] + centers[b]) + cfg.text_noise * cfg.noise_std * rng.standard_normal(cfg.dim)
        base.append(PrototypeDescriptor(j, f"decoy-{j:02d}", f"decoy prototype between {a} and {b}",
                                        vec.astype(np.float32)))
    return tuple(base)


# --------------------------------------------------------------------------- oracles

def _dot(a, b) -> float:
    return math.fsum(float(u) * float(v) for u, v in zip(a, b))


def brute_force_prototypes(pool, texts) -> list[list[float]]:
    """Naive patch-text contrast: text ``j`` plus its best-matching pool row."""
    protos = []
    for t in texts:
        best_i, best_s = 0, None
        for i, x in enumerate(pool):
            s = _dot(x, t)
            if best_s is None or s > best_s:
                best_i, best_s = i, s
        protos.append([float(np.float32(a) + np.float32(b)) for a, b in zip(t, pool[best_i])])
    return protos


def brute_force_pipeline(X, prototypes=None, texts=None, pool=None) -> list[float]:
    """Reference slide embedding computed with plain loops in float64.

    Pass either ``prototypes`` or both ``texts`` and ``pool`` (in which case
    the prototypes are built first). No max subtraction is applied to the
    softmax, so inputs must keep similarities well below ``exp`` overflow.
    """
    if prototypes is None:
        prototypes = brute_force_prototypes(pool, texts)
    X = [[float(v) for v in row] for row in X]
    P = [[float(v) for v in row] for row in prototypes]
    assert len(X) >= 1, "reference needs at least one patch"
    k, d = len(P), len(P[0])
    sims = [[_dot(x, p) for p in P] for x in X]
    assigned = []
    for row in sims:
        best = 0
        for j in range(1, k):
            if row[j] > row[best]:
                best = j
        assigned.append(best)
    out = []
    for j in range(k):
        members = [i for i in range(len(X)) if assigned[i] == j]
        if not members:
            out.extend(P[j])
            continue
        expo = [math.exp(sims[i][j]) for i in members]
        z = sum(expo)
        vec = [0.0] * d
        for w, i in zip(expo, members):
            for c in range(d):
                vec[c] += (w / z) * X[i][c]
        out.extend(vec)
    return out


def nearest_center_labels(X, centers) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    c = np.asarray(centers, dtype=np.float64)
    return np.argmin(((X[:, None, :] - c[None, :, :]) ** 2).sum(-1), axis=1)


def assignment_recovery_rate(asn, truth: Sequence[int]) -> float:
    """Fraction of patches whose assigned prototype is the planted one."""
    assigned = asn.patch_to_proto if isinstance(asn, AssignmentMap) else np.asarray(asn)
    truth = np.asarray(truth)
    if len(assigned) != len(truth) or len(truth) == 0:
        raise LengthMismatch(f"{len(assigned)} assignments vs {len(truth)} planted labels")
    return float(np.mean(assigned == truth))
