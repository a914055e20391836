"""scikit-learn style estimators over the functional core.

``ProAlignEmbedder`` learns the initial prototype bank in ``fit`` and turns
slides into fixed-length embeddings in ``transform``. Its ``X`` is a
sequence of per-slide patch matrices, not a 2-D array.

``ProbeClassifier`` is an ordinary classifier on those embeddings.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .core import PrototypeBank, check_embedding_matrix
from .exceptions import DimMismatch, EmptySlide
from .pfam import SlideResult, embed_slides, pool_slide
from .prototypes import kmeans_init, sample_patch_pool, text_prototypes
from .probe import ProbeConfig, forward, train_probe


def check_slides(X, dim: Optional[int] = None) -> list[np.ndarray]:
    """Validate a sequence of per-slide patch matrices sharing one dim."""
    if isinstance(X, np.ndarray) and X.ndim == 2:
        X = [X]
    slides = []
    for i, x in enumerate(X):
        x = np.asarray(x)
        if x.ndim != 2 or x.shape[0] == 0:
            raise EmptySlide(f"slide {i} has no patches")
        x = check_embedding_matrix(x, name=f"slide {i}")
        if dim is None:
            dim = x.shape[1]
        elif x.shape[1] != dim:
            raise DimMismatch(f"slide {i} has dim {x.shape[1]}, expected {dim}")
        slides.append(x)
    if not slides:
        raise ValueError("need at least one slide")
    return slides


class ProAlignEmbedder(TransformerMixin, BaseEstimator):
    """Prototype-allocation slide embedder.

    Parameters
    ----------
    text_embeddings : array-like of shape (n_proto, d), optional
        Prototype text embeddings. Required when ``init="text"``.
    descriptors : sequence of PrototypeDescriptor, optional
        Names/descriptions carried into the bank and allocation reports.
    n_proto : int or None, default=None
        Number of prototypes. Inferred from ``text_embeddings`` for the text
        route; defaults to 16 for k-means.
    n_patch_per_proto : int, default=100000
        Pool size per prototype; the pool holds ``n_proto * n_patch_per_proto``
        patches at most.
    init : {"text", "kmeans"}, default="text"
        Patch-text contrast or the k-means baseline.
    normalize : bool, default=False
        L2-normalize patch and text rows before any similarity.
    kmeans_max_iter, kmeans_tol : k-means stopping rule.
    n_jobs : int, default=1
        Worker threads for ``transform``; output does not depend on it.
    random_state : int, default=0
        Seed for pool sampling and k-means seeding.

    Attributes
    ----------
    bank_ : PrototypeBank
    pool_ : PatchSamplePool
    prototypes_ : ndarray of shape (n_proto, d)
    n_features_in_ : int
        Patch embedding dimension ``d``.
    """

    def __init__(
        self,
        text_embeddings=None,
        descriptors=None,
        n_proto=None,
        n_patch_per_proto=100_000,
        init="text",
        normalize=False,
        kmeans_max_iter=100,
        kmeans_tol=1e-6,
        n_jobs=1,
        random_state=0,
    ):
        self.text_embeddings = text_embeddings
        self.descriptors = descriptors
        self.n_proto = n_proto
        self.n_patch_per_proto = n_patch_per_proto
        self.init = init
        self.normalize = normalize
        self.kmeans_max_iter = kmeans_max_iter
        self.kmeans_tol = kmeans_tol
        self.n_jobs = n_jobs
        self.random_state = random_state

    def _resolve_n_proto(self) -> int:
        if self.init == "text":
            if self.text_embeddings is None:
                raise ValueError("init='text' needs text_embeddings")
            rows = np.asarray(self.text_embeddings).shape[0]
            if self.n_proto is not None and self.n_proto != rows:
                raise ValueError(f"n_proto={self.n_proto} but {rows} text embeddings were given")
            return rows
        if self.init == "kmeans":
            return 16 if self.n_proto is None else int(self.n_proto)
        raise ValueError(f"init must be 'text' or 'kmeans', got {self.init!r}")

    def fit(self, X, y=None, slide_ids: Optional[Sequence[str]] = None):
        slides = check_slides(X)
        n_proto = self._resolve_n_proto()
        if n_proto < 1 or self.n_patch_per_proto < 1:
            raise ValueError("n_proto and n_patch_per_proto must be >= 1")
        self.pool_ = sample_patch_pool(slides, n_proto * self.n_patch_per_proto, self.random_state, slide_ids)
        if self.init == "text":
            texts = check_embedding_matrix(self.text_embeddings, dim=slides[0].shape[1], name="text_embeddings")
            self.bank_ = text_prototypes(self.pool_.matrix, texts, tuple(self.descriptors or ()), self.normalize)
        else:
            pool = self.pool_.matrix
            if self.normalize:
                from .core import l2_normalize_rows

                pool, _ = l2_normalize_rows(pool)
            self.bank_ = kmeans_init(pool, n_proto, self.random_state, self.kmeans_max_iter, self.kmeans_tol)
        self._set_bank_attrs()
        return self

    def _set_bank_attrs(self):
        self.prototypes_ = self.bank_.matrix
        self.n_features_in_ = self.bank_.dim
        self.n_proto_ = self.bank_.n_proto

    @classmethod
    def from_bank(cls, bank: PrototypeBank, normalize: bool = False, n_jobs: int = 1) -> "ProAlignEmbedder":
        """An already-fitted embedder around an existing bank."""
        est = cls(n_proto=bank.n_proto, normalize=normalize, n_jobs=n_jobs)
        est.bank_ = bank
        est._set_bank_attrs()
        return est

    def embed(self, X, slide_ids: Optional[Sequence[str]] = None) -> list[SlideResult]:
        """Full per-slide results: embedding, assignment, similarities, refined bank."""
        check_is_fitted(self, "bank_")
        slides = check_slides(X, self.n_features_in_)
        return embed_slides(slides, self.bank_, slide_ids, self.normalize, self.n_jobs)

    def transform(self, X) -> np.ndarray:
        results = self.embed(X)
        return np.vstack([r.embedding.values for r in results])


class PoolingEmbedder(TransformerMixin, BaseEstimator):
    """Elementwise mean or max over each slide's patches (sanity baselines)."""

    def __init__(self, method="mean"):
        self.method = method

    def fit(self, X, y=None):
        self.n_features_in_ = check_slides(X)[0].shape[1]
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "n_features_in_")
        return np.vstack([pool_slide(x, self.method) for x in check_slides(X, self.n_features_in_)])


class ProbeClassifier(ClassifierMixin, BaseEstimator):
    """Linear or one-hidden-layer MLP probe trained with AdamW.

    ``fit`` accepts an optional validation set; when given, the returned
    parameters are those of the epoch with the best validation balanced
    accuracy.
    """

    def __init__(
        self,
        kind="linear",
        hidden_dim=256,
        learning_rate=1e-4,
        weight_decay=1e-5,
        epochs=20,
        batch_size=32,
        random_state=0,
    ):
        self.kind = kind
        self.hidden_dim = hidden_dim
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.random_state = random_state

    def _config(self, input_dim, n_classes) -> ProbeConfig:
        return ProbeConfig(
            kind=self.kind,
            input_dim=input_dim,
            n_classes=n_classes,
            hidden_dim=self.hidden_dim,
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=self.random_state,
        ).validate()

    def fit(self, X, y, X_val=None, y_val=None):
        X, y = check_X_y(X, y, dtype=np.float64)
        check_classification_targets(y)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError(f"ProbeClassifier needs at least 2 classes; got {len(self.classes_)} class")
        self.n_features_in_ = X.shape[1]
        self.config_ = self._config(X.shape[1], len(self.classes_))
        val = (None, None)
        if X_val is not None:
            X_val, y_val = check_X_y(X_val, y_val, dtype=np.float64)
            known = np.isin(y_val, self.classes_)
            val = (X_val[known], np.searchsorted(self.classes_, y_val[known]))
        result = train_probe(X, y_idx, self.config_, *val)
        self.model_ = result.model
        self.log_ = result.log
        self.best_epoch_ = result.best_epoch
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, but ProbeClassifier is expecting {self.n_features_in_} features as input")
        return forward(self.model_, X)

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]
