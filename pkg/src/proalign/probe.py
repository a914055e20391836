"""Linear / one-hidden-layer MLP probes trained with AdamW, in numpy.

Parameters live in float64. Serialized models store them as float32 PAEM
records behind a small JSON header.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .exceptions import BadConfig, BadLabel, DataError, DimMismatch, NonFiniteGradient

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8

MODEL_MAGIC = b"PAPR"
MODEL_VERSION = 1


@dataclass(frozen=True)
class ProbeConfig:
    kind: str = "linear"
    input_dim: int = 1
    n_classes: int = 2
    hidden_dim: int = 256
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0

    def validate(self) -> "ProbeConfig":
        if self.kind not in ("linear", "mlp"):
            raise BadConfig(f"probe kind must be 'linear' or 'mlp', got {self.kind!r}")
        if self.input_dim < 1:
            raise BadConfig("input_dim must be >= 1")
        if self.n_classes < 2:
            raise BadConfig("n_classes must be >= 2")
        if self.kind == "mlp" and self.hidden_dim < 1:
            raise BadConfig("MLP hidden_dim must be >= 1")
        if not self.learning_rate > 0:
            raise BadConfig("learning_rate must be > 0")
        if self.weight_decay < 0:
            raise BadConfig("weight_decay must be >= 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise BadConfig("epochs must be >= 0 and batch_size >= 1")
        return self


@dataclass
class ProbeModel:
    kind: str
    params: dict[str, np.ndarray]
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def copy(self) -> "ProbeModel":
        return ProbeModel(
            self.kind,
            {k: p.copy() for k, p in self.params.items()},
            {k: p.copy() for k, p in self.m.items()},
            {k: p.copy() for k, p in self.v.items()},
            self.step,
        )

    @property
    def input_dim(self) -> int:
        return self.params["W1"].shape[1]

    @property
    def n_classes(self) -> int:
        return self.params["W2" if self.kind == "mlp" else "W1"].shape[0]


def _glorot(rng, fan_out, fan_in):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_out, fan_in))


def init_probe(cfg: ProbeConfig) -> ProbeModel:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    if cfg.kind == "linear":
        params = {"W1": _glorot(rng, cfg.n_classes, cfg.input_dim), "b1": np.zeros(cfg.n_classes)}
    else:
        params = {
            "W1": _glorot(rng, cfg.hidden_dim, cfg.input_dim),
            "b1": np.zeros(cfg.hidden_dim),
            "W2": _glorot(rng, cfg.n_classes, cfg.hidden_dim),
            "b2": np.zeros(cfg.n_classes),
        }
    zeros = {k: np.zeros_like(p) for k, p in params.items()}
    return ProbeModel(cfg.kind, params, zeros, {k: z.copy() for k, z in zeros.items()}, 0)


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _as_batch(model: ProbeModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != model.input_dim:
        raise DimMismatch(f"input has {x.shape[1]} features, probe expects {model.input_dim}")
    return x


def _logits(model: ProbeModel, x: np.ndarray):
    p = model.params
    if model.kind == "linear":
        return x @ p["W1"].T + p["b1"], None
    pre = x @ p["W1"].T + p["b1"]
    hidden = np.maximum(pre, 0.0)
    return hidden @ p["W2"].T + p["b2"], (pre, hidden)


def forward(model: ProbeModel, x) -> np.ndarray:
    """Class probabilities; a 1-D input gives a 1-D output."""
    single = np.ndim(x) == 1
    logits, _ = _logits(model, _as_batch(model, x))
    probs = _softmax(logits)
    return probs[0] if single else probs


def loss_and_grad(model: ProbeModel, x, y) -> tuple[float, dict[str, np.ndarray]]:
    """Mean softmax cross-entropy over the batch and its parameter gradients."""
    x = _as_batch(model, x)
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if len(y) == 0 or len(y) != x.shape[0]:
        raise DataError("batch must be nonempty with one label per row")
    C = model.n_classes
    if y.min() < 0 or y.max() >= C:
        raise BadLabel(f"labels must lie in [0, {C})")
    logits, cache = _logits(model, x)
    z = logits - logits.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    B = len(y)
    rows = np.arange(B)
    loss = float(-log_probs[rows, y].mean())
    d_logits = np.exp(log_probs)
    d_logits[rows, y] -= 1.0
    d_logits /= B
    p = model.params
    if model.kind == "linear":
        grads = {"W1": d_logits.T @ x, "b1": d_logits.sum(0)}
    else:
        pre, hidden = cache
        d_hidden = (d_logits @ p["W2"]) * (pre > 0)
        grads = {
            "W1": d_hidden.T @ x,
            "b1": d_hidden.sum(0),
            "W2": d_logits.T @ hidden,
            "b2": d_logits.sum(0),
        }
    return loss, grads


def adamw_step(model: ProbeModel, grads: dict[str, np.ndarray], cfg: ProbeConfig) -> ProbeModel:
    """One decoupled-weight-decay Adam update; returns a new model."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"gradient for {name} is not finite")
    out = model.copy()
    out.step += 1
    t = out.step
    lr, wd = cfg.learning_rate, cfg.weight_decay
    for name, theta in out.params.items():
        g = grads[name]
        m = out.m[name] = BETA1 * out.m[name] + (1 - BETA1) * g
        v = out.v[name] = BETA2 * out.v[name] + (1 - BETA2) * g * g
        m_hat = m / (1 - BETA1**t)
        v_hat = v / (1 - BETA2**t)
        out.params[name] = theta - lr * (m_hat / (np.sqrt(v_hat) + EPS) + wd * theta)
    return out


def predict(model: ProbeModel, x) -> np.ndarray:
    """Argmax class per row; ties go to the lower class index."""
    return np.argmax(forward(model, _as_batch(model, x)), axis=1)


def balanced_accuracy_of(model: ProbeModel, x, y, n_classes: int) -> float:
    from .metrics import balanced_accuracy, confusion_matrix

    return balanced_accuracy(confusion_matrix(y, predict(model, x), n_classes))


@dataclass(frozen=True)
class EpochLog:
    epoch: int
    loss: float
    val_balanced_accuracy: Optional[float]


@dataclass(frozen=True)
class TrainResult:
    model: ProbeModel
    log: tuple[EpochLog, ...]
    best_epoch: int


def train_probe(x_train, y_train, cfg: ProbeConfig, x_val=None, y_val=None) -> TrainResult:
    """Minibatch AdamW training with best-validation model selection.

    Each epoch reshuffles with a generator seeded from ``cfg.seed``. The
    returned model is the one after the epoch with the highest validation
    balanced accuracy (earliest wins ties); without validation data the
    final model is returned. ``epochs=0`` returns the initial model.
    """
    cfg.validate()
    x_train = np.asarray(x_train, dtype=np.float64)
    y_train = np.asarray(y_train, dtype=np.int64)
    if x_train.ndim != 2 or x_train.shape[0] == 0:
        raise DataError("training set is empty")
    if x_train.shape[1] != cfg.input_dim:
        raise DimMismatch(f"embeddings have {x_train.shape[1]} features, config says {cfg.input_dim}")
    has_val = x_val is not None and len(x_val) > 0
    model = init_probe(cfg)
    best, best_score, best_epoch = model, -np.inf, 0
    rng = np.random.default_rng([cfg.seed, 1])
    n = x_train.shape[0]
    log = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = loss_and_grad(model, x_train[idx], y_train[idx])
            model = adamw_step(model, grads, cfg)
            total += loss * len(idx)
        score = balanced_accuracy_of(model, x_val, y_val, cfg.n_classes) if has_val else None
        log.append(EpochLog(epoch, total / n, score))
        if not has_val:
            best, best_epoch = model, epoch
        elif score > best_score:
            best, best_score, best_epoch = model, score, epoch
    return TrainResult(best, tuple(log), best_epoch)


# --------------------------------------------------------------------------- serialization

def save_probe(model: ProbeModel, cfg: ProbeConfig, path, classes=None) -> None:
    """Write ``PAPR`` header, JSON metadata, then one PAEM record per tensor."""
    from .io import paem_bytes

    names = list(model.params)
    header = {
        "kind": model.kind,
        "config": asdict(cfg),
        "tensors": [{"name": k, "shape": list(model.params[k].shape)} for k in names],
        "classes": None if classes is None else [int(c) for c in classes],
    }
    meta = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MODEL_MAGIC, struct.pack("<II", MODEL_VERSION, len(meta)), meta]
    for k in names:
        parts.append(paem_bytes(model.params[k].astype(np.float32).reshape(-1, model.params[k].shape[-1])))
    Path(path).write_bytes(b"".join(parts))


def load_probe(path) -> tuple[ProbeModel, ProbeConfig, Optional[list[int]]]:
    from .io import HEADER_SIZE, parse_paem

    buf = Path(path).read_bytes()
    if buf[:4] != MODEL_MAGIC:
        raise DataError(f"{path}: not a probe model file")
    version, meta_len = struct.unpack_from("<II", buf, 4)
    if version != MODEL_VERSION:
        raise DataError(f"{path}: unsupported model version {version}")
    off = 12
    header = json.loads(buf[off:off + meta_len].decode("utf-8"))
    off += meta_len
    params = {}
    for t in header["tensors"]:
        shape = tuple(t["shape"])
        count = int(np.prod(shape))
        size = HEADER_SIZE + 4 * count
        arr = parse_paem(buf[off:off + size], f"{path}:{t['name']}")
        params[t["name"]] = arr.astype(np.float64).reshape(shape)
        off += size
    cfg = ProbeConfig(**header["config"])
    zeros = {k: np.zeros_like(p) for k, p in params.items()}
    model = ProbeModel(header["kind"], params, zeros, {k: z.copy() for k, z in zeros.items()}, 0)
    return model, cfg, header.get("classes")

