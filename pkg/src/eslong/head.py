"""Multi-label classifier over protein embeddings.

A fixed one-hidden-layer network (affine -> GELU -> affine -> sigmoid) trained
with per-term binary cross-entropy computed in logit space, which stays stable
when num_terms x batch would underflow a naive sigmoid+log. The epoch whose
validation Fmax is highest is the one returned.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass

import numpy as np

from .checkpoint import read_checkpoint, write_checkpoint
from .errors import ConfigError, DataError
from .evaluation import fmax
from .tensor_ops import gelu, gelu_grad
from .training import TrainConfig, adamw_step, derive_seed, init_adam_state


@dataclass(frozen=True)
class HeadConfig:
    input_dim: int
    num_terms: int
    hidden_dim: int = 512
    learning_rate: float = 1e-3
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0
    weight_decay: float = 0.0

    def __post_init__(self):
        if min(self.input_dim, self.num_terms, self.hidden_dim) < 1:
            raise ConfigError("head dimensions must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")


@dataclass
class ClassifierHead:
    config: HeadConfig
    term_list: tuple[str, ...]
    params: dict[str, np.ndarray]  # W1 [in, hidden], b1, W2 [hidden, terms], b2
    # Input standardization fitted on the training store. Encoder embeddings
    # carry a large class-independent offset (mean-pooled layer-norm outputs),
    # so the raw coordinates barely vary; standardizing folds into the first
    # affine layer and leaves the affine-GELU-affine-sigmoid shape intact.
    feat_center: np.ndarray | None = None
    feat_scale: np.ndarray | None = None

    def standardize(self, x: np.ndarray) -> np.ndarray:
        if self.feat_center is None:
            return x
        return (x - self.feat_center) / self.feat_scale


def fit_standardizer(head: ClassifierHead, x: np.ndarray) -> None:
    center = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale < 1e-8] = 1.0
    head.feat_center = center.astype(np.float32)
    head.feat_scale = scale.astype(np.float32)


def init_head(cfg: HeadConfig, term_list, seed: int | None = None) -> ClassifierHead:
    term_list = tuple(term_list)
    if len(term_list) != cfg.num_terms:
        raise ConfigError(f"term list has {len(term_list)} terms, config says {cfg.num_terms}")
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    params = {
        "W1": rng.normal(0.0, 0.02, size=(cfg.input_dim, cfg.hidden_dim)).astype(np.float32),
        "b1": np.zeros(cfg.hidden_dim, dtype=np.float32),
        "W2": rng.normal(0.0, 0.02, size=(cfg.hidden_dim, cfg.num_terms)).astype(np.float32),
        "b2": np.zeros(cfg.num_terms, dtype=np.float32),
    }
    return ClassifierHead(config=cfg, term_list=term_list, params=params)


def head_logits(params: dict[str, np.ndarray], x: np.ndarray, want_cache: bool = False):
    z1 = x @ params["W1"] + params["b1"]
    h = gelu(z1)
    z2 = h @ params["W2"] + params["b2"]
    if want_cache:
        return z2, (z1, h)
    return z2


def bce_loss_and_grads(params, x, y):
    """Mean logit-space binary cross-entropy over batch x terms, with gradients."""
    z2, (z1, h) = head_logits(params, x, want_cache=True)
    count = z2.size
    loss = float(
        (np.maximum(z2, 0.0) - z2 * y + np.log1p(np.exp(-np.abs(z2)))).sum() / count
    )
    d_z2 = (_sigmoid(z2) - y) / count
    grads = {
        "W2": h.T @ d_z2,
        "b2": d_z2.sum(axis=0),
    }
    d_h = d_z2 @ params["W2"].T
    d_z1 = d_h * gelu_grad(z1)
    grads["W1"] = x.T @ d_z1
    grads["b1"] = d_z1.sum(axis=0)
    return loss, grads


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _matrices(embeddings, truth, term_list, input_dim):
    index = {t: j for j, t in enumerate(term_list)}
    x = np.zeros((len(embeddings), input_dim), dtype=np.float32)
    y = np.zeros((len(embeddings), len(term_list)), dtype=np.float32)
    for i, rec in enumerate(embeddings):
        if rec.vector.shape != (input_dim,):
            raise DataError(
                f"embedding {rec.protein_id!r} has dim {rec.vector.shape}, expected {input_dim}"
            )
        if rec.protein_id not in truth:
            raise DataError(f"embedding {rec.protein_id!r} has no ground-truth annotation")
        x[i] = rec.vector
        for term, score in truth[rec.protein_id].items():
            j = index.get(term)
            if j is not None and score > 0:
                y[i, j] = 1.0
    return x, y


def train_head(train_embeddings, truth, cfg: HeadConfig, val_embeddings, metrics_log=None):
    """Train on the training store, score validation Fmax each epoch, and keep
    the best-epoch weights. Returns (head, per-epoch metrics list)."""
    term_list = tuple(sorted({t for terms in truth.values() for t in terms}))
    if len(term_list) != cfg.num_terms:
        raise ConfigError(
            f"truth has {len(term_list)} distinct terms but config expects {cfg.num_terms}"
        )
    head = init_head(cfg, term_list)
    x_train, y_train = _matrices(train_embeddings, truth, term_list, cfg.input_dim)
    fit_standardizer(head, x_train)
    x_train = head.standardize(x_train)
    val_truth = {rec.protein_id: truth[rec.protein_id] for rec in val_embeddings}
    opt_cfg = TrainConfig(
        epochs=cfg.epochs,
        learning_rate=cfg.learning_rate,
        weight_decay=cfg.weight_decay,
        mask_fraction=0.0,
        batch_size=cfg.batch_size,
        seed=cfg.seed,
    )
    state = init_adam_state(head.params)
    shuffle_rng = np.random.default_rng(derive_seed(cfg.seed, "head-shuffle"))
    best = {"fmax": -1.0, "epoch": 0, "params": None}
    metrics = []
    log_fh = open(metrics_log, "w", encoding="utf-8") if metrics_log else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            started = time.monotonic()
            order = shuffle_rng.permutation(len(x_train))
            losses = []
            for lo in range(0, len(order), cfg.batch_size):
                idx = order[lo: lo + cfg.batch_size]
                loss, grads = bce_loss_and_grads(head.params, x_train[idx], y_train[idx])
                head.params, state = adamw_step(head.params, grads, state, opt_cfg)
                losses.append(loss)
            val_pred = predict(head, val_embeddings)
            val_result = fmax(val_pred, val_truth)
            record = {
                "epoch": epoch,
                "train_loss": float(np.mean(losses)) if losses else 0.0,
                "val_fmax": val_result.fmax,
                "wall_ms": int((time.monotonic() - started) * 1000),
            }
            metrics.append(record)
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
            if val_result.fmax > best["fmax"]:
                best = {
                    "fmax": val_result.fmax,
                    "epoch": epoch,
                    "params": {k: v.copy() for k, v in head.params.items()},
                }
    finally:
        if log_fh:
            log_fh.close()
    if best["params"] is not None:
        head.params = best["params"]
    return head, metrics


def predict(head: ClassifierHead, embeddings) -> dict[str, dict[str, float]]:
    """Per-protein, per-term sigmoid scores; pure, order-independent per record."""
    out: dict[str, dict[str, float]] = {}
    for rec in embeddings:
        if rec.vector.shape != (head.config.input_dim,):
            raise DataError(
                f"embedding {rec.protein_id!r} has dim {rec.vector.shape}, "
                f"expected {head.config.input_dim}"
            )
        x = head.standardize(rec.vector[None, :].astype(np.float32))
        z = head_logits(head.params, x)[0]
        scores = _sigmoid(z.astype(np.float64))
        out[rec.protein_id] = {term: float(s) for term, s in zip(head.term_list, scores)}
    return out


def save_head(head: ClassifierHead, path) -> None:
    config = {
        "head": {
            "input_dim": head.config.input_dim,
            "num_terms": head.config.num_terms,
            "hidden_dim": head.config.hidden_dim,
            "learning_rate": head.config.learning_rate,
            "epochs": head.config.epochs,
            "batch_size": head.config.batch_size,
            "seed": head.config.seed,
            "weight_decay": head.config.weight_decay,
        },
        "term_list": list(head.term_list),
    }
    tensors = dict(head.params)
    if head.feat_center is not None:
        tensors["feat_center"] = head.feat_center
        tensors["feat_scale"] = head.feat_scale
    write_checkpoint(path, tensors, config)


def load_head(path) -> ClassifierHead:
    tensors, config = read_checkpoint(path)
    cfg = HeadConfig(**config["head"])
    return ClassifierHead(
        config=cfg,
        term_list=tuple(config["term_list"]),
        params={k: tensors[k] for k in ("W1", "b1", "W2", "b2")},
        feat_center=tensors.get("feat_center"),
        feat_scale=tensors.get("feat_scale"),
    )
