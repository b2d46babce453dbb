"""Scaled dot-product attention kernels: global (all pairs) and windowed local.

The local kernel walks the diagonals of the score matrix, so only query-key
pairs inside the visibility band are ever evaluated; threading an OpCounter
through either kernel reports the exact number of evaluated pairs, which is
how the linear-versus-quadratic cost claims are checked.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, ShapeError

GLOBAL = "global"
LOCAL = "local"


@dataclass(frozen=True)
class AttentionSpec:
    """Attention flavor of a model.

    mode is "global" (every token sees every token) or "local" (token i sees
    token j only when |i - j| <= window_k / 2). window_k is the total window
    span and must be even; it is present exactly when mode is local.
    """

    mode: str
    num_heads: int
    head_dim: int
    window_k: int | None = None

    def __post_init__(self):
        if self.mode not in (GLOBAL, LOCAL):
            raise ConfigError(f"unknown attention mode {self.mode!r}")
        if self.num_heads < 1 or self.head_dim < 1:
            raise ConfigError("num_heads and head_dim must be positive")
        if self.mode == LOCAL:
            if self.window_k is None or self.window_k < 2 or self.window_k % 2 != 0:
                raise ConfigError("local attention requires an even window_k >= 2")
        elif self.window_k is not None:
            raise ConfigError("window_k is only meaningful for local attention")


class OpCounter:
    """Thread-safe accumulator for query-key score evaluations.

    Kernels add the number of pairs they actually computed; concurrent workers
    may share one counter because accumulation happens under a lock.
    """

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._count = 0

    def add(self, n: int) -> None:
        with self._lock:
            self._count += int(n)

    @property
    def count(self) -> int:
        return self._count


def _check_qkv(q, k, v, pad_mask):
    q = np.asarray(q)
    k = np.asarray(k)
    v = np.asarray(v)
    if q.ndim != 2 or q.shape != k.shape or q.shape != v.shape:
        raise ShapeError(f"q/k/v must share one [n, d] shape, got {q.shape}, {k.shape}, {v.shape}")
    pad = np.asarray(pad_mask, dtype=bool)
    if pad.shape != (q.shape[0],):
        raise ShapeError(f"pad_mask length {pad.shape} does not match n={q.shape[0]}")
    if pad.all():
        raise ContractError("every position is padded; attention needs at least one unmasked token")
    return q, k, v, pad


def _masked_softmax_rows(scores: np.ndarray) -> np.ndarray:
    """Row softmax where -inf marks invisible entries; all-masked rows yield zeros."""
    m = scores.max(axis=-1, keepdims=True)
    safe_m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(invalid="ignore"):
        e = np.exp(scores - safe_m)
    e = np.where(np.isfinite(scores), e, 0.0)
    denom = e.sum(axis=-1, keepdims=True)
    return np.where(denom > 0, e / np.where(denom > 0, denom, 1.0), 0.0)


def global_attention(q, k, v, pad_mask, counter: OpCounter | None = None) -> np.ndarray:
    """Full attention: out[i] = sum_j softmax_j(q_i . k_j / sqrt(d)) v_j over unmasked j.

    Padded positions neither contribute as keys nor produce output (their rows
    are zeroed). Evaluates all n^2 score pairs.
    """
    q, k, v, pad = _check_qkv(q, k, v, pad_mask)
    n, d = q.shape
    scores = (q @ k.T) * (1.0 / math.sqrt(d))
    if counter is not None:
        counter.add(n * n)
    scores = np.where(pad[None, :], -np.inf, scores)
    probs = _masked_softmax_rows(scores)
    out = probs @ v
    out[pad] = 0.0
    return out


def local_attention(q, k, v, pad_mask, window_k: int, counter: OpCounter | None = None) -> np.ndarray:
    """Windowed attention: position i attends to j with |i - j| <= window_k / 2.

    Scores are computed diagonal-by-diagonal, so exactly sum_i |visible(i)|
    pairs are evaluated (windows clip at the sequence edges; no wraparound).
    An unpadded query whose entire window is padded is a contract violation.
    """
    if window_k < 2 or window_k % 2 != 0:
        raise ContractError("window_k must be an even integer >= 2")
    q, k, v, pad = _check_qkv(q, k, v, pad_mask)
    n, d = q.shape
    w = window_k // 2
    scale = 1.0 / math.sqrt(d)
    width = 2 * w + 1
    band = np.full((n, width), -np.inf, dtype=q.dtype)
    evaluated = 0
    for off in range(-w, w + 1):
        lo = max(0, -off)
        hi = min(n, n - off)
        if hi <= lo:
            continue
        prod = np.einsum("nd,nd->n", q[lo:hi], k[lo + off:hi + off]) * scale
        evaluated += hi - lo
        band[lo:hi, off + w] = np.where(pad[lo + off:hi + off], -np.inf, prod)
    if counter is not None:
        counter.add(evaluated)
    has_visible = np.isfinite(band).any(axis=1)
    if not has_visible[~pad].all():
        raise ContractError("a query position has no unmasked key inside its window")
    probs = _masked_softmax_rows(band)
    out = np.zeros_like(v)
    for off in range(-w, w + 1):
        lo = max(0, -off)
        hi = min(n, n - off)
        if hi <= lo:
            continue
        out[lo:hi] += probs[lo:hi, off + w, None] * v[lo + off:hi + off]
    out[pad] = 0.0
    return out


def visibility_mask(n: int, pad_mask, mode: str, window_k: int | None = None) -> np.ndarray:
    """Boolean [n, n] matrix, True where query i may attend key j.

    This is the dense-mask formulation of the same visibility rule the kernels
    apply; the encoder uses it so one attention code path serves both modes.
    """
    pad = np.asarray(pad_mask, dtype=bool)
    vis = np.broadcast_to(~pad[None, :], (n, n)).copy()
    if mode == LOCAL:
        if window_k is None:
            raise ConfigError("local visibility needs window_k")
        w = window_k // 2
        idx = np.arange(n)
        vis &= np.abs(idx[:, None] - idx[None, :]) <= w
    elif mode != GLOBAL:
        raise ConfigError(f"unknown attention mode {mode!r}")
    return vis


def score_op_count(n: int, spec: AttentionSpec) -> int:
    """Run the kernel for a length-n input and report the instrumented number
    of query-key evaluations (n^2 for global, the clipped band size for local)."""
    if n < 1:
        raise ContractError("sequence length must be >= 1")
    x = np.zeros((n, spec.head_dim), dtype=np.float32)
    pad = np.zeros(n, dtype=bool)
    counter = OpCounter()
    if spec.mode == GLOBAL:
        global_attention(x, x, x, pad, counter=counter)
    else:
        local_attention(x, x, x, pad, spec.window_k, counter=counter)
    return counter.count
