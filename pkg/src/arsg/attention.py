"""Attention scoring and normalization.

Content-based scores come from the generator state and one encoded frame;
the hybrid variant adds convolutional features of the previous alignment,
which is what makes the mechanism location-aware. Normalization supports
plain softmax, inverse-temperature and top-k sharpening, and sigmoid
smoothing, plus an optional evaluation-time window that restricts score
computation to a band around the previous alignment's median.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dcore import (
    ContractViolation,
    Parameter,
    Tensor,
    add,
    concat,
    conv1d,
    div,
    exp,
    matmul,
    mul,
    sigmoid,
    slice_axis,
    sub,
    sum_over_axis,
    tanh,
    transpose,
)

NORMALIZER_MODES = ("softmax", "temperature", "topk", "smoothing")


@dataclass
class AttentionParams:
    """Scoring-network parameters.

    W maps the generator state, V the encoded frame, U the convolutional
    features; w and b are the projection vector and bias. U and F are
    absent in pure content-based mode. The filter bank F is (k, r) with
    r odd, as required by centered padding.
    """

    w: Parameter  # (n_att,)
    W: Parameter  # (n_att, d_s)
    V: Parameter  # (n_att, d_h)
    b: Parameter  # (n_att,)
    U: Parameter | None = None  # (n_att, k)
    F: Parameter | None = None  # (k, r)

    def __post_init__(self):
        if (self.U is None) != (self.F is None):
            raise ContractViolation("attention: U and F must be given together")
        if self.F is not None and self.F.shape[1] % 2 != 1:
            raise ContractViolation(f"attention: filter width {self.F.shape[1]} must be odd")

    @property
    def hybrid(self) -> bool:
        return self.U is not None

    def parameters(self) -> list[Parameter]:
        out = [self.w, self.W, self.V, self.b]
        if self.U is not None:
            out.extend([self.U, self.F])
        return out


@dataclass
class NormalizerConfig:
    """How scores turn into an alignment.

    Exactly one mode: softmax, temperature (softmax of beta * scores),
    topk (softmax restricted to the k best scores), or smoothing
    (sigmoid instead of exp, then renormalized). `window`, when set,
    is the half-width of the evaluation window in frames.
    """

    mode: str = "softmax"
    beta: float = 1.0
    k: int | None = None
    window: int | None = None

    def __post_init__(self):
        if self.mode not in NORMALIZER_MODES:
            raise ContractViolation(f"unknown normalizer mode '{self.mode}'")
        if self.mode == "temperature" and self.beta <= 0:
            raise ContractViolation("temperature: beta must be positive")
        if self.mode == "topk" and (self.k is None or self.k < 1):
            raise ContractViolation("topk: k must be at least 1")
        if self.window is not None and self.window < 1:
            raise ContractViolation("window half-width must be positive")


def score_content(p: AttentionParams, s_prev: Tensor, h_j: Tensor) -> Tensor:
    """Content score of one frame: w . tanh(W s_prev + V h_j + b)."""
    pre = add(add(matmul(p.W.value, s_prev), matmul(p.V.value, h_j)), p.b.value)
    return matmul(p.w.value, tanh(pre))


def score_hybrid(p: AttentionParams, s_prev: Tensor, h_j: Tensor, f_j: Tensor) -> Tensor:
    """Location-aware score: w . tanh(W s_prev + V h_j + U f_j + b)."""
    if p.U is None:
        raise ContractViolation("score_hybrid: params have no convolutional branch")
    pre = add(
        add(add(matmul(p.W.value, s_prev), matmul(p.V.value, h_j)), matmul(p.U.value, f_j)),
        p.b.value,
    )
    return matmul(p.w.value, tanh(pre))


def conv_features(filters, alpha_prev) -> Tensor:
    """(L, k) convolutional features of the previous alignment."""
    f = filters.value if isinstance(filters, Parameter) else filters
    return conv1d(f, alpha_prev)


def normalize(e: Tensor, cfg: NormalizerConfig) -> Tensor:
    """Turn a score vector into a nonnegative alignment summing to one."""
    e = e if isinstance(e, Tensor) else Tensor(e)
    if e.ndim != 1 or e.size < 1:
        raise ContractViolation(f"normalize: expected a score vector, got {e.shape}")
    if not np.all(np.isfinite(e.data)):
        raise ContractViolation("normalize: scores must be finite")
    if cfg.mode == "smoothing":
        s = sigmoid(e)
        return div(s, sum_over_axis(s))
    if cfg.mode == "temperature":
        e = mul(e, cfg.beta)
    z = exp(sub(e, float(np.max(e.data))))  # max-subtraction, detached
    if cfg.mode == "topk":
        k = min(cfg.k, e.size)
        order = np.lexsort((np.arange(e.size), -e.data))  # ties: lower index wins
        mask = np.zeros(e.size)
        mask[order[:k]] = 1.0
        z = mul(z, mask)
    return div(z, sum_over_axis(z))


def median_index(alpha) -> int:
    """Smallest index where the cumulative alignment mass reaches one half."""
    a = alpha.data if isinstance(alpha, Tensor) else np.asarray(alpha)
    return int(np.argmax(np.cumsum(a) >= 0.5))


def glimpse(alpha: Tensor, h: Tensor) -> Tensor:
    """Alignment-weighted sum of encoded frames."""
    alpha = alpha if isinstance(alpha, Tensor) else Tensor(alpha)
    h = h if isinstance(h, Tensor) else Tensor(h)
    if alpha.ndim != 1 or h.ndim != 2 or alpha.size != h.shape[0]:
        raise ContractViolation(f"glimpse: alignment {alpha.shape} vs frames {h.shape}")
    return matmul(alpha, h)


@dataclass
class AttendResult:
    alignment: Tensor
    scores_evaluated: int


def attend(
    p: AttentionParams,
    s_prev: Tensor,
    alpha_prev: Tensor,
    h: Tensor,
    cfg: NormalizerConfig,
) -> AttendResult:
    """Score encoded frames against the generator state and normalize.

    In content-based mode the previous alignment is ignored (except as
    the window anchor when a window is configured). With a window of
    half-width w, scores are computed only for frames within
    [p - w, p + w - 1] around the previous alignment's median p; frames
    outside the window get zero weight and are never scored.
    """
    h = h if isinstance(h, Tensor) else Tensor(h)
    alpha_prev = alpha_prev if isinstance(alpha_prev, Tensor) else Tensor(alpha_prev)
    L = h.shape[0]
    if alpha_prev.size != L:
        raise ContractViolation(f"attend: alignment {alpha_prev.shape} vs frames {h.shape}")

    lo, hi = 0, L
    if cfg.window is not None:
        center = median_index(alpha_prev)
        lo = max(0, center - cfg.window)
        hi = min(L, center + cfg.window)
    windowed = (lo, hi) != (0, L)

    h_win = slice_axis(h, lo, hi) if windowed else h
    f_win = None
    if p.hybrid:
        f = conv_features(p.F, alpha_prev)
        f_win = slice_axis(f, lo, hi) if windowed else f
    e = _score_frames(p, s_prev, h_win, f_win)
    a = normalize(e, cfg)
    if windowed:
        pieces = []
        if lo > 0:
            pieces.append(Tensor(np.zeros(lo)))
        pieces.append(a)
        if hi < L:
            pieces.append(Tensor(np.zeros(L - hi)))
        a = concat(pieces)
    return AttendResult(a, hi - lo)


def _score_frames(p: AttentionParams, s_prev: Tensor, h: Tensor, f: Tensor | None) -> Tensor:
    """Vectorized scores for all rows of h; equals per-frame scoring."""
    q = add(matmul(p.W.value, s_prev), p.b.value)  # (n_att,)
    pre = add(matmul(h, transpose(p.V.value)), q)  # (L, n_att), q broadcast over rows
    if f is not None:
        pre = add(pre, matmul(f, transpose(p.U.value)))
    return matmul(tanh(pre), p.w.value)  # (L,)


def is_valid_alignment(alpha, tol: float = 1e-6) -> bool:
    a = alpha.data if isinstance(alpha, Tensor) else np.asarray(alpha)
    return bool(np.all(a >= 0) and abs(float(a.sum()) - 1.0) <= tol)
