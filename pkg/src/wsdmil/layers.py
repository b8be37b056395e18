"""Forward pass: Nystrom global attention, decaying window attention, region
gating, attention pooling and the linear classifier.

All functions take and return batch-of-one sequences ``(1, M_pad, F)`` along
with a boolean validity mask of length ``M_pad``.
"""

from __future__ import annotations

import math
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .model import WsdModel
from .tensor import Tensor

NEG_INF = -1e9


def _key_bias(mask: np.ndarray) -> np.ndarray:
    return np.where(mask, 0.0, NEG_INF)


def _masked_segment_mean(x: Tensor, mask: np.ndarray, segments: int):
    """Mean of each contiguous segment over valid rows only.

    Returns the ``(1, segments, F)`` means and a boolean flag per segment that
    is false when the segment holds no valid row (its mean is zero).
    """
    _, m_pad, f = x.shape
    size = m_pad // segments
    w = mask.astype(np.float64).reshape(segments, size)
    counts = w.sum(1)
    weights = (w / np.maximum(counts, 1.0)[:, None]).reshape(1, m_pad, 1)
    means = T.sum(T.reshape(T.mul(x, weights), (1, segments, size, f)), axis=2)
    return means, counts > 0


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    if x.ndim == 1:
        out = T.reshape(T.matmul(T.reshape(x, (1, -1)), weight.T), (weight.shape[0],))
    else:
        out = T.matmul(x, weight.T)
    return out if bias is None else T.add(out, bias)


def nystrom_attention(z: Tensor, mask: np.ndarray, model: WsdModel,
                      landmarks: Optional[int] = None,
                      pinv: Optional[Callable[[Tensor], Tensor]] = None) -> Tensor:
    """Global attention approximated through segment-mean landmarks.

    ``Linear(softmax(Q K_m^T) pinv(softmax(Q_m K_m^T)) softmax(Q_m K^T) V)``;
    masked keys and empty landmarks never receive weight, padded query rows
    return zero. ``pinv`` defaults to Newton-Schulz with the configured
    iteration count.
    """
    cfg = model.config
    _, m_pad, f = z.shape
    m = min(landmarks or cfg.landmarks, m_pad)
    if m_pad % m:
        raise ValueError(f"sequence length {m_pad} is not a multiple of {m} landmarks")
    if pinv is None:
        iters = cfg.pinv_iters
        pinv = lambda a: T.pinv_newton_schulz(a, iters)  # noqa: E731

    qkv = T.matmul(z, model["nys.w_qkv"])
    q, k, v = qkv[..., :f], qkv[..., f:2 * f], qkv[..., 2 * f:]
    q_m, live = _masked_segment_mean(q, mask, m)
    k_m, _ = _masked_segment_mean(k, mask, m)
    lm_bias = _key_bias(live)
    lm_rows = live.astype(np.float64)[None, :, None]

    k_mt = T.swapaxes(k_m, -1, -2)
    s_q = T.softmax(T.matmul(q, k_mt), bias=lm_bias)
    s_mm = T.mul(T.softmax(T.matmul(q_m, k_mt), bias=lm_bias), lm_rows)
    s_k = T.mul(T.softmax(T.matmul(q_m, T.swapaxes(k, -1, -2)), bias=_key_bias(mask)), lm_rows)

    mixed = T.matmul(T.matmul(s_q, pinv(s_mm)), T.matmul(s_k, v))
    out = linear(mixed, model["nys.proj.weight"], model["nys.proj.bias"])
    return T.mul(out, mask.astype(np.float64)[None, :, None])


def chunk_windows(h: Tensor, windows: int) -> Tensor:
    """``(1, M_pad, F)`` -> ``(windows, c, F)``; window ``w`` holds rows ``w*c .. w*c+c-1``."""
    _, m_pad, f = h.shape
    if m_pad % windows:
        raise ValueError(f"sequence length {m_pad} is not divisible into {windows} windows")
    return T.reshape(h, (windows, m_pad // windows, f))


def merge_windows(hw: Tensor) -> Tensor:
    windows, c, f = hw.shape
    return T.reshape(hw, (1, windows * c, f))


def window_attention(h: Tensor, mask: np.ndarray, grid: int, model: WsdModel, prefix: str) -> Tensor:
    """Multi-head self-attention inside ``grid**2`` contiguous windows.

    Logits get a learned length-3 convolution of themselves along the key axis
    as positional bias. The block output is added back to ``h`` through
    ``Linear(Norm(Linear(Norm(A))))``; padded rows are left untouched.
    """
    cfg = model.config
    _, m_pad, f = h.shape
    windows = grid * grid
    hw = chunk_windows(h, windows)
    c = m_pad // windows
    heads = cfg.heads
    dk = f // heads

    qkv = T.matmul(hw, model[prefix + "w_qkv"])
    qkv = T.transpose(T.reshape(qkv, (windows, c, 3, heads, dk)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]  # (windows, heads, c, dk)

    raw = T.matmul(q, T.swapaxes(k, -1, -2))
    # raw / sqrt(dk) + conv(raw) as one convolution: the scale joins the centre tap
    kernel = T.add(T.reshape(model[prefix + "conv"], (heads, 1, 3)), np.array([0.0, 1.0 / math.sqrt(dk), 0.0]))
    scores = T.conv1d_depthwise(raw, kernel)
    key_bias = _key_bias(mask).reshape(windows, 1, 1, c)
    attn = T.matmul(T.softmax(scores, axis=-1, bias=key_bias), v)
    a = merge_windows(T.reshape(T.transpose(attn, (0, 2, 1, 3)), (windows, c, f)))

    u = T.layer_norm(a, model[prefix + "norm1.gain"], model[prefix + "norm1.bias"])
    u = linear(u, model[prefix + "lin1.weight"], model[prefix + "lin1.bias"])
    u = T.layer_norm(u, model[prefix + "norm2.gain"], model[prefix + "norm2.bias"])
    u = linear(u, model[prefix + "lin2.weight"], model[prefix + "lin2.bias"])
    return T.add(h, T.mul(u, mask.astype(np.float64)[None, :, None]))


def wsda_forward(z: Tensor, mask: np.ndarray, model: WsdModel,
                 pinv: Optional[Callable[[Tensor], Tensor]] = None) -> Tensor:
    """Nystrom layer followed by window attention at each configured grid."""
    if model.config.disable_wsda:
        return z
    h = nystrom_attention(z, mask, model, pinv=pinv)
    for i, grid in enumerate(model.config.scales):
        h = window_attention(h, mask, grid, model, f"win{i}.")
    return h


def serg_gates(h: Tensor, mask: np.ndarray, model: WsdModel) -> Tensor:
    """Per-region scalar gates in (0, 1), shape ``(1, L*L)``."""
    cfg = model.config
    _, m_pad, f = h.shape
    regions = cfg.serg_grid ** 2
    if m_pad % regions:
        raise ValueError(f"sequence length {m_pad} is not divisible into {regions} regions")
    size = m_pad // regions
    counts = mask.reshape(regions, size).sum(1).astype(np.float64)
    weights = (mask.reshape(regions, size) / (np.maximum(counts, 1.0)[:, None] * f)).reshape(1, m_pad, 1)
    pooled = T.sum(T.reshape(T.mul(h, weights), (1, regions, size * f)), axis=-1)  # (1, regions)
    e = T.relu(linear(pooled, model["serg.w1"], model["serg.b1"]))
    return T.sigmoid(linear(e, model["serg.w2"], model["serg.b2"]))


def serg_forward(h: Tensor, mask: np.ndarray, model: WsdModel) -> Tensor:
    if model.config.disable_serg:
        return h
    _, m_pad, f = h.shape
    regions = model.config.serg_grid ** 2
    gates = serg_gates(h, mask, model)
    gated = T.mul(T.reshape(h, (1, regions, m_pad // regions, f)), T.reshape(gates, (1, regions, 1, 1)))
    return T.reshape(gated, (1, m_pad, f))


def attention_weights(h: Tensor, mask: np.ndarray, model: WsdModel) -> Tensor:
    """Softmax attention over valid instances, shape ``(M_pad,)``."""
    hm = T.reshape(h, h.shape[1:])
    scores = T.matmul(T.tanh(linear(hm, model["agg.v"])), T.reshape(model["agg.w"], (-1, 1)))
    return T.softmax(T.reshape(scores, (hm.shape[0],)), bias=_key_bias(mask))


def pool(h: Tensor, mask: np.ndarray, model: WsdModel) -> Tensor:
    """Bag vector ``(F,)`` from the valid rows of ``h``."""
    if not mask.any():
        raise ValueError("cannot pool a bag with zero real instances")
    hm = T.reshape(h, h.shape[1:])
    kind = model.config.aggregator
    if kind == "attention":
        a = attention_weights(h, mask, model)
        return T.reshape(T.matmul(T.reshape(a, (1, -1)), hm), (hm.shape[1],))
    if kind == "mean":
        w = mask.astype(np.float64) / mask.sum()
        return T.reshape(T.matmul(w[None, :], hm), (hm.shape[1],))
    # max pooling: gradient flows to the arg-max row of each feature
    masked = np.where(mask[:, None], hm.data, -np.inf)
    rows = masked.argmax(0)
    return hm[rows, np.arange(hm.shape[1])]


def aggregate_and_classify(h: Tensor, mask: np.ndarray, model: WsdModel) -> Tensor:
    bag = pool(h, mask, model)
    return linear(bag, model["cls.weight"], model["cls.bias"])


def _fit_length(x: np.ndarray, mask: np.ndarray, multiple: int):
    m_pad = mask.shape[0]
    target = -(-m_pad // multiple) * multiple
    if target == m_pad:
        return x, mask
    xp = np.zeros((1, target, x.shape[-1]))
    xp[:, :m_pad] = x
    mp = np.zeros(target, dtype=bool)
    mp[:m_pad] = mask
    return xp, mp


def forward(features, mask, model: WsdModel,
            pinv: Optional[Callable[[Tensor], Tensor]] = None) -> Tensor:
    """Class logits ``(C,)`` for one padded sequence.

    Sequences shorter than a multiple of every window/region/landmark count
    the config needs are zero-padded further; padding never reaches the logits.
    """
    mask = np.asarray(mask, dtype=bool)
    if isinstance(features, Tensor):
        z = features
    else:
        arr = np.asarray(features, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None]
        arr, mask = _fit_length(arr, mask, model.config.sequence_multiple())
        z = Tensor(arr)
    if z.shape[-1] != model.config.feature_dim:
        raise ValueError(f"feature dim {z.shape[-1]} != model feature_dim {model.config.feature_dim}")
    if model.config.pooling_only:
        return aggregate_and_classify(z, mask, model)
    h = wsda_forward(z, mask, model, pinv=pinv)
    h = serg_forward(h, mask, model)
    return aggregate_and_classify(h, mask, model)
