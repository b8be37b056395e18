"""Independent reference computations used by the test-suite.

Nothing here goes through the autodiff engine's backward pass.
"""

from __future__ import annotations

import itertools

import numpy as np

from wsdmil import tensor as T


def numeric_grad(f, x: np.ndarray, step: float = 1e-6, index=None) -> np.ndarray:
    """Central finite differences of scalar ``f`` w.r.t. ``x`` (modified in place, restored)."""
    grad = np.zeros_like(x)
    idxs = np.ndindex(*x.shape) if index is None else index
    for i in idxs:
        old = x[i]
        x[i] = old + step
        fp = f()
        x[i] = old - step
        fm = f()
        x[i] = old
        grad[i] = (fp - fm) / (2 * step)
    return grad


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check_op_grad(build, arrays, step=1e-6, weights_seed=0):
    """Compare analytic and numeric gradients of ``sum(W * build(*tensors))``.

    ``build`` maps input tensors to an output tensor; a fixed random weight
    makes the scalar depend on every output entry. Returns the worst relative
    error across inputs.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    probe = build(*[T.Tensor(a) for a in arrays]).data
    w = np.random.default_rng(weights_seed).normal(size=probe.shape)

    def value():
        return float((build(*[T.Tensor(a) for a in arrays]).data * w).sum())

    ts = [T.Tensor(a, requires_grad=True) for a in arrays]
    T.backward(T.sum(T.mul(build(*ts), w)))
    worst = 0.0
    for t, a in zip(ts, arrays):
        num = numeric_grad(value, a, step)
        worst = max(worst, rel_err(t.grad, num))
    return worst


def exact_pinv(a: T.Tensor) -> T.Tensor:
    """SVD pseudoinverse as a constant tensor (no gradient path)."""
    return T.Tensor(np.linalg.pinv(a.data, rcond=1e-12))


def svd_pinv(a: np.ndarray) -> np.ndarray:
    u, s, vt = np.linalg.svd(a)
    tol = s.max() * max(a.shape) * np.finfo(float).eps
    inv = np.where(s > tol, 1.0 / np.where(s > tol, s, 1.0), 0.0)
    return (vt.T * inv) @ u.T


def np_softmax(x, axis=-1):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def dense_attention(z: np.ndarray, w_qkv: np.ndarray, proj_w: np.ndarray, proj_b: np.ndarray) -> np.ndarray:
    """Exact ``Linear(softmax(Q K^T) V)`` on an unpadded sequence ``(M, F)``."""
    f = z.shape[1]
    qkv = z @ w_qkv
    q, k, v = qkv[:, :f], qkv[:, f:2 * f], qkv[:, 2 * f:]
    return np_softmax(q @ k.T) @ v @ proj_w.T + proj_b


def direct_nystrom(z: np.ndarray, w_qkv, proj_w, proj_b, m: int) -> np.ndarray:
    """Straight-line evaluation of the landmark formula with an SVD pseudoinverse."""
    n, f = z.shape
    qkv = z @ w_qkv
    q, k, v = qkv[:, :f], qkv[:, f:2 * f], qkv[:, 2 * f:]
    seg = n // m
    q_m = np.array([q[i * seg:(i + 1) * seg].mean(0) for i in range(m)])
    k_m = np.array([k[i * seg:(i + 1) * seg].mean(0) for i in range(m)])
    out = np_softmax(q @ k_m.T) @ svd_pinv(np_softmax(q_m @ k_m.T)) @ (np_softmax(q_m @ k.T) @ v)
    return out @ proj_w.T + proj_b


def brute_force_kmeans_cost(x: np.ndarray, k: int) -> float:
    """Minimum within-cluster sum of squares over every assignment of points to k labels."""
    best = np.inf
    for labels in itertools.product(range(k), repeat=len(x)):
        labels = np.array(labels)
        if len(set(labels)) != k:
            continue
        cost = sum(((x[labels == c] - x[labels == c].mean(0)) ** 2).sum() for c in range(k))
        best = min(best, cost)
    return float(best)


def pair_count_auc(y, scores) -> float:
    """AUC by explicitly comparing every positive/negative pair."""
    y = np.asarray(y).astype(bool)
    pos, neg = scores[y], scores[~y]
    wins = 0.0
    for p in pos:
        for q in neg:
            wins += 1.0 if p > q else 0.5 if p == q else 0.0
    return wins / (len(pos) * len(neg))


def reference_adam(grad_fn, x0: float, lr: float, steps: int, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar Adam written out term by term."""
    x, m, v, traj = float(x0), 0.0, 0.0, []
    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        x = x - lr * m_hat / (v_hat ** 0.5 + eps)
        traj.append(x)
    return traj
