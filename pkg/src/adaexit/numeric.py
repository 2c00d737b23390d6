"""Dense numeric kernels shared by every other module.

Conventions: parameters and activations are stored as float32; reductions
(dot products, normalization statistics, probability sums) run in float64
so results are reproducible at desk scale. Probabilities, entropies, and
losses are returned as float64. Entropy is measured in nats.
"""

from __future__ import annotations

import numpy as np

DTYPE = np.float32

__all__ = [
    "DTYPE",
    "softmax",
    "entropy",
    "layer_norm",
    "cross_entropy",
    "cross_entropy_grad",
    "sgd_step",
    "new_rng",
    "matmul64",
    "running_mean",
]


def new_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; identical seeds give identical streams everywhere."""
    if seed < 0:
        raise ValueError(f"seed must be nonnegative, got {seed}")
    return np.random.default_rng(seed)


def matmul64(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with float64 accumulation; callers cast the result as needed."""
    return np.matmul(a.astype(np.float64, copy=False), b.astype(np.float64, copy=False))


def _check_logits(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2):
        raise ValueError(f"expected a vector or a stack of vectors, got ndim={x.ndim}")
    if x.shape[-1] == 0 or x.size == 0:
        raise ValueError("empty input")
    if not np.isfinite(x).all():
        raise ValueError("input contains non-finite entries")
    return x


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max-subtraction. Accepts a vector or a 2-D stack of rows.

    Returns float64 probabilities that sum to 1 along the last axis.
    """
    x = _check_logits(logits)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def entropy(p: np.ndarray) -> float | np.ndarray:
    """Shannon entropy in nats; zero-probability terms contribute 0.

    Accepts a probability vector (returns a float) or a 2-D stack of rows
    (returns a float64 vector of per-row entropies). Each row must sum to 1
    within 1e-4 with nonnegative entries.
    """
    q = np.asarray(p, dtype=np.float64)
    if q.ndim not in (1, 2):
        raise ValueError(f"expected a vector or a stack of vectors, got ndim={q.ndim}")
    if q.shape[-1] == 0 or q.size == 0:
        raise ValueError("empty input")
    if (q < 0).any():
        raise ValueError("negative probability entry")
    sums = q.sum(axis=-1)
    if not np.allclose(sums, 1.0, atol=1e-4, rtol=0.0):
        raise ValueError("probabilities do not sum to 1 within 1e-4")
    terms = np.zeros_like(q)
    mask = q > 0
    terms[mask] = q[mask] * np.log(q[mask])
    h = -terms.sum(axis=-1)
    return float(h) if q.ndim == 1 else h


def layer_norm(
    v: np.ndarray,
    gain: np.ndarray | None = None,
    bias: np.ndarray | None = None,
    eps: float = 1e-5,
) -> np.ndarray:
    """Normalize each row to zero mean / unit variance, then scale and shift.

    Accepts a vector or a 2-D stack of rows; gain and bias default to ones
    and zeros. Statistics are computed in float64; the result is float32.
    """
    x = np.asarray(v)
    if x.ndim not in (1, 2):
        raise ValueError(f"expected a vector or a stack of vectors, got ndim={x.ndim}")
    if x.shape[-1] == 0 or x.size == 0:
        raise ValueError("empty input")
    width = x.shape[-1]
    if gain is None:
        gain = np.ones(width, dtype=DTYPE)
    if bias is None:
        bias = np.zeros(width, dtype=DTYPE)
    gain = np.asarray(gain)
    bias = np.asarray(bias)
    if gain.shape != (width,) or bias.shape != (width,):
        raise ValueError(
            f"gain/bias length mismatch: input width {width}, "
            f"gain {gain.shape}, bias {bias.shape}"
        )
    if eps < 0:
        raise ValueError(f"eps must be nonnegative, got {eps}")
    x64 = x.astype(np.float64)
    mean = x64.mean(axis=-1, keepdims=True)
    var = x64.var(axis=-1, keepdims=True)
    normed = (x64 - mean) / np.sqrt(var + eps)
    out = normed * gain.astype(np.float64) + bias.astype(np.float64)
    return out.astype(DTYPE)


def cross_entropy(logits: np.ndarray, target: int) -> float:
    """Negative log softmax probability of the target class, in nats."""
    x = _check_logits(logits)
    if x.ndim != 1:
        raise ValueError("cross_entropy expects a single logit vector")
    target = int(target)
    if not 0 <= target < x.shape[0]:
        raise ValueError(f"target {target} out of range for {x.shape[0]} classes")
    m = x.max()
    shifted = x - m
    return float(np.log(np.exp(shifted).sum()) - shifted[target])


def cross_entropy_grad(logits: np.ndarray, target: int) -> np.ndarray:
    """Gradient of cross_entropy w.r.t. the logits: softmax(logits) - one_hot(target)."""
    p = softmax(logits)
    target = int(target)
    if not 0 <= target < p.shape[-1]:
        raise ValueError(f"target {target} out of range for {p.shape[-1]} classes")
    g = p.copy()
    g[target] -= 1.0
    return g


def running_mean(values) -> float:
    """Streaming mean in float64.

    Unlike sum-then-divide, a constant sequence averages to exactly that
    constant (the increment is exactly zero), which keeps degenerate cases
    like uniform-posterior entropies bit-exact.
    """
    mean = 0.0
    count = 0
    for value in np.asarray(values, dtype=np.float64).ravel():
        count += 1
        mean += (value - mean) / count
    if count == 0:
        raise ValueError("empty input")
    return mean


def sgd_step(params: np.ndarray, grads: np.ndarray, lr: float) -> np.ndarray:
    """One plain gradient step: params - lr * grads, elementwise, as float32."""
    p = np.asarray(params)
    g = np.asarray(grads)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: params {p.shape} vs grads {g.shape}")
    if not np.isfinite(lr) or lr < 0:
        raise ValueError(f"learning rate must be finite and nonnegative, got {lr}")
    return (p.astype(np.float64) - float(lr) * g.astype(np.float64)).astype(DTYPE)
