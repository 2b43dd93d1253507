"""Dense vector/matrix primitives shared by every other module.

Conventions: a vector is a 1-D float64 ndarray, a matrix a 2-D float64
ndarray (row-major). All public operations are pure and deterministic;
entries stay finite for finite inputs of sensible magnitude.

Randomness comes from numpy's PCG64 generator, with Gaussians produced
by the Box-Muller transform, so a seed pins every sampled matrix
bit-for-bit across runs and platforms.
"""

from enum import Enum

import numpy as np

from .errors import NumericError


class Transfer(str, Enum):
    """Elementwise transfer functions, plus the vector-coupled softmax."""

    IDENTITY = "identity"
    SIGMOID = "sigmoid"
    TANH = "tanh"
    RELU = "relu"
    SOFTMAX = "softmax"

    @classmethod
    def parse(cls, name: str) -> "Transfer":
        try:
            return cls(name.lower())
        except ValueError:
            raise ValueError(f"unknown transfer function: {name!r}") from None


def as_vector(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"expected a 1-D vector, got shape {v.shape}")
    return v


def require_finite(name: str, a: np.ndarray) -> None:
    if not np.all(np.isfinite(a)):
        raise NumericError(f"{name} contains non-finite entries")


def sigmoid(v: np.ndarray) -> np.ndarray:
    # Split by sign so exp never overflows.
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def relu(v: np.ndarray) -> np.ndarray:
    return np.maximum(v, 0.0)


def softmax(v: np.ndarray) -> np.ndarray:
    shifted = v - np.max(v)
    e = np.exp(shifted)
    return e / np.sum(e)


def log_softmax(v: np.ndarray) -> np.ndarray:
    shifted = v - np.max(v)
    return shifted - np.log(np.sum(np.exp(shifted)))


_APPLY = {
    Transfer.IDENTITY: lambda v: v.copy(),
    Transfer.SIGMOID: sigmoid,
    Transfer.TANH: np.tanh,
    Transfer.RELU: relu,
    Transfer.SOFTMAX: softmax,
}


def transfer_apply(kind: Transfer, v) -> np.ndarray:
    """Apply a transfer function to a vector.

    Sigmoid maps into (0,1), tanh into (-1,1), relu into [0,inf),
    softmax onto the probability simplex (max-subtracted for stability).
    Raises ValueError for an empty vector and NumericError for
    non-finite input.
    """
    v = as_vector(v)
    if v.size == 0:
        raise ValueError("transfer_apply requires a non-empty vector")
    require_finite("transfer input", v)
    return _APPLY[Transfer(kind)](v)


def transfer_backward(kind: Transfer, u: np.ndarray, g: np.ndarray,
                      dg: np.ndarray) -> np.ndarray:
    """Backprop through g = transfer(u): return dL/du given dL/dg.

    `u` is the pre-transfer input and `g` the cached output; sigmoid and
    tanh derivatives are taken from `g`, relu from the sign of `u`, and
    softmax uses the full Jacobian-vector product.
    """
    kind = Transfer(kind)
    if kind is Transfer.IDENTITY:
        return dg.copy()
    if kind is Transfer.SIGMOID:
        return dg * g * (1.0 - g)
    if kind is Transfer.TANH:
        return dg * (1.0 - g * g)
    if kind is Transfer.RELU:
        return dg * (u > 0.0)
    # softmax: du = g * (dg - <g, dg>)
    return g * (dg - np.dot(g, dg))


def affine(W, x, b) -> np.ndarray:
    """y = W @ x + b with strict shape checking."""
    W = np.asarray(W, dtype=np.float64)
    x = as_vector(x)
    b = as_vector(b)
    if W.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {W.shape}")
    if W.shape[1] != x.shape[0]:
        raise ValueError(f"matrix has {W.shape[1]} columns but vector has length {x.shape[0]}")
    if b.shape[0] != W.shape[0]:
        raise ValueError(f"bias length {b.shape[0]} != {W.shape[0]} rows")
    return W @ x + b


def hadamard(a, b) -> np.ndarray:
    a = as_vector(a)
    b = as_vector(b)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    return a * b


def gaussian_init(rows: int, cols: int, mean: float, stddev: float,
                  seed: int) -> np.ndarray:
    """Seeded Gaussian matrix: PCG64 uniforms through Box-Muller.

    Deterministic for a fixed seed; stddev 0 yields the constant matrix
    of value `mean` exactly.
    """
    if rows < 1 or cols < 1:
        raise ValueError("rows and cols must be positive")
    if stddev < 0:
        raise ValueError("stddev must be non-negative")
    n = rows * cols
    rng = np.random.Generator(np.random.PCG64(seed))
    pairs = (n + 1) // 2
    u1 = 1.0 - rng.random(pairs)  # in (0, 1], keeps log finite
    u2 = rng.random(pairs)
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.concatenate([r * np.cos(2.0 * np.pi * u2),
                        r * np.sin(2.0 * np.pi * u2)])[:n]
    return (mean + stddev * z).reshape(rows, cols)
