"""Layer primitives and their exact reverse-mode gradients.

Shape conventions:
  * public ``conv_valid`` follows the signal layout (rows = features,
    cols = positions) and returns (positions, kernels);
  * the batched engine works time-major: activations are (B, T, F) and a
    convolution kernel stack is (u, F_in, width) - kernel q, input row r,
    tap s. Entry (p, q) of a conv output is
    bias_q + sum_{r,s} kernel[q, r, s] * x[r, p * stride + s].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import BatchTooSmall, ShapeMismatch, TooShort


@dataclass
class ConvLayerParams:
    """``kernels`` is (u, in_rows, width); one scalar bias per kernel."""

    kernels: np.ndarray
    biases: np.ndarray
    stride: int = 1

    def __post_init__(self):
        self.kernels = np.ascontiguousarray(self.kernels, dtype=self.kernels.dtype)
        if self.kernels.ndim != 3:
            raise ShapeMismatch("kernels must be (u, in_rows, width)")
        self.biases = np.ascontiguousarray(self.biases)
        if self.biases.shape != (self.kernels.shape[0],):
            raise ShapeMismatch("one bias per kernel required")
        if self.stride < 1:
            raise ShapeMismatch("stride must be >= 1")

    @property
    def n_kernels(self) -> int:
        return self.kernels.shape[0]

    @property
    def in_rows(self) -> int:
        return self.kernels.shape[1]

    @property
    def width(self) -> int:
        return self.kernels.shape[2]


@dataclass
class DenseParams:
    weight: np.ndarray  # (in, out)
    bias: np.ndarray  # (out,)

    def __post_init__(self):
        self.weight = np.ascontiguousarray(self.weight)
        self.bias = np.ascontiguousarray(self.bias)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ShapeMismatch("weight must be (in, out) with matching bias")


@dataclass
class BatchNormParams:
    """Per-feature scale/shift plus running statistics for inference."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if (self.running_var < 0).any():
            raise ValueError("running variance must be >= 0")

    @classmethod
    def create(cls, n_features: int, dtype=np.float64, momentum=0.1, epsilon=1e-5):
        return cls(
            gamma=np.ones(n_features, dtype=dtype),
            beta=np.zeros(n_features, dtype=dtype),
            running_mean=np.zeros(n_features, dtype=dtype),
            running_var=np.ones(n_features, dtype=dtype),
            momentum=momentum,
            epsilon=epsilon,
        )


# ---------------------------------------------------------------------------
# convolution


def conv_forward(x: np.ndarray, kernels: np.ndarray, biases: np.ndarray) -> np.ndarray:
    """Valid stride-1 convolution, time-major: (B, T, F_in) -> (B, T-w+1, u).

    Computed as one (F_in x u) matmul per kernel tap; the kernel stack is
    repacked contiguously once so every matmul hits the BLAS fast path.
    """
    width = kernels.shape[2]
    l = x.shape[1] - width + 1
    taps = np.ascontiguousarray(kernels.transpose(2, 1, 0))  # (width, F_in, u)
    if x.shape[0] == 1:
        # single-clip path: plain 2-D GEMMs beat batched matmul here
        x0 = x[0]
        out2 = x0[0:l] @ taps[0]
        tmp2 = np.empty_like(out2)
        for s in range(1, width):
            np.matmul(x0[s : s + l], taps[s], out=tmp2)
            out2 += tmp2
        out2 += biases
        return out2[None, :, :]
    out = np.matmul(x[:, 0:l, :], taps[0])
    if width > 1:
        tmp = np.empty_like(out)
        for s in range(1, width):
            np.matmul(x[:, s : s + l, :], taps[s], out=tmp)
            out += tmp
    out += biases
    return out


def conv_backward(
    x: np.ndarray,
    kernels: np.ndarray,
    dout: np.ndarray,
    need_dx: bool = True,
):
    """Gradients of conv_forward. Returns (dx or None, dkernels, dbiases).

    The weight gradient contracts batch and position axes with batched
    matmuls on transposed views (no large intermediate copies).
    """
    width = kernels.shape[2]
    l = dout.shape[1]
    dk = np.empty_like(kernels)
    prod = None
    for s in range(width):
        xs = x[:, s : s + l, :].transpose(0, 2, 1)  # (B, F_in, l) view
        prod = np.matmul(xs, dout, out=prod)  # (B, F_in, u)
        dk[:, :, s] = prod.sum(axis=0).T
    db = dout.sum(axis=(0, 1))
    dx = None
    if need_dx:
        taps = np.ascontiguousarray(kernels.transpose(2, 0, 1))  # (width, u, F_in)
        dx = np.zeros_like(x)
        for s in range(width):
            dx[:, s : s + l, :] += np.matmul(dout, taps[s])
    return dx, dk, db


def conv_valid(x: np.ndarray, params: ConvLayerParams) -> np.ndarray:
    """Valid convolution of a (rows, cols) signal; output (positions, kernels).

    Output length is (cols - width) // stride + 1, i.e. (cols - width + 1)
    positions at stride 1, with no padding.
    """
    x = np.asarray(x)
    if x.ndim != 2:
        raise ShapeMismatch(f"input must be 2-D, got shape {x.shape}")
    if x.shape[0] != params.in_rows:
        raise ShapeMismatch(
            f"input has {x.shape[0]} rows, kernels expect {params.in_rows}"
        )
    if x.shape[1] < params.width:
        raise ShapeMismatch(
            f"input of {x.shape[1]} cols shorter than kernel width {params.width}"
        )
    out = conv_forward(x.T[None, :, :], params.kernels, params.biases)[0]
    if params.stride > 1:
        out = out[:: params.stride]
    return out


# ---------------------------------------------------------------------------
# elementwise


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(dout: np.ndarray, out: np.ndarray) -> np.ndarray:
    return dout * (out > 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# k-max pooling


def kmax_indices(a: np.ndarray, k: int) -> np.ndarray:
    """Positions (ascending) of the k largest values along the last axis.

    Ties at the selection boundary are broken by earliest position, so
    the result is exactly the order-preserving top-k subsequence.
    """
    t = a.shape[-1]
    if k == t:
        shape = a.shape[:-1] + (k,)
        return np.broadcast_to(np.arange(t), shape).copy()
    if k == 1:
        # argmax already returns the first position among equals
        return a.argmax(axis=-1)[..., None].astype(np.int64)
    out_shape = a.shape[:-1] + (k,)
    flat = np.ascontiguousarray(a).reshape(-1, t)
    if k == 2:
        # two argmax passes: each takes the earliest among equals, which is
        # exactly the order-preserving top-2 rule
        first = flat.argmax(axis=-1)
        masked = flat.copy()
        masked[np.arange(len(flat)), first] = -np.inf
        second = masked.argmax(axis=-1)
        idx = np.sort(np.stack([first, second], axis=-1), axis=-1)
        return idx.reshape(out_shape).astype(np.int64)
    part = np.argpartition(flat, t - k, axis=-1)[:, t - k :]
    thr = np.take_along_axis(flat, part, -1).min(axis=-1, keepdims=True)
    selected = flat >= thr
    # rows with duplicates of the k-th largest value select too many entries;
    # resolve just those rows by keeping the earliest-position ties
    over = selected.sum(axis=-1) != k
    if over.any():
        rows = flat[over]
        thr_r = thr[over]
        greater = rows > thr_r
        need = k - greater.sum(axis=-1, keepdims=True)
        ties = rows == thr_r
        order = np.cumsum(ties, axis=-1)
        selected[over] = greater | (ties & (order <= need))
    idx = np.nonzero(selected)[1]
    return idx.reshape(out_shape).astype(np.int64)


def kmax_pool(seq: np.ndarray, k: int) -> np.ndarray:
    """Order-preserving subsequence of the k largest values of a vector."""
    seq = np.asarray(seq)
    if seq.ndim != 1:
        raise ShapeMismatch("kmax_pool expects a 1-D sequence")
    if k < 1 or k > len(seq):
        raise TooShort(f"need 1 <= k <= {len(seq)}, got k={k}")
    return seq[kmax_indices(seq, k)]


def kmax_scatter(dout: np.ndarray, idx: np.ndarray, t: int) -> np.ndarray:
    """Route pooled gradients back to their source positions."""
    dx = np.zeros(dout.shape[:-1] + (t,), dtype=dout.dtype)
    np.put_along_axis(dx, idx, dout, axis=-1)
    return dx


# ---------------------------------------------------------------------------
# batch normalization


def bn_forward_train(x: np.ndarray, params: BatchNormParams, update_running=True):
    """Normalize rows of (R, F) by batch statistics; returns (out, cache).

    Uses biased variance for both normalization and the running update.
    Written to minimize full-array passes: these maps are the largest
    arrays a training step touches.
    """
    if x.shape[0] < 2:
        raise BatchTooSmall(f"train-mode batch norm needs >= 2 rows, got {x.shape[0]}")
    mean = x.mean(axis=0)
    xhat = x - mean
    var = np.einsum("ij,ij->j", xhat, xhat) / x.shape[0]
    inv_std = 1.0 / np.sqrt(var + params.epsilon)
    xhat *= inv_std
    out = xhat * params.gamma
    out += params.beta
    if update_running:
        m = params.momentum
        params.running_mean *= 1.0 - m
        params.running_mean += m * mean
        params.running_var *= 1.0 - m
        params.running_var += m * var
    return out, (xhat, inv_std)


def bn_forward_infer(x: np.ndarray, params: BatchNormParams) -> np.ndarray:
    inv_std = 1.0 / np.sqrt(params.running_var + params.epsilon)
    scale = params.gamma * inv_std
    out = x * scale
    out += params.beta - params.running_mean * scale
    return out


def batch_norm_forward(x: np.ndarray, params: BatchNormParams, mode: str) -> np.ndarray:
    """Spec-level entry point: rows are samples, columns are features."""
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != params.gamma.shape[0]:
        raise ShapeMismatch(
            f"expected (rows, {params.gamma.shape[0]}) input, got {x.shape}"
        )
    if mode == "train":
        out, _ = bn_forward_train(x, params)
        return out
    if mode == "infer":
        return bn_forward_infer(x, params)
    raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")


def bn_backward(dout: np.ndarray, cache, params: BatchNormParams):
    """Gradient through train-mode normalization (batch statistics included).

    Uses dx = gamma * inv_std * (dout - dbeta/R - xhat * dgamma/R), which is
    the standard batch-stat chain rule with the two reductions it needs
    recognized as dbeta and dgamma.
    """
    xhat, inv_std = cache
    rows = dout.shape[0]
    dgamma = np.einsum("ij,ij->j", dout, xhat)
    dbeta = dout.sum(axis=0)
    dx = xhat * (dgamma / rows)
    dx += dbeta / rows
    np.subtract(dout, dx, out=dx)
    dx *= params.gamma * inv_std
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# dense


def dense(x: np.ndarray, params: DenseParams) -> np.ndarray:
    """Affine map x @ W + b for a vector or a batch of row vectors."""
    x = np.asarray(x)
    if x.shape[-1] != params.weight.shape[0]:
        raise ShapeMismatch(
            f"input dim {x.shape[-1]} != weight rows {params.weight.shape[0]}"
        )
    return x @ params.weight + params.bias


def dense_backward(x: np.ndarray, params: DenseParams, dout: np.ndarray):
    if x.ndim == 1:
        x = x[None, :]
        dout = dout[None, :]
    dw = x.T @ dout
    db = dout.sum(axis=0)
    dx = dout @ params.weight.T
    return dx, dw, db
