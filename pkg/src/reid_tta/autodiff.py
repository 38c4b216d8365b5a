"""Minimal reverse-mode automatic differentiation over dense numpy tensors.

Implements exactly the primitives the rest of the package needs: elementwise
arithmetic, matrix product, linear map, 2-D convolution, ReLU, batch
normalization, pooling, row-wise softmax / log-softmax / entropy, row gather,
reductions, plus an Adam optimizer and a central-finite-difference gradient
checker.

The graph is define-by-run: every operation on tensors with
``requires_grad=True`` records a closure that propagates gradients to its
inputs. Only first-order gradients are supported; calling ``backward`` twice
on the same scalar is an error (rebuild the graph instead). Tensors default
to float32; float64 graphs are supported and are used by the gradient checker
for an accurate numeric reference.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

__all__ = [
    "Tensor",
    "BnMode",
    "BnState",
    "AdamState",
    "adam_step",
    "batchnorm_forward",
    "update_running_stats",
    "finite_difference_check",
    "matmul",
    "transpose",
    "linear",
    "relu",
    "conv2d",
    "avg_pool2d",
    "global_avg_pool",
    "l2_normalize_rows",
    "gather_rows",
    "softmax_rows",
    "log_softmax_rows",
    "entropy_rows",
    "softplus",
    "clamp_min",
]


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """Dense float tensor; a node in the reverse-mode graph.

    Leaf tensors are created directly and default to float32. Results of
    operations keep the dtype numpy promotion gives them, so a graph built
    from float64 leaves stays float64 throughout.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_backward_done")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            dtype = np.float32
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None
        self._backward_done = False

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple["Tensor", ...], backward_fn) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = any(p.requires_grad for p in parents)
        out.grad = None
        out._backward_done = False
        if out.requires_grad:
            out._parents = parents
            out._backward_fn = backward_fn
        else:
            out._parents = ()
            out._backward_fn = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = grad.astype(self.data.dtype, copy=True)
        else:
            self.grad += grad

    def backward(self) -> None:
        """Populate ``grad`` on every reachable tensor with requires_grad.

        The loss must be a scalar. A second call on the same tensor raises:
        the tape holds no saved activations for re-traversal and higher-order
        derivatives are out of scope.
        """
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("loss does not require grad; nothing to differentiate")
        if self._backward_done:
            raise RuntimeError(
                "backward already called on this graph; reset gradients and rebuild the graph"
            )
        self._backward_done = True

        # Topological order via iterative post-order DFS.
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))

        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward_fn is not None:
                node._backward_fn(node.grad)

    # -- elementwise arithmetic -------------------------------------------

    @staticmethod
    def _coerce(value, like: "Tensor") -> "Tensor":
        if isinstance(value, Tensor):
            return value
        return Tensor(np.asarray(value, dtype=like.data.dtype), dtype=like.data.dtype)

    def __add__(self, other):
        other = Tensor._coerce(other, self)
        a, b = self, other
        out_data = a.data + b.data

        def backward(grad):
            if a.requires_grad:
                a._accumulate(_unbroadcast(grad, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(grad, b.shape))

        return Tensor._from_op(out_data, (a, b), backward)

    __radd__ = __add__

    def __neg__(self):
        a = self

        def backward(grad):
            if a.requires_grad:
                a._accumulate(-grad)

        return Tensor._from_op(-a.data, (a,), backward)

    def __sub__(self, other):
        other = Tensor._coerce(other, self)
        a, b = self, other
        out_data = a.data - b.data

        def backward(grad):
            if a.requires_grad:
                a._accumulate(_unbroadcast(grad, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-grad, b.shape))

        return Tensor._from_op(out_data, (a, b), backward)

    def __rsub__(self, other):
        return Tensor._coerce(other, self) - self

    def __mul__(self, other):
        other = Tensor._coerce(other, self)
        a, b = self, other
        out_data = a.data * b.data

        def backward(grad):
            if a.requires_grad:
                a._accumulate(_unbroadcast(grad * b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(grad * a.data, b.shape))

        return Tensor._from_op(out_data, (a, b), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor._coerce(other, self)
        a, b = self, other
        out_data = a.data / b.data

        def backward(grad):
            if a.requires_grad:
                a._accumulate(_unbroadcast(grad / b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-grad * a.data / (b.data * b.data), b.shape))

        return Tensor._from_op(out_data, (a, b), backward)

    def __rtruediv__(self, other):
        return Tensor._coerce(other, self) / self

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only scalar exponents are supported")
        a = self
        out_data = a.data ** exponent

        def backward(grad):
            if a.requires_grad:
                a._accumulate(grad * exponent * a.data ** (exponent - 1))

        return Tensor._from_op(out_data, (a,), backward)

    # -- unary math --------------------------------------------------------

    def exp(self):
        a = self
        out_data = np.exp(a.data)

        def backward(grad):
            a._accumulate(grad * out_data)

        return Tensor._from_op(out_data, (a,), backward)

    def log(self):
        a = self
        out_data = np.log(a.data)

        def backward(grad):
            a._accumulate(grad / a.data)

        return Tensor._from_op(out_data, (a,), backward)

    def sqrt(self):
        a = self
        out_data = np.sqrt(a.data)

        def backward(grad):
            a._accumulate(grad / (2.0 * out_data))

        return Tensor._from_op(out_data, (a,), backward)

    # -- reductions / shape ------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        a = self
        out_data = a.data.sum(axis=axis, keepdims=keepdims)

        def backward(grad):
            g = grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape).copy())

        return Tensor._from_op(np.asarray(out_data), (a,), backward)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            count = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = int(np.prod([self.shape[ax] for ax in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        out_data = a.data.reshape(shape)
        old_shape = a.shape

        def backward(grad):
            a._accumulate(grad.reshape(old_shape))

        return Tensor._from_op(out_data, (a,), backward)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


# -- nonlinearities and structured ops --------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out_data = np.where(mask, x.data, 0.0).astype(x.data.dtype)

    def backward(grad):
        x._accumulate(grad * mask)

    return Tensor._from_op(out_data, (x,), backward)


def clamp_min(x: Tensor, floor: float) -> Tensor:
    """Elementwise max(x, floor); gradient passes only where x > floor."""
    mask = x.data > floor
    out_data = np.where(mask, x.data, floor).astype(x.data.dtype)

    def backward(grad):
        x._accumulate(grad * mask)

    return Tensor._from_op(out_data, (x,), backward)


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)) computed without overflow."""
    out_data = np.logaddexp(0.0, x.data).astype(x.data.dtype)

    def backward(grad):
        # d softplus / dx = sigmoid(x)
        sig = 1.0 / (1.0 + np.exp(-x.data))
        x._accumulate(grad * sig)

    return Tensor._from_op(out_data, (x,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward(grad):
        if a.requires_grad:
            a._accumulate(grad @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ grad)

    return Tensor._from_op(out_data, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map x @ weight (+ bias broadcast over rows)."""
    out = matmul(x, weight)
    if bias is not None:
        out = out + bias
    return out


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ValueError("transpose expects a 2-D tensor")
    out_data = x.data.T

    def backward(grad):
        x._accumulate(grad.T)

    return Tensor._from_op(out_data, (x,), backward)


def gather_rows(x: Tensor, indices: np.ndarray) -> Tensor:
    """out[i, j] = x[i, indices[i, j]]; indices are differentiation constants."""
    indices = np.asarray(indices)
    if indices.ndim == 1:
        indices = indices[:, None]
    if indices.shape[0] != x.shape[0]:
        raise ValueError("gather_rows needs one index row per input row")
    if indices.size and (indices.min() < 0 or indices.max() >= x.shape[1]):
        raise IndexError("gather index out of range")
    out_data = np.take_along_axis(x.data, indices, axis=1)

    def backward(grad):
        gx = np.zeros_like(x.data)
        rows = np.arange(x.shape[0])[:, None]
        np.add.at(gx, (rows, indices), grad)
        x._accumulate(gx)

    return Tensor._from_op(out_data, (x,), backward)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax over the last axis, stabilized by max subtraction."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def backward(grad):
        inner = (grad * out_data).sum(axis=-1, keepdims=True)
        x._accumulate(out_data * (grad - inner))

    return Tensor._from_op(out_data.astype(x.data.dtype), (x,), backward)


def log_softmax_rows(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out_data = (shifted - log_z).astype(x.data.dtype)

    def backward(grad):
        p = np.exp(out_data)
        x._accumulate(grad - p * grad.sum(axis=-1, keepdims=True))

    return Tensor._from_op(out_data, (x,), backward)


def entropy_rows(p: Tensor) -> Tensor:
    """Shannon entropy of each row of a probability matrix, in nats.

    Uses the 0*log(0) = 0 convention; the gradient is masked to 0 at p = 0
    (the one-sided derivative is unbounded there).
    """
    if np.any(p.data < 0):
        raise ValueError("entropy_rows requires nonnegative probabilities")
    mask = p.data > 0
    plogp = np.where(mask, p.data * np.log(np.where(mask, p.data, 1.0)), 0.0)
    out_data = (-plogp.sum(axis=-1)).astype(p.data.dtype)

    def backward(grad):
        g = np.where(mask, -(np.log(np.where(mask, p.data, 1.0)) + 1.0), 0.0)
        p._accumulate(np.expand_dims(grad, -1) * g)

    return Tensor._from_op(out_data, (p,), backward)


def l2_normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row to unit L2 norm, guarding zero rows with `eps`."""
    sq = (x * x).sum(axis=1, keepdims=True)
    norm = clamp_min(sq.sqrt(), eps)
    return x / norm


# -- convolution and pooling -------------------------------------------------


def _im2col(x: np.ndarray, kh: int, kw: int, padding: int) -> np.ndarray:
    n, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = x.shape[2] - kh + 1
    ow = x.shape[3] - kw + 1
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    # (n, c, oh, ow, kh, kw) -> (n, oh*ow, c*kh*kw)
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n, oh * ow, c * kh * kw)
    return np.ascontiguousarray(cols)


def _col2im(cols: np.ndarray, x_shape, kh: int, kw: int, padding: int) -> np.ndarray:
    n, c, h, w = x_shape
    ph, pw = h + 2 * padding, w + 2 * padding
    oh = ph - kh + 1
    ow = pw - kw + 1
    out = np.zeros((n, c, ph, pw), dtype=cols.dtype)
    cols = cols.reshape(n, oh, ow, c, kh, kw)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + oh, j:j + ow] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return out


def conv2d(x: Tensor, weight: Tensor, padding: int = 0) -> Tensor:
    """2-D convolution (stride 1): x (N,C,H,W) with weight (F,C,kh,kw)."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ValueError("conv2d expects NCHW input and FCKK weight")
    n, c, h, w = x.shape
    f, cw, kh, kw = weight.shape
    if c != cw:
        raise ValueError(f"conv2d channel mismatch: input {c}, weight {cw}")
    oh = h + 2 * padding - kh + 1
    ow = w + 2 * padding - kw + 1
    if oh <= 0 or ow <= 0:
        raise ValueError("conv2d kernel larger than padded input")
    cols = _im2col(x.data, kh, kw, padding)  # (n, oh*ow, c*kh*kw)
    wmat = weight.data.reshape(f, -1)
    out_data = (cols @ wmat.T).transpose(0, 2, 1).reshape(n, f, oh, ow)

    def backward(grad):
        gmat = grad.reshape(n, f, oh * ow)
        if weight.requires_grad:
            gw = np.einsum("nfp,npk->fk", gmat, cols)
            weight._accumulate(gw.reshape(weight.shape))
        if x.requires_grad:
            gcols = gmat.transpose(0, 2, 1) @ wmat  # (n, oh*ow, c*kh*kw)
            x._accumulate(_col2im(gcols, x.shape, kh, kw, padding))

    return Tensor._from_op(out_data, (x, weight), backward)


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k average pooling; H and W must be divisible by k."""
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ValueError(f"avg_pool2d: spatial dims {(h, w)} not divisible by {k}")
    oh, ow = h // k, w // k
    out_data = x.data.reshape(n, c, oh, k, ow, k).mean(axis=(3, 5))

    def backward(grad):
        g = grad[:, :, :, None, :, None] / (k * k)
        x._accumulate(np.broadcast_to(g, (n, c, oh, k, ow, k)).reshape(x.shape).copy())

    return Tensor._from_op(out_data, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """(N,C,H,W) -> (N,C) mean over the spatial extent."""
    return x.mean(axis=(2, 3))


# -- batch normalization -----------------------------------------------------


class BnMode(Enum):
    RUNNING_STATS = "running"
    BATCH_STATS = "batch"


@dataclass
class BnState:
    """Per-channel batch-norm state.

    `gamma` and `beta` are the affine parameters (the only members eligible
    for gradient updates under the adaptation mask); the running buffers are
    plain arrays, mutated only by `update_running_stats`.
    """

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-5

    @classmethod
    def create(cls, channels: int, epsilon: float = 1e-5) -> "BnState":
        return cls(
            gamma=Tensor(np.ones(channels, dtype=np.float32), requires_grad=True),
            beta=Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True),
            running_mean=np.zeros(channels, dtype=np.float32),
            running_var=np.ones(channels, dtype=np.float32),
            epsilon=epsilon,
        )

    @property
    def channels(self) -> int:
        return self.gamma.data.shape[0]


def _bn_axes_and_expand(x_shape) -> tuple[tuple[int, ...], tuple]:
    if len(x_shape) == 2:
        return (0,), (1, -1)
    if len(x_shape) == 4:
        return (0, 2, 3), (1, -1, 1, 1)
    raise ValueError(f"batchnorm expects NxC or NxCxHxW input, got shape {x_shape}")


def batchnorm_forward(x: Tensor, bn: BnState, mode: BnMode) -> Tensor:
    """Normalize per channel and apply the affine pair (gamma, beta).

    RUNNING_STATS normalizes with the frozen running buffers; BATCH_STATS
    normalizes with the statistics of the current batch (biased variance).
    Neither mode mutates the running buffers.
    """
    axes, expand = _bn_axes_and_expand(x.shape)
    if x.shape[1] != bn.channels:
        raise ValueError(f"batchnorm channel mismatch: input {x.shape[1]}, state {bn.channels}")

    gamma, beta = bn.gamma, bn.beta
    dtype = x.data.dtype

    if mode is BnMode.RUNNING_STATS:
        mu = bn.running_mean.astype(dtype).reshape(expand)
        var = bn.running_var.astype(dtype).reshape(expand)
        inv_std = 1.0 / np.sqrt(var + dtype.type(bn.epsilon))
        xhat = (x.data - mu) * inv_std
        out_data = gamma.data.reshape(expand) * xhat + beta.data.reshape(expand)

        def backward(grad):
            if gamma.requires_grad:
                gamma._accumulate((grad * xhat).sum(axis=axes))
            if beta.requires_grad:
                beta._accumulate(grad.sum(axis=axes))
            if x.requires_grad:
                x._accumulate(grad * gamma.data.reshape(expand) * inv_std)

        return Tensor._from_op(out_data.astype(dtype), (x, gamma, beta), backward)

    # BATCH_STATS: statistics from the current batch.
    if len(x.shape) == 2 and x.shape[0] < 2:
        raise ValueError("batch-statistics normalization is degenerate for a single non-spatial sample")
    count = int(np.prod([x.shape[ax] for ax in axes]))
    mu = x.data.mean(axis=axes, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + dtype.type(bn.epsilon))
    xhat = (x.data - mu) * inv_std
    out_data = gamma.data.reshape(expand) * xhat + beta.data.reshape(expand)

    def backward(grad):
        if gamma.requires_grad:
            gamma._accumulate((grad * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta._accumulate(grad.sum(axis=axes))
        if x.requires_grad:
            # Compact batch-norm backward, reducing over the normalization axes.
            dxhat = grad * gamma.data.reshape(expand)
            s1 = dxhat.sum(axis=axes, keepdims=True)
            s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
            x._accumulate((dxhat - s1 / count - xhat * s2 / count) * inv_std)

    return Tensor._from_op(out_data.astype(dtype), (x, gamma, beta), backward)


def batch_channel_stats(x_data: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel (mean, biased variance) of a batch, NxC or NxCxHxW."""
    axes, _ = _bn_axes_and_expand(x_data.shape)
    mu = x_data.mean(axis=axes)
    var = ((x_data - x_data.mean(axis=axes, keepdims=True)) ** 2).mean(axis=axes)
    return mu, var


def update_running_stats(bn: BnState, x_data: np.ndarray, momentum: float) -> None:
    """Blend batch statistics into the running buffers (the only mutator).

    momentum = 1 replaces the buffers with the batch statistics outright.
    """
    mu, var = batch_channel_stats(x_data)
    bn.running_mean[...] = (1.0 - momentum) * bn.running_mean + momentum * mu
    bn.running_var[...] = (1.0 - momentum) * bn.running_var + momentum * var


# -- Adam ---------------------------------------------------------------------


@dataclass
class AdamState:
    """Bias-corrected Adam with optional decoupled-from-nothing L2 weight decay
    (decay is added to the gradient, matching the classic formulation)."""

    learning_rate: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(tensors: dict[str, Tensor], trainable: dict[str, bool], state: AdamState) -> None:
    """One Adam update over the tensors whose mask is true.

    Masked-out tensors are left untouched (bit-identical). A trainable tensor
    with no gradient is an error: it means backward was not run on a loss that
    reaches it.
    """
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, tensor in tensors.items():
        if not trainable.get(name, False):
            continue
        if tensor.grad is None:
            raise RuntimeError(f"trainable parameter '{name}' has no gradient")
        g = tensor.grad
        if state.weight_decay:
            g = g + state.weight_decay * tensor.data
        if name not in state.m:
            state.m[name] = np.zeros_like(tensor.data)
            state.v[name] = np.zeros_like(tensor.data)
        m = state.m[name]
        v = state.v[name]
        m[...] = state.beta1 * m + (1.0 - state.beta1) * g
        v[...] = state.beta2 * v + (1.0 - state.beta2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        tensor.data -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)


# -- gradient checking ---------------------------------------------------------


def finite_difference_check(
    loss_fn,
    params: dict[str, Tensor],
    eps: float = 1e-3,
    trainable: dict[str, bool] | None = None,
    max_coords_per_tensor: int = 16,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare analytic gradients of ``loss_fn`` against central differences.

    ``loss_fn`` maps a dict of named tensors to a scalar Tensor and must be
    deterministic. The analytic side runs at the parameters' own dtype; the
    numeric side re-evaluates the loss on float64 copies so the difference
    quotient is not drowned by float32 rounding. Returns the max over sampled
    coordinates of |analytic - central| / max(|analytic|, |central|, 1e-8).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    rng = rng or np.random.default_rng(0)
    if trainable is None:
        trainable = {name: t.requires_grad for name, t in params.items()}

    out = loss_fn(params)
    if out.data.size != 1:
        raise ValueError("loss_fn must return a scalar")
    if not np.isfinite(out.data):
        raise FloatingPointError("loss is not finite at the evaluation point")
    for t in params.values():
        t.grad = None
    out.backward()

    params64 = {
        name: Tensor(t.data.astype(np.float64), requires_grad=False, dtype=np.float64)
        for name, t in params.items()
    }

    worst = 0.0
    for name, tensor in params.items():
        if not trainable.get(name, False):
            continue
        grad = tensor.grad
        if grad is None:
            grad = np.zeros_like(tensor.data)
        size = tensor.data.size
        if size <= max_coords_per_tensor:
            coords = np.arange(size)
        else:
            coords = rng.choice(size, size=max_coords_per_tensor, replace=False)
        flat64 = params64[name].data.reshape(-1)
        for idx in coords:
            original = flat64[idx]
            flat64[idx] = original + eps
            plus = float(loss_fn(params64).data)
            flat64[idx] = original - eps
            minus = float(loss_fn(params64).data)
            flat64[idx] = original
            if not (np.isfinite(plus) and np.isfinite(minus)):
                raise FloatingPointError("loss is not finite at a perturbed point")
            numeric = (plus - minus) / (2.0 * eps)
            analytic = float(grad.reshape(-1)[idx])
            denom = max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, abs(analytic - numeric) / denom)
    return worst
