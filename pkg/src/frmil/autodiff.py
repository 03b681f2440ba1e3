"""Dense tensors with reverse-mode automatic differentiation.

Just enough machinery to express the model forward pass and get exact
gradients for every parameter: 2-D matmul, broadcast-aware elementwise
arithmetic, activations, masked softmax, layer norm, a depthwise 3x3
convolution, gather/concat/reshape plumbing, and a finite-difference
gradient checker.

Convention: training runs in float32, gradient checks in float64. The
graph is carried by the tensors themselves (each records its parents and
a backward closure), so there is no global tape and read-only tensors are
safe to share across threads.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

Scalar = Union[int, float]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class MaskError(ValueError):
    """A mask leaves no valid entries (all-masked row, empty bag, ...)."""


class GradientCheckError(AssertionError):
    """Analytic and finite-difference gradients disagree beyond tolerance."""


class Tensor:
    """N-dimensional array plus an optional node in the computation graph.

    Leaf tensors created with requires_grad=True accumulate gradients in
    ``grad`` after ``backward``. Tensors produced by operations keep
    references to their parents and a closure that propagates gradients;
    a tensor with requires_grad=False never participates in the graph.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # convenience operators used throughout the model code
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _result(data: np.ndarray, parents: Sequence[Tensor],
            backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _as_array(b, dtype) -> np.ndarray:
    if isinstance(b, Tensor):
        return b.data
    return np.asarray(b, dtype=dtype)


def _reduce_to_shape(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Undo scalar/row broadcasting by summing the gradient back down."""
    if g.shape == shape:
        return g
    if int(np.prod(shape)) == 1:
        return g.sum().reshape(shape)
    # single-row broadcast: (1, D) against (n, D)
    if len(shape) == 2 and shape[0] == 1 and g.ndim == 2 and g.shape[1] == shape[1]:
        return g.sum(axis=0, keepdims=True)
    if len(shape) == 1 and g.ndim == 2 and g.shape[1] == shape[0]:
        return g.sum(axis=0)
    raise ShapeError(f"cannot reduce gradient of shape {g.shape} to {shape}")


def _check_broadcastable(a: Tensor, b) -> None:
    if not isinstance(b, Tensor):
        return  # python scalar
    if b.data.shape == a.data.shape or b.data.size == 1:
        return
    # a single row broadcast over the rows of a
    if (a.data.ndim == 2 and b.data.ndim == 2 and b.data.shape[0] == 1
            and b.data.shape[1] == a.data.shape[1]):
        return
    if a.data.ndim == 2 and b.data.ndim == 1 and b.data.shape[0] == a.data.shape[1]:
        return
    raise ShapeError(f"operand shapes {a.data.shape} and {b.data.shape} are not "
                     "equal, scalar, or single-row broadcastable")


# ---------------------------------------------------------------------------
# arithmetic


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Standard 2-D matrix product (p x q) @ (q x r)."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shapes {a.data.shape} and {b.data.shape} do not chain")
    out = a.data @ b.data

    def backward(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _result(out, (a, b), backward)


def add(a: Tensor, b) -> Tensor:
    _check_broadcastable(a, b)
    bd = _as_array(b, a.data.dtype)
    out = a.data + bd

    def backward(g):
        _accumulate(a, g)
        if isinstance(b, Tensor):
            _accumulate(b, _reduce_to_shape(g, b.data.shape))

    return _result(out, (a, b) if isinstance(b, Tensor) else (a,), backward)


def sub(a: Tensor, b) -> Tensor:
    _check_broadcastable(a, b)
    bd = _as_array(b, a.data.dtype)
    out = a.data - bd

    def backward(g):
        _accumulate(a, g)
        if isinstance(b, Tensor):
            _accumulate(b, -_reduce_to_shape(g, b.data.shape))

    return _result(out, (a, b) if isinstance(b, Tensor) else (a,), backward)


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; b may be a same-shape tensor, a row, or a scalar."""
    _check_broadcastable(a, b)
    bd = _as_array(b, a.data.dtype)
    out = a.data * bd

    def backward(g):
        _accumulate(a, g * bd)
        if isinstance(b, Tensor):
            _accumulate(b, _reduce_to_shape(g * a.data, b.data.shape))

    return _result(out, (a, b) if isinstance(b, Tensor) else (a,), backward)


def scale(a: Tensor, c: Scalar) -> Tensor:
    """Multiply by a plain python scalar."""
    c = float(c)
    out = a.data * np.asarray(c, dtype=a.data.dtype)

    def backward(g):
        _accumulate(a, g * c)

    return _result(out, (a,), backward)


# ---------------------------------------------------------------------------
# activations and normalization


def relu(a: Tensor) -> Tensor:
    """max(0, x); subgradient at 0 is 0."""
    keep = a.data > 0
    out = np.where(keep, a.data, 0).astype(a.data.dtype)

    def backward(g):
        _accumulate(a, g * keep)

    return _result(out, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    """Numerically stable logistic function."""
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        _accumulate(a, g * out * (1.0 - out))

    return _result(out, (a,), backward)


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def backward(g):
        _accumulate(a, g / a.data)

    return _result(out, (a,), backward)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes only through the interior."""
    out = np.clip(a.data, lo, hi)
    interior = (a.data > lo) & (a.data < hi)

    def backward(g):
        _accumulate(a, g * interior)

    return _result(out, (a,), backward)


def softmax_lastdim(a: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax over the last axis; masked entries get exactly zero weight.

    Masking excludes entries from both the max shift and the normalizer,
    which is equivalent to -inf logits without non-finite arithmetic.
    """
    x = a.data
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        if m.shape != (x.shape[-1],):
            raise ShapeError(f"mask shape {m.shape} does not match last "
                             f"dimension of {x.shape}")
        if not m.any():
            raise MaskError("softmax mask excludes every entry")
        neg_inf = np.asarray(-np.inf, dtype=x.dtype)
        shifted = np.where(m, x, neg_inf)
        hi = shifted.max(axis=-1, keepdims=True)
        # exp(-inf) is exactly 0, so masked entries never overflow
        e = np.exp(np.where(m, x - hi, neg_inf))
    else:
        hi = x.max(axis=-1, keepdims=True)
        e = np.exp(x - hi)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        _accumulate(a, out * (g - dot))

    return _result(out, (a,), backward)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row standardization followed by an affine map."""
    x = a.data
    if x.ndim != 2 or x.shape[1] < 2:
        raise ShapeError(f"layer_norm expects (rows, D >= 2), got {x.shape}")
    mean = x.mean(axis=1, keepdims=True)
    centered = x - mean
    var = (centered ** 2).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gain.data + bias.data

    def backward(g):
        _accumulate(gain, (g * xhat).sum(axis=0))
        _accumulate(bias, g.sum(axis=0))
        gx = g * gain.data
        # d/dx of (x - mean)/sqrt(var + eps), means taken over each row
        term = gx - gx.mean(axis=1, keepdims=True) \
            - xhat * (gx * xhat).mean(axis=1, keepdims=True)
        _accumulate(a, term * inv_std)

    return _result(out, (a, gain, bias), backward)


# ---------------------------------------------------------------------------
# convolution


def depthwise_conv2d_3x3(a: Tensor, w: Tensor, bias: Tensor) -> Tensor:
    """Per-channel 3x3 convolution with one ring of zero padding.

    a: (B, C, H, W), w: (C, 3, 3), bias: (C,). Groups equal the channel
    count, so each channel is filtered independently and the spatial size
    is preserved.
    """
    x = a.data
    if x.ndim != 4:
        raise ShapeError(f"conv input must be (B, C, H, W), got {x.shape}")
    if w.data.shape != (x.shape[1], 3, 3):
        raise ShapeError(f"conv weight shape {w.data.shape} does not match "
                         f"{x.shape[1]} input channels")
    B, C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.broadcast_to(bias.data[None, :, None, None], x.shape).astype(x.dtype).copy()
    for dy in range(3):
        for dx in range(3):
            out += w.data[:, dy, dx][None, :, None, None] * xp[:, :, dy:dy + H, dx:dx + W]

    def backward(g):
        _accumulate(bias, g.sum(axis=(0, 2, 3)))
        if w.requires_grad:
            gw = np.empty_like(w.data)
            for dy in range(3):
                for dx in range(3):
                    gw[:, dy, dx] = (g * xp[:, :, dy:dy + H, dx:dx + W]).sum(axis=(0, 2, 3))
            _accumulate(w, gw)
        if a.requires_grad:
            gp = np.zeros_like(xp)
            for dy in range(3):
                for dx in range(3):
                    gp[:, :, dy:dy + H, dx:dx + W] += w.data[:, dy, dx][None, :, None, None] * g
            _accumulate(a, gp[:, :, 1:H + 1, 1:W + 1])

    return _result(out, (a, w, bias), backward)


# ---------------------------------------------------------------------------
# reductions and norms


def masked_reduce(op: str, a: Tensor, mask: np.ndarray, axis: int = 0) -> Tensor:
    """Sum or mean over axis 0 counting only unmasked rows.

    For a 1-D input the result is a scalar; for (n, D) it is a (1, D) row.
    The mean divides by the number of unmasked rows, never the padded
    length.
    """
    if op not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {op!r}")
    if axis != 0:
        raise ShapeError("masked_reduce supports axis=0 only")
    m = np.asarray(mask, dtype=bool)
    if m.shape != (a.data.shape[0],):
        raise ShapeError(f"mask shape {m.shape} does not match axis extent "
                         f"{a.data.shape[0]}")
    count = int(m.sum())
    if count == 0:
        raise MaskError("masked_reduce over zero unmasked entries")
    mf = m.astype(a.data.dtype)
    if a.data.ndim == 1:
        total = (a.data * mf).sum()
        out = np.asarray(total if op == "sum" else total / count, dtype=a.data.dtype)
    elif a.data.ndim == 2:
        total = (a.data * mf[:, None]).sum(axis=0, keepdims=True)
        out = total if op == "sum" else total / count
    else:
        raise ShapeError(f"masked_reduce expects 1-D or 2-D input, got {a.data.shape}")
    denom = 1.0 if op == "sum" else float(count)

    def backward(g):
        if a.data.ndim == 1:
            _accumulate(a, (float(g) / denom) * mf)
        else:
            _accumulate(a, (g / denom) * mf[:, None])

    return _result(out, (a,), backward)


def l2_norm_rows(a: Tensor, squared: bool = False) -> Tensor:
    """Per-row Euclidean norm of an (n, D) tensor, optionally squared.

    The gradient of the unsquared norm at a zero row is defined as 0.
    """
    if a.data.ndim != 2:
        raise ShapeError(f"l2_norm_rows expects (n, D), got {a.data.shape}")
    sq = (a.data ** 2).sum(axis=1)
    out = sq if squared else np.sqrt(sq)

    def backward(g):
        if squared:
            _accumulate(a, 2.0 * a.data * g[:, None])
        else:
            safe = np.where(out > 0, out, 1.0)
            _accumulate(a, a.data / safe[:, None] * np.where(out > 0, g, 0.0)[:, None])

    return _result(out, (a,), backward)


# ---------------------------------------------------------------------------
# structural ops


def _concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    if not parts:
        raise ShapeError("concat of zero tensors")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]

    def backward(g):
        start = 0
        for p, size in zip(parts, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, start + size)
            _accumulate(p, g[tuple(sl)])
            start += size

    return _result(out, tuple(parts), backward)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack along the leading (token/row) axis."""
    return _concat(parts, axis=0)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    """Stack along the trailing (feature) axis; used to rejoin heads."""
    return _concat(parts, axis=1)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError(f"cannot reshape {a.data.shape} ({a.data.size} values) "
                         f"to {shape}")
    out = a.data.reshape(shape)

    def backward(g):
        _accumulate(a, g.reshape(a.data.shape))

    return _result(out, (a,), backward)


def transpose2d(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose2d expects 2-D input, got {a.data.shape}")
    out = np.ascontiguousarray(a.data.T)

    def backward(g):
        _accumulate(a, g.T)

    return _result(out, (a,), backward)


def take_rows(a: Tensor, indices) -> Tensor:
    """Gather rows by index; gradients scatter-add back."""
    idx = np.asarray(indices, dtype=np.intp)
    out = a.data[idx]

    def backward(g):
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            np.add.at(a.grad, idx, g)

    return _result(out, (a,), backward)


def slice_cols(a: Tensor, lo: int, hi: int) -> Tensor:
    if a.data.ndim != 2 or not (0 <= lo < hi <= a.data.shape[1]):
        raise ShapeError(f"invalid column slice [{lo}:{hi}] of {a.data.shape}")
    out = np.ascontiguousarray(a.data[:, lo:hi])

    def backward(g):
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            a.grad[:, lo:hi] += g

    return _result(out, (a,), backward)


def dropout(a: Tensor, rate: float, training: bool,
            rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: evaluation is the identity, no rescale needed."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return a
    if rng is None:
        raise ValueError("training-mode dropout needs an explicit rng")
    keep = (rng.random(a.data.shape) >= rate).astype(a.data.dtype) / (1.0 - rate)
    out = a.data * keep

    def backward(g):
        _accumulate(a, g * keep)

    return _result(out, (a,), backward)


# ---------------------------------------------------------------------------
# backward pass and gradient checking


def _topo_order(root: Tensor) -> list:
    """Parents-before-children ordering of the graph reachable from root."""
    order: list = []
    visited: set = set()
    stack: list = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Populate grads of every reachable requires_grad tensor.

    The root is seeded with ones, so a scalar root yields plain
    derivatives and a non-scalar root yields sum-of-outputs derivatives.
    """
    if not root.requires_grad:
        raise ValueError("backward from a tensor outside the computation graph")
    order = _topo_order(root)
    if root.grad is None:
        root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor],
               h: float = 1e-5, tol: Optional[float] = None) -> float:
    """Compare analytic gradients of scalar f() against central differences.

    Returns the worst relative error max(|a - n|) / max(|a|, |n|, 1e-3)
    over every element of every parameter. Run with float64 parameters;
    f must be deterministic across calls.
    """
    params = list(params)
    for p in params:
        p.grad = None
    out = f()
    if out.data.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    backward(out)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                for p in params]
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + h
            fp = f().item()
            flat[i] = saved - h
            fm = f().item()
            flat[i] = saved
            numeric = (fp - fm) / (2.0 * h)
            err = abs(gflat[i] - numeric) / max(abs(gflat[i]), abs(numeric), 1e-3)
            worst = max(worst, err)
    if tol is not None and worst > tol:
        raise GradientCheckError(f"max relative error {worst:.3e} exceeds {tol:.1e}")
    return worst
