"""Dense float64 tensors with reverse-mode automatic differentiation.

Only the operations the samCNN rerankers need are provided. Every op
records a closure that maps the output gradient back onto its inputs;
``Tensor.backward`` replays those closures in reverse topological order.

Arrays are plain numpy ``float64`` buffers in C order.
"""

from __future__ import annotations

import contextlib
import string
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "PreconditionError",
    "GraphError",
    "tensor",
    "no_grad",
    "is_grad_enabled",
    "matmul",
    "einsum",
    "unfold",
    "conv1d",
    "positionwise_conv1d",
    "max_pool_over_time",
    "relu",
    "dropout",
    "softmax",
    "log_softmax",
    "nll_loss",
    "batch_norm",
    "cosine",
    "cosine_matrix",
    "take_rows",
    "stack",
    "concat",
    "sgd_step",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class PreconditionError(ValueError):
    """An op was called outside its domain (e.g. input shorter than the kernel)."""


class GraphError(RuntimeError):
    """Misuse of the compute graph: non-scalar loss, double backward, missing grad."""


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64, order="C")
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._consumed = False

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # -- graph ------------------------------------------------------------
    def backward(self) -> None:
        """Populate ``.grad`` on every reachable tensor that requires it.

        The graph is released afterwards, so a second call on the same loss
        raises ``GraphError``; run the forward pass again instead.
        """
        if self.data.size != 1:
            raise GraphError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise GraphError("backward() already ran on this graph; re-run the forward pass")
        if not self.requires_grad:
            raise GraphError("loss does not depend on any tensor that requires grad")
        order = _topological_order(self)
        for node in order:
            if node.requires_grad and node.grad is None:
                node.grad = np.zeros_like(node.data)
        self.grad = self.grad + np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)
        for node in order:
            node._backward = None
            node._parents = ()
        self._consumed = True

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported; multiply by a constant")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def relu(self):
        return relu(self)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None]) -> Tensor:
    needs = is_grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from None

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, -g)

    return _make(-a.data, (a,), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from None

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), backward)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _make(np.asarray(data), (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None

    def backward(g):
        _accumulate(a, g.reshape(a.shape))

    return _make(data, (a,), backward)


def getitem(a: Tensor, index) -> Tensor:
    data = a.data[index]

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, index, g)
            _accumulate(a, full)

    return _make(np.array(data), (a,), backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        data = np.stack([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"stack: shapes differ {shapes}") from None

    def backward(g):
        for i, t in enumerate(tensors):
            _accumulate(t, np.take(g, i, axis=axis))

    return _make(data, tensors, backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: shapes differ off-axis {shapes}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, bounds, axis=axis)):
            _accumulate(t, piece)

    return _make(data, tensors, backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        _accumulate(a, g * mask)

    return _make(a.data * mask, (a,), backward)


def dropout(a: Tensor, p: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; the identity when ``train`` is false or ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise PreconditionError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return a
    if rng is None:
        raise PreconditionError("dropout in train mode needs an explicit rng")
    keep = 1.0 - p
    mask = (rng.random(a.shape) < keep) / keep

    def backward(g):
        _accumulate(a, g * mask)

    return _make(a.data * mask, (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes of ``a`` broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree for {a.shape} and {b.shape}")
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(data, (a, b), backward)


def _expand_ellipsis(spec: str, operands: Sequence[np.ndarray]) -> tuple[list[str], str]:
    if "->" not in spec:
        raise ValueError("einsum needs an explicit '->' output")
    lhs, out = spec.replace(" ", "").split("->")
    subs = lhs.split(",")
    if len(subs) != len(operands):
        raise ShapeError(f"einsum: {len(subs)} subscripts for {len(operands)} operands")
    used = set(spec)
    spare = [c for c in string.ascii_letters if c not in used]
    n_ell = None
    for s, op in zip(subs, operands):
        if "..." in s:
            count = op.ndim - (len(s) - 3)
            if n_ell is not None and count != n_ell:
                raise ShapeError("einsum: ellipsis spans differ between operands")
            n_ell = count
    fill = "".join(spare[: n_ell or 0])
    subs = [s.replace("...", fill) for s in subs]
    out = out.replace("...", fill)
    for s in subs:
        if len(set(s)) != len(s):
            raise ValueError(f"einsum: repeated index within operand {s!r} is not supported")
    return subs, out


def einsum(spec: str, *operands: Tensor) -> Tensor:
    """Differentiable ``np.einsum`` with explicit output subscripts.

    Every index of every operand must appear in the output or in another
    operand; that keeps each input gradient expressible as one einsum.
    """
    tensors = [_as_tensor(t) for t in operands]
    arrays = [t.data for t in tensors]
    subs, out = _expand_ellipsis(spec, arrays)
    try:
        data = np.einsum(",".join(subs) + "->" + out, *arrays, optimize=True)
    except ValueError as exc:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"einsum {spec!r} on shapes {shapes}: {exc}") from None

    def backward(g):
        for i, t in enumerate(tensors):
            if not t.requires_grad:
                continue
            others = [arrays[j] for j in range(len(arrays)) if j != i]
            other_subs = [subs[j] for j in range(len(arrays)) if j != i]
            expr = ",".join([out] + other_subs) + "->" + subs[i]
            _accumulate(t, np.einsum(expr, g, *others, optimize=True))

    return _make(np.asarray(data), tensors, backward)


def unfold(x: Tensor, k: int) -> Tensor:
    """Sliding windows of ``k`` rows: ``[..., m, d] -> [..., m-k+1, k, d]``."""
    m = x.shape[-2]
    if m < k:
        raise PreconditionError(f"sequence length {m} is shorter than window {k}; pad the input first")
    length = m - k + 1
    windows = np.lib.stride_tricks.sliding_window_view(x.data, k, axis=-2)
    data = np.ascontiguousarray(np.swapaxes(windows, -1, -2))

    def backward(g):
        full = np.zeros_like(x.data)
        for t in range(k):
            full[..., t : t + length, :] += g[..., :, t, :]
        _accumulate(x, full)

    return _make(data, (x,), backward)


def conv1d(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Narrow convolution over rows: ``[..., m, d]`` with ``[F, k, d]`` -> ``[..., m-k+1, F]``.

    out[j, f] = bias[f] + sum_{i<k, c<d} kernels[f, i, c] * x[j+i, c]
    """
    if kernels.ndim != 3 or kernels.shape[2] != x.shape[-1]:
        raise ShapeError(f"conv1d: kernels {kernels.shape} do not match input {x.shape}")
    if bias.shape != (kernels.shape[0],):
        raise ShapeError(f"conv1d: bias {bias.shape} does not match kernels {kernels.shape}")
    windows = unfold(x, kernels.shape[1])
    return add(einsum("...ltc,ftc->...lf", windows, kernels), bias)


def positionwise_conv1d(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Convolution whose kernel varies per output position.

    ``x`` is ``[..., m, d]`` and ``kernels`` is ``[..., m-k+1, F, k, d]``.
    """
    if kernels.ndim < 4:
        raise ShapeError(f"positionwise_conv1d: kernels need shape [L, F, k, d], got {kernels.shape}")
    k = kernels.shape[-2]
    length = x.shape[-2] - k + 1
    if kernels.shape[-4] != length or kernels.shape[-1] != x.shape[-1]:
        raise ShapeError(
            f"positionwise_conv1d: kernels {kernels.shape} do not fit input {x.shape} "
            f"({length} window positions)"
        )
    windows = unfold(x, k)
    return add(einsum("...ltc,...lftc->...lf", windows, kernels), bias)


def max_pool_over_time(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Column-wise maximum over axis -2; ties go to the first row.

    ``mask`` (shape ``x.shape[:-1]``) marks rows that may be selected.
    """
    if x.shape[-2] < 1:
        raise PreconditionError("max_pool_over_time: empty time axis")
    values = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any(axis=-1).all():
            raise PreconditionError("max_pool_over_time: a sequence has no valid rows")
        values = np.where(mask[..., None], values, -np.inf)
    idx = np.argmax(values, axis=-2)
    data = np.take_along_axis(x.data, idx[..., None, :], axis=-2)[..., 0, :]

    def backward(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, idx[..., None, :], g[..., None, :], axis=-2)
        _accumulate(x, full)

    return _make(data, (x,), backward)


# ---------------------------------------------------------------------------
# probabilistic heads
# ---------------------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        _accumulate(x, s * (g - (g * s).sum(axis=axis, keepdims=True)))

    return _make(s, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - logz
    s = np.exp(out)

    def backward(g):
        _accumulate(x, g - s * g.sum(axis=axis, keepdims=True))

    return _make(out, (x,), backward)


def nll_loss(log_probs: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``[B, C]`` log-probabilities."""
    labels = np.asarray(labels, dtype=np.int64)
    if log_probs.ndim != 2 or labels.shape != (log_probs.shape[0],):
        raise ShapeError(f"nll_loss: log_probs {log_probs.shape} vs labels {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= log_probs.shape[1]:
        raise PreconditionError("nll_loss: label out of range")
    rows = np.arange(labels.shape[0])
    n = labels.shape[0]
    data = -log_probs.data[rows, labels].sum() / n

    def backward(g):
        full = np.zeros_like(log_probs.data)
        full[rows, labels] = -g / n
        _accumulate(log_probs, full)

    return _make(np.asarray(data), (log_probs,), backward)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    train: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Batch normalization over axis 0 of ``[B, F]``.

    In train mode the batch statistics are used and the running buffers are
    updated in place (unbiased variance, as is conventional). In eval mode the
    running buffers are used and nothing is mutated.
    """
    if x.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batch_norm: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    if train:
        n = x.shape[0]
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        unbiased = var * n / (n - 1) if n > 1 else var
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mu = running_mean
        var = running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    data = xhat * gamma.data + beta.data

    def backward(g):
        _accumulate(gamma, (g * xhat).sum(axis=0))
        _accumulate(beta, g.sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            if train:
                gx = inv_std * (gx - gx.mean(axis=0) - xhat * (gx * xhat).mean(axis=0))
            else:
                gx = gx * inv_std
            _accumulate(x, gx)

    return _make(data, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# similarity
# ---------------------------------------------------------------------------


def cosine_matrix(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise cosine similarity ``[..., n, d] x [..., m, d] -> [..., n, m]``.

    Pairs involving a zero-norm vector score 0 and pass no gradient.
    """
    if a.shape[-1] != b.shape[-1] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"cosine_matrix: {a.shape} vs {b.shape}")
    na = np.sqrt((a.data * a.data).sum(axis=-1))
    nb = np.sqrt((b.data * b.data).sum(axis=-1))
    dots = a.data @ np.swapaxes(b.data, -1, -2)
    denom = na[..., :, None] * nb[..., None, :]
    valid = denom > 0
    safe = np.where(valid, denom, 1.0)
    cos = np.where(valid, dots / safe, 0.0)

    def backward(g):
        w = np.where(valid, g / safe, 0.0)
        gc = g * cos
        if a.requires_grad:
            inv_na2 = np.where(na > 0, 1.0 / np.where(na > 0, na * na, 1.0), 0.0)
            ga = w @ b.data - gc.sum(axis=-1)[..., None] * a.data * inv_na2[..., None]
            _accumulate(a, ga)
        if b.requires_grad:
            inv_nb2 = np.where(nb > 0, 1.0 / np.where(nb > 0, nb * nb, 1.0), 0.0)
            gb = np.swapaxes(w, -1, -2) @ a.data - gc.sum(axis=-2)[..., None] * b.data * inv_nb2[..., None]
            _accumulate(b, gb)

    return _make(cos, (a, b), backward)


def cosine(u: Tensor, v: Tensor) -> Tensor:
    """Cosine similarity of two ``[d]`` vectors as a 0-d tensor; 0 if either is zero."""
    if u.ndim != 1 or u.shape != v.shape:
        raise ShapeError(f"cosine: expected two equal-length vectors, got {u.shape} and {v.shape}")
    return reshape(cosine_matrix(reshape(u, (1, -1)), reshape(v, (1, -1))), ())


# ---------------------------------------------------------------------------
# lookup and optimization
# ---------------------------------------------------------------------------


def take_rows(table: Tensor, ids, padding_idx: int | None = None) -> Tensor:
    """Embedding lookup ``table[ids]``; the ``padding_idx`` row never receives gradient."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range for a table of {table.shape[0]} rows")
    data = table.data[ids]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        if padding_idx is not None:
            full[padding_idx] = 0.0
        _accumulate(table, full)

    return _make(data, (table,), backward)


def sgd_step(params: Iterable[Tensor], lr: float) -> None:
    """Plain SGD: ``p <- p - lr * p.grad``, then clear the gradients."""
    params = list(params)
    for i, p in enumerate(params):
        if p.grad is None:
            label = p.name or f"#{i}"
            raise GraphError(f"parameter {label} has no gradient; call backward() first")
    for p in params:
        if lr != 0.0:
            p.data -= lr * p.grad
        p.grad = None
