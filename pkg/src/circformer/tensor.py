"""Minimal dense tensors with reverse-mode differentiation.

Every op records its parents plus a closure mapping the output gradient to
parent gradients.  ``backward`` walks the graph in reverse topological order.
Only leaves flagged ``requires_grad`` keep their ``.grad``; intermediate
gradients live in a scratch dict for the duration of one backward pass.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

MAX_RANK = 3

_state = {"dtype": np.float32, "debug": False}
_flop_counters: list["FlopCounter"] = []


class GraphError(RuntimeError):
    pass


def default_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for newly created tensors."""
    prev = _state["dtype"]
    _state["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _state["dtype"] = prev


def set_debug(flag: bool) -> None:
    """Check every forward result for NaN/Inf when enabled."""
    _state["debug"] = bool(flag)


class FlopCounter:
    """Accumulates approximate floating-point operation counts."""

    def __init__(self):
        self.total = 0
        self.by_op: dict[str, int] = {}

    def add(self, op: str, n: int) -> None:
        self.total += int(n)
        self.by_op[op] = self.by_op.get(op, 0) + int(n)


@contextlib.contextmanager
def count_flops():
    counter = FlopCounter()
    _flop_counters.append(counter)
    try:
        yield counter
    finally:
        _flop_counters.remove(counter)


def _flops(op: str, n) -> None:
    for c in _flop_counters:
        c.add(op, n)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward",
                 "_consumed", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None,
                 _parents: tuple = (), _backward=None, op: str = "leaf"):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or _state["dtype"])
        if arr.ndim > MAX_RANK:
            raise ValueError(f"tensor rank {arr.ndim} exceeds {MAX_RANK}")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self._consumed = False
        self.op = op

    shape = property(lambda self: self.data.shape)
    ndim = property(lambda self: self.data.ndim)
    size = property(lambda self: self.data.size)
    dtype = property(lambda self: self.data.dtype)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() needs a single element")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, idx): return index(self, idx)


class Parameter(Tensor):
    """A named trainable tensor carrying its own optimizer state."""

    __slots__ = ("name", "m", "v", "step")

    def __init__(self, name: str, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.m = None
        self.v = None
        self.step = 0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs_grad(*ts: Tensor) -> bool:
    return any(t.requires_grad for t in ts)


def _make(data: np.ndarray, parents: tuple, backward_fn, op: str) -> Tensor:
    if _state["debug"] and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    req = _needs_grad(*parents)
    out = Tensor(data, requires_grad=req, dtype=data.dtype,
                 _parents=parents if req else (),
                 _backward=backward_fn if req else None, op=op)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    _flops("add", out.size)
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape),
                                         _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    _flops("sub", out.size)
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape),
                                         _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    _flops("mul", out.size)
    return _make(out, (a, b), lambda g: (_unbroadcast(g * b.data, a.shape),
                                         _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    _flops("div", out.size)

    def back(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)
    return _make(out, (a, b), back, "div")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    _flops("exp", out.size)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    out = np.log(x.data)
    _flops("log", out.size)
    return _make(out, (x,), lambda g: (g / x.data,), "log")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype)
    _flops("relu", out.size)
    return _make(out, (x,), lambda g: (g * mask,), "relu")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    _flops("tanh", out.size)
    return _make(out, (x,), lambda g: (g * (1 - out * out),), "tanh")


def gelu(x: Tensor) -> Tensor:
    # tanh approximation
    c = math.sqrt(2 / math.pi)
    u = c * (x.data + 0.044715 * x.data ** 3)
    t = np.tanh(u)
    out = 0.5 * x.data * (1 + t)
    _flops("gelu", out.size * 8)

    def back(g):
        du = c * (1 + 3 * 0.044715 * x.data ** 2)
        return (g * (0.5 * (1 + t) + 0.5 * x.data * (1 - t * t) * du),)
    return _make(out.astype(x.dtype), (x,), back, "gelu")


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid_np(x.data)
    _flops("sigmoid", out.size)
    return _make(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype)


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "relu": relu, "gelu": gelu, "tanh": tanh,
}


# ---------------------------------------------------------------- reductions

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(x.data, axis=axis, keepdims=keepdims)
    _flops("sum", x.size)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),)
    return _make(np.asarray(out), (x,), back, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------- shape ops

def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    out = np.swapaxes(x.data, -1, -2)
    return _make(out, (x,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def index(x: Tensor, idx) -> Tensor:
    out = x.data[idx]

    def back(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g) if _is_fancy(idx) else full.__setitem__(idx, g)
        return (full,)
    return _make(np.asarray(out), (x,), back, "index")


def _is_fancy(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def take_rows(x: Tensor, rows: Sequence[int]) -> Tensor:
    """Select entries along axis 0 (batch gather)."""
    rows = np.asarray(rows, dtype=np.intp)
    out = x.data[rows]

    def back(g):
        full = np.zeros_like(x.data)
        np.add.at(full, rows, g)
        return (full,)
    return _make(out, (x,), back, "take_rows")


def assemble_rows(parts: Sequence[Tensor], rows: Sequence[Sequence[int]],
                  n: int) -> Tensor:
    """Inverse of ``take_rows``: scatter each part back to its batch rows.

    Every output row must be covered exactly once.
    """
    rows = [np.asarray(r, dtype=np.intp) for r in rows]
    covered = np.concatenate(rows) if rows else np.empty(0, np.intp)
    if len(covered) != n or len(np.unique(covered)) != n:
        raise ValueError("assemble_rows: rows must partition the batch")
    tail = parts[0].shape[1:]
    out = np.empty((n,) + tail, dtype=parts[0].dtype)
    for p, r in zip(parts, rows):
        out[r] = p.data
    return _make(out, tuple(parts), lambda g: tuple(g[r] for r in rows),
                 "assemble_rows")


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def back(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(parts)))
    return _make(out, tuple(parts), back, "concat")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    _flops("matmul", 2 * out.size * a.shape[-1])

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        _flops("matmul", 4 * out.size * a.shape[-1])
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return _make(out, (a, b), back, "matmul")


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           dilation: int = 1) -> Tensor:
    """'Same' zero-padded 1D convolution over [B, L, Cin] with weight [K, Cin, Cout]."""
    if x.ndim != 3 or weight.ndim != 3 or x.shape[2] != weight.shape[1]:
        raise ValueError(f"conv1d shape mismatch: input {x.shape}, weight {weight.shape}")
    k, cin, cout = weight.shape
    if k % 2 == 0:
        raise ValueError(f"conv1d kernel size must be odd, got {k}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv1d bias shape {bias.shape} != ({cout},)")
    b_, length, _ = x.shape
    pad = (k // 2) * dilation
    xp = np.pad(x.data, ((0, 0), (pad, pad), (0, 0)))
    # im2col: cols[b, l, k*cin + c] = xp[b, l + k*dilation, c]
    cols = np.concatenate([xp[:, j * dilation:j * dilation + length] for j in range(k)],
                          axis=2)
    w2 = weight.data.reshape(k * cin, cout)
    out = cols @ w2
    if bias is not None:
        out += bias.data
    _flops("conv1d", 2 * b_ * length * k * cin * cout)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        gw = (cols.reshape(-1, k * cin).T @ g.reshape(-1, cout)).reshape(k, cin, cout)
        gcols = g @ w2.T
        gxp = np.zeros_like(xp)
        for j in range(k):
            gxp[:, j * dilation:j * dilation + length] += gcols[:, :, j * cin:(j + 1) * cin]
        gx = gxp[:, pad:pad + length]
        _flops("conv1d", 4 * b_ * length * k * cin * cout)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 1))
    return _make(out, parents, back, "conv1d")


def layer_norm(x: Tensor, gain: Tensor, offset: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    d = x.shape[-1]
    if gain.shape != (d,) or offset.shape != (d,):
        raise ValueError(f"layer_norm: gain/offset must have shape ({d},)")
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + offset.data
    _flops("layer_norm", 8 * x.size)

    def back(g):
        gxhat = g * gain.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(x.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)
    return _make(out.astype(x.dtype), (x, gain, offset), back, "layer_norm")


def global_avg_pool(x: Tensor) -> Tensor:
    """[B, L, D] -> [B, D] mean over the length axis."""
    if x.ndim != 3 or x.shape[1] < 1:
        raise ValueError(f"global_avg_pool expects [B, L>=1, D], got {x.shape}")
    length = x.shape[1]
    out = x.data.mean(axis=1)
    _flops("pool", x.size)
    return _make(out, (x,), lambda g: (np.broadcast_to(g[:, None, :] / length, x.shape)
                                       .astype(x.dtype, copy=True),), "global_avg_pool")


def weighted_bce_with_logits(logits: Tensor, labels, pos_weight: float = 1.0) -> Tensor:
    """Mean of -[w*y*log s(z) + (1-y)*log(1-s(z))] in log-sum-exp form."""
    y = np.asarray(labels, dtype=logits.dtype)
    if y.shape != logits.shape:
        raise ValueError(f"labels shape {y.shape} != logits shape {logits.shape}")
    z = logits.data
    # -log s(z) = softplus(-z), -log(1 - s(z)) = softplus(z)
    sp_neg = np.logaddexp(0, -z)
    sp_pos = np.logaddexp(0, z)
    per = pos_weight * y * sp_neg + (1 - y) * sp_pos
    n = z.size
    out = np.asarray(per.mean(), dtype=logits.dtype)
    _flops("bce", 6 * n)

    def back(g):
        s = _sigmoid_np(z)
        return (g * (pos_weight * y * (s - 1) + (1 - y) * s) / n,)
    return _make(out, (logits,), back, "bce")


# ---------------------------------------------------------------- autodiff

def _topo(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every reachable leaf that requires grad."""
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("graph already back-propagated; rebuild the forward pass")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor requiring grad")
    loss._consumed = True
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def finite_diff_check(fn: Callable[..., Tensor], point, step: float = 1e-5) -> float:
    """Worst relative error between backward() and central differences.

    ``fn`` maps one tensor (or a list of tensors when ``point`` is a list) to a
    scalar tensor.  Runs in float64.
    """
    multi = isinstance(point, (list, tuple))
    points = [np.array(p, dtype=np.float64) for p in (point if multi else [point])]
    with precision(np.float64):
        leaves = [Tensor(p, requires_grad=True) for p in points]
        y = fn(leaves if multi else leaves[0])
        if not np.all(np.isfinite(y.data)):
            raise FloatingPointError("fn value is not finite")
        if y.requires_grad:
            backward(y)
        # a constant fn never reaches the leaves: analytic gradient is zero
        analytic = [np.zeros_like(p) if leaf.grad is None else leaf.grad
                    for p, leaf in zip(points, leaves)]

        def evaluate(arrs):
            val = fn([Tensor(a) for a in arrs] if multi else Tensor(arrs[0])).data
            if not np.all(np.isfinite(val)):
                raise FloatingPointError("fn value is not finite at a perturbed point")
            return float(val.reshape(-1)[0])

        worst = 0.0
        for i, p in enumerate(points):
            flat = p.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + step
                fp = evaluate(points)
                flat[j] = orig - step
                fm = evaluate(points)
                flat[j] = orig
                num = (fp - fm) / (2 * step)
                ana = float(analytic[i].reshape(-1)[j])
                err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
                worst = max(worst, err)
    return worst


# ---------------------------------------------------------------- optimizer

def adam_step(params: Sequence[Parameter], grads: Sequence[np.ndarray | None] | None = None,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """Bias-corrected Adam update in place.  Parameters with no gradient are skipped."""
    if grads is None:
        grads = [p.grad for p in params]
    for p, g in zip(params, grads):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"grad shape {g.shape} != param {p.name} shape {p.shape}")
        if p.m is None:
            p.m = np.zeros_like(p.data)
            p.v = np.zeros_like(p.data)
        p.step += 1
        p.m *= beta1
        p.m += (1 - beta1) * g
        p.v *= beta2
        p.v += (1 - beta2) * g * g
        mhat = p.m / (1 - beta1 ** p.step)
        vhat = p.v / (1 - beta2 ** p.step)
        p.data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.dtype)


class Adam:
    def __init__(self, params: Sequence[Parameter], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps

    def step(self) -> None:
        adam_step(self.params, lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps)

    def zero_grad(self) -> None:
        zero_grad(self.params)


def grad_global_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(np.square(p.grad, dtype=np.float64)))
    return math.sqrt(total)


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    norm = grad_global_norm(params)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm
