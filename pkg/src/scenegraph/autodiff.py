"""A small reverse-mode differentiation core over float64 numpy arrays.

The tape is dynamic: every operation records its parents and a backward rule,
and :func:`backward` walks the recorded graph in reverse topological order.
Leaves (parameters and constants) accumulate gradients across calls; interior
nodes are reset on every call.
"""
from __future__ import annotations

import math
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np


class Value:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward: Callable | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Value{label}(shape={self.shape})"

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True).reshape(self.shape)
        else:
            self.grad += g

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_value(other)))

    def __rsub__(self, other):
        return add(as_value(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    @property
    def T(self):
        return transpose(self)


def as_value(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def _make(data, parents: Sequence[Value], backward: Callable) -> Value:
    req = any(p.requires_grad for p in parents)
    return Value(data, requires_grad=req, _parents=tuple(parents) if req else (),
                 _backward=backward if req else None)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Value, b: Value, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}") from None


# elementwise arithmetic

def add(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _check_broadcast(a, b, "add")

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))
    return _make(a.data + b.data, (a, b), bw)


def mul(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))
    return _make(a.data * b.data, (a, b), bw)


def neg(a: Value) -> Value:
    return _make(-a.data, (a,), lambda g: a._accumulate(-g))


def matmul(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    if a.data.ndim == 0 or b.data.ndim == 0 or a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul: shape mismatch {a.shape} vs {b.shape}")

    def bw(g):
        if a.requires_grad:
            if b.data.ndim == 1:
                a._accumulate(np.multiply.outer(g, b.data))
            else:
                a._accumulate(g @ b.data.T)
        if b.requires_grad:
            if a.data.ndim == 1:
                b._accumulate(np.multiply.outer(a.data, g))
            else:
                b._accumulate(a.data.T @ g)
    return _make(a.data @ b.data, (a, b), bw)


def transpose(a: Value) -> Value:
    return _make(a.data.T, (a,), lambda g: a._accumulate(g.T))


def reshape(a: Value, shape) -> Value:
    return _make(a.data.reshape(shape), (a,), lambda g: a._accumulate(g.reshape(a.shape)))


def linear(x: Value, W: Value, b: Value | None = None) -> Value:
    """``x @ W.T + b`` for ``W`` of shape [out, in]."""
    x, W = as_value(x), as_value(W)
    if W.data.ndim != 2 or x.shape[-1] != W.shape[1]:
        raise ValueError(f"linear: input shape {x.shape} incompatible with weight shape {W.shape}")
    out = matmul(x, transpose(W))
    if b is not None:
        b = as_value(b)
        if b.shape != (W.shape[0],):
            raise ValueError(f"linear: bias shape {b.shape} vs weight shape {W.shape}")
        out = add(out, b)
    return out


# nonlinearities

def relu(a: Value) -> Value:
    a = as_value(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: a._accumulate(g * mask))


def sigmoid(a: Value) -> Value:
    a = as_value(a)
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    e = np.exp(a.data[~pos])
    out[~pos] = e / (1.0 + e)
    return _make(out, (a,), lambda g: a._accumulate(g * out * (1.0 - out)))


def tanh(a: Value) -> Value:
    a = as_value(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: a._accumulate(g * (1.0 - out * out)))


# reductions and structure

def sum(a: Value, axis=None) -> Value:  # noqa: A001 - mirrors numpy naming
    a = as_value(a)
    out = a.data.sum(axis=axis)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))
    return _make(out, (a,), bw)


def mean(xs) -> Value:
    """Mean of a list of same-shaped values, or of all entries of one value."""
    if isinstance(xs, Value):
        return mul(sum(xs), 1.0 / max(xs.data.size, 1))
    xs = list(xs)
    if not xs:
        raise ValueError("mean of an empty list")
    total = xs[0]
    for x in xs[1:]:
        if x.shape != xs[0].shape:
            raise ValueError(f"mean: shape mismatch {xs[0].shape} vs {x.shape}")
        total = add(total, x)
    return mul(total, 1.0 / len(xs))


def concat(xs: Sequence[Value], axis: int = -1) -> Value:
    xs = [as_value(x) for x in xs]
    ref = xs[0].shape
    ax = axis % len(ref)
    for x in xs[1:]:
        if len(x.shape) != len(ref) or any(
                i != ax and m != n for i, (m, n) in enumerate(zip(ref, x.shape))):
            raise ValueError(f"concat: shape mismatch {ref} vs {x.shape}")
    sizes = np.cumsum([x.shape[ax] for x in xs])[:-1]

    def bw(g):
        for x, part in zip(xs, np.split(g, sizes, axis=ax)):
            if x.requires_grad:
                x._accumulate(part)
    return _make(np.concatenate([x.data for x in xs], axis=ax), xs, bw)


def index(a: Value, idx) -> Value:
    a = as_value(a)

    basic = all(isinstance(i, (int, slice, type(Ellipsis)))
                for i in (idx if isinstance(idx, tuple) else (idx,)))

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        a._accumulate(full)
    return _make(a.data[idx], (a,), bw)


def take_rows(a: Value, rows) -> Value:
    """Gather rows of a matrix (rows may repeat)."""
    return index(a, np.asarray(rows, dtype=np.int64))


def segment_sum(a: Value, segment_ids, n_segments: int) -> Value:
    """Sum rows of ``a`` into ``n_segments`` buckets given by ``segment_ids``."""
    ids = np.asarray(segment_ids, dtype=np.int64)
    out = np.zeros((n_segments,) + a.shape[1:])
    np.add.at(out, ids, a.data)
    return _make(out, (a,), lambda g: a._accumulate(g[ids]))


# losses

def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def softmax_cross_entropy(logits: Value, labels, weights=None) -> Value:
    """Mean ``-log softmax(logits)[label]`` over rows.

    ``logits`` may be a single vector with an integer label, or a matrix with
    one label per row. ``weights`` optionally reweights rows (the result is
    then ``sum(w * ce) / sum(w)``).
    """
    logits = as_value(logits)
    single = logits.data.ndim == 1
    z = logits.data[None] if single else logits.data
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.shape != (z.shape[0],):
        raise ValueError(f"cross entropy: {labels.shape[0]} labels for logits {logits.shape}")
    if np.any(labels < 0) or np.any(labels >= z.shape[1]):
        raise ValueError(f"cross entropy: label out of range [0, {z.shape[1]}): {labels}")
    w = np.ones(z.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64)
    norm = w.sum()
    if norm <= 0:
        raise ValueError("cross entropy: weights sum to zero")
    lsm = log_softmax(z)
    rows = np.arange(z.shape[0])
    loss = -(w * lsm[rows, labels]).sum() / norm

    def bw(g):
        grad = np.exp(lsm)
        grad[rows, labels] -= 1.0
        grad *= (w / norm)[:, None] * g
        logits._accumulate(grad[0] if single else grad)
    return _make(loss, (logits,), bw)


def smooth_l1(pred: Value, target) -> Value:
    """Elementwise Huber with unit knee, summed."""
    pred, target = as_value(pred), as_value(target)
    if pred.shape != target.shape:
        raise ValueError(f"smooth_l1: shape mismatch {pred.shape} vs {target.shape}")
    d = pred.data - target.data
    small = np.abs(d) < 1.0
    out = np.where(small, 0.5 * d * d, np.abs(d) - 0.5).sum()

    def bw(g):
        dg = np.where(small, d, np.sign(d)) * g
        if pred.requires_grad:
            pred._accumulate(dg)
        if target.requires_grad:
            target._accumulate(-dg)
    return _make(out, (pred, target), bw)


# backward and checking

def _topo_order(root: Value) -> list[Value]:
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


def backward(loss: Value):
    """Fill ``.grad`` of every leaf reachable from the scalar ``loss``."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    for node in order:
        if node._parents:
            node.grad = None
    loss._accumulate(np.ones(loss.shape))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def grad_check(f: Callable[[], Value], params: Iterable[Value], eps: float = 1e-3,
               floor: float = 1.0) -> dict:
    """Compare reverse-mode gradients of ``f()`` with central differences.

    Every coordinate of every parameter is perturbed. The relative error of a
    coordinate is ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``.
    With the default floor of 1 this is an absolute error for gradients below
    one in magnitude, where central differences carry O(eps^2) truncation
    error that a purely relative measure would amplify.
    """
    params = list(params)
    for p in params:
        if not p.requires_grad:
            raise ValueError(f"{p!r} does not require grad; its analytic gradient is undefined")
        p.zero_grad()
    backward(f())
    worst, worst_name, n_checked, worst_abs, worst_pure = 0.0, None, 0, 0.0, 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(f().data)
            flat[i] = orig - eps
            down = float(f().data)
            flat[i] = orig
            num = (up - down) / (2 * eps)
            a = analytic.reshape(-1)[i]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            n_checked += 1
            worst_abs = max(worst_abs, abs(a - num))
            scale = max(abs(a), abs(num))
            if scale > 0:
                worst_pure = max(worst_pure, abs(a - num) / scale)
            if err > worst:
                worst, worst_name = err, f"{p.name}[{i}]"
    return {"max_rel_error": worst, "max_abs_error": worst_abs, "max_unfloored_rel_error": worst_pure,
            "worst": worst_name,
            "n_checked": n_checked}


# parameters and optimizers

class ParamStore:
    """Registry of named trainable tensors."""

    def __init__(self):
        self._params: dict[str, Value] = {}

    def add(self, name: str, data) -> Value:
        if name in self._params:
            raise KeyError(f"parameter {name!r} registered twice")
        v = Value(np.array(data, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = v
        return v

    def __getitem__(self, name: str) -> Value:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def select(self, prefix: str | None = None, exclude: str | None = None) -> list[Value]:
        return [v for n, v in self._params.items()
                if (prefix is None or n.startswith(prefix))
                and (exclude is None or not n.startswith(exclude))]

    def zero_grad(self):
        for v in self._params.values():
            v.grad = None

    def n_scalars(self) -> int:
        return int(np.sum([v.data.size for v in self._params.values()]))

    def save(self, path):
        """Write ``<path>/params.bin`` (raw little-endian float64) and a text manifest."""
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        lines, offset = [], 0
        with open(path / "params.bin", "wb") as fh:
            for name, v in self._params.items():
                buf = v.data.astype("<f8").tobytes()
                fh.write(buf)
                shape = ",".join(str(s) for s in v.shape)
                lines.append(f"{name}\t{shape}\t{offset}")
                offset += len(buf)
        (path / "manifest.txt").write_text("\n".join(lines) + "\n")

    def load(self, path, strict: bool = True):
        path = Path(path)
        blob = (path / "params.bin").read_bytes()
        seen = set()
        for line in (path / "manifest.txt").read_text().splitlines():
            if not line.strip():
                continue
            name, shape, offset = line.split("\t")
            shape = tuple(int(s) for s in shape.split(",")) if shape else ()
            n = int(np.prod(shape, dtype=np.int64))
            offset = int(offset)
            if offset + 8 * n > len(blob):
                raise ValueError(f"checkpoint truncated at parameter {name!r}")
            arr = np.frombuffer(blob, dtype="<f8", count=n, offset=offset).reshape(shape)
            if name not in self._params:
                if strict:
                    raise KeyError(f"checkpoint parameter {name!r} not in store")
                continue
            if self._params[name].shape != shape:
                raise ValueError(f"parameter {name!r}: checkpoint shape {shape} "
                                 f"vs store shape {self._params[name].shape}")
            self._params[name].data = arr.astype(np.float64).copy()
            seen.add(name)
        missing = set(self._params) - seen
        if strict and missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)}")


def _check_finite(params: Sequence[Value]):
    for p in params:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"non-finite gradient in parameter {p.name!r}")


def global_grad_norm(params: Sequence[Value]) -> float:
    return math.sqrt(float(np.sum([np.sum(p.grad ** 2) for p in params if p.grad is not None])))


def sgd_step(params: Sequence[Value], lr: float, clip_norm: float | None = 10.0,
             weight_decay: float = 0.0) -> float:
    """Plain SGD with global gradient-norm clipping. Returns the pre-clip norm."""
    params = list(params)
    _check_finite(params)
    norm = global_grad_norm(params)
    scale = 1.0
    if clip_norm is not None and norm > clip_norm:
        scale = clip_norm / norm
    for p in params:
        if p.grad is None:
            continue
        step = scale * p.grad
        if weight_decay:
            step = step + weight_decay * p.data
        p.data -= lr * step
    return norm


class SGD:
    """SGD with optional heavy-ball momentum and global-norm clipping."""

    def __init__(self, params: Sequence[Value], lr: float = 0.01, momentum: float = 0.0,
                 clip_norm: float | None = 10.0, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr, self.momentum = lr, momentum
        self.clip_norm, self.weight_decay = clip_norm, weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float | None = None) -> float:
        lr = self.lr if lr is None else lr
        _check_finite(self.params)
        norm = global_grad_norm(self.params)
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / norm
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = scale * p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= lr * v
        return norm


class Adam:
    """Adam with per-parameter first and second moments (no weight decay)."""

    def __init__(self, params: Sequence[Value], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, clip_norm: float | None = None):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float | None = None):
        lr = self.lr if lr is None else lr
        _check_finite(self.params)
        scale = 1.0
        if self.clip_norm is not None:
            norm = global_grad_norm(self.params)
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = scale * p.grad
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
