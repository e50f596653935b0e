"""Reverse-mode automatic differentiation over dense float64 arrays.

Small tape-based core: every operation computes its value eagerly and
records vector-Jacobian closures on the result node. backward() on a
scalar loss accumulates exact gradients into every reachable Param.
Includes the layers the predictors need (linear, fully connected, 1-d
convolution over the time axis, recurrent cell), numerically stable
losses measured in bits, SGD and Adam, and a central-difference gradient
checker.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

LN2 = math.log(2.0)


class ShapeMismatch(Exception):
    def __init__(self, op: str, a, b):
        super().__init__(f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}")


class GraphReuse(Exception):
    def __init__(self):
        super().__init__("backward already ran on this graph; run a fresh forward")


class Tensor:
    """One node of the computation graph. Leaves have no parents."""

    __slots__ = ("value", "grad", "_parents", "_vjps", "_spent", "name")

    def __init__(self, value, parents=(), vjps=(), name: str = ""):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self._parents = tuple(parents)
        self._vjps = tuple(vjps)
        self._spent = False
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), mul(self, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def tanh(self):
        return tanh(self)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 or isinstance(shape[0], int) else shape[0])


class Param(Tensor):
    """A trainable leaf; grad persists and accumulates until an optimizer
    step zeroes it."""

    def __init__(self, value, name: str = ""):
        super().__init__(value, name=name)
        self.grad = np.zeros_like(self.value)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to the shape it was broadcast from."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        value = a.value + b.value
    except ValueError:
        raise ShapeMismatch("add", a.shape, b.shape)
    return Tensor(value, (a, b),
                  (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        value = a.value * b.value
    except ValueError:
        raise ShapeMismatch("mul", a.shape, b.shape)
    av, bv = a.value, b.value
    return Tensor(value, (a, b),
                  (lambda g: _unbroadcast(g * bv, a.shape),
                   lambda g: _unbroadcast(g * av, b.shape)))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim == 1:
        out = matmul(reshape(a, (1, a.shape[0])), b)
        return reshape(out, out.shape[:-2] + (out.shape[-1],))
    if b.ndim == 1:
        out = matmul(a, reshape(b, (b.shape[0], 1)))
        return reshape(out, out.shape[:-1])
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch("matmul", a.shape, b.shape)
    av, bv = a.value, b.value
    value = av @ bv

    def ga(g):
        return _unbroadcast(g @ np.swapaxes(bv, -1, -2), a.shape)

    def gb(g):
        return _unbroadcast(np.swapaxes(av, -1, -2) @ g, b.shape)

    return Tensor(value, (a, b), (ga, gb))


def tanh(t) -> Tensor:
    t = _as_tensor(t)
    y = np.tanh(t.value)
    return Tensor(y, (t,), (lambda g: g * (1.0 - y * y),))


def reduce_sum(t, axis=None, keepdims=False) -> Tensor:
    t = _as_tensor(t)
    value = t.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, t.shape).copy()

    return Tensor(value, (t,), (vjp,))


def reduce_mean(t, axis=None, keepdims=False) -> Tensor:
    t = _as_tensor(t)
    count = t.value.size if axis is None else t.shape[axis]
    return mul(reduce_sum(t, axis, keepdims), 1.0 / count)


def reshape(t, shape) -> Tensor:
    t = _as_tensor(t)
    old = t.shape
    return Tensor(t.value.reshape(shape), (t,), (lambda g: g.reshape(old),))


def take(t, key) -> Tensor:
    t = _as_tensor(t)
    value = t.value[key]

    def vjp(g):
        out = np.zeros(t.shape)
        np.add.at(out, key, g)
        return out

    return Tensor(value, (t,), (vjp,))


def concat(tensors, axis=-1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    value = np.concatenate([t.value for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        def vjp(g):
            sl = [slice(None)] * g.ndim
            sl[axis if axis >= 0 else g.ndim + axis] = slice(offsets[i], offsets[i + 1])
            return g[tuple(sl)]
        return vjp

    return Tensor(value, tensors, tuple(make_vjp(i) for i in range(len(tensors))))


def stack(tensors, axis=0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    value = np.stack([t.value for t in tensors], axis=axis)

    def make_vjp(i):
        return lambda g: np.take(g, i, axis=axis)

    return Tensor(value, tensors, tuple(make_vjp(i) for i in range(len(tensors))))


def ordered_sum(t, axis: int) -> Tensor:
    """Sum along an axis with the addends sorted first, so any permutation
    of slices along that axis produces a bit-identical result. The gradient
    is the same broadcast as a plain sum."""
    t = _as_tensor(t)
    value = np.sort(t.value, axis=axis).sum(axis=axis)

    def vjp(g):
        return np.broadcast_to(np.expand_dims(g, axis), t.shape).copy()

    return Tensor(value, (t,), (vjp,))


def linear(x, W, b=None) -> Tensor:
    """x @ W (+ b): the log-linear layer."""
    y = matmul(x, W)
    return y if b is None else add(y, b)


def fc(x, W, b) -> Tensor:
    """Fully connected layer with the tanh activation."""
    return tanh(linear(x, W, b))


def rnn_cell(h_prev, x, W_h, W_x, b) -> Tensor:
    """One recurrence step: tanh(h_prev @ W_h + x @ W_x + b)."""
    return tanh(add(add(matmul(h_prev, W_h), matmul(x, W_x)), b))


def conv1d(x, kernel) -> Tensor:
    """Width-K 1-d convolution over the second-to-last axis.

    x: (..., T, C), kernel: (K, C, O) -> (..., T, O). Zero padded to the
    same length, window centered with offset (K-1)//2, so a kernel
    [k0, k1, k2] yields y[t] = k0·x[t-1] + k1·x[t] + k2·x[t+1].
    """
    x = _as_tensor(x)
    kernel = _as_tensor(kernel)
    if x.ndim < 2 or kernel.ndim != 3 or x.shape[-1] != kernel.shape[1]:
        raise ShapeMismatch("conv1d", x.shape, kernel.shape)
    K = kernel.shape[0]
    T = x.shape[-2]
    off = (K - 1) // 2
    zpre = Tensor(np.zeros(x.shape[:-2] + (off, x.shape[-1])))
    zpost = Tensor(np.zeros(x.shape[:-2] + (K - 1 - off, x.shape[-1])))
    xp = concat([zpre, x, zpost], axis=-2)
    terms = [matmul(take(xp, (Ellipsis, slice(j, j + T), slice(None))), take(kernel, j))
             for j in range(K)]
    out = terms[0]
    for t in terms[1:]:
        out = add(out, t)
    return out


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid_bce(logits, targets, reduction: str = "sum") -> Tensor:
    """Bernoulli cross-entropy in bits, stable for any finite logit."""
    logits = _as_tensor(logits)
    t = np.asarray(targets, dtype=np.float64)
    z = logits.value
    nats = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    bits = nats / LN2
    dz = (_sigmoid(z) - t) / LN2
    if reduction == "sum":
        return Tensor(bits.sum(), (logits,), (lambda g: g * dz,))
    if reduction == "none":
        return Tensor(bits, (logits,), (lambda g: g * dz,))
    raise ValueError(f"unknown reduction {reduction!r}")


def softmax_ce(logits, target_index, reduction: str = "sum") -> Tensor:
    """Categorical cross-entropy in bits over the last axis."""
    logits = _as_tensor(logits)
    idx = np.asarray(target_index)
    z = logits.value
    zmax = z.max(axis=-1, keepdims=True)
    ez = np.exp(z - zmax)
    sez = ez.sum(axis=-1, keepdims=True)
    logp = (z - zmax) - np.log(sez)
    picked = np.take_along_axis(logp, idx[..., None], axis=-1)[..., 0]
    bits = -picked / LN2
    probs = ez / sez
    onehot = np.zeros_like(z)
    np.put_along_axis(onehot, idx[..., None], 1.0, axis=-1)
    dz = (probs - onehot) / LN2
    if reduction == "sum":
        return Tensor(bits.sum(), (logits,), (lambda g: g * dz,))
    if reduction == "none":
        return Tensor(bits, (logits,), (lambda g: g[..., None] * dz,))
    raise ValueError(f"unknown reduction {reduction!r}")


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable node's grad."""
    if loss._spent:
        raise GraphReuse()
    if loss.value.ndim != 0:
        raise ValueError("backward requires a scalar loss")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_ = [(loss, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack_.append((p, False))
    loss._spent = True
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Param):
            node.grad += g
        elif not node._parents:
            node.grad = g if node.grad is None else node.grad + g
        for parent, vjp in zip(node._parents, node._vjps):
            pg = vjp(g)
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg


def zero_grads(params) -> None:
    for p in params:
        p.grad = np.zeros_like(p.value)


def clip_gradients(params, max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad * p.grad).sum()) for p in params))
    if total > max_norm > 0:
        scale = max_norm / total
        for p in params:
            p.grad *= scale
    return total


class Optimizer:
    def __init__(self, params, lr: float, clip: float | None = None):
        self.params = list(params)
        self.lr = lr
        self.clip = clip

    def step(self) -> None:
        if self.clip:
            clip_gradients(self.params, self.clip)
        self._update()
        zero_grads(self.params)

    def _update(self) -> None:
        raise NotImplementedError


class SGD(Optimizer):
    def _update(self) -> None:
        for p in self.params:
            p.value -= self.lr * p.grad


class Adam(Optimizer):
    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, clip: float | None = None):
        super().__init__(params, lr, clip)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def _update(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            self.m[i] = b1 * self.m[i] + (1 - b1) * p.grad
            self.v[i] = b2 * self.v[i] + (1 - b2) * p.grad * p.grad
            mhat = self.m[i] / (1 - b1 ** self.t)
            vhat = self.v[i] / (1 - b2 ** self.t)
            p.value -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def uniform_init(rng: np.random.Generator, shape: tuple, fan_in: int | None = None) -> np.ndarray:
    """uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)); fan_in defaults to the
    product of all but the last axis."""
    if fan_in is None:
        fan_in = int(np.prod(shape[:-1])) if len(shape) > 1 else shape[0]
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, shape)


@dataclass
class GradCheckReport:
    tolerance: float
    per_param: dict = field(default_factory=dict)  # name -> max relative error

    @property
    def max_rel_err(self) -> float:
        return max(self.per_param.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance

    def __str__(self):
        lines = [f"gradient check (tolerance {self.tolerance:g}):"]
        for name, err in sorted(self.per_param.items(), key=lambda kv: -kv[1]):
            mark = "ok " if err <= self.tolerance else "FAIL"
            lines.append(f"  {mark} {name:30s} {err:.3e}")
        lines.append(f"  overall {'PASS' if self.passed else 'FAIL'} "
                     f"(max {self.max_rel_err:.3e})")
        return "\n".join(lines)


def grad_check(forward, params, tolerance: float = 1e-4, h: float = 1e-5,
               atol: float = 1e-7, max_entries: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    forward() must rebuild the graph and return the scalar loss. Entries
    where both gradients are below atol are treated as matching (relative
    error is meaningless at zero).
    """
    params = list(params)
    zero_grads(params)
    backward(forward())
    analytic = {id(p): p.grad.copy() for p in params}
    report = GradCheckReport(tolerance)
    rng = rng or np.random.default_rng(0)
    for pi, p in enumerate(params):
        flat = p.value.reshape(-1)
        idxs = range(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idxs = sorted(rng.choice(flat.size, size=max_entries, replace=False))
        worst = 0.0
        a_flat = analytic[id(p)].reshape(-1)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(forward().value)
            flat[i] = orig - h
            f_minus = float(forward().value)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = a_flat[i]
            denom = max(abs(a), abs(numeric))
            if denom < atol:
                continue
            worst = max(worst, abs(a - numeric) / denom)
        report.per_param[p.name or f"param{pi}"] = worst
    zero_grads(params)
    return report
