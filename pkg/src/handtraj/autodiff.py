"""Reverse-mode tape autodiff on dense numpy arrays.

Design: eager execution under an explicit `Tape` context. Every op computes its
numpy result immediately and, if a tape is active and any input requires
gradients, records the output tensor together with closures that map the
output cotangent to input cotangents. `Tape.backward` walks the recorded
tensors in reverse execution order (a valid topological order by
construction) and accumulates `.grad` on leaf tensors.

Outside a tape context the same ops run as plain numpy compute wrapped in
`Tensor`; that is the inference fast path.

A tape is single-use: calling backward twice on the same tape raises.
Gradients accumulate across backward calls on *different* tapes, so callers
must `zero_grad` between optimisation steps.
"""

from __future__ import annotations

import numpy as np

_TAPE_STACK: list["Tape"] = []


class Tensor:
    """A numpy array plus gradient bookkeeping. Cheap wrapper, no copies."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjps")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        if not isinstance(data, np.ndarray):
            data = np.asarray(data, dtype=np.float64)
        self.data = data
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._vjps: tuple = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def is_leaf(self) -> bool:
        return not self._parents

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return pow_const(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)


class Tape:
    """Ordered record of tensors produced while the tape is active."""

    def __init__(self):
        self._nodes: list[Tensor] = []
        self._spent = False

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def backward(self, output: Tensor, seed=None):
        """Accumulate d(output)/d(leaf) into each leaf's .grad.

        `seed` is the cotangent of `output`; defaults to ones. Its shape must
        match the output shape exactly.
        """
        if self._spent:
            raise RuntimeError("tape already consumed by a previous backward()")
        self._spent = True
        if seed is None:
            seed = np.ones_like(output.data)
        else:
            seed = np.asarray(seed, dtype=output.data.dtype)
            if seed.shape != output.data.shape:
                raise ValueError(
                    f"seed shape {seed.shape} does not match output shape {output.data.shape}"
                )
        cotangents: dict[int, np.ndarray] = {id(output): seed}
        if output.is_leaf():
            if output.requires_grad:
                _accumulate(output, seed)
            return
        for node in reversed(self._nodes):
            g = cotangents.pop(id(node), None)
            if g is None:
                continue
            for parent, vjp in zip(node._parents, node._vjps):
                if vjp is None:
                    continue
                pg = vjp(g)
                if parent.is_leaf():
                    if parent.requires_grad:
                        _accumulate(parent, pg)
                else:
                    key = id(parent)
                    if key in cotangents:
                        cotangents[key] = cotangents[key] + pg
                    else:
                        cotangents[key] = pg


def _accumulate(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def zero_grad(params):
    for p in params.values() if isinstance(params, dict) else params:
        p.grad = None


def astensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _track(out_data: np.ndarray, parents: tuple, vjps: tuple) -> Tensor:
    """Wrap an op result; record on the active tape when gradients are needed."""
    out = Tensor(out_data)
    if _TAPE_STACK:
        needed = tuple(p.requires_grad or not p.is_leaf() for p in parents)
        if any(needed):
            out.requires_grad = True
            out._parents = parents
            out._vjps = tuple(v if need else None for v, need in zip(vjps, needed))
            _TAPE_STACK[-1]._nodes.append(out)
    return out


def apply_custom(out_data: np.ndarray, parents, vjps) -> Tensor:
    """Register an externally computed op (custom primitive) on the tape."""
    return _track(out_data, tuple(astensor(p) for p in parents), tuple(vjps))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a cotangent down to `shape`, reversing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b):
    a, b = astensor(a), astensor(b)
    out = a.data + b.data
    return _track(
        out,
        (a, b),
        (lambda g: _unbroadcast(g, a.data.shape), lambda g: _unbroadcast(g, b.data.shape)),
    )


def sub(a, b):
    a, b = astensor(a), astensor(b)
    out = a.data - b.data
    return _track(
        out,
        (a, b),
        (lambda g: _unbroadcast(g, a.data.shape), lambda g: _unbroadcast(-g, b.data.shape)),
    )


def mul(a, b):
    a, b = astensor(a), astensor(b)
    out = a.data * b.data
    return _track(
        out,
        (a, b),
        (
            lambda g: _unbroadcast(g * b.data, a.data.shape),
            lambda g: _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def div(a, b):
    a, b = astensor(a), astensor(b)
    out = a.data / b.data
    return _track(
        out,
        (a, b),
        (
            lambda g: _unbroadcast(g / b.data, a.data.shape),
            lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        ),
    )


def neg(a):
    a = astensor(a)
    return _track(-a.data, (a,), (lambda g: -g,))


def exp(a):
    a = astensor(a)
    out = np.exp(a.data)
    return _track(out, (a,), (lambda g: g * out,))


def expm1(a):
    a = astensor(a)
    out = np.expm1(a.data)
    return _track(out, (a,), (lambda g: g * (out + 1.0),))


def log(a):
    a = astensor(a)
    return _track(np.log(a.data), (a,), (lambda g: g / a.data,))


def sqrt(a):
    a = astensor(a)
    out = np.sqrt(a.data)
    return _track(out, (a,), (lambda g: g * (0.5 / out),))


def pow_const(a, p: float):
    a = astensor(a)
    out = a.data**p
    return _track(out, (a,), (lambda g: g * p * a.data ** (p - 1),))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # tanh identity keeps it stable for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a):
    a = astensor(a)
    out = _sigmoid_np(a.data)
    return _track(out, (a,), (lambda g: g * out * (1.0 - out),))


def softplus(a):
    a = astensor(a)
    out = np.logaddexp(0.0, a.data)
    return _track(out, (a,), (lambda g: g * _sigmoid_np(a.data),))


def silu(a):
    a = astensor(a)
    s = _sigmoid_np(a.data)
    out = a.data * s
    return _track(out, (a,), (lambda g: g * (s + a.data * s * (1.0 - s)),))


def tanh(a):
    a = astensor(a)
    out = np.tanh(a.data)
    return _track(out, (a,), (lambda g: g * (1.0 - out * out),))


def where(cond, a, b):
    """Piecewise select with a constant (non-differentiable) boolean mask."""
    cond = np.asarray(cond, dtype=bool)
    a, b = astensor(a), astensor(b)
    out = np.where(cond, a.data, b.data)
    return _track(
        out,
        (a, b),
        (
            lambda g: _unbroadcast(np.where(cond, g, 0.0), a.data.shape),
            lambda g: _unbroadcast(np.where(cond, 0.0, g), b.data.shape),
        ),
    )


# ---------------------------------------------------------------------------
# reductions and structure


def sum_(a, axis=None, keepdims: bool = False):
    a = astensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.data.shape).copy() if np.ndim(g) == 0 else np.full(a.data.shape, g)
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        return np.broadcast_to(gg, a.data.shape).copy()

    return _track(out, (a,), (vjp,))


def mean(a, axis=None, keepdims: bool = False):
    a = astensor(a)
    if axis is None:
        n = a.data.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.data.shape[i] for i in axis]))
    else:
        n = a.data.shape[axis]
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def matmul(a, b):
    a, b = astensor(a), astensor(b)
    ad, bd = a.data, b.data
    if ad.ndim == 0 or bd.ndim == 0:
        raise ValueError("matmul requires array operands, got a scalar")
    try:
        out = ad @ bd
    except ValueError as e:
        raise ValueError(f"matmul shape mismatch: {ad.shape} @ {bd.shape}") from e

    def vjp_a(g):
        if bd.ndim == 1:
            ga = np.expand_dims(g, -1) * bd  # (..., m, k)
        else:
            ga = g @ np.swapaxes(bd, -1, -2)
        return _unbroadcast(ga, ad.shape)

    def vjp_b(g):
        if ad.ndim == 1:
            gb = np.expand_dims(ad, -1) * np.expand_dims(g, -2) if bd.ndim > 1 else ad * g
            return _unbroadcast(gb, bd.shape)
        if bd.ndim == 1:
            gb = np.swapaxes(ad, -1, -2) @ np.expand_dims(g, -1)
            return _unbroadcast(gb[..., 0], bd.shape)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(gb, bd.shape)

    return _track(out, (a, b), (vjp_a, vjp_b))


def concat(parts, axis: int = -1):
    parts = [astensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g):
            sl = [slice(None)] * g.ndim
            sl[axis if axis >= 0 else g.ndim + axis] = slice(lo, hi)
            return g[tuple(sl)]

        return vjp

    return _track(out, tuple(parts), tuple(make_vjp(i) for i in range(len(parts))))


def _basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice, type(None), type(Ellipsis))) for i in items)


def getitem(a, idx):
    a = astensor(a)
    out = a.data[idx]

    def vjp(g):
        full = np.zeros_like(a.data)
        if _basic_index(idx):
            full[idx] += g  # views cannot alias, += is safe
        else:
            np.add.at(full, idx, g)  # fancy indices may repeat
        return full

    return _track(out, (a,), (vjp,))


def reshape(a, shape):
    a = astensor(a)
    out = a.data.reshape(shape)
    return _track(out, (a,), (lambda g: g.reshape(a.data.shape),))


def broadcast_to(a, shape):
    a = astensor(a)
    out = np.broadcast_to(a.data, shape).copy()
    return _track(out, (a,), (lambda g: _unbroadcast(g, a.data.shape),))


def linear(x, w, b=None):
    """x @ w (+ b). Weights laid out (fan_in, fan_out)."""
    y = matmul(x, w)
    return y if b is None else add(y, b)


# ---------------------------------------------------------------------------
# initialisation


def init_linear(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=np.float64) -> np.ndarray:
    """Fan-in scaled uniform, U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    k = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-k, k, size=(fan_in, fan_out)).astype(dtype)


def param(data, dtype=np.float64) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


# ---------------------------------------------------------------------------
# AdamW (decoupled weight decay), bias-corrected


def adamw_step(p: np.ndarray, g: np.ndarray, m: np.ndarray, v: np.ndarray, t: int,
               lr: float, beta1: float = 0.9, beta2: float = 0.999,
               eps: float = 1e-8, weight_decay: float = 0.0):
    """One AdamW update. Mutates m and v in place, returns the new parameter.

    t is the 1-based step count *after* this update.
    """
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    mhat = m / (1.0 - beta1**t)
    vhat = v / (1.0 - beta2**t)
    return p - lr * (mhat / (np.sqrt(vhat) + eps) + weight_decay * p)


class AdamW:
    """Holds first/second moments per parameter; decay is decoupled from the
    adaptive step exactly as in adamw_step."""

    def __init__(self, params: dict, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        self.t += 1
        for k, p in self.params.items():
            if p.grad is None:
                continue
            p.data = adamw_step(p.data, p.grad, self.m[k], self.v[k], self.t,
                                self.lr, self.beta1, self.beta2, self.eps,
                                self.weight_decay)

    def zero_grad(self):
        zero_grad(self.params)

    def state_arrays(self) -> dict:
        out = {}
        for k in self.params:
            out[f"opt.m.{k}"] = self.m[k]
            out[f"opt.v.{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays: dict, t: int):
        self.t = int(t)
        for k in self.params:
            self.m[k] = np.array(arrays[f"opt.m.{k}"])
            self.v[k] = np.array(arrays[f"opt.v.{k}"])
