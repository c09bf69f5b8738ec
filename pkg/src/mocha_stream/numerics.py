"""Dense tensors with a reverse-mode differentiation tape.

Every operation returns a new :class:`Tensor`.  When gradient recording is
enabled and any input requires a gradient, the result carries a backward rule
and a sequence number; :func:`backward` replays the recorded nodes in reverse
sequence order, visiting each exactly once.

Broadcasting is deliberately narrow.  Binary elementwise ops accept operands
of equal shape, a scalar, or an operand whose shape (leading ones stripped) is
a trailing suffix of the other's, i.e. a row vector over a matrix or a matrix
over a stack of matrices.  Anything else raises :class:`ShapeError`; use
:meth:`Tensor.expand` to broadcast explicitly.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

LAYER_NORM_EPS = 1e-12

_local = threading.local()


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class NonDeterministicError(RuntimeError):
    """Two evaluations of the same function disagreed."""


def _grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


def _next_seq() -> int:
    counter = getattr(_local, "counter", None)
    if counter is None:
        counter = _local.counter = itertools.count()
    return next(counter)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (thread-local)."""
    prev = _grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


@contextlib.contextmanager
def record_kinks():
    """Collect the activation pattern of every relu evaluated inside the block.

    Two evaluations with equal patterns lie on the same linear piece of every
    relu, so a central difference between them is free of kink artefacts.
    """
    prev = getattr(_local, "kinks", None)
    log: list[bytes] = []
    _local.kinks = log
    try:
        yield log
    finally:
        _local.kinks = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype if dtype is not None else np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError("non-finite value in tensor construction")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._seq = -1

    # -- construction -------------------------------------------------------

    @classmethod
    def _result(cls, data: np.ndarray, parents: tuple, backward, op: str, check: bool = True) -> "Tensor":
        # data movement of finite inputs cannot create NaN/Inf, so those ops pass check=False
        if check and not np.isfinite(data).all():
            raise NonFiniteError(f"{op} produced a non-finite value")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        tracked = _grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = tracked
        if tracked:
            out._parents = parents
            out._backward = backward
            out._seq = _next_seq()
        else:
            out._parents = ()
            out._backward = None
            out._seq = -1
        return out

    # -- basic properties ---------------------------------------------------

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op})"

    # -- operator sugar -----------------------------------------------------

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
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def expand(self, shape):
        return expand(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _dtype_of(*xs) -> np.dtype:
    for x in xs:
        if isinstance(x, Tensor):
            return x.data.dtype
    return np.dtype(np.float64)


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    dtype = _dtype_of(a, b)
    if not isinstance(a, Tensor):
        a = Tensor(a, dtype=dtype)
    if not isinstance(b, Tensor):
        b = Tensor(b, dtype=dtype)
    return a, b


# -- broadcasting -------------------------------------------------------------


def _strip_leading_ones(shape: tuple[int, ...]) -> tuple[int, ...]:
    i = 0
    while i < len(shape) and shape[i] == 1:
        i += 1
    return shape[i:]


def _check_broadcast(sa: tuple[int, ...], sb: tuple[int, ...]) -> None:
    if sa == sb:
        return
    for small, big in ((sa, sb), (sb, sa)):
        core = _strip_leading_ones(small)
        if len(core) == 0:
            return  # scalar-like
        if len(small) <= len(big) and big[len(big) - len(core):] == core:
            return
    raise ShapeError(f"cannot broadcast {sa} with {sb}; only row-vector broadcasting is allowed")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# -- elementwise --------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_broadcast(a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor._result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_broadcast(a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return Tensor._result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_broadcast(a.shape, b.shape)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return Tensor._result(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_broadcast(a.shape, b.shape)
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd

    def bw(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return Tensor._result(out, (a, b), bw, "div")


def power(a: Tensor, exponent: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    out = ad**exponent

    def bw(g):
        return (g * exponent * ad ** (exponent - 1),)

    return Tensor._result(out, (a,), bw, "pow")


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)

    def bw(g):
        return (g * out,)

    return Tensor._result(out, (a,), bw, "exp")


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)

    def bw(g):
        return (g / ad,)

    return Tensor._result(out, (a,), bw, "log")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid_np(a.data)

    def bw(g):
        return (g * out * (1.0 - out),)

    return Tensor._result(out, (a,), bw, "sigmoid")


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    out = np.where(pos, a.data, 0.0).astype(a.data.dtype, copy=False)
    log = getattr(_local, "kinks", None)
    if log is not None:
        log.append(np.packbits(pos).tobytes())

    def bw(g):
        return (g * pos,)

    return Tensor._result(out, (a,), bw, "relu")


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rate`` is 0 or no generator is given."""
    if rate <= 0.0 or rng is None:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)

    def bw(g):
        return (g * keep,)

    return Tensor._result(a.data * keep, (a,), bw, "dropout")


# -- linear algebra -----------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` may be a plain matrix applied to every matrix of a stacked ``a``;
    otherwise leading axes must match exactly.
    """
    a, b = _coerce(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul leading dimensions differ: {a.shape} @ {b.shape}")
    if b.ndim > a.ndim:
        raise ShapeError(f"matmul cannot broadcast a matrix over {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        if gb.ndim > bd.ndim:
            gb = gb.reshape(-1, *bd.shape).sum(axis=0)
        return ga, gb

    return Tensor._result(ad @ bd, (a, b), bw, "matmul")


# -- reductions ---------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._result(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


# -- shape manipulation -------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape

    def bw(g):
        return (g.reshape(old),)

    return Tensor._result(a.data.reshape(shape), (a,), bw, "reshape", check=False)


def transpose(a: Tensor, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)

    def bw(g):
        return (np.transpose(g, inv),)

    return Tensor._result(np.transpose(a.data, axes), (a,), bw, "transpose", check=False)


def expand(a: Tensor, shape) -> Tensor:
    """Explicit numpy-style broadcast to ``shape``."""
    a = as_tensor(a)
    shape = tuple(shape)
    src = a.shape
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise ShapeError(f"cannot expand {src} to {shape}") from exc

    def bw(g):
        return (_unbroadcast(g, src),)

    return Tensor._result(np.ascontiguousarray(out), (a,), bw, "expand", check=False)


def getitem(a: Tensor, index) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = a.data[index]

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._result(np.array(out), (a,), bw, "getitem", check=False)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._result(out, tuple(tensors), bw, "concat", check=False)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor._result(out, tuple(tensors), bw, "stack")


# -- fused primitives ---------------------------------------------------------


def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis with per-row max subtraction.

    ``mask`` (boolean, numpy-broadcastable to ``x``) marks allowed positions;
    disallowed ones get probability exactly zero.
    """
    x = as_tensor(x)
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(mask, z.shape)
        if not mask.any(axis=-1).all():
            raise ValueError("softmax row has no allowed position")
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return Tensor._result(out, (x,), bw, "softmax")


def log_softmax(x: Tensor) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    probs = np.exp(out)

    def bw(g):
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return Tensor._result(out, (x,), bw, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise each row to zero mean and unit variance, then scale and shift.

    A constant row has zero variance and maps to ``bias`` exactly.
    """
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(f"layer_norm gain/bias must have shape ({n},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd, bd = gain.data, bias.data
    out = xhat * gd + bd

    def bw(g):
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return Tensor._result(out, (x, gain, bias), bw, "layer_norm")


def normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    """``x / (||x|| + eps)`` over the last axis."""
    x = as_tensor(x)
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=-1, keepdims=True))
    den = norm + eps
    out = xd / den

    def bw(g):
        # d(x/(|x|+e)) = g/den - x (x.g) / (|x| den^2)
        safe = np.where(norm > 0, norm, 1.0)
        proj = (g * xd).sum(axis=-1, keepdims=True)
        return (g / den - xd * proj / (safe * den * den),)

    return Tensor._result(out, (x,), bw, "normalize_rows")


def scan_linear(a: Tensor, b: Tensor, reverse: bool = False) -> Tensor:
    """First-order linear recurrence along the last axis.

    Forward: ``s[j] = a[j] * s[j-1] + b[j]`` with ``s[-1] = 0``.  With
    ``reverse`` the scan runs right to left: ``s[j] = a[j] * s[j+1] + b[j]``.
    No division is involved, so zero multipliers are handled exactly.
    """
    a, b = _coerce(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"scan_linear operands differ: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    n = ad.shape[-1]
    order = range(n - 1, -1, -1) if reverse else range(n)
    step = 1 if reverse else -1  # offset of the predecessor
    s = np.empty_like(bd)
    prev = np.zeros(bd.shape[:-1], dtype=bd.dtype)
    for j in order:
        prev = ad[..., j] * prev + bd[..., j]
        s[..., j] = prev

    def bw(g):
        gb = np.empty_like(g)
        carry = np.zeros(g.shape[:-1], dtype=g.dtype)
        # adjoint runs opposite to the forward scan
        for j in (range(n) if reverse else range(n - 1, -1, -1)):
            succ = j - step
            carry = g[..., j] + (ad[..., succ] * carry if 0 <= succ < n else 0.0)
            gb[..., j] = carry
        ga = np.zeros_like(ad)
        for j in range(n):
            pred = j + step
            if 0 <= pred < n:
                ga[..., j] = gb[..., j] * s[..., pred]
        return ga, gb

    return Tensor._result(s, (a, b), bw, "scan_linear")


# -- differentiation ----------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every tracked leaf."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("loss is not connected to any tensor that requires a gradient")

    nodes: dict[int, Tensor] = {}
    stack_ = [loss]
    while stack_:
        node = stack_.pop()
        if id(node) in nodes:
            continue
        nodes[id(node)] = node
        stack_.extend(p for p in node._parents if p.requires_grad)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in sorted(nodes.values(), key=lambda t: t._seq, reverse=True):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def gradcheck(
    f: Callable[..., Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f(*params)`` must return a scalar Tensor.  Parameters are perturbed in
    place and restored.  Relative error per entry is
    ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    return max((err for _, _, err in gradcheck_entries(f, params, eps)), default=0.0)


def central_difference(
    f: Callable[[], Tensor],
    flat: np.ndarray,
    k: int,
    eps: float,
    base_pattern: list[bytes] | None = None,
    shrink: float = 10.0,
    min_eps: float = 1e-9,
    order: int = 2,
) -> tuple[float, float]:
    """Central difference of ``f`` in ``flat[k]``; returns ``(slope, step)``.

    ``order=2`` is the three-point stencil ``(f(x+h) - f(x-h)) / 2h``;
    ``order=4`` the five-point one, whose smaller truncation error allows a
    wider step where roundoff in ``f`` would swamp a small slope.

    With ``base_pattern`` (the relu pattern at the unperturbed point) the step
    is divided by ``shrink`` while any probe lands on a different relu piece,
    since a difference across a kink does not estimate the derivative.
    Must be called under :func:`no_grad`.
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    offsets = (1.0, -1.0) if order == 2 else (1.0, -1.0, 2.0, -2.0)
    orig = flat[k]
    h = eps
    while True:
        values, smooth = [], True
        for c in offsets:
            flat[k] = orig + c * h
            with record_kinks() as pattern:
                values.append(f().item())
            smooth = smooth and (base_pattern is None or pattern == base_pattern)
        flat[k] = orig
        if smooth or h / shrink < min_eps:
            break
        h /= shrink
    if order == 2:
        return (values[0] - values[1]) / (2.0 * h), h
    return (8.0 * (values[0] - values[1]) - (values[2] - values[3])) / (12.0 * h), h


def gradcheck_entries(f: Callable[..., Tensor], params: Sequence[Tensor], eps: float = 1e-5):
    """Yield ``(param_index, flat_index, rel_error)`` for every entry."""
    if not eps > 0:
        raise ValueError("gradcheck step must be positive")
    params = list(params)
    for p in params:
        p.grad = None
    loss = f(*params)
    if loss.size != 1:
        raise ShapeError("gradcheck function must return a scalar")
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    with no_grad():
        with record_kinks() as base:
            v1 = f(*params).data.copy()
        v2 = f(*params).data.copy()
    if not np.array_equal(v1, v2):
        raise NonDeterministicError("function returned different values on identical inputs")

    def g():
        return f(*params)

    with no_grad():
        for pi, p in enumerate(params):
            flat = p.data.reshape(-1)
            ga = analytic[pi].reshape(-1)
            for k in range(flat.size):
                num, _ = central_difference(g, flat, k, eps, base)
                a = ga[k]
                yield pi, k, abs(a - num) / max(abs(a), abs(num), 1e-8)


def parameters(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
