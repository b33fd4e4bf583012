"""Dense-array engine with reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array and records the operation that produced
it.  Calling :func:`backward` on a scalar tensor walks the recorded graph in
reverse topological order and accumulates gradients into every leaf that
requires them.  :class:`Parameter` leaves are owned by :class:`Module` trees;
:func:`tie` makes one parameter object appear at several module paths so that
all sites read the same storage and contribute to one gradient buffer.

Broadcasting is deliberately narrow: equal shapes, a scalar against an array,
or a one-sided right-aligned expansion of the smaller operand.  Anything else
raises :class:`ShapeError`.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import expit


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


_state = threading.local()


def _get(name, default):
    return getattr(_state, name, default)


def grad_enabled() -> bool:
    return _get("grad", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


def default_dtype():
    return _get("dtype", np.float32)


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for newly created parameters/constants."""
    prev = default_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


CHECK_FINITE = True


class Tensor:
    __slots__ = ("data", "grad", "parents", "backward_fn", "op", "requires_grad", "axes", "__weakref__")

    def __init__(self, data, requires_grad=False, op="const", axes=None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(default_dtype())
        self.data = arr
        self.grad = None
        self.parents: tuple = ()
        self.backward_fn = None
        self.op = op
        self.requires_grad = requires_grad
        self.axes = axes

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data, axes=self.axes)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.shape[0]

    # -- operators -----------------------------------------------------------
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape, axes=None):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape, axes=axes)

    def transpose(self, *perm, axes=None):
        if len(perm) == 1 and isinstance(perm[0], (tuple, list)):
            perm = tuple(perm[0])
        return transpose(self, perm, axes=axes)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else default_dtype()
    return Tensor(np.asarray(x, dtype=dtype))


def make(data, parents: Sequence[Tensor], backward_fn: Callable, op: str, axes=None) -> Tensor:
    """Create an op result.  ``backward_fn(g)`` returns one gradient (or None) per parent."""
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value produced by op {op!r}")
    out = Tensor(data, op=op, axes=axes)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    return out


# --------------------------------------------------------------------------
# backward pass


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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor, free_graph: bool = True) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if root.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    order = _topo(root)
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        g = node.grad
        if node.backward_fn is None:
            continue
        grads = node.backward_fn(g)
        for p, gp in zip(node.parents, grads):
            if gp is None or not p.requires_grad:
                continue
            if CHECK_FINITE and not np.all(np.isfinite(gp)):
                raise NonFiniteError(f"non-finite gradient in backward of op {node.op!r}")
            if gp.shape != p.shape:
                raise ShapeError(f"op {node.op!r} produced grad {gp.shape} for input {p.shape}")
            if p.grad is None:
                p.grad = np.array(gp, dtype=p.dtype, copy=True)
            else:
                p.grad += gp
        if free_graph:
            node.grad = None
            node.parents = ()
            node.backward_fn = None


# --------------------------------------------------------------------------
# broadcasting


def _bshape(a: tuple, b: tuple, op: str) -> tuple:
    if a == b:
        return a
    if len(b) == 0 or int(np.prod(b)) == 1 and len(b) <= len(a):
        return a
    if len(a) == 0 or int(np.prod(a)) == 1 and len(a) <= len(b):
        return b
    for big, small in ((a, b), (b, a)):
        if len(small) > len(big):
            continue
        tail = big[len(big) - len(small):]
        if all(s == t or s == 1 for s, t in zip(small, tail)):
            return big
    raise ShapeError(f"{op}: shapes {a} and {b} are not compatible under one-sided trailing expansion")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    keep = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if keep:
        g = g.sum(axis=keep, keepdims=True)
    return g.reshape(shape)


def _pair(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    elif not isinstance(a, Tensor):
        a, b = as_tensor(a), as_tensor(b)
    return a, b


# --------------------------------------------------------------------------
# elementwise


def add(a, b):
    a, b = _pair(a, b)
    _bshape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add",
                axes=a.axes if a.shape == _bshape(sa, sb, "add") else b.axes)


def sub(a, b):
    a, b = _pair(a, b)
    _bshape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub",
                axes=a.axes)


def mul(a, b):
    a, b = _pair(a, b)
    _bshape(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data
    return make(ad * bd, (a, b),
                lambda g: (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                           _unbroadcast(g * ad, bd.shape) if b.requires_grad else None),
                "mul", axes=a.axes if a.ndim >= b.ndim else b.axes)


def div(a, b):
    a, b = _pair(a, b)
    _bshape(a.shape, b.shape, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb
    return make(out, (a, b), bw, "div", axes=a.axes)


def neg(a):
    return make(-a.data, (a,), lambda g: (-g,), "neg", axes=a.axes)


def power(a, p: float):
    ad = a.data
    out = ad ** p
    return make(out, (a,), lambda g: (g * p * ad ** (p - 1),), f"pow{p}", axes=a.axes)


def exp(a):
    out = np.exp(a.data)
    return make(out, (a,), lambda g: (g * out,), "exp", axes=a.axes)


def log(a):
    ad = a.data
    return make(np.log(ad), (a,), lambda g: (g / ad,), "log", axes=a.axes)


def sqrt(a):
    out = np.sqrt(a.data)
    return make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt", axes=a.axes)


def tabs(a):
    ad = a.data
    return make(np.abs(ad), (a,), lambda g: (g * np.sign(ad),), "abs", axes=a.axes)


def _sigmoid(x):
    return expit(x)


def sigmoid(a):
    s = _sigmoid(a.data)
    return make(s, (a,), lambda g: (g * s * (1 - s),), "sigmoid", axes=a.axes)


def silu(a):
    x = a.data
    s = _sigmoid(x)
    return make(x * s, (a,), lambda g: (g * s * (1 + x * (1 - s)),), "silu", axes=a.axes)


def softplus(a):
    x = a.data
    out = np.logaddexp(0, x).astype(x.dtype, copy=False)
    return make(out, (a,), lambda g: (g * _sigmoid(x),), "softplus", axes=a.axes)


def sin(a):
    x = a.data
    return make(np.sin(x), (a,), lambda g: (g * np.cos(x),), "sin", axes=a.axes)


def cos(a):
    x = a.data
    return make(np.cos(x), (a,), lambda g: (-g * np.sin(x),), "cos", axes=a.axes)


def atan2(y, x):
    """Two-argument arctangent with atan2(0, 0) = 0 and zero gradient there."""
    y, x = _pair(y, x)
    if y.shape != x.shape:
        raise ShapeError(f"atan2: shapes {y.shape} and {x.shape} differ")
    yd, xd = y.data, x.data
    out = np.arctan2(yd, xd)
    r2 = xd * xd + yd * yd
    safe = np.where(r2 > 0, r2, 1)

    def bw(g):
        k = np.where(r2 > 0, g / safe, 0)
        return k * xd, -k * yd
    return make(out, (y, x), bw, "atan2", axes=y.axes)


def wrap_distance(a):
    """|a - 2*pi*round(a / 2*pi)|: magnitude of ``a`` wrapped into [-pi, pi]."""
    x = a.data
    w = x - 2 * np.pi * np.round(x / (2 * np.pi))
    return make(np.abs(w), (a,), lambda g: (g * np.sign(w),), "wrap_distance", axes=a.axes)


# --------------------------------------------------------------------------
# linear algebra and reductions


def matmul(a, b):
    """Batched matmul over the last two axes; ``b`` may be a plain 2-D weight."""
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: {ad.shape} @ {bd.shape}")
    if bd.ndim > 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul: batch dims {ad.shape[:-2]} vs {bd.shape[:-2]}")
    out = ad @ bd

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb
    return make(out, (a, b), bw, "matmul")


def tsum(a, axis=None, keepdims=False):
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)
    return make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape, axes=None):
    shape = tuple(int(s) for s in shape)
    if -1 not in shape and int(np.prod(shape)) != a.size:
        raise ShapeError(f"reshape {a.shape} -> {shape} changes element count")
    old = a.shape
    return make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape", axes=axes)


def transpose(a, perm, axes=None):
    perm = tuple(perm)
    inv = tuple(np.argsort(perm))
    if axes is None and a.axes is not None:
        axes = tuple(a.axes[p] for p in perm)
    return make(a.data.transpose(perm), (a,), lambda g: (g.transpose(inv),), "transpose", axes=axes)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    datas = [t.data for t in tensors]
    for d in datas[1:]:
        if d.ndim != datas[0].ndim or any(
                s != s0 for i, (s, s0) in enumerate(zip(d.shape, datas[0].shape)) if i != axis % d.ndim):
            raise ShapeError(f"concat along {axis}: {[x.shape for x in datas]}")
    sizes = np.cumsum([d.shape[axis] for d in datas])[:-1]
    return make(np.concatenate(datas, axis=axis), tuple(tensors),
                lambda g: tuple(np.split(g, sizes, axis=axis)), "concat", axes=tensors[0].axes)


def split(a: Tensor, sizes: Sequence[int], axis: int) -> list[Tensor]:
    if sum(sizes) != a.shape[axis]:
        raise ShapeError(f"split sizes {sizes} do not cover axis of length {a.shape[axis]}")
    out, start = [], 0
    for s in sizes:
        idx = [slice(None)] * a.ndim
        idx[axis] = slice(start, start + s)
        out.append(getitem(a, tuple(idx)))
        start += s
    return out


def getitem(a, idx):
    shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        full[idx] = g
        return (full,)
    return make(a.data[idx], (a,), bw, "getitem")


def flip(a, axis: int):
    return make(np.flip(a.data, axis).copy(), (a,), lambda g: (np.flip(g, axis).copy(),), "flip", axes=a.axes)


def pad(a, widths):
    """Zero padding; ``widths`` is one (before, after) pair per axis."""
    widths = tuple(tuple(w) for w in widths)
    sl = tuple(slice(b, b + n) for (b, _), n in zip(widths, a.shape))
    return make(np.pad(a.data, widths), (a,), lambda g: (g[sl],), "pad", axes=a.axes)


def softmax(a, axis=-1):
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)
    return make(s, (a,), bw, "softmax", axes=a.axes)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalise over the last axis, then apply the per-feature affine."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xh = xc * rstd
    gd = gamma.data
    out = xh * gd + beta.data

    def bw(g):
        n = xd.shape[-1]
        gxh = g * gd
        gx = rstd * (gxh - gxh.mean(axis=-1, keepdims=True) - xh * (gxh * xh).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        del n
        return gx, (g * xh).sum(axis=lead), g.sum(axis=lead)
    return make(out, (x, gamma, beta), bw, "layer_norm", axes=x.axes)


# --------------------------------------------------------------------------
# parameters and modules


class Parameter(Tensor):
    __slots__ = ("name", "trainable")

    def __init__(self, data, name: str = "", trainable: bool = True):
        arr = np.array(data, dtype=default_dtype(), copy=True)
        super().__init__(arr, requires_grad=trainable, op="param")
        self.name = name
        self.trainable = trainable

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


@dataclass
class SharedHandle:
    canonical: Parameter
    aliases: list[str] = field(default_factory=list)


class Module:
    """Container of parameters and child modules, registered in assignment order."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, key, value):
        params = self.__dict__.get("_params")
        if params is None:
            raise RuntimeError("Module.__init__ not called")
        if isinstance(value, Parameter):
            params[key] = value
            self._children.pop(key, None)
        elif isinstance(value, Module):
            self._children[key] = value
            params.pop(key, None)
        object.__setattr__(self, key, value)

    def add_module(self, name: str, module: "Module"):
        setattr(self, name, module)
        return module

    def children(self):
        return self._children.items()

    def named_modules(self, prefix=""):
        yield prefix, self
        for name, child in self._children.items():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameter_sites(self, prefix="") -> Iterator[tuple[str, Parameter]]:
        """Every (path, parameter) pair, including repeated visits of tied parameters."""
        for name, p in self._params.items():
            yield (f"{prefix}.{name}" if prefix else name), p
        for name, child in self._children.items():
            yield from child.named_parameter_sites(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix="") -> Iterator[tuple[str, Parameter]]:
        """Unique parameters, each under the first path that reaches it."""
        seen = set()
        for path, p in self.named_parameter_sites(prefix):
            if id(p) not in seen:
                seen.add(id(p))
                yield path, p

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def resolve(self, path: str):
        obj = self
        for part in path.split("."):
            obj = getattr(obj, part)
        return obj

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


def tie(param: Parameter, root: Module, site: str, handle: SharedHandle | None = None) -> SharedHandle:
    """Make ``root.<site>`` refer to ``param``'s storage."""
    *owner_path, attr = site.split(".")
    owner = root.resolve(".".join(owner_path)) if owner_path else root
    current = getattr(owner, attr)
    if not isinstance(current, Parameter):
        raise TypeError(f"{site} is not a parameter site")
    if current.shape != param.shape:
        raise ShapeError(f"tie {param.name or '?'} {param.shape} -> {site} {current.shape}")
    setattr(owner, attr, param)
    if handle is None:
        handle = SharedHandle(param)
    handle.aliases.append(site)
    return handle


def grad_map(module: Module) -> dict[str, np.ndarray]:
    return {name: p.grad for name, p in module.named_parameters() if p.grad is not None}


def forward_backward(root: Tensor, module: Module) -> dict[str, np.ndarray]:
    module.zero_grad()
    backward(root)
    return grad_map(module)


def numerical_grad(f: Callable[[], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` w.r.t. array ``x`` (perturbed in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))
