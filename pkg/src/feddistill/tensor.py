"""Dense tensors with reverse-mode differentiation, second-order capable.

Every backward rule is itself written with the public ops, so calling `grad`
with ``create_graph=True`` yields gradients that are further differentiable:
that is what lets a gradient-distance be differentiated with respect to the
inputs that produced one of the gradients (`hypergrad`).

Arithmetic is strict: binary ops require identical shapes and dtypes.  The
only sanctioned broadcasts are explicit (`expand`) and scalar constants.
Default precision is 32-bit; pass float64 arrays for the 64-bit test graphs.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import GraphError, NumericError, ShapeError

DEFAULT_DTYPE = np.dtype(np.float32)
_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_state = threading.local()


def _recording() -> bool:
    return getattr(_state, "recording", True)


class no_grad(contextlib.AbstractContextManager):
    """Suspend graph recording; ops inside produce plain constant tensors."""

    def __enter__(self):
        self._prev = _recording()
        _state.recording = False
        return self

    def __exit__(self, *exc):
        _state.recording = self._prev
        return False


class Tensor:
    """N-dimensional float array, optionally a node of a differentiation graph.

    `_detached_src` marks values that (transitively) came out of a backward
    pass run without graph retention; `hypergrad` uses it to give a precise
    error instead of silently returning zeros.
    """

    __slots__ = ("data", "requires_grad", "_parents", "_vjp", "_detached_src")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            raise TypeError("Tensor(data): pass raw array data, not a Tensor")
        if dtype is not None:
            arr = np.asarray(data, dtype=np.dtype(dtype))
        elif isinstance(data, np.ndarray) and data.dtype in _FLOAT_DTYPES:
            arr = data
        else:
            # Lists, ints, non-float arrays: land on the 32-bit default.
            arr = np.asarray(data, dtype=DEFAULT_DTYPE)
        if arr.dtype not in _FLOAT_DTYPES:
            raise ShapeError(f"unsupported dtype {arr.dtype}; use float32 or float64")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None
        self._detached_src = False

    # ---- construction helpers -------------------------------------------------

    @staticmethod
    def zeros(shape, dtype=None, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=dtype or DEFAULT_DTYPE), requires_grad=requires_grad)

    @staticmethod
    def ones(shape, dtype=None, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.ones(shape, dtype=dtype or DEFAULT_DTYPE), requires_grad=requires_grad)

    # ---- inspection -----------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
        out._detached_src = self._detached_src
        return out

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def check_finite(self, context: str = "") -> "Tensor":
        if not np.isfinite(self.data).all():
            where = f" in {context}" if context else ""
            raise NumericError(f"non-finite values{where}")
        return self

    def __repr__(self) -> str:
        flags = "grad" if self.requires_grad else "const"
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, {flags})"

    # ---- operators ------------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __rsub__(self, other):
        return add_scalar(neg(self), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return mul_scalar(self, 1.0 / float(other))

    def __rtruediv__(self, other):
        return mul_scalar(power(self, -1.0), float(other))

    def __pow__(self, exponent):
        return power(self, float(exponent))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axes=None, keepdims: bool = False) -> "Tensor":
        return asum(self, axes=axes, keepdims=keepdims)

    def mean(self, axes=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axes=axes, keepdims=keepdims)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def transpose(self, axes=None) -> "Tensor":
        return transpose(self, axes=axes)


def _op(data: np.ndarray, parents: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    track = _recording() and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out._parents = parents if track else ()
    out._vjp = vjp if track else None
    out._detached_src = any(p._detached_src for p in parents)
    return out


def _check_pair(a: Tensor, b: Tensor, name: str) -> None:
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        raise TypeError(f"{name}: expected Tensor operands")
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{name}: shapes must match exactly, got {a.shape} vs {b.shape}")
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"{name}: dtypes must match, got {a.data.dtype} vs {b.data.dtype}")


# ---- elementwise ops ---------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_pair(a, b, "add")
    return _op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_pair(a, b, "sub")
    return _op(a.data - b.data, (a, b), lambda g: (g, neg(g)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_pair(a, b, "mul")
    return _op(a.data * b.data, (a, b), lambda g: (mul(g, b), mul(g, a)))


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_pair(a, b, "div")

    def vjp(g):
        return (div(g, b), neg(div(mul(g, a), mul(b, b))))

    return _op(a.data / b.data, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    return _op(-a.data, (a,), lambda g: (neg(g),))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _op(a.data + a.data.dtype.type(c), (a,), lambda g: (g,))


def mul_scalar(a: Tensor, c: float) -> Tensor:
    cc = a.data.dtype.type(c)
    return _op(a.data * cc, (a,), lambda g: (mul_scalar(g, float(cc)),))


def power(a: Tensor, exponent: float) -> Tensor:
    def vjp(g):
        return (mul_scalar(mul(g, power(a, exponent - 1.0)), exponent),)

    return _op(a.data ** a.data.dtype.type(exponent), (a,), vjp)


def exp(a: Tensor) -> Tensor:
    return _op(np.exp(a.data), (a,), lambda g: (mul(g, exp(a)),))


def log(a: Tensor) -> Tensor:
    return _op(np.log(a.data), (a,), lambda g: (div(g, a),))


def sqrt(a: Tensor) -> Tensor:
    return _op(np.sqrt(a.data), (a,), lambda g: (div(g, mul_scalar(sqrt(a), 2.0)),))


def sin(a: Tensor) -> Tensor:
    return _op(np.sin(a.data), (a,), lambda g: (mul(g, cos(a)),))


def cos(a: Tensor) -> Tensor:
    return _op(np.cos(a.data), (a,), lambda g: (neg(mul(g, sin(a))),))


def relu(a: Tensor) -> Tensor:
    # Mask is a constant of the graph: correct a.e., and exactly what second
    # order needs (the second derivative of relu is zero away from the kink).
    mask = Tensor((a.data > 0).astype(a.data.dtype))
    return _op(a.data * mask.data, (a,), lambda g: (mul(g, mask),))


# ---- shape ops ---------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.data.shape
    return _op(a.data.reshape(shape), (a,), lambda g: (reshape(g, orig),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        inv = None
    else:
        axes = tuple(axes)
        inv = tuple(int(i) for i in np.argsort(axes))
    return _op(np.ascontiguousarray(np.transpose(a.data, axes)), (a,),
               lambda g: (transpose(g, inv),))


def _normalize_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = tuple(sorted(ax % ndim for ax in axes))
    if len(set(out)) != len(out):
        raise ShapeError(f"duplicate axes {axes}")
    return out


def asum(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    """Sum over the given axes (all by default)."""
    axs = _normalize_axes(axes, a.data.ndim)
    if not axs:
        return _op(a.data.copy(), (a,), lambda g: (g,))
    kd_shape = tuple(1 if i in axs else s for i, s in enumerate(a.data.shape))
    full = a.data.shape

    def vjp(g):
        gk = g if keepdims else reshape(g, kd_shape)
        return (expand(gk, full),)

    return _op(a.data.sum(axis=axs, keepdims=keepdims), (a,), vjp)


def expand(a: Tensor, shape) -> Tensor:
    """Broadcast size-1 axes of `a` up to `shape` (same rank, explicit)."""
    shape = tuple(int(s) for s in shape)
    if a.data.ndim != len(shape):
        raise ShapeError(f"expand: rank mismatch {a.shape} -> {shape}")
    exp_axes = []
    for i, (s0, s1) in enumerate(zip(a.data.shape, shape)):
        if s0 != s1:
            if s0 != 1:
                raise ShapeError(f"expand: axis {i} has extent {s0}, cannot expand to {s1}")
            exp_axes.append(i)
    exp_axes = tuple(exp_axes)

    def vjp(g):
        return (asum(g, axes=exp_axes, keepdims=True) if exp_axes else g,)

    return _op(np.ascontiguousarray(np.broadcast_to(a.data, shape)), (a,), vjp)


def mean(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    axs = _normalize_axes(axes, a.data.ndim)
    count = 1
    for i in axs:
        count *= a.data.shape[i]
    return mul_scalar(asum(a, axes=axs, keepdims=keepdims), 1.0 / count)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: 2-D operands required, got {a.shape} @ {b.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"matmul: dtypes must match, got {a.data.dtype} vs {b.data.dtype}")

    def vjp(g):
        return (matmul(g, transpose(b)), matmul(transpose(a), g))

    return _op(a.data @ b.data, (a, b), vjp)


def take_slice(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = tuple(slice(start, stop) if i == axis else slice(None) for i in range(a.data.ndim))
    full = a.data.shape

    def vjp(g):
        return (pad_slice(g, full, axis, start),)

    return _op(a.data[idx].copy(), (a,), vjp)


def pad_slice(a: Tensor, full_shape, axis: int, start: int) -> Tensor:
    full_shape = tuple(full_shape)
    stop = start + a.data.shape[axis]
    buf = np.zeros(full_shape, dtype=a.data.dtype)
    idx = tuple(slice(start, stop) if i == axis else slice(None) for i in range(len(full_shape)))
    buf[idx] = a.data

    def vjp(g):
        return (take_slice(g, axis, start, stop),)

    return _op(buf, (a,), vjp)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat of zero tensors")
    if len(parts) == 1:
        only = parts[0]
        return _op(only.data.copy(), (only,), lambda g: (g,))
    ref = parts[0]
    for p in parts[1:]:
        if p.data.ndim != ref.data.ndim or p.data.dtype != ref.data.dtype:
            raise ShapeError("concat: rank/dtype mismatch")
        for i, (s0, s1) in enumerate(zip(ref.data.shape, p.data.shape)):
            if i != axis and s0 != s1:
                raise ShapeError(f"concat: non-concat axis {i} differs ({s0} vs {s1})")
    offsets = np.cumsum([0] + [p.data.shape[axis] for p in parts])

    def vjp(g):
        return tuple(take_slice(g, axis, int(offsets[i]), int(offsets[i + 1]))
                     for i in range(len(parts)))

    return _op(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), vjp)


# ---- patch extraction (convolution support) ----------------------------------


def _conv_geometry(shape, ksize: int, stride: int, padding: int):
    b, c, h, w = shape
    oh, rh = divmod(h + 2 * padding - ksize, stride)
    ow, rw = divmod(w + 2 * padding - ksize, stride)
    if rh or rw or oh < 0 or ow < 0:
        raise ShapeError(f"im2col: size {h}x{w} incompatible with k={ksize} s={stride} p={padding}")
    return b, c, h, w, oh + 1, ow + 1


def im2col(x: Tensor, ksize: int, stride: int = 1, padding: int = 0) -> Tensor:
    """[B,C,H,W] -> [B*OH*OW, C*k*k] patch matrix; linear, adjoint is col2im."""
    b, c, h, w, oh, ow = _conv_geometry(x.data.shape, ksize, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((b, c, ksize * ksize, oh, ow), dtype=x.data.dtype)
    for ki in range(ksize):
        for kj in range(ksize):
            cols[:, :, ki * ksize + kj] = xp[:, :, ki:ki + stride * oh:stride,
                                             kj:kj + stride * ow:stride]
    data = np.ascontiguousarray(cols.transpose(0, 3, 4, 1, 2)).reshape(b * oh * ow, c * ksize * ksize)
    full = x.data.shape

    def vjp(g):
        return (col2im(g, full, ksize, stride, padding),)

    return _op(data, (x,), vjp)


def col2im(cols: Tensor, image_shape, ksize: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of im2col: scatter-add patches back into [B,C,H,W]."""
    b, c, h, w, oh, ow = _conv_geometry(tuple(image_shape), ksize, stride, padding)
    if cols.data.shape != (b * oh * ow, c * ksize * ksize):
        raise ShapeError(f"col2im: got {cols.shape}, expected {(b * oh * ow, c * ksize * ksize)}")
    g6 = cols.data.reshape(b, oh, ow, c, ksize * ksize).transpose(0, 3, 4, 1, 2)
    buf = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=cols.data.dtype)
    for ki in range(ksize):
        for kj in range(ksize):
            buf[:, :, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride] += g6[:, :, ki * ksize + kj]
    data = np.ascontiguousarray(buf[:, :, padding:padding + h, padding:padding + w])

    def vjp(g):
        return (im2col(g, ksize, stride, padding),)

    return _op(data, (cols,), vjp)


# ---- parameter containers ----------------------------------------------------


class ParamSet:
    """Ordered, named parameter tensors with a layer-role tag per entry.

    Iteration order is fixed at construction and must be identical across
    clients and rounds; aggregation and checkpointing rely on it.
    """

    ROLES = ("conv", "norm", "linear")

    def __init__(self, entries: Iterable[tuple[str, Tensor, str]]):
        self._names: list[str] = []
        self._tensors: list[Tensor] = []
        self._roles: list[str] = []
        seen = set()
        for name, tensor, role in entries:
            if name in seen:
                raise ShapeError(f"duplicate parameter name {name!r}")
            if role not in self.ROLES:
                raise ShapeError(f"unknown layer role {role!r} for {name!r}")
            seen.add(name)
            self._names.append(name)
            self._tensors.append(tensor)
            self._roles.append(role)

    def __len__(self) -> int:
        return len(self._tensors)

    def __iter__(self):
        return iter(zip(self._names, self._tensors, self._roles))

    @property
    def names(self) -> list[str]:
        return list(self._names)

    @property
    def roles(self) -> list[str]:
        return list(self._roles)

    def tensors(self) -> list[Tensor]:
        return list(self._tensors)

    def get(self, name: str) -> Tensor:
        return self._tensors[self._names.index(name)]

    def clone(self) -> "ParamSet":
        return ParamSet((n, Tensor(t.data.copy(), requires_grad=t.requires_grad), r)
                        for n, t, r in self)

    def total_size(self) -> int:
        return sum(t.size for t in self._tensors)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([t.data.reshape(-1) for t in self._tensors])

    def congruent_with(self, other: "ParamSet") -> bool:
        return (self._names == other._names
                and all(a.shape == b.shape for a, b in zip(self._tensors, other._tensors)))


class GradSet:
    """One gradient tensor per ParamSet entry, same order and shapes."""

    def __init__(self, grads: Sequence[Tensor], names: Sequence[str], roles: Sequence[str]):
        if not (len(grads) == len(names) == len(roles)):
            raise ShapeError("GradSet: mismatched entry counts")
        self.grads = list(grads)
        self.names = list(names)
        self.roles = list(roles)

    def __len__(self) -> int:
        return len(self.grads)

    def __iter__(self):
        return iter(zip(self.names, self.grads, self.roles))

    def detach(self) -> "GradSet":
        return GradSet([g.detach() for g in self.grads], self.names, self.roles)

    def check_congruent(self, params: ParamSet) -> None:
        if self.names != params.names:
            raise ShapeError("GradSet does not match ParamSet entry names")
        for g, p in zip(self.grads, params.tensors()):
            if g.shape != p.shape:
                raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")

    def to_vector(self) -> np.ndarray:
        return np.concatenate([g.data.reshape(-1) for g in self.grads])


# ---- differentiation ---------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _ancestor_ids(root: Tensor) -> set[int]:
    seen: set[int] = set()
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.extend(node._parents)
    return seen


def grad(loss: Tensor, wrt, create_graph: bool = False):
    """Reverse-mode gradients of a scalar `loss` w.r.t. `wrt`.

    `wrt` may be a ParamSet (returns a GradSet) or a sequence of tensors
    (returns a list).  Parameters the loss does not reach get zero gradients.
    With ``create_graph=True`` the returned gradients are graph nodes that can
    be differentiated again; by default they are detached constants.
    """
    if isinstance(wrt, ParamSet):
        tensors, names, roles = wrt.tensors(), wrt.names, wrt.roles
        as_gradset = True
    else:
        tensors = list(wrt)
        names = roles = None
        as_gradset = False
    if loss.data.size != 1:
        raise GraphError(f"gradient target must be scalar, got shape {loss.shape}")
    for t in tensors:
        if not t.requires_grad:
            raise GraphError("a wrt tensor does not require grad")

    grads: dict[int, Tensor] = {id(loss): Tensor(np.ones(loss.shape, dtype=loss.data.dtype))}
    wrt_ids = {id(t) for t in tensors}
    ctx = contextlib.nullcontext() if create_graph else no_grad()
    with ctx:
        for node in reversed(_topo_order(loss)):
            g = grads.get(id(node))
            if g is None:
                continue
            if node._vjp is not None:
                parent_grads = node._vjp(g)
                for p, pg in zip(node._parents, parent_grads):
                    if pg is None or not p.requires_grad:
                        continue
                    prev = grads.get(id(p))
                    grads[id(p)] = pg if prev is None else add(prev, pg)
            if id(node) not in wrt_ids:
                grads.pop(id(node), None)

    out: list[Tensor] = []
    for t in tensors:
        g = grads.get(id(t))
        if g is None:
            g = Tensor(np.zeros(t.shape, dtype=t.data.dtype))
        if not create_graph:
            g = g.detach() if g._parents else g
            g._detached_src = True
        out.append(g)
    if as_gradset:
        return GradSet(out, names, roles)
    return out


def hypergrad(match_loss: Tensor, wrt_inputs: Sequence[Tensor]) -> list[Tensor]:
    """Differentiate a scalar built from gradients w.r.t. the inputs that fed them.

    Requires the inner gradients to have been produced with
    ``grad(..., create_graph=True)``, otherwise the chain to the inputs is cut
    and this raises instead of silently returning zeros.
    """
    wrt_list = list(wrt_inputs)
    for t in wrt_list:
        if not t.requires_grad:
            raise GraphError("hypergrad inputs must require grad")
    if match_loss.data.size != 1:
        raise GraphError(f"hypergrad target must be scalar, got shape {match_loss.shape}")
    ancestors = _ancestor_ids(match_loss)
    if not any(id(t) in ancestors for t in wrt_list):
        if match_loss._detached_src:
            raise GraphError(
                "graph was not retained through the inner gradient; "
                "recompute it with grad(..., create_graph=True)")
        return [Tensor(np.zeros(t.shape, dtype=t.data.dtype)) for t in wrt_list]
    return grad(match_loss, wrt_list, create_graph=False)


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float,
                      rel_floor: float = 1e-6) -> float:
    """Max relative error between autodiff and central differences of f at x.

    f must be deterministic; evaluations happen at x +/- eps per coordinate.
    Relative error uses max(|fd|, |ad|, rel_floor) as denominator.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x0 = np.array(x.data, copy=True)
    leaf = Tensor(x0.copy(), requires_grad=True)
    y = f(leaf)
    if y.data.size != 1:
        raise GraphError("finite_diff_check target must be scalar")
    if not np.isfinite(y.data).all():
        raise NumericError("non-finite value at the evaluation point")
    auto = grad(y, [leaf])[0].data.reshape(-1)

    def _eval(arr: np.ndarray) -> float:
        val = f(Tensor(arr)).data
        if not np.isfinite(val).all():
            raise NumericError("non-finite value during finite differencing")
        return float(val.reshape(()))

    fd = np.empty(x0.size, dtype=np.float64)
    flat = x0.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = _eval(x0)
        flat[i] = orig - eps
        fm = _eval(x0)
        flat[i] = orig
        fd[i] = (fp - fm) / (2.0 * eps)
    denom = np.maximum(rel_floor, np.maximum(np.abs(fd), np.abs(auto.astype(np.float64))))
    return float((np.abs(fd - auto) / denom).max())
