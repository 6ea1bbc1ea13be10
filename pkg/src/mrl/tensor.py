"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is deliberately small: a Tensor wraps a numpy float64 array plus
an optional tape record (parent tensors and a closure that maps the output
gradient to parent gradients). Calling ``backward()`` on a scalar loss
topologically sorts the recorded subgraph and runs the closures in reverse,
accumulating gradients into every reachable leaf's ``.grad``.

Conventions and guarantees:

- Layout is NCHW for rank-4 data. Public factories accept 1 to 4 axes; view
  ops (reshape, permute) may create transient higher-rank layouts internally.
- All arithmetic is float64. Gradients have the exact shape of their tensor.
- Graphs are single-use. A second ``backward()`` over the same recorded
  graph raises GraphError instead of silently double-accumulating.
- Broadcasting follows numpy; the gradient of a broadcast operand is summed
  back over the broadcast axes (see ``_unbroadcast``).
- ``no_grad()`` suspends recording; leaves keep their ``requires_grad`` flag
  but ops executed inside the context produce constants.
- Nothing here is thread-safe per graph: one graph belongs to one thread.
  Independent graphs (e.g. per-shard tapes) may be built concurrently.

Non-finite values are never silently propagated past a checkpoint: callers
use ``require_finite`` at step boundaries and get a NonFiniteError naming
the offending step.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import GraphError, NonFiniteError, OracleError, ShapeError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_GRAD_ENABLED = [True]


def grad_enabled() -> bool:
    return _GRAD_ENABLED[0]


@contextmanager
def no_grad():
    """Suspend tape recording for the duration of the context."""
    prev = _GRAD_ENABLED[0]
    _GRAD_ENABLED[0] = False
    try:
        yield
    finally:
        _GRAD_ENABLED[0] = prev


def _as_array(data) -> np.ndarray:
    return np.asarray(data, dtype=np.float64)


class Tensor:
    """A float64 array with an optional autodiff tape record."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] | None = None
        self._backward: Callable[[np.ndarray], tuple] | None = None
        self._consumed = False

    # ------------------------------------------------------------------
    # factories

    @staticmethod
    def _checked_shape(shape) -> tuple[int, ...]:
        shape = tuple(int(s) for s in shape)
        if not 1 <= len(shape) <= 4:
            raise ShapeError(f"tensor rank must be 1..4, got shape {shape}")
        if any(s < 1 for s in shape):
            raise ShapeError(f"all axis sizes must be >= 1, got shape {shape}")
        return shape

    @staticmethod
    def zeros(shape, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.zeros(Tensor._checked_shape(shape)), requires_grad)

    @staticmethod
    def full(shape, value: float, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.full(Tensor._checked_shape(shape), float(value)), requires_grad)

    @staticmethod
    def uniform(shape, seed: int, lo: float = -1.0, hi: float = 1.0,
                requires_grad: bool = False) -> "Tensor":
        """Uniform fill in [lo, hi). Bit-identical for identical (shape, seed)."""
        shape = Tensor._checked_shape(shape)
        rng = np.random.Generator(np.random.PCG64(seed))
        return Tensor(rng.uniform(lo, hi, size=shape), requires_grad)

    @staticmethod
    def from_values(shape, values: Sequence[float], requires_grad: bool = False) -> "Tensor":
        shape = Tensor._checked_shape(shape)
        flat = _as_array(list(values)).reshape(-1)
        want = int(np.prod(shape))
        if flat.size != want:
            raise ShapeError(
                f"from_values got {flat.size} values for shape {shape} (needs {want})")
        return Tensor(flat.reshape(shape), requires_grad)

    # ------------------------------------------------------------------
    # introspection

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        flags = "grad" if self.requires_grad else "const"
        return f"Tensor(shape={self.shape}, {flags})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """A constant view of the same storage, cut off from the tape."""
        return Tensor(self.data)

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def require_finite(self, step: str) -> "Tensor":
        if not self.is_finite():
            raise NonFiniteError(f"non-finite values detected at step: {step}")
        return self

    # ------------------------------------------------------------------
    # tape plumbing

    def _record(self, data: np.ndarray, parents: tuple["Tensor", ...],
                backward: Callable[[np.ndarray], tuple]) -> "Tensor":
        out = Tensor(data)
        if _GRAD_ENABLED[0] and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    def backward(self) -> None:
        """Reverse-mode pass from a scalar loss.

        Accumulates into every reachable leaf's ``.grad`` (summing with any
        gradient already there, e.g. across batch shards). The traversed
        graph is consumed; calling backward on it again raises GraphError.
        """
        if self.data.size != 1:
            raise GraphError(f"backward needs a scalar loss, got shape {self.shape}")
        if self._backward is None:
            raise GraphError(
                "loss is not attached to a recorded graph (detached value, "
                "no_grad context, or no differentiable leaves)")

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            if node._backward is not None:
                for p in node._parents:
                    if p.requires_grad and id(p) not in seen:
                        stack.append((p, False))

        for node in topo:
            if node._consumed:
                raise GraphError(
                    "backward was already called on this graph; rerun the "
                    "forward pass to build a fresh one")

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg
            node._consumed = True
            node._parents = None
            node._backward = None

    # ------------------------------------------------------------------
    # elementwise arithmetic (numpy broadcasting, gradients summed back)

    def __add__(self, other) -> "Tensor":
        other = _coerce(other)
        data = _broadcast_apply(np.add, self, other)
        a_shape, b_shape = self.data.shape, other.data.shape

        def bw(g):
            return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)

        return self._record(data, (self, other), bw)

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        other = _coerce(other)
        data = _broadcast_apply(np.subtract, self, other)
        a_shape, b_shape = self.data.shape, other.data.shape

        def bw(g):
            return _unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)

        return self._record(data, (self, other), bw)

    def __rsub__(self, other) -> "Tensor":
        return _coerce(other).__sub__(self)

    def __mul__(self, other) -> "Tensor":
        other = _coerce(other)
        data = _broadcast_apply(np.multiply, self, other)
        ad, bd = self.data, other.data

        def bw(g):
            return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

        return self._record(data, (self, other), bw)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = _coerce(other)
        data = _broadcast_apply(np.divide, self, other)
        ad, bd = self.data, other.data

        def bw(g):
            return (_unbroadcast(g / bd, ad.shape),
                    _unbroadcast(-g * ad / (bd * bd), bd.shape))

        return self._record(data, (self, other), bw)

    def __rtruediv__(self, other) -> "Tensor":
        return _coerce(other).__truediv__(self)

    def __neg__(self) -> "Tensor":
        def bw(g):
            return (-g,)

        return self._record(-self.data, (self,), bw)

    # ------------------------------------------------------------------
    # matmul

    def matmul(self, other: "Tensor") -> "Tensor":
        other = _coerce(other)
        a, b = self.data, other.data
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
        try:
            data = np.matmul(a, b)
        except ValueError as exc:
            raise ShapeError(f"matmul batch shapes incompatible: {a.shape} @ {b.shape}") from exc

        def bw(g):
            ga = np.matmul(g, np.swapaxes(b, -1, -2))
            gb = np.matmul(np.swapaxes(a, -1, -2), g)
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

        return self._record(data, (self, other), bw)

    __matmul__ = matmul

    # ------------------------------------------------------------------
    # views

    def reshape(self, *shape) -> "Tensor":
        shape = _shape_args(shape)
        if int(np.prod(shape)) != self.data.size:
            raise ShapeError(f"cannot reshape {self.shape} to {shape}")
        src_shape = self.data.shape

        def bw(g):
            return (g.reshape(src_shape),)

        return self._record(self.data.reshape(shape), (self,), bw)

    def permute(self, *order) -> "Tensor":
        order = _shape_args(order)
        if sorted(order) != list(range(self.data.ndim)):
            raise ShapeError(f"permute order {order} is not a permutation of rank {self.ndim}")
        inverse = tuple(int(i) for i in np.argsort(order))

        def bw(g):
            return (np.transpose(g, inverse),)

        return self._record(np.transpose(self.data, order), (self,), bw)

    def rot90(self, k: int = 1) -> "Tensor":
        """Counterclockwise quarter turns in the (H, W) plane (last two axes)."""
        if self.data.ndim < 2:
            raise ShapeError(f"rot90 needs rank >= 2, got shape {self.shape}")
        k = int(k) % 4

        def bw(g):
            return (np.rot90(g, -k, axes=(-2, -1)),)

        return self._record(np.rot90(self.data, k, axes=(-2, -1)), (self,), bw)

    # ------------------------------------------------------------------
    # reductions

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        axes = _normalize_axes(axis, self.data.ndim)
        data = np.sum(self.data, axis=axes, keepdims=keepdims)
        src_shape = self.data.shape

        def bw(g):
            return (_spread(g, src_shape, axes, keepdims),)

        return self._record(data, (self,), bw)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        axes = _normalize_axes(axis, self.data.ndim)
        if axes is None:
            count = self.data.size
        else:
            count = int(np.prod([self.data.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def amax(self, axis: int, keepdims: bool = False) -> "Tensor":
        """Max-reduce along one axis; gradient splits evenly among ties."""
        ax = int(axis) % self.data.ndim
        data = np.max(self.data, axis=ax, keepdims=keepdims)
        src = self.data

        def bw(g):
            gk = g if keepdims else np.expand_dims(g, ax)
            mk = np.max(src, axis=ax, keepdims=True)
            mask = (src == mk).astype(np.float64)
            counts = mask.sum(axis=ax, keepdims=True)
            return (mask * (gk / counts),)

        return self._record(data, (self,), bw)

    # ------------------------------------------------------------------
    # pointwise math

    def exp(self) -> "Tensor":
        out_data = np.exp(self.data)

        def bw(g):
            return (g * out_data,)

        return self._record(out_data, (self,), bw)

    def log(self) -> "Tensor":
        src = self.data

        def bw(g):
            return (g / src,)

        return self._record(np.log(self.data), (self,), bw)

    def sqrt(self) -> "Tensor":
        out_data = np.sqrt(self.data)

        def bw(g):
            return (g * (0.5 / out_data),)

        return self._record(out_data, (self,), bw)

    def gelu(self) -> "Tensor":
        """Exact (erf-based) GELU: x * Phi(x)."""
        src = self.data
        phi = 0.5 * (1.0 + erf(src * _INV_SQRT2))
        data = src * phi

        def bw(g):
            pdf = _INV_SQRT_2PI * np.exp(-0.5 * src * src)
            return (g * (phi + src * pdf),)

        return self._record(data, (self,), bw)


# ----------------------------------------------------------------------
# free-function ops


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    """Concatenate along one axis; gradient splits back at the seams."""
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    ax = int(axis) % tensors[0].data.ndim
    try:
        data = np.concatenate([t.data for t in tensors], axis=ax)
    except ValueError as exc:
        raise ShapeError(f"concat shapes incompatible along axis {ax}") from exc
    sizes = [t.data.shape[ax] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(part) for part in np.split(g, offsets, axis=ax))

    return tensors[0]._record(data, tensors, bw)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice [start, stop) along one axis."""
    ax = int(axis) % x.data.ndim
    n = x.data.shape[ax]
    if not (0 <= start < stop <= n):
        raise ShapeError(f"slice [{start}:{stop}) out of range for axis {ax} of size {n}")
    index = tuple(slice(None) if d != ax else slice(start, stop) for d in range(x.data.ndim))
    src_shape = x.data.shape

    def bw(g):
        full = np.zeros(src_shape)
        full[index] = g
        return (full,)

    return x._record(x.data[index], (x,), bw)


def pad2d(x: Tensor, pad: int) -> Tensor:
    """Zero-pad the last two axes by ``pad`` on every side."""
    p = int(pad)
    if p < 0:
        raise ShapeError(f"pad must be >= 0, got {p}")
    if p == 0:
        return x
    if x.data.ndim < 2:
        raise ShapeError(f"pad2d needs rank >= 2, got shape {x.shape}")
    widths = [(0, 0)] * (x.data.ndim - 2) + [(p, p), (p, p)]
    data = np.pad(x.data, widths)

    def bw(g):
        sl = (Ellipsis, slice(p, -p), slice(p, -p))
        return (np.ascontiguousarray(g[sl]),)

    return x._record(data, (x,), bw)


# ----------------------------------------------------------------------
# gradient checking


def grad_check(fn: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Relative error between analytic and central-difference gradients.

    ``fn`` maps a tensor to a scalar loss. The input is copied into a fresh
    differentiable leaf; the error is the norm ratio documented on
    grad_check_targets.
    """
    leaf = Tensor(np.array(x.data, copy=True), requires_grad=True)
    return grad_check_targets(lambda: fn(leaf), [leaf], eps=eps)


def grad_check_targets(forward: Callable[[], Tensor], targets: Sequence[Tensor],
                       eps: float = 1e-5) -> float:
    """Finite-difference check of d(forward())/d(target) for each target.

    Runs one analytic backward, then perturbs every element of every target
    in place (recording disabled) to form central differences. Targets must
    be leaves the forward closure reads on every call.

    The returned error is the worst per-target norm ratio

        max_i |a_i - cd_i| / max(max_i |a_i|, max_i |cd_i|, 1e-12),

    i.e. the largest deviation relative to the scale of that target's
    gradient. An element-wise ratio would divide the fixed central-
    difference noise floor (about |loss| * 1e-16 / eps in absolute terms)
    by individual near-zero gradient entries and report failures for
    correct gradients; the norm ratio stays calibrated while still
    flagging any wrong backward rule, which perturbs elements at the
    gradient's own scale.
    """
    for t in targets:
        t.grad = None
    loss = forward()
    if loss.data.size != 1:
        raise GraphError(f"grad check needs a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise OracleError("grad check: forward produced a non-finite loss")
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in targets]

    worst = 0.0
    with no_grad():
        for t, an in zip(targets, analytic):
            flat = t.data.reshape(-1)
            an_flat = an.reshape(-1)
            cd_flat = np.empty_like(an_flat)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                f_plus = forward().item()
                flat[i] = orig - eps
                f_minus = forward().item()
                flat[i] = orig
                if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                    raise OracleError(
                        "grad check: perturbed forward produced a non-finite loss")
                cd_flat[i] = (f_plus - f_minus) / (2.0 * eps)
            num = float(np.abs(an_flat - cd_flat).max()) if flat.size else 0.0
            den = max(float(np.abs(an_flat).max()) if flat.size else 0.0,
                      float(np.abs(cd_flat).max()) if flat.size else 0.0,
                      1e-12)
            worst = max(worst, num / den)
    return worst


# ----------------------------------------------------------------------
# helpers


def _coerce(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(_as_array(value))


def _broadcast_apply(op, a: Tensor, b: Tensor) -> np.ndarray:
    try:
        return op(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(
            f"operands not broadcastable: {a.data.shape} vs {b.data.shape}") from exc


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    squash = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if squash:
        g = g.sum(axis=squash, keepdims=True)
    return g.reshape(shape)


def _shape_args(args) -> tuple[int, ...]:
    if len(args) == 1 and isinstance(args[0], (tuple, list)):
        args = tuple(args[0])
    return tuple(int(a) for a in args)


def _normalize_axes(axis, ndim: int):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(int(a) % ndim for a in axis))


def _spread(g: np.ndarray, shape: tuple[int, ...], axes, keepdims: bool) -> np.ndarray:
    """Broadcast a reduced gradient back over the reduced axes."""
    if axes is None:
        return np.full(shape, g.reshape(()))
    if not keepdims:
        for a in axes:
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape).copy()
