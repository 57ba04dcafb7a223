"""Dense-tensor engine with reverse-mode differentiation on an explicit tape.

Values are numpy-backed, contiguous, row-major, f32 or f64 (f64 default).
There is no general broadcasting: operands must match in shape exactly,
except for ops that take an explicit scalar, a bias row, or an importance
vector. Each forward pass records onto one Tape; ``tape.backward(loss)``
walks the records in reverse creation order (a valid reverse topological
order) exactly once and accumulates into ``.grad``. Tensors are immutable
after construction; parameters are the one exception, mutated only between
tapes (optimizer updates, finite-difference probes).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, DimensionError, NumericError

_DTYPES = {"f32": np.float32, "f64": np.float64}
_default_dtype = np.float64

# Debug-mode forward checks: ops whose inputs are all finite must produce
# finite outputs. Off by default; the test suite turns it on.
DEBUG_CHECKS = False

# Test hook: name of an op whose backward rule gets a sign flip, used as a
# negative control for the gradient checker. Never set in production paths.
GRAD_FAULT: str | None = None


def set_default_dtype(name: str) -> None:
    if name not in _DTYPES:
        raise ContractError(f"unknown precision {name!r}, expected f32 or f64")
    global _default_dtype
    _default_dtype = _DTYPES[name]


def default_dtype() -> np.dtype:
    return np.dtype(_default_dtype)


class Tensor:
    """n-d numeric array with optional gradient-tape participation."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.array(data, dtype=dtype or _default_dtype, order="C")
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # Internal fast path: trusts dtype and takes ownership of arr.
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Minimal operator sugar; scalars route to the explicit scalar ops.
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered op record for one forward pass; consumed by backward()."""

    def __init__(self):
        self._nodes: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.pop()

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: Tensor) -> None:
        """Populate .grad of every recorded tensor reachable from loss.

        The loss must be a scalar produced under this tape. Visits nodes in
        reverse creation order exactly once, then clears the tape.
        """
        if self._consumed:
            raise ContractError("tape already consumed by a previous backward()")
        if loss.data.ndim != 0:
            raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")
        self._consumed = True
        loss.grad = np.ones((), dtype=loss.data.dtype)
        for out, backward in reversed(self._nodes):
            if out.grad is not None:
                backward(out.grad)
        self._nodes.clear()


_TAPES: list[Tape] = []


def _active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _accum(t: Tensor, g: np.ndarray, owned: bool = False) -> None:
    """Add g into t.grad. owned=True donates g (caller-allocated, never
    aliased elsewhere) instead of copying on first accumulation."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g if owned and g.dtype == t.data.dtype else np.array(g, dtype=t.data.dtype)
    else:
        t.grad += g


def record_op(
    name: str,
    out_data: np.ndarray,
    parents: Sequence[Tensor],
    backward: Callable[[np.ndarray], None],
) -> Tensor:
    """Wrap an op result and register its backward rule on the active tape.

    Exposed so domain modules can define their own primitives (e.g. the
    bilinear resampler) with hand-written gradients.
    """
    if DEBUG_CHECKS:
        if all(np.isfinite(p.data).all() for p in parents) and not np.isfinite(out_data).all():
            raise NumericError(f"op {name!r} produced NaN/Inf from finite inputs")
    out = Tensor._wrap(out_data)
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        if GRAD_FAULT == name:
            inner = backward
            backward = lambda g: inner(-g)  # noqa: E731
        tape._nodes.append((out, backward))
    return out


def _same_shape(name: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"{name}: shape {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# constructors


def zeros(shape, requires_grad: bool = False) -> Tensor:
    t = Tensor._wrap(np.zeros(shape, dtype=_default_dtype))
    t.requires_grad = requires_grad
    return t


def ones(shape) -> Tensor:
    return Tensor._wrap(np.ones(shape, dtype=_default_dtype))


def constant(arr) -> Tensor:
    return Tensor(arr, requires_grad=False)


def param(rng: np.random.Generator, shape, std: float = 0.02) -> Tensor:
    """Trainable tensor initialized N(0, std^2), std=0 for zeros."""
    if std == 0.0:
        data = np.zeros(shape, dtype=_default_dtype)
    else:
        data = rng.normal(0.0, std, size=shape).astype(_default_dtype)
    return Tensor(data, requires_grad=True)


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)

    def backward(g):
        _accum(a, g)
        _accum(b, g)

    return record_op("add", a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)

    def backward(g):
        _accum(a, g)
        _accum(b, -g)

    return record_op("sub", a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)

    def backward(g):
        _accum(a, g * b.data, owned=True)
        _accum(b, g * a.data, owned=True)

    return record_op("mul", a.data * b.data, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("div", a, b)
    out_data = a.data / b.data

    def backward(g):
        _accum(a, g / b.data, owned=True)
        _accum(b, -g * out_data / b.data, owned=True)

    return record_op("div", out_data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, -g, owned=True)

    return record_op("neg", -a.data, (a,), backward)


def add_scalar(a: Tensor, c: float) -> Tensor:
    def backward(g):
        _accum(a, g)

    return record_op("add_scalar", a.data + c, (a,), backward)


def scale(a: Tensor, c: float) -> Tensor:
    def backward(g):
        _accum(a, g * c, owned=True)

    return record_op("scale", a.data * c, (a,), backward)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a row vector b (d,) to every row of x (n, d)."""
    if x.data.ndim != 2 or b.data.shape != (x.data.shape[1],):
        raise DimensionError(f"add_bias: x {x.data.shape} vs bias {b.data.shape}")

    def backward(g):
        _accum(x, g)
        _accum(b, g.sum(axis=0), owned=True)

    return record_op("add_bias", x.data + b.data[None, :], (x, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.data.shape} x {b.data.shape}")

    def backward(g):
        _accum(a, g @ b.data.T, owned=True)
        _accum(b, a.data.T @ g, owned=True)

    return record_op("matmul", a.data @ b.data, (a, b), backward)


# ---------------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def backward(g):
        _accum(a, g.reshape(a.data.shape))

    return record_op("reshape", a.data.reshape(shape), (a,), backward)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.data.shape}")

    def backward(g):
        _accum(a, np.ascontiguousarray(g.T), owned=True)

    return record_op("transpose", np.ascontiguousarray(a.data.T), (a,), backward)


def permute_axes(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        _accum(a, np.ascontiguousarray(g.transpose(inv)), owned=True)

    return record_op("permute_axes", np.ascontiguousarray(a.data.transpose(axes)), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(t, g[tuple(sl)])

    return record_op("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    if start < 0 or start + length > a.data.shape[axis]:
        raise DimensionError(
            f"narrow: [{start}:{start + length}] out of range for axis {axis} of shape {a.data.shape}"
        )
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[sl] = g
            _accum(a, full, owned=True)

    return record_op("narrow", np.ascontiguousarray(a.data[sl]), (a,), backward)


def sum_axis(a: Tensor, axis: int) -> Tensor:
    def backward(g):
        _accum(a, np.broadcast_to(np.expand_dims(g, axis), a.data.shape))

    return record_op("sum_axis", a.data.sum(axis=axis), (a,), backward)


def repeat_axis(a: Tensor, times: int, axis: int = 0) -> Tensor:
    """Repeat each entry along axis, block-wise: [a, b] x2 -> [a, a, b, b]."""
    n = a.data.shape[axis]

    def backward(g):
        shp = a.data.shape[:axis] + (n, times) + a.data.shape[axis + 1 :]
        _accum(a, g.reshape(shp).sum(axis=axis + 1), owned=True)

    return record_op("repeat_axis", np.repeat(a.data, times, axis=axis), (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, np.broadcast_to(g, a.data.shape))

    return record_op("sum_all", np.asarray(a.data.sum(), dtype=a.data.dtype), (a,), backward)


# ---------------------------------------------------------------------------
# nonlinearities and normalizations


def relu(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, g * (a.data > 0), owned=True)

    return record_op("relu", np.maximum(a.data, 0), (a,), backward)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))

    def backward(g):
        pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT_2PI
        _accum(a, g * (cdf + a.data * pdf), owned=True)

    return record_op("gelu", a.data * cdf, (a,), backward)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g):
        _accum(a, g * out_data, owned=True)

    return record_op("exp", out_data, (a,), backward)


def log(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, g / a.data, owned=True)

    return record_op("log", np.log(a.data), (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def backward(g):
        _accum(a, g * 0.5 / out_data, owned=True)

    return record_op("sqrt", out_data, (a,), backward)


def clamp_min(a: Tensor, floor: float) -> Tensor:
    def backward(g):
        _accum(a, g * (a.data > floor), owned=True)

    return record_op("clamp_min", np.maximum(a.data, floor), (a,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        _accum(a, out_data * (g - (g * out_data).sum(axis=axis, keepdims=True)), owned=True)

    return record_op("softmax", out_data, (a,), backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out_data = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        _accum(a, g - np.exp(out_data) * g.sum(axis=axis, keepdims=True), owned=True)

    return record_op("log_softmax", out_data, (a,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization over the last axis of a matrix, then affine."""
    if x.data.ndim != 2:
        raise DimensionError(f"layer_norm expects a matrix, got shape {x.data.shape}")
    d = x.data.shape[1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise DimensionError(f"layer_norm: gain/bias must be ({d},)")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        _accum(gain, (g * xhat).sum(axis=0), owned=True)
        _accum(bias, g.sum(axis=0), owned=True)
        gg = g * gain.data[None, :]
        m1 = gg.mean(axis=1, keepdims=True)
        m2 = (gg * xhat).mean(axis=1, keepdims=True)
        _accum(x, inv * (gg - m1 - xhat * m2), owned=True)

    return record_op("layer_norm", xhat * gain.data[None, :] + bias.data[None, :], (x, gain, bias), backward)


def gated_scale(values: Tensor, importance: Tensor) -> Tensor:
    """Scale row l of values (L, d) by importance[l]; the gating multiply."""
    if values.data.ndim != 2 or importance.data.shape != (values.data.shape[0],):
        raise DimensionError(
            f"gated_scale: values {values.data.shape} vs importance {importance.data.shape}"
        )

    def backward(g):
        _accum(values, g * importance.data[:, None], owned=True)
        _accum(importance, (g * values.data).sum(axis=1), owned=True)

    return record_op("gated_scale", values.data * importance.data[:, None], (values, importance), backward)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckEntry:
    name: str
    max_abs_err: float
    rel_err: float
    passed: bool


@dataclass
class GradCheckReport:
    tol: float
    atol: float = 1e-7
    entries: list[GradCheckEntry] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    @property
    def worst(self) -> float:
        # Worst scaled error among groups where FD had measurable signal.
        return max((e.rel_err for e in self.entries if e.max_abs_err > self.atol), default=0.0)

    def lines(self) -> list[str]:
        out = []
        for e in self.entries:
            note = "  [below FD measurement floor]" if e.max_abs_err <= self.atol else ""
            out.append(
                f"{'PASS' if e.passed else 'FAIL'}  {e.name:<40s} "
                f"rel_err={e.rel_err:.3e} abs_err={e.max_abs_err:.3e}{note}"
            )
        return out


def finite_diff_check(
    f: Callable[[], Tensor],
    params: dict[str, Tensor],
    rel_step: float = 1e-6,
    tol: float = 1e-5,
    atol: float = 1e-7,
) -> GradCheckReport:
    """Compare taped gradients of a deterministic scalar f against central
    differences with step rel_step*max(1, |theta|), parameter by parameter.

    Coordinates whose first estimate disagrees get one Richardson refinement
    (steps h and h/8) to cancel the h^2 truncation term; cosine paths at
    small init carry extreme curvature that plain central differences cannot
    resolve. A group passes when its max |analytic - fd| is below atol
    (differences under the f64 measurement floor of FD itself) or its
    scaled error is below tol, where the scale is the largest gradient
    magnitude seen in the group.
    """
    for p in params.values():
        p.zero_grad()
    with Tape() as tape:
        tape.backward(f())
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }
    for p in params.values():
        p.zero_grad()

    def central(flat: np.ndarray, i: int, h: float) -> float:
        orig = flat[i]
        flat[i] = orig + h
        lp = f().item()
        flat[i] = orig - h
        lm = f().item()
        flat[i] = orig
        return (lp - lm) / (2.0 * h)

    report = GradCheckReport(tol=tol, atol=atol)
    for name, p in params.items():
        flat = p.data.ravel()
        a_flat = analytic[name].ravel()
        fd = np.zeros_like(flat)
        for i in range(flat.size):
            h = rel_step * max(1.0, abs(flat[i]))
            est = central(flat, i, h)
            diff = abs(est - a_flat[i])
            if diff > atol and diff > tol * max(abs(est), abs(a_flat[i])):
                fine = central(flat, i, h / 8.0)
                est = (64.0 * fine - est) / 63.0
            fd[i] = est
        fd = fd.reshape(p.data.shape)
        a = analytic[name]
        abs_err = float(np.abs(a - fd).max()) if a.size else 0.0
        scl = max(float(np.abs(a).max(initial=0.0)), float(np.abs(fd).max(initial=0.0)))
        rel = abs_err / scl if scl > 0 else 0.0
        report.entries.append(
            GradCheckEntry(name=name, max_abs_err=abs_err, rel_err=rel, passed=abs_err <= atol or rel <= tol)
        )
    return report


# ---------------------------------------------------------------------------
# parameter containers


class Module:
    """Tiny parameter-bundle base; children discovered via attribute order."""

    def named_parameters(self) -> Iterable[tuple[str, Tensor]]:
        for attr, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield attr, val
            elif isinstance(val, Module):
                for n, p in val.named_parameters():
                    yield f"{attr}.{n}", p
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        for n, p in item.named_parameters():
                            yield f"{attr}.{i}.{n}", p

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()
