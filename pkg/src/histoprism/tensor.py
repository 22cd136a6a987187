"""Dense f64 matrix ops with a small reverse-mode autodiff tape.

Matrices are plain 2-D ``numpy.float64`` arrays. A :class:`Var` wraps one
matrix; Vars created with :meth:`Tape.leaf` are differentiable and every op
that touches them appends a node to the tape. Vars without a tape are
constants, so the same op functions serve inference and training.

The op set is deliberately closed: matmul, add, scale, softmax_rows,
layer_norm, gelu, transpose, slice, mean, square.

Two pieces of instrumentation hang off the ops:

* :func:`count_macs` counts multiply-accumulates performed by ``matmul``.
* :func:`track_allocations` tracks live and peak bytes of op outputs.
"""

from __future__ import annotations

import math
import weakref
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping

import numpy as np

LAYER_NORM_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Var:
    """A matrix value, optionally recorded on a :class:`Tape`."""

    __slots__ = ("value", "tape", "index", "__weakref__")

    def __init__(self, value, tape: "Tape | None" = None, index: int = -1):
        arr = np.asarray(value, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim == 0:
            arr = arr.reshape(1, 1)
        if arr.ndim != 2:
            raise ShapeError(f"expected a matrix, got array of shape {arr.shape}")
        self.value = arr
        self.tape = tape
        self.index = index

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def __repr__(self) -> str:
        kind = "leaf/op" if self.tape is not None else "const"
        return f"Var({self.shape[0]}x{self.shape[1]}, {kind})"


@dataclass
class _Node:
    out: int
    inputs: tuple[int, ...]
    vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


class Tape:
    """Ordered record of primitive ops.

    Nodes are appended in execution order, which is a topological order, so
    the backward pass simply walks the list in reverse.
    """

    def __init__(self) -> None:
        self._nodes: list[_Node] = []
        self._n_vars = 0

    def __len__(self) -> int:
        return len(self._nodes)

    def _new_var(self, value: np.ndarray) -> Var:
        var = Var(value, self, self._n_vars)
        self._n_vars += 1
        return var

    def leaf(self, value) -> Var:
        return self._new_var(np.array(value, dtype=np.float64, copy=True))

    def _record(self, value, inputs: tuple[Var, ...], vjp) -> Var:
        out = self._new_var(value)
        idx = tuple(v.index if v.tape is self else -1 for v in inputs)
        self._nodes.append(_Node(out.index, idx, vjp))
        return out

    def backward(self, output: Var) -> list[np.ndarray | None]:
        """Adjoints of every Var on the tape w.r.t. the scalar ``output``."""
        if output.tape is not self:
            raise ValueError("output is not recorded on this tape")
        if output.shape != (1, 1):
            raise ShapeError(f"backward needs a 1x1 output, got {output.shape}")
        grads: list[np.ndarray | None] = [None] * self._n_vars
        grads[output.index] = np.ones((1, 1))
        for node in reversed(self._nodes):
            g = grads[node.out]
            if g is None:
                continue
            for i, gi in zip(node.inputs, node.vjp(g)):
                if i < 0 or gi is None:
                    continue
                grads[i] = gi if grads[i] is None else grads[i] + gi
        return grads

    def gradient(self, output: Var, wrt: Mapping[str, Var]) -> dict[str, np.ndarray]:
        grads = self.backward(output)
        out = {}
        for name, var in wrt.items():
            g = grads[var.index] if var.tape is self else None
            out[name] = np.zeros_like(var.value) if g is None else g
        return out


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _emit(value: np.ndarray, inputs: tuple[Var, ...], vjp) -> Var:
    tape = None
    for v in inputs:
        if v.tape is not None:
            if tape is not None and v.tape is not tape:
                raise ValueError("operands belong to different tapes")
            tape = v.tape
    out = Var(value) if tape is None else tape._record(value, inputs, vjp)
    for tracker in _ALLOC_TRACKERS:
        tracker.register(out)
    return out


# ---------------------------------------------------------------------------
# instrumentation

_MAC_COUNTERS: list["MacCounter"] = []
_ALLOC_TRACKERS: list["AllocationTracker"] = []


@dataclass(eq=False)
class MacCounter:
    macs: int = 0
    calls: int = 0


@contextmanager
def count_macs() -> Iterator[MacCounter]:
    """Count multiply-accumulates of every ``matmul`` inside the block."""
    counter = MacCounter()
    _MAC_COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _MAC_COUNTERS.remove(counter)


@dataclass(eq=False)
class AllocationTracker:
    """Live/peak bytes of Var payloads created inside the block."""

    live: int = 0
    peak: int = 0
    total: int = 0
    _finalizers: list = field(default_factory=list, repr=False)

    def register(self, var: Var) -> None:
        n = var.value.nbytes
        self.live += n
        self.total += n
        self.peak = max(self.peak, self.live)
        self._finalizers.append(weakref.finalize(var, self._release, n))

    def _release(self, n: int) -> None:
        self.live -= n


@contextmanager
def track_allocations() -> Iterator[AllocationTracker]:
    tracker = AllocationTracker()
    _ALLOC_TRACKERS.append(tracker)
    try:
        yield tracker
    finally:
        _ALLOC_TRACKERS.remove(tracker)
        for fin in tracker._finalizers:
            fin.detach()


# ---------------------------------------------------------------------------
# ops


def matmul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    (n, k), (k2, m) = a.shape, b.shape
    if k != k2:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    for counter in _MAC_COUNTERS:
        counter.macs += n * k * m
        counter.calls += 1
    av, bv = a.value, b.value

    def vjp(g):
        return g @ bv.T, av.T @ g

    return _emit(av @ bv, (a, b), vjp)


def add(a, b) -> Var:
    """Elementwise sum; ``b`` may be a 1 x cols row broadcast over rows."""
    a, b = as_var(a), as_var(b)
    if a.shape == b.shape:
        return _emit(a.value + b.value, (a, b), lambda g: (g, g))
    if b.shape == (1, a.shape[1]):
        return _emit(a.value + b.value, (a, b), lambda g: (g, g.sum(axis=0, keepdims=True)))
    raise ShapeError(f"add shape mismatch: {a.shape} + {b.shape}")


def scale(a, s: float) -> Var:
    a = as_var(a)
    s = float(s)
    return _emit(a.value * s, (a,), lambda g: (g * s,))


def sub(a, b) -> Var:
    return add(a, scale(b, -1.0))


def transpose(a) -> Var:
    a = as_var(a)
    return _emit(a.value.T.copy(), (a,), lambda g: (g.T,))


def slice_(a, rows: slice = slice(None), cols: slice = slice(None)) -> Var:
    a = as_var(a)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        full[rows, cols] = g
        return (full,)

    return _emit(a.value[rows, cols].copy(), (a,), vjp)


def mean(a) -> Var:
    """Mean of all entries, as a 1x1 matrix."""
    a = as_var(a)
    shape, size = a.shape, a.value.size
    return _emit(np.array([[a.value.mean()]]), (a,), lambda g: (np.full(shape, g[0, 0] / size),))


def square(a) -> Var:
    a = as_var(a)
    av = a.value
    return _emit(av * av, (a,), lambda g: (2.0 * av * g,))


def softmax_rows(a) -> Var:
    a = as_var(a)
    z = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _emit(s, (a,), vjp)


def gelu(a) -> Var:
    """GELU, tanh approximation."""
    a = as_var(a)
    x = a.value
    t = np.tanh(_GELU_C * (x + _GELU_K * x**3))
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_K * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return _emit(out, (a,), vjp)


def layer_norm(a, gain, bias, eps: float = LAYER_NORM_EPS) -> Var:
    """Per-row normalisation followed by a per-column affine map."""
    a, gain, bias = as_var(a), as_var(gain), as_var(bias)
    cols = a.shape[1]
    if gain.shape != (1, cols) or bias.shape != (1, cols):
        raise ShapeError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match {cols} columns"
        )
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = a.value
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv
    gv = gain.value

    def vjp(g):
        dxhat = g * gv
        dx = inv * (
            dxhat
            - dxhat.mean(axis=1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True)

    return _emit(xhat * gv + bias.value, (a, gain, bias), vjp)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    probes: dict[str, int]
    skipped: int = 0
    step: float = 1e-5
    floor: float = 1e-6

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def passed(self, tol: float) -> bool:
        return all(err < tol for err in self.max_rel_error.values())


def relative_error(a: float, b: float, floor: float = 1e-6) -> float:
    denom = max(abs(a), abs(b), floor)
    return abs(a - b) / denom


def check_gradients(
    loss_fn: Callable[[Mapping[str, Var]], Var],
    params: Mapping[str, np.ndarray],
    probes: int = 3,
    step: float = 1e-5,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare tape gradients with central differences on random entries.

    ``loss_fn`` receives a mapping name -> Var and must return a 1x1 Var. It
    is called once on a tape and then repeatedly with constant Vars.

    The error for one entry is ``|a - n| / max(|a|, |n|, floor)``. The floor
    keeps gradients that are exactly zero (e.g. attention key biases, which
    softmax cancels) from turning finite-difference round-off, roughly
    ``eps * |loss| / step``, into a large relative error.
    """
    if not 1e-7 <= step <= 1e-3:
        raise ValueError("step must lie in [1e-7, 1e-3]")
    if probes < 1:
        raise ValueError("need at least one probe per tensor")

    tape = Tape()
    leaves = {k: tape.leaf(v) for k, v in params.items()}
    grads = tape.gradient(loss_fn(leaves), leaves)

    rng = np.random.default_rng(seed)
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}

    def value_at() -> float:
        return float(loss_fn({k: Var(v) for k, v in work.items()}).value[0, 0])

    errors: dict[str, float] = {}
    counts: dict[str, int] = {}
    skipped = 0
    for name, arr in work.items():
        flat = arr.reshape(-1)
        picks = rng.choice(flat.size, size=min(probes, flat.size), replace=False)
        worst = 0.0
        done = 0
        for p in sorted(picks.tolist()):
            orig = flat[p]
            flat[p] = orig + step
            up = value_at()
            flat[p] = orig - step
            down = value_at()
            flat[p] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                skipped += 1
                continue
            numeric = (up - down) / (2.0 * step)
            analytic = float(grads[name].reshape(-1)[p])
            worst = max(worst, relative_error(analytic, numeric, floor))
            done += 1
        errors[name] = worst
        counts[name] = done
    return GradCheckReport(errors, counts, skipped, step, floor)
