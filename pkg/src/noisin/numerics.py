"""Dense tensors, a reverse-mode tape, seeded RNG streams and a finite-difference checker.

Tensors wrap numpy arrays and are treated as immutable once created. Operations
record themselves on the innermost active :class:`Tape`; outside a tape they
run as plain numpy (used for evaluation and Monte Carlo diagnostics).

Gate fusion in the recurrent cells relies on :func:`split_cols`, and the
likelihood losses are recorded as single fused primitives (see ``expfam``).
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """Input lies outside the domain of the operation."""


class NumericalError(FloatingPointError):
    """A value that must be finite is NaN or infinite."""


class ContractViolation(RuntimeError):
    """A caller-side precondition that cannot be checked statically was broken."""


class Tensor:
    """Immutable dense array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind not in "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def parameter(data, name: str | None = None, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# Tape


class Tape:
    """Ordered record of primitive operations for one reverse sweep.

    Use as a context manager; operations executed inside the block on tensors
    that require gradients are appended in execution order, which is a valid
    topological order of the computation graph.
    """

    _stack: list["Tape"] = []

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def gradient(self, loss: Tensor, leaves: Sequence[Tensor]) -> list[np.ndarray]:
        """Reverse-mode gradients of a scalar ``loss`` w.r.t. ``leaves``.

        Leaves the loss does not depend on get zero gradients.
        """
        return backward(self, loss, leaves)


def _active_tape() -> Tape | None:
    return Tape._stack[-1] if Tape._stack else None


def _record(out_data: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    tape = _active_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return Tensor(out_data)
    out = Tensor(out_data, requires_grad=True)
    tape.nodes.append((out, inputs, vjp))
    return out


def backward(tape: Tape, loss: Tensor, leaves: Sequence[Tensor]) -> list[np.ndarray]:
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, inputs, vjp in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for inp, gi in zip(inputs, vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    return [grads.get(id(p), np.zeros_like(p.data)) for p in leaves]


# ---------------------------------------------------------------------------
# Primitive operations


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape) if shape else np.sum(g)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "add")
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _record(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    return _record(a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _record(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-n bias to every row of an (m, n) tensor."""
    if x.data.ndim != 2 or b.shape != (x.shape[1],):
        raise ShapeError(f"add_bias: bias {b.shape} does not fit rows of {x.shape}")
    return _record(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0)))


def stable_sigmoid(x: np.ndarray) -> np.ndarray:
    # exp only ever sees nonpositive arguments
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: Tensor) -> Tensor:
    y = stable_sigmoid(x.data)
    return _record(y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _record(y, (x,), lambda g: (g * (1.0 - y * y),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _record(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise DomainError("log of a nonpositive value")
    xd = x.data
    return _record(np.log(xd), (x,), lambda g: (g / xd,))


def elementwise(op: str, x: Tensor, y: Tensor | None = None) -> Tensor:
    unary = {"sigmoid": sigmoid, "tanh": tanh, "exp": exp, "log": log}
    binary = {"mul": mul, "add": add}
    if op in unary:
        return unary[op](x)
    if op in binary:
        if y is None:
            raise TypeError(f"{op} needs two operands")
        return binary[op](x, y)
    raise ValueError(f"unknown elementwise op {op!r}")


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _record(np.sum(x.data), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.size)


def logsumexp_array(s: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(s, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(s - m), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def logsumexp(s: Tensor) -> Tensor:
    """log(sum(exp(s))) over a 1-D tensor, max-shifted."""
    if s.data.ndim != 1:
        raise ShapeError(f"logsumexp expects a vector, got shape {s.shape}")
    if s.size == 0:
        raise ShapeError("logsumexp of an empty vector")
    if not np.all(np.isfinite(s.data)):
        raise NumericalError("logsumexp input must be finite")
    val = logsumexp_array(s.data)
    p = np.exp(s.data - val)
    return _record(np.asarray(val), (s,), lambda g: (g * p,))


def take_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Embedding lookup: rows of ``table`` selected by integer ``ids``."""
    ids = np.asarray(ids)
    shape = table.shape

    def vjp(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, ids, g)
        return (out,)

    return _record(table.data[ids], (table,), vjp)


def split_cols(x: Tensor, parts: int) -> list[Tensor]:
    """Split an (m, parts*n) tensor into ``parts`` column blocks of width n."""
    m, total = x.shape
    if total % parts:
        raise ShapeError(f"cannot split {total} columns into {parts} blocks")
    n = total // parts
    outs = []
    for k in range(parts):
        lo, hi = k * n, (k + 1) * n

        def vjp(g, lo=lo, hi=hi):
            full = np.zeros((m, total), dtype=g.dtype)
            full[:, lo:hi] = g
            return (full,)

        outs.append(_record(x.data[:, lo:hi], (x,), vjp))
    return outs


def constant(data, dtype=None) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype or DEFAULT_DTYPE))


def check_finite(x: Tensor | np.ndarray, what: str = "value") -> None:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite {what}")


# ---------------------------------------------------------------------------
# Random streams


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; the only source of randomness in the package."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def split_rng(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Independent child streams, deterministic in the parent's seed and spawn count."""
    return list(rng.spawn(n))


def open_uniform(rng: np.random.Generator, shape) -> np.ndarray:
    """Uniform draws on the open interval (0, 1) with 53-bit resolution."""
    k = rng.integers(0, 1 << 53, size=shape, dtype=np.int64)
    return (k.astype(np.float64) + 0.5) * (1.0 / (1 << 53))


# ---------------------------------------------------------------------------
# Finite-difference oracle


def central_difference(f: Callable[[np.ndarray], float], theta: np.ndarray, step: float = 1e-5) -> np.ndarray:
    theta = np.array(theta, dtype=np.float64)
    grad = np.zeros_like(theta)
    flat = theta.reshape(-1)
    gflat = grad.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + step
        fp = float(f(theta))
        flat[j] = orig - step
        fm = float(f(theta))
        flat[j] = orig
        gflat[j] = (fp - fm) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def grad_check(f: Callable[[Tensor], Tensor], theta, step: float = 1e-5) -> float:
    """Max relative error between tape gradients of ``f`` and central differences.

    ``f`` maps a parameter tensor to a scalar tensor and must be deterministic;
    any randomness it uses has to be frozen outside of it.
    """
    return grad_check_params(lambda ps: f(ps[0]), [np.asarray(theta, dtype=np.float64)], step)


def grad_check_params(
    f: Callable[[list[Tensor]], Tensor],
    arrays: Iterable[np.ndarray],
    step: float = 1e-5,
    return_all: bool = False,
):
    """Like :func:`grad_check` but over several parameter arrays at once.

    Returns the max relative error, or a list of per-array errors when
    ``return_all`` is set.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    params = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = f(params)
    analytic = tape.gradient(loss, params)

    def value(values: list[np.ndarray]) -> float:
        return float(f([Tensor(v) for v in values]).data)

    base = value(arrays)
    if value(arrays) != base:
        raise ContractViolation("function is not reproducible between evaluations")

    errors = []
    for i, a in enumerate(arrays):
        def fi(x, i=i):
            vals = list(arrays)
            vals[i] = x
            return value(vals)

        errors.append(relative_error(analytic[i], central_difference(fi, a, step)))
    if return_all:
        return errors
    return max(errors) if errors else 0.0
