"""Reverse-mode differentiable tensor core.

Dense float64 tensors, a define-by-run tape, and the small primitive set
the sequence models are built from. Tapes are rebuilt per utterance;
there is no graph caching. `finite_diff_check` compares every analytic
gradient against central differences and is the main correctness
instrument for the rest of the package.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "DcoreError",
    "ContractViolation",
    "NumericFault",
    "NonDeterministicFunction",
    "CheckpointError",
    "Tensor",
    "Parameter",
    "Tape",
    "apply_primitive",
    "backward",
    "finite_diff_check",
    "GradCheckReport",
    "save_checkpoint",
    "load_checkpoint",
    "restore_checkpoint",
]


class DcoreError(Exception):
    """Base error for tensor-core failures."""


class ContractViolation(DcoreError):
    """An operation was called with inputs that violate its contract."""


class NumericFault(DcoreError):
    """A primitive produced a non-finite value."""


class NonDeterministicFunction(DcoreError):
    """An objective handed to finite_diff_check is not deterministic."""


class CheckpointError(DcoreError):
    """A checkpoint file is malformed or truncated."""


class Tensor:
    """Immutable dense float64 array, row-major."""

    __slots__ = ("data", "param")

    def __init__(self, data):
        arr = np.array(data, dtype=np.float64)
        arr.setflags(write=False)
        self.data = arr
        self.param: "Parameter | None" = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        arr.setflags(write=False)
        t.data = arr
        t.param = None
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
        if self.data.size != 1:
            raise ContractViolation(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


class Parameter:
    """Named trainable tensor with a same-shape gradient slot."""

    __slots__ = ("name", "_value", "grad")

    def __init__(self, name: str, value):
        self.name = name
        self._value: Tensor | None = None
        self.value = value
        self.grad = Tensor(np.zeros(self._value.shape))

    @property
    def value(self) -> Tensor:
        return self._value

    @value.setter
    def value(self, v) -> None:
        t = v if isinstance(v, Tensor) else Tensor(v)
        if t.param is not None and t.param is not self:
            raise ContractViolation(
                f"tensor already owned by parameter '{t.param.name}'"
            )
        t.param = self
        self._value = t

    @property
    def shape(self) -> tuple[int, ...]:
        return self._value.shape

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


class _Record:
    __slots__ = ("kind", "inputs", "output", "vjp")

    def __init__(self, kind, inputs, output, vjp):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


class Tape:
    """Ordered record of executed primitives.

    Single-threaded: only one tape may record at a time, and it must not
    be shared across threads while recording.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._params: dict[int, Parameter] = {}

    def __enter__(self) -> "Tape":
        global _ACTIVE
        if _ACTIVE is not None:
            raise ContractViolation("a tape is already recording")
        _ACTIVE = self
        return self

    def __exit__(self, *exc) -> bool:
        global _ACTIVE
        _ACTIVE = None
        return False

    def _add(self, kind: str, inputs: tuple[Tensor, ...], output: Tensor, vjp) -> None:
        for t in inputs:
            if t.param is not None:
                self._params[id(t)] = t.param
        self.records.append(_Record(kind, inputs, output, vjp))

    def __len__(self) -> int:
        return len(self.records)


_ACTIVE: Tape | None = None


def _tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(kind: str, inputs: tuple[Tensor, ...], out: np.ndarray, vjp) -> Tensor:
    out = np.asarray(out, dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise NumericFault(f"primitive '{kind}' produced a non-finite value")
    t = Tensor._wrap(out)
    if _ACTIVE is not None:
        _ACTIVE._add(kind, inputs, t, vjp)
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(kind: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractViolation(
            f"{kind}: shapes {a.shape} and {b.shape} do not conform"
        ) from None


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _tensor(a), _tensor(b)
    A, B = a.data, b.data
    if A.ndim not in (1, 2) or B.ndim not in (1, 2) or A.shape[-1] != B.shape[0]:
        raise ContractViolation(f"matmul: shapes {A.shape} and {B.shape} do not conform")
    out = A @ B

    def vjp(g):
        if A.ndim == 2 and B.ndim == 2:
            return g @ B.T, A.T @ g
        if A.ndim == 2 and B.ndim == 1:
            return np.outer(g, B), A.T @ g
        if A.ndim == 1 and B.ndim == 2:
            return B @ g, np.outer(A, g)
        return g * B, g * A

    return _emit("matmul", (a, b), out, vjp)


def add(a, b) -> Tensor:
    a, b = _tensor(a), _tensor(b)
    _check_broadcast("add", a, b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", (a, b), out, vjp)


def sub(a, b) -> Tensor:
    a, b = _tensor(a), _tensor(b)
    _check_broadcast("sub", a, b)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _emit("sub", (a, b), out, vjp)


def mul(a, b) -> Tensor:
    a, b = _tensor(a), _tensor(b)
    _check_broadcast("mul", a, b)
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _emit("mul", (a, b), out, vjp)


def div(a, b) -> Tensor:
    a, b = _tensor(a), _tensor(b)
    _check_broadcast("div", a, b)
    out = a.data / b.data

    def vjp(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _emit("div", (a, b), out, vjp)


def neg(a) -> Tensor:
    a = _tensor(a)

    def vjp(g):
        return (-g,)

    return _emit("neg", (a,), -a.data, vjp)


def tanh(a) -> Tensor:
    a = _tensor(a)
    out = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return _emit("tanh", (a,), out, vjp)


def sigmoid(a) -> Tensor:
    a = _tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _emit("sigmoid", (a,), out, vjp)


def exp(a) -> Tensor:
    a = _tensor(a)
    out = np.exp(a.data)

    def vjp(g):
        return (g * out,)

    return _emit("exp", (a,), out, vjp)


def log(a) -> Tensor:
    a = _tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)

    def vjp(g):
        return (g / a.data,)

    return _emit("log", (a,), out, vjp)


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(_tensor(p) for p in parts)
    if not ts:
        raise ContractViolation("concat: no inputs")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ContractViolation(
            f"concat: shapes {[t.shape for t in ts]} do not conform on axis {axis}"
        ) from None
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _emit("concat", ts, out, vjp)


def slice_axis(a, start: int, stop: int, axis: int = 0) -> Tensor:
    a = _tensor(a)
    dim = a.shape[axis]
    if not (0 <= start < stop <= dim):
        raise ContractViolation(
            f"slice: [{start}:{stop}] out of range for extent {dim} on axis {axis}"
        )
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out = a.data[index].copy()

    def vjp(g):
        z = np.zeros(a.shape)
        z[index] = g
        return (z,)

    return _emit("slice", (a,), out, vjp)


def sum_over_axis(a, axis: int | None = None) -> Tensor:
    a = _tensor(a)
    out = a.data.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.full(a.shape, g),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _emit("sum-over-axis", (a,), out, vjp)


def max_pool_groups(a, pool: int = 2) -> Tensor:
    a = _tensor(a)
    if a.ndim != 1 or pool < 1 or a.size % pool != 0:
        raise ContractViolation(
            f"max-over-pairs: size {a.shape} not divisible into groups of {pool}"
        )
    groups = a.data.reshape(-1, pool)
    arg = groups.argmax(axis=1)
    out = groups[np.arange(groups.shape[0]), arg]

    def vjp(g):
        z = np.zeros_like(groups)
        z[np.arange(groups.shape[0]), arg] = g
        return (z.reshape(a.shape),)

    return _emit("max-over-pairs", (a,), out, vjp)


def conv1d(filters, signal) -> Tensor:
    """Centered, zero-padded cross-correlation of a 1-D signal.

    `filters` is (k, r) with r odd; `signal` is (L,). Output is (L, k)
    with out[j, c] = sum_t filters[c, t] * signal[j + t - (r-1)//2],
    out-of-range signal entries treated as zero.
    """
    f, s = _tensor(filters), _tensor(signal)
    if f.ndim != 2 or s.ndim != 1:
        raise ContractViolation(f"conv1d: shapes {f.shape}, {s.shape} do not conform")
    k, r = f.shape
    if r % 2 != 1:
        raise ContractViolation(f"conv1d: filter width {r} must be odd")
    L = s.size
    pad = (r - 1) // 2
    padded = np.zeros(L + 2 * pad)
    padded[pad : pad + L] = s.data
    windows = np.lib.stride_tricks.sliding_window_view(padded, r)  # (L, r)
    out = windows @ f.data.T  # (L, k)

    def vjp(g):
        df = g.T @ windows
        tmp = g @ f.data  # (L, r)
        dpad = np.zeros(L + 2 * pad)
        for t in range(r):
            dpad[t : t + L] += tmp[:, t]
        return df, dpad[pad : pad + L]

    return _emit("conv1d", (f, s), out, vjp)


def stack_rows(rows: Sequence) -> Tensor:
    ts = tuple(_tensor(r) for r in rows)
    if not ts or any(t.ndim != 1 for t in ts):
        raise ContractViolation("stack-rows: expects one or more vectors")
    out = np.stack([t.data for t in ts])

    def vjp(g):
        return tuple(g[i] for i in range(len(ts)))

    return _emit("stack-rows", ts, out, vjp)


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = _tensor(a)
    if int(np.prod(shape)) != a.size:
        raise ContractViolation(f"reshape: {a.shape} to {shape} changes size")
    old = a.shape

    def vjp(g):
        return (g.reshape(old),)

    return _emit("reshape", (a,), a.data.reshape(shape).copy(), vjp)


def transpose(a) -> Tensor:
    a = _tensor(a)
    if a.ndim != 2:
        raise ContractViolation(f"transpose: expects a matrix, got {a.shape}")

    def vjp(g):
        return (g.T.copy(),)

    return _emit("transpose", (a,), a.data.T.copy(), vjp)


_PRIMITIVES: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "exp": exp,
    "concat": concat,
    "slice": slice_axis,
    "sum-over-axis": sum_over_axis,
    "max-over-pairs": max_pool_groups,
    "conv1d": conv1d,
}

_VARIADIC = {"concat"}


def apply_primitive(kind: str, inputs: Sequence, **kwargs) -> Tensor:
    """Execute one primitive by id, recording it on the active tape.

    Deterministic for fixed inputs. Shape mismatches raise
    ContractViolation; non-finite outputs raise NumericFault.
    """
    fn = _PRIMITIVES.get(kind)
    if fn is None:
        raise ContractViolation(f"unknown primitive kind '{kind}'")
    if kind in _VARIADIC:
        return fn(list(inputs), **kwargs)
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def backward(
    tape: Tape, loss: Tensor, params: Iterable[Parameter] | None = None
) -> dict[str, Tensor]:
    """Accumulate d(loss)/d(parameter) for every parameter on the tape.

    Visits tape records exactly once, in reverse. Returns a name-keyed
    gradient map and stores each gradient on its Parameter. Parameters
    passed via `params` that the loss never touched get zero gradients.
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise ContractViolation("backward: loss must be a scalar tensor")
    adjoint: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for rec in reversed(tape.records):
        g = adjoint.pop(id(rec.output), None)
        if g is None:
            continue
        for t, gt in zip(rec.inputs, rec.vjp(g)):
            if gt is None:
                continue
            prev = adjoint.get(id(t))
            adjoint[id(t)] = gt if prev is None else prev + gt
    grads: dict[str, Tensor] = {}
    for tid, param in tape._params.items():
        g = adjoint.get(tid)
        grad = Tensor(g) if g is not None else Tensor(np.zeros(param.shape))
        param.grad = grad
        grads[param.name] = grad
    if params is not None:
        for p in params:
            if p.name not in grads:
                p.grad = Tensor(np.zeros(p.shape))
                grads[p.name] = p.grad
    return grads


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------


@dataclass
class GradCheckFailure:
    param: str
    index: tuple[int, ...]
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradCheckReport:
    """Per-parameter maximum relative error of analytic vs numeric gradients."""

    max_rel_err: dict[str, float]
    failures: list[GradCheckFailure]
    step: float
    tol: float

    @property
    def ok(self) -> bool:
        return not self.failures

    def worst(self) -> float:
        return max(self.max_rel_err.values(), default=0.0)


def _scalar_of(x) -> float:
    if isinstance(x, Tensor):
        if x.size != 1:
            raise ContractViolation("objective must return a scalar")
        return float(x.data.reshape(()))
    return float(x)


def finite_diff_check(
    f: Callable,
    params: Iterable[Parameter],
    step: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare backward() gradients of f against central differences.

    f receives the parameter list and must return a scalar (Tensor when a
    tape is active). Relative error per entry is
    |a - n| / max(|a|, |n|, 1e-8).
    """
    if step <= 0:
        raise ContractViolation("finite_diff_check: step must be positive")
    params = list(params)
    v1 = _scalar_of(f(params))
    v2 = _scalar_of(f(params))
    if v1 != v2:
        raise NonDeterministicFunction(
            f"objective returned {v1!r} then {v2!r} at the same point"
        )
    with Tape() as tape:
        loss = f(params)
    grads = backward(tape, loss, params)

    max_rel: dict[str, float] = {}
    failures: list[GradCheckFailure] = []
    for p in params:
        base = p.value
        analytic = grads[p.name].data
        worst = 0.0
        for idx in np.ndindex(*base.shape):
            bump = np.zeros(base.shape)
            bump[idx] = step
            p.value = Tensor(base.data + bump)
            lp = _scalar_of(f(params))
            p.value = Tensor(base.data - bump)
            lm = _scalar_of(f(params))
            p.value = base
            numeric = (lp - lm) / (2.0 * step)
            a = float(analytic[idx])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            if rel > worst:
                worst = rel
            if rel > tol:
                failures.append(GradCheckFailure(p.name, idx, a, numeric, rel))
        max_rel[p.name] = worst
    return GradCheckReport(max_rel, failures, step, tol)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"ARSGCKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: Iterable[Parameter]) -> None:
    """Write parameters to `path` in the binary checkpoint format."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        for p in params:
            name = p.name.encode("utf-8")
            fh.write(struct.pack("<I", len(name)))
            fh.write(name)
            fh.write(struct.pack("<I", p.value.ndim))
            for extent in p.value.shape:
                fh.write(struct.pack("<I", extent))
            fh.write(np.ascontiguousarray(p.value.data, dtype="<f8").tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(
            f"truncated checkpoint: wanted {n} bytes for {what} at byte {fh.tell() - len(data)}"
        )
    return data


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a checkpoint into an ordered name -> array map."""
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad magic {magic!r} at byte 0")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        while True:
            head = fh.read(4)
            if not head:
                break
            if len(head) != 4:
                raise CheckpointError(
                    f"truncated checkpoint: partial name length at byte {fh.tell() - len(head)}"
                )
            (name_len,) = struct.unpack("<I", head)
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, f"rank of '{name}'"))
            shape = tuple(
                struct.unpack("<I", _read_exact(fh, 4, f"extent of '{name}'"))[0]
                for _ in range(rank)
            )
            count = int(np.prod(shape)) if shape else 1
            raw = _read_exact(fh, 8 * count, f"values of '{name}'")
            if name in out:
                raise CheckpointError(f"duplicate parameter '{name}'")
            out[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    return out


def restore_checkpoint(path, params: Iterable[Parameter]) -> None:
    """Load a checkpoint into an existing parameter set, validating shapes."""
    values = load_checkpoint(path)
    params = list(params)
    for p in params:
        if p.name not in values:
            raise CheckpointError(f"checkpoint is missing parameter '{p.name}'")
        v = values.pop(p.name)
        if v.shape != p.value.shape:
            raise CheckpointError(
                f"shape mismatch for '{p.name}': checkpoint {v.shape}, model {p.value.shape}"
            )
        p.value = Tensor(v)
    if values:
        extra = ", ".join(sorted(values))
        raise CheckpointError(f"checkpoint has unknown parameters: {extra}")
