"""Minimal differentiable numerics for the RoI feature extraction head.

Float64 token matrices, the handful of layers the head needs (linear,
ReLU, per-channel feature normalization, row softmax, set maxpool,
concatenation) and a reverse-mode tape whose gradients are checkable
against central finite differences.

Recording happens only while a Tape is active (``with Tape() as t:``)
and at least one operand participates in differentiation (a Parameter,
or a TokenMatrix with requires_grad). Outside a tape every op is a pure
numpy forward. Tapes are per-thread: independent RoIs may run forward
passes concurrently on separate tapes.
"""

from __future__ import annotations

import contextvars
import math
import struct
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import EmptyInputError, FormatError, ShapeError, StateError

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "sarfe_active_tape", default=None
)


class TokenMatrix:
    """Dense rows x cols matrix of float64 per-token features."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeError(f"TokenMatrix needs a 2-d array, got ndim={arr.ndim}")
        if arr.size and not np.isfinite(arr).all():
            raise ValueError("TokenMatrix entries must be finite")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"TokenMatrix({self.rows}x{self.cols}, requires_grad={self.requires_grad})"


class Parameter:
    """Learnable array with a gradient accumulator of identical shape."""

    __slots__ = ("values", "grad")

    def __init__(self, values):
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim not in (1, 2):
            raise ShapeError(f"Parameter must be rank 1 or 2, got rank {arr.ndim}")
        self.values = arr
        self.grad = np.zeros_like(arr)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Parameter(shape={self.values.shape})"


class TapeRecord:
    """One executed op: keeps the output alive and knows how to push gradients back."""

    __slots__ = ("op", "out", "backward_fn", "saved")

    def __init__(self, op: str, out: TokenMatrix, backward_fn, saved=None):
        self.op = op
        self.out = out
        self.backward_fn = backward_fn
        self.saved = saved or {}


class Tape:
    """Ordered record of differentiable ops, replayed in strict reverse by backward()."""

    def __init__(self):
        self.records: list[TapeRecord] = []
        self._spent = False
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> bool:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        return False

    def _append(self, op: str, out: TokenMatrix, backward_fn, saved=None) -> None:
        if self._spent:
            raise StateError("tape already consumed by backward; start a new forward")
        self.records.append(TapeRecord(op, out, backward_fn, saved))


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


def _recording_tape(*operands) -> Tape | None:
    tape = _ACTIVE_TAPE.get()
    if tape is None:
        return None
    for op in operands:
        if isinstance(op, Parameter):
            return tape
        if isinstance(op, TokenMatrix) and op.requires_grad:
            return tape
    return None


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------


def matmul(a: TokenMatrix, b: TokenMatrix) -> TokenMatrix:
    """Plain matrix product a @ b."""
    if a.cols != b.rows:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    tape = _recording_tape(a, b)
    out = TokenMatrix(a.data @ b.data, requires_grad=tape is not None)
    if tape is not None:
        a_data, b_data = a.data, b.data

        def backward_fn(g, sink):
            sink(a, g @ b_data.T)
            sink(b, a_data.T @ g)

        tape._append("matmul", out, backward_fn)
    return out


def transpose(x: TokenMatrix) -> TokenMatrix:
    tape = _recording_tape(x)
    out = TokenMatrix(x.data.T.copy(), requires_grad=tape is not None)
    if tape is not None:
        tape._append("transpose", out, lambda g, sink: sink(x, g.T))
    return out


def linear(x: TokenMatrix, w: Parameter, b: Parameter) -> TokenMatrix:
    """Affine map x @ w + b with b broadcast over rows."""
    if w.values.ndim != 2:
        raise ShapeError(f"linear: weight must be rank 2, got {w.shape}")
    if x.cols != w.values.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    if b.values.shape != (w.values.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
    tape = _recording_tape(x, w, b)
    out = TokenMatrix(x.data @ w.values + b.values, requires_grad=tape is not None)
    if tape is not None:
        x_data, w_values = x.data, w.values

        def backward_fn(g, sink):
            sink(x, g @ w_values.T)
            sink(w, x_data.T @ g)
            sink(b, g.sum(axis=0))

        tape._append("linear", out, backward_fn)
    return out


def relu(x: TokenMatrix) -> TokenMatrix:
    """Elementwise max(0, x); subgradient at exactly 0 is 0."""
    tape = _recording_tape(x)
    out = TokenMatrix(np.maximum(x.data, 0.0), requires_grad=tape is not None)
    if tape is not None:
        mask = x.data > 0.0
        tape._append(
            "relu",
            out,
            lambda g, sink: sink(x, g * mask),
            saved={"input": x.data},
        )
    return out


def feature_norm(x: TokenMatrix, gamma: Parameter, beta: Parameter, eps: float = 1e-5) -> TokenMatrix:
    """Normalize each channel over the token dimension, then scale/shift.

    y[:, j] = gamma[j] * (x[:, j] - mean_j) / sqrt(var_j + eps) + beta[j]
    with mean/var taken per column across the rows of this matrix.
    """
    if x.rows == 0:
        raise EmptyInputError("feature_norm: matrix has no rows")
    if gamma.values.shape != (x.cols,) or beta.values.shape != (x.cols,):
        raise ShapeError(
            f"feature_norm: gamma {gamma.shape} / beta {beta.shape} do not match {x.cols} channels"
        )
    mean = x.data.mean(axis=0)
    var = x.data.var(axis=0)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv_std
    tape = _recording_tape(x, gamma, beta)
    out = TokenMatrix(gamma.values * xhat + beta.values, requires_grad=tape is not None)
    if tape is not None:
        m = x.rows
        gamma_values = gamma.values

        def backward_fn(g, sink):
            sink(gamma, (g * xhat).sum(axis=0))
            sink(beta, g.sum(axis=0))
            dxhat = g * gamma_values
            dx = (inv_std / m) * (
                m * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
            )
            sink(x, dx)

        tape._append("feature_norm", out, backward_fn)
    return out


def softmax_rows(x: TokenMatrix) -> TokenMatrix:
    """Row-wise softmax with max subtraction for overflow stability."""
    if x.cols < 1:
        raise ShapeError("softmax_rows: matrix has no columns")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    tape = _recording_tape(x)
    out = TokenMatrix(y, requires_grad=tape is not None)
    if tape is not None:

        def backward_fn(g, sink):
            sink(x, y * (g - (g * y).sum(axis=1, keepdims=True)))

        tape._append("softmax_rows", out, backward_fn)
    return out


def maxpool_set(x: TokenMatrix) -> TokenMatrix:
    """Per-channel maxima over the row set, as a 1 x cols matrix.

    Gradient routes to the first maximal row of each channel.
    """
    if x.rows == 0:
        raise EmptyInputError("maxpool_set: empty set")
    argmax = x.data.argmax(axis=0)  # first occurrence on ties
    pooled = x.data[argmax, np.arange(x.cols)].reshape(1, -1)
    tape = _recording_tape(x)
    out = TokenMatrix(pooled, requires_grad=tape is not None)
    if tape is not None:

        def backward_fn(g, sink):
            dx = np.zeros_like(x.data)
            dx[argmax, np.arange(x.data.shape[1])] = g[0]
            sink(x, dx)

        tape._append("maxpool_set", out, backward_fn, saved={"input": x.data})
    return out


def add(a: TokenMatrix, b: TokenMatrix) -> TokenMatrix:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes differ {a.shape} vs {b.shape}")
    tape = _recording_tape(a, b)
    out = TokenMatrix(a.data + b.data, requires_grad=tape is not None)
    if tape is not None:

        def backward_fn(g, sink):
            sink(a, g)
            sink(b, g)

        tape._append("add", out, backward_fn)
    return out


def sub(a: TokenMatrix, b: TokenMatrix) -> TokenMatrix:
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes differ {a.shape} vs {b.shape}")
    tape = _recording_tape(a, b)
    out = TokenMatrix(a.data - b.data, requires_grad=tape is not None)
    if tape is not None:

        def backward_fn(g, sink):
            sink(a, g)
            sink(b, -g)

        tape._append("sub", out, backward_fn)
    return out


def scale(x: TokenMatrix, factor: float) -> TokenMatrix:
    tape = _recording_tape(x)
    out = TokenMatrix(x.data * factor, requires_grad=tape is not None)
    if tape is not None:
        tape._append("scale", out, lambda g, sink: sink(x, g * factor))
    return out


def concat_cols(parts: Sequence[TokenMatrix]) -> TokenMatrix:
    """Concatenate along the channel axis; all parts must share the row count."""
    if not parts:
        raise EmptyInputError("concat_cols: no inputs")
    rows = parts[0].rows
    for p in parts:
        if p.rows != rows:
            raise ShapeError(f"concat_cols: row counts differ ({rows} vs {p.rows})")
    tape = _recording_tape(*parts)
    out = TokenMatrix(np.hstack([p.data for p in parts]), requires_grad=tape is not None)
    if tape is not None:
        widths = [p.cols for p in parts]

        def backward_fn(g, sink):
            start = 0
            for p, w in zip(parts, widths):
                sink(p, g[:, start : start + w])
                start += w

        tape._append("concat_cols", out, backward_fn)
    return out


def stack_rows(parts: Sequence[TokenMatrix]) -> TokenMatrix:
    """Stack 1 x cols matrices into a len(parts) x cols matrix."""
    if not parts:
        raise EmptyInputError("stack_rows: no inputs")
    cols = parts[0].cols
    for p in parts:
        if p.rows != 1 or p.cols != cols:
            raise ShapeError(f"stack_rows: every part must be 1x{cols}, got {p.shape}")
    tape = _recording_tape(*parts)
    out = TokenMatrix(np.vstack([p.data for p in parts]), requires_grad=tape is not None)
    if tape is not None:

        def backward_fn(g, sink):
            for i, p in enumerate(parts):
                sink(p, g[i : i + 1])

        tape._append("stack_rows", out, backward_fn)
    return out


def sum_all(x: TokenMatrix) -> TokenMatrix:
    """Sum of all entries as a 1x1 matrix (scalar readout for losses)."""
    tape = _recording_tape(x)
    out = TokenMatrix(np.array([[x.data.sum()]]), requires_grad=tape is not None)
    if tape is not None:
        shape = x.data.shape
        tape._append("sum_all", out, lambda g, sink: sink(x, np.full(shape, g[0, 0])))
    return out


def weighted_sum(x: TokenMatrix, weights: np.ndarray) -> TokenMatrix:
    """sum(x * weights) as a 1x1 matrix; weights are a fixed array, not learnable."""
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != x.shape:
        raise ShapeError(f"weighted_sum: weights {w.shape} do not match {x.shape}")
    tape = _recording_tape(x)
    out = TokenMatrix(np.array([[float((x.data * w).sum())]]), requires_grad=tape is not None)
    if tape is not None:
        tape._append("weighted_sum", out, lambda g, sink: sink(x, g[0, 0] * w))
    return out


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def backward(loss: TokenMatrix, tape: Tape) -> None:
    """Accumulate dLoss/dParam into every Parameter reachable on the tape.

    Leaf TokenMatrix inputs with requires_grad get their .grad set as well.
    The tape is consumed; running backward on it twice raises StateError.
    """
    if loss.shape != (1, 1):
        raise ShapeError(f"backward: loss must be 1x1, got {loss.shape}")
    if tape._spent:
        raise StateError("backward already ran on this tape")
    if not tape.records:
        raise StateError("backward: tape is empty")
    tape._spent = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
    holders: dict[int, TokenMatrix] = {id(loss): loss}

    def sink(target, g):
        if isinstance(target, Parameter):
            target.grad += g
            return
        if not target.requires_grad:
            return
        key = id(target)
        if key in grads:
            grads[key] = grads[key] + g
        else:
            grads[key] = np.array(g, dtype=np.float64)
            holders[key] = target

    for rec in reversed(tape.records):
        g = grads.pop(id(rec.out), None)
        holders.pop(id(rec.out), None)
        if g is None:
            continue
        rec.backward_fn(g, sink)

    # whatever is left was never produced by a record: leaf inputs
    for key, g in grads.items():
        holders[key].grad = g


# ---------------------------------------------------------------------------
# parameter initialization
# ---------------------------------------------------------------------------


def init_linear_params(rng: np.random.Generator, fan_in: int, fan_out: int) -> tuple[Parameter, Parameter]:
    """Weight and bias drawn uniformly from [-1/sqrt(fan_in), +1/sqrt(fan_in)]."""
    bound = 1.0 / math.sqrt(fan_in)
    w = Parameter(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
    b = Parameter(rng.uniform(-bound, bound, size=fan_out))
    return w, b


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"SRFE"
CHECKPOINT_VERSION = 1


def save_checkpoint(arrays: dict, path) -> None:
    """Write named arrays to the flat binary container.

    Layout: magic "SRFE", version u32 LE, then per entry: name length u16 LE,
    name bytes (utf-8), rank u8, dims u32 LE each, values f64 LE in C order.
    Entries are written in sorted name order so identical contents produce
    identical bytes.
    """
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name in sorted(arrays):
            value = arrays[name]
            arr = value.values if isinstance(value, Parameter) else np.asarray(value, dtype=np.float64)
            encoded = name.encode("utf-8")
            if len(encoded) > 0xFFFF:
                raise ValueError(f"checkpoint name too long: {name!r}")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                f.write(struct.pack("<I", dim))
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a container written by save_checkpoint; truncation raises FormatError."""
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {blob[:4]!r}")
    if len(blob) < 8:
        raise FormatError(f"checkpoint truncated at {len(blob)} bytes")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    pos = 8
    total = len(blob)

    def need(nbytes: int):
        if pos + nbytes > total:
            raise FormatError(f"checkpoint truncated at byte {pos}")

    while pos < total:
        need(2)
        (name_len,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        need(name_len)
        name = blob[pos : pos + name_len].decode("utf-8")
        pos += name_len
        need(1)
        rank = blob[pos]
        pos += 1
        need(4 * rank)
        dims = struct.unpack_from(f"<{rank}I", blob, pos) if rank else ()
        pos += 4 * rank
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        need(8 * count)
        values = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).copy()
        pos += 8 * count
        out[name] = values.reshape(dims)
    return out
