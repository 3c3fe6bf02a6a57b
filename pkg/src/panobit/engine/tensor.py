"""Dense tensors with a recording tape for reverse-mode differentiation.

Ops execute eagerly on numpy arrays. While a Tape is active, every op whose
inputs require gradients appends a record (op name, inputs, output, backward
closure); records are naturally in topological order because execution is
eager. Tape.backward walks them in reverse and accumulates into `.grad`.
"""

import numpy as np

_DEFAULT_DTYPE = np.float32
_ACTIVE_TAPE = None


class ShapeError(ValueError):
    """Operand shapes incompatible for an op."""


def set_default_dtype(dtype):
    """Engine precision: float32 for training, float64 for gradient checks."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype.type


def default_dtype():
    return _DEFAULT_DTYPE


class Tensor:
    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def accumulate_grad(self, g):
        # Accumulation allocates; nothing mutates grad arrays in place.
        self.grad = g if self.grad is None else self.grad + g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class TapeRecord:
    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op, inputs, output, backward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Single-threaded record of differentiable ops, consumed by backward()."""

    def __init__(self):
        self.records = []

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a Tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def backward(self, loss):
        """Accumulate d(loss)/d(leaf) into .grad of every requires_grad leaf.

        The tape is consumed: records are cleared afterwards.
        """
        if loss.data.ndim != 0 and loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        if not self.records:
            raise RuntimeError("backward on an empty tape")
        loss.grad = np.ones_like(loss.data)
        for rec in reversed(self.records):
            g = rec.output.grad
            if g is None:
                continue
            rec.backward_fn(g)
        # Drop intermediate grads; leaves keep theirs.
        for rec in self.records:
            rec.output.grad = None
        self.records.clear()


def active_tape():
    return _ACTIVE_TAPE


def record(op, inputs, output, backward_fn):
    """Append to the active tape if any input requires grad."""
    tape = _ACTIVE_TAPE
    if tape is None:
        return
    if any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        output.requires_grad = True
        tape.records.append(TapeRecord(op, inputs, output, backward_fn))
