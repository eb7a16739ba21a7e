"""Dense float64 tensors and a define-by-run tape for reverse-mode gradients."""

import numpy as np

from kbnet.errors import ShapeError


class Tensor:
    """A float64 array with optional gradient storage.

    Pipeline maps are 4-D (batch, channel, height, width); small auxiliary
    tensors (pose vectors, rotation matrices, compression vectors) use
    whatever shape they need.
    """

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; the real work lives in kbnet.numerics.ops
    def __add__(self, other):
        from kbnet.numerics import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from kbnet.numerics import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from kbnet.numerics import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from kbnet.numerics import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from kbnet.numerics import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from kbnet.numerics import ops
        return ops.div(other, self)

    def __neg__(self):
        from kbnet.numerics import ops
        return ops.mul(self, -1.0)

    def __getitem__(self, key):
        from kbnet.numerics import ops
        return ops.getitem(self, key)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class _Record:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


_ACTIVE = []


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; every op evaluated inside the block whose
    inputs require gradients appends one record.  Nested tapes are allowed,
    only the innermost one records.
    """

    def __init__(self):
        self.records = []

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.pop()
        return False

    def __len__(self):
        return len(self.records)


class no_grad:
    """Suspend recording (forward-only evaluation)."""

    def __enter__(self):
        _ACTIVE.append(None)

    def __exit__(self, *exc):
        _ACTIVE.pop()
        return False


def current_tape():
    return _ACTIVE[-1] if _ACTIVE else None


def record(out_data, inputs, backward):
    """Wrap ``out_data`` as a Tensor and tape it if any input needs grads.

    ``backward`` maps the output adjoint to a tuple with one entry per
    input (``None`` for inputs that receive no gradient).
    """
    out = Tensor(out_data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.records.append(_Record(out, tuple(inputs), backward))
    return out


def backward(loss, tape, params=None):
    """Propagate d(loss)/d(.) through ``tape`` in reverse recording order.

    Every leaf tensor on the tape that requires gradients gets ``.grad``
    set (accumulated over all consumers).  Tensors listed in ``params``
    that never reached the loss get a zero gradient.  Returns the list of
    gradients for ``params`` when given.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    produced = set()
    leaves = {}
    for rec in tape.records:
        produced.add(id(rec.out))
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        in_grads = rec.backward(g)
        for inp, gi in zip(rec.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key not in produced:
                leaves[key] = inp
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    for key, leaf in leaves.items():
        leaf.grad = np.asarray(grads.get(key, np.zeros_like(leaf.data)), dtype=np.float64).reshape(leaf.shape)
    if params is None:
        return None
    out = []
    for p in params:
        if id(p) not in leaves:
            p.grad = np.zeros_like(p.data)
        out.append(p.grad)
    return out
