"""Minimal dense-tensor reverse-mode autodiff.

Define-by-run: every op appends a node to an explicit Tape, and backward()
walks the tape once in reverse. Tapes are rebuilt per minibatch; a tape can
be consumed exactly once.
"""

import numpy as np

from . import kernels


class DimensionError(ValueError):
    """Operand shapes are inconsistent; message names the offending tensor."""


class StaleTapeError(RuntimeError):
    """backward() was called twice on the same tape without a re-forward."""


class NumericError(ArithmeticError):
    """A probe produced a non-finite loss."""


class Tensor:
    """Dense n-d value with an optional gradient buffer.

    data is always a contiguous float ndarray (float64 default, float32
    selectable per run); grad, when populated, matches data's shape.
    """

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        # asarray(order="C") keeps 0-d losses 0-d; ascontiguousarray would
        # promote them to shape (1,)
        self.data = np.asarray(data, order="C")
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}, name={self.name!r})"


class ParameterSet:
    """Ordered, named collection of trainable tensors."""

    def __init__(self, tensors=None):
        self._tensors = {}
        if tensors:
            for name, t in tensors.items():
                self.add(name, t)

    def add(self, name, tensor):
        if name in self._tensors:
            raise ValueError(f"duplicate parameter name {name!r}")
        tensor.name = name
        tensor.requires_grad = True
        self._tensors[name] = tensor

    def __getitem__(self, name):
        return self._tensors[name]

    def __contains__(self, name):
        return name in self._tensors

    def __iter__(self):
        return iter(self._tensors.values())

    def __len__(self):
        return len(self._tensors)

    @property
    def names(self):
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def shapes(self):
        return {n: t.data.shape for n, t in self._tensors.items()}

    def zero_grad(self):
        for t in self:
            t.zero_grad()

    def grads(self):
        """name -> gradient array; raises if any gradient is missing."""
        out = {}
        for n, t in self._tensors.items():
            if t.grad is None:
                raise ValueError(f"parameter {n!r} has no gradient")
            out[n] = t.grad
        return out

    def copy(self):
        ps = ParameterSet()
        for n, t in self._tensors.items():
            ps.add(n, Tensor(t.data.copy()))
        return ps

    def num_params(self):
        return sum(t.data.size for t in self)

    def flat(self):
        """All parameter values concatenated into one 1-d array (copy)."""
        return np.concatenate([t.data.ravel() for t in self])


class Tape:
    """Append-only, topologically ordered op record for one forward pass."""

    def __init__(self):
        self.nodes = []  # (out Tensor, [in Tensors], backward fn)
        self.consumed = False
        self._produced = set()  # ids of tensors created by ops on this tape

    def record(self, out, inputs, backward_fn):
        self.nodes.append((out, inputs, backward_fn))
        self._produced.add(id(out))
        return out

    def needs_grad(self, tensor):
        """True when a gradient for `tensor` can reach a trainable leaf; lets
        ops skip dead branches (e.g. dX of the input batch)."""
        return tensor.requires_grad or id(tensor) in self._produced


def backward(tape, loss):
    """Populate .grad for every requires_grad leaf reachable from loss."""
    if tape.consumed:
        raise StaleTapeError("tape already consumed; re-run the forward pass")
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape.consumed = True
    grads = {id(loss): np.ones_like(loss.data)}
    for out, inputs, backward_fn in reversed(tape.nodes):
        gout = grads.pop(id(out), None)
        if gout is None:
            continue
        for t, g in zip(inputs, backward_fn(gout)):
            if g is None:
                continue
            if id(t) in grads:
                grads[id(t)] += g
            else:
                grads[id(t)] = g
            if t.requires_grad:
                t.grad = grads[id(t)]


# ---------------------------------------------------------------------------
# ops


def matmul(tape, a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul: {a.name or 'lhs'} {a.shape} incompatible with {b.name or 'rhs'} {b.shape}"
        )
    out = Tensor(a.data @ b.data)
    need_a, need_b = tape.needs_grad(a), tape.needs_grad(b)

    def bwd(gout):
        return (gout @ b.data.T if need_a else None,
                a.data.T @ gout if need_b else None)

    return tape.record(out, [a, b], bwd)


def add_bias(tape, x, b):
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"add_bias: bias {b.name or ''} {b.shape} does not match {x.shape}")
    out = Tensor(x.data + b.data)

    def bwd(gout):
        return gout, gout.sum(axis=0)

    return tape.record(out, [x, b], bwd)


def relu(tape, x):
    out = Tensor(kernels.relu_fwd(x.data))

    def bwd(gout):
        return (kernels.relu_bwd(x.data, gout),)

    return tape.record(out, [x], bwd)


def softmax_cross_entropy(tape, logits, labels):
    """Mean cross-entropy over the batch, fused with a stable softmax."""
    labels = np.asarray(labels)
    if logits.data.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy: logits must be 2-d, got {logits.shape}")
    if labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise DimensionError(
            f"softmax_cross_entropy: {labels.shape[0] if labels.ndim else 0} labels for "
            f"{logits.shape[0]} logit rows"
        )
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    loss, probs = kernels.softmax_xent_fwd(logits.data, labels)
    out = Tensor(np.asarray(loss, dtype=logits.dtype))

    def bwd(gout):
        return (kernels.softmax_xent_bwd(probs, labels, float(gout)),)

    return tape.record(out, [logits], bwd)


def add(tape, a, b):
    if a.shape != b.shape:
        raise DimensionError(f"add: {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)
    return tape.record(out, [a, b], lambda g: (g, g))


def sub_const(tape, x, c):
    """x minus a constant array (no gradient through c)."""
    out = Tensor(x.data - c)
    return tape.record(out, [x], lambda g: (g,))


def mul_const(tape, x, c):
    """Elementwise product with a constant array or scalar."""
    out = Tensor(x.data * c)
    return tape.record(out, [x], lambda g: (g * c,))


def square(tape, x):
    out = Tensor(x.data * x.data)
    return tape.record(out, [x], lambda g: (2.0 * x.data * g,))


def sum_all(tape, x):
    out = Tensor(np.asarray(x.data.sum()))
    return tape.record(out, [x], lambda g: (np.broadcast_to(g, x.shape).copy(),))


# ---------------------------------------------------------------------------
# finite differences


def finite_diff_grad(loss_fn, params, h=1e-5):
    """Central-difference gradient of loss_fn(params) per coordinate.

    loss_fn must be deterministic (fix any RNG outside). Returns name -> array.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    out = {}
    for name, t in params.items():
        g = np.empty_like(t.data)
        flat = t.data.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = loss_fn(params)
            flat[i] = orig - h
            lm = loss_fn(params)
            flat[i] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise NumericError(f"non-finite loss probing {name}[{i}]")
            gflat[i] = (lp - lm) / (2.0 * h)
        out[name] = g
    return out
