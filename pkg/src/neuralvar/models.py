"""Fully-connected ReLU classifiers (optionally multi-head) and metrics."""

import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    DimensionError,
    ParameterSet,
    Tape,
    Tensor,
    add_bias,
    backward,
    matmul,
    relu,
    softmax_cross_entropy,
)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class FcnConfig:
    """Layer widths include input and output: e.g. [784, 1024, 1024, 10].

    With heads > 1 the final layer is replicated per head over a shared
    trunk; only the selected head sees gradients.
    """

    layer_widths: tuple = field(default=(784, 1024, 1024, 10))
    heads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(self.layer_widths))
        if len(self.layer_widths) < 3:
            raise ConfigError("need at least one hidden layer")
        if any(w <= 0 for w in self.layer_widths):
            raise ConfigError(f"layer widths must be positive: {self.layer_widths}")
        if self.heads < 1:
            raise ConfigError("heads must be >= 1")


def fcn_init(config, rng, dtype=np.float64):
    """He-initialized weights (std sqrt(2/fan_in)), zero biases."""
    params = ParameterSet()
    widths = config.layer_widths
    for i in range(len(widths) - 2):
        fan_in = widths[i]
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(widths[i], widths[i + 1]))
        params.add(f"w{i}", Tensor(w.astype(dtype)))
        params.add(f"b{i}", Tensor(np.zeros(widths[i + 1], dtype=dtype)))
    fan_in, out_w = widths[-2], widths[-1]
    for h in range(config.heads):
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, out_w))
        params.add(f"head{h}_w", Tensor(w.astype(dtype)))
        params.add(f"head{h}_b", Tensor(np.zeros(out_w, dtype=dtype)))
    return params


def head_param_names(config, head):
    return [f"head{head}_w", f"head{head}_b"]


def predict(params, config, batch_x, head=0, tape=None):
    """Logits for a batch; gradients flow through the trunk and the chosen head only."""
    if not 0 <= head < config.heads:
        raise IndexError(f"head {head} out of range (heads={config.heads})")
    if tape is None:
        tape = Tape()
    x = batch_x if isinstance(batch_x, Tensor) else Tensor(batch_x)
    if x.data.ndim != 2 or x.shape[1] != config.layer_widths[0]:
        raise DimensionError(
            f"input has shape {x.shape}, expected (batch, {config.layer_widths[0]})"
        )
    n_hidden = len(config.layer_widths) - 2
    for i in range(n_hidden):
        x = relu(tape, add_bias(tape, matmul(tape, x, params[f"w{i}"]), params[f"b{i}"]))
    return add_bias(tape, matmul(tape, x, params[f"head{head}_w"]), params[f"head{head}_b"])


def forward_loss(params, config, batch_x, batch_y, head=0):
    """Mean cross-entropy over the batch; returns (loss Tensor, tape)."""
    batch_y = np.asarray(batch_y)
    bx = batch_x.data if isinstance(batch_x, Tensor) else np.asarray(batch_x)
    if bx.shape[0] != batch_y.shape[0]:
        raise DimensionError(
            f"batch_x has {bx.shape[0]} rows but batch_y has {batch_y.shape[0]} labels"
        )
    tape = Tape()
    logits = predict(params, config, batch_x, head=head, tape=tape)
    loss = softmax_cross_entropy(tape, logits, batch_y)
    return loss, tape


def loss_and_grads(params, config, batch_x, batch_y, head=0):
    """One forward/backward; returns (loss value, name -> grad)."""
    params.zero_grad()
    loss, tape = forward_loss(params, config, batch_x, batch_y, head=head)
    backward(tape, loss)
    names = [f"w{i}" for i in range(len(config.layer_widths) - 2)]
    names += [f"b{i}" for i in range(len(config.layer_widths) - 2)]
    names += head_param_names(config, head)
    # frozen (non-selected) heads are excluded so optimizers never touch them
    grads = {}
    for n, t in params.items():
        if t.grad is not None:
            grads[n] = t.grad
        elif n in names:
            raise ValueError(f"parameter {n!r} missing gradient")
    return float(loss.data), grads


def accuracy(logits, labels):
    """Fraction of argmax matches; argmax ties break to the lowest class."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    labels = np.asarray(labels)
    if data.shape[0] == 0:
        raise ValueError("empty batch")
    if data.shape[0] != labels.shape[0]:
        raise DimensionError(f"{data.shape[0]} logit rows vs {labels.shape[0]} labels")
    return float(np.mean(np.argmax(data, axis=1) == labels))


def evaluate(params, config, images, labels, head=0, batch_size=1000):
    """Streaming test accuracy without building gradient tapes."""
    correct = 0
    for i in range(0, images.shape[0], batch_size):
        xb = images[i : i + batch_size]
        logits = predict(params, config, xb, head=head)
        correct += int(np.sum(np.argmax(logits.data, axis=1) == labels[i : i + batch_size]))
    return correct / images.shape[0]


# ---------------------------------------------------------------------------
# checkpoint format: magic, version, entry count, then per entry
# (name, shape, float64 little-endian payload)

_CKPT_MAGIC = b"NVCKPT"
_CKPT_VERSION = 1


def save_checkpoint(params, path, extra=None):
    """Flat binary container; `extra` holds optimizer-side arrays (e.g. the
    current virtual perturbation) under names that must not collide."""
    entries = list(params.items())
    if extra:
        for name, arr in extra.items():
            if name in params:
                raise ValueError(f"extra entry {name!r} collides with a parameter")
            entries.append((name, Tensor(np.asarray(arr, dtype=np.float64))))
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<HI", _CKPT_VERSION, len(entries)))
        for name, t in entries:
            nb = name.encode("utf-8")
            data = np.ascontiguousarray(t.data, dtype="<f8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(data.tobytes())


def load_checkpoint(path):
    """Returns name -> float64 array in file order."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[: len(_CKPT_MAGIC)] != _CKPT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic")
    off = len(_CKPT_MAGIC)
    version, count = struct.unpack_from("<HI", blob, off)
    off += 6
    if version != _CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off : off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f8", count=size, offset=off).reshape(shape)
        off += 8 * size
        out[name] = arr.copy()
    return out
