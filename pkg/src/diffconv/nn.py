"""Layers, optimiser, learning-rate schedule, gradient checking and checkpoints."""

import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List

import numpy as np

from .autograd import (Parameter, Tape, Tensor, as_tensor, concat, dropout, gelu,
                       matmul, segment_max, segment_mean, softmax_cross_entropy)
from .core import InvalidInputError

__all__ = [
    "Linear", "gelu", "dropout", "concat", "row_max_pool", "row_avg_pool",
    "softmax_cross_entropy", "cosine_lr", "SGD", "grad_check", "save_checkpoint",
    "load_checkpoint", "CheckpointError",
]


class Module:
    """Anything owning named parameters, possibly through child modules."""

    def named_parameters(self, prefix=""):
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise InvalidInputError(f"checkpoint is missing parameters: {sorted(missing)}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise InvalidInputError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    """``y = x W + b`` with ``W`` of shape ``(in, out)``.

    Initialised uniform in ``[-1/sqrt(in), 1/sqrt(in)]``.
    """

    def __init__(self, in_dim, out_dim, rng, bias=True):
        bound = 1.0 / math.sqrt(in_dim)
        self.weight = Parameter(rng.uniform(-bound, bound, (in_dim, out_dim)))
        self.bias = Parameter(rng.uniform(-bound, bound, out_dim)) if bias else None

    @property
    def in_dim(self):
        return self.weight.shape[0]

    @property
    def out_dim(self):
        return self.weight.shape[1]

    def __call__(self, x):
        x = as_tensor(x)
        if x.shape[-1] != self.in_dim:
            raise InvalidInputError(f"Linear expects {self.in_dim} inputs, got {x.shape[-1]}")
        y = matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


def row_max_pool(x, offsets=None):
    """Max over rows of each segment (all rows when ``offsets`` is None)."""
    x = as_tensor(x)
    if offsets is None:
        offsets = np.array([0, x.shape[0]])
    return segment_max(x, np.asarray(offsets, dtype=np.int64))


def row_avg_pool(x, offsets=None):
    x = as_tensor(x)
    if offsets is None:
        offsets = np.array([0, x.shape[0]])
    return segment_mean(x, np.asarray(offsets, dtype=np.int64))


def cosine_lr(epoch, base_lr=0.1, min_lr=0.001, period=300):
    """Cosine annealing from ``base_lr`` at epoch 0 to ``min_lr`` at ``period``, then restart."""
    if epoch <= 0:
        pos = 0.0
    else:
        pos = epoch - period * (math.ceil(epoch / period) - 1)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * pos / period))


@dataclass
class SGD:
    """SGD with classical momentum: ``v <- mu v + g``, ``p <- p - lr v``."""

    params: List[Tensor]
    base_lr: float = 0.1
    min_lr: float = 0.001
    momentum: float = 0.9
    period: int = 300
    lr: float = field(init=False)
    buffers: List[np.ndarray] = field(init=False)

    def __post_init__(self):
        self.params = list(self.params)
        self.buffers = [np.zeros_like(p.data) for p in self.params]
        self.lr = self.base_lr

    def set_epoch(self, epoch):
        self.lr = cosine_lr(epoch, self.base_lr, self.min_lr, self.period)
        return self.lr

    def step(self, grads=None):
        grads = [p.grad for p in self.params] if grads is None else list(grads)
        for p, g, v in zip(self.params, grads, self.buffers):
            if g is None:
                g = np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for {p.name or p.shape}")
            v *= self.momentum
            v += g
            p.data = p.data - self.lr * v

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def grad_check(loss_fn: Callable[[], Tensor], params: Iterable[Tensor], step=1e-5,
               max_coords=None, rng=None, floor=1e-6):
    """Compare tape gradients with central differences.

    Returns ``(max_rel_err, (param_index, flat_index))`` where the relative
    error of one coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    ``max_coords`` caps the coordinates probed per parameter (sampled with
    ``rng``); ``None`` probes them all.

    Central differences carry round-off of roughly ``eps * |loss| / step``
    (about 1e-10 at step 1e-5), so gradients below ``floor`` are compared
    in absolute terms against it.
    """
    params = list(params)
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
    if not np.all(np.isfinite(loss.data)):
        raise FloatingPointError("loss is not finite")
    tape.backward(loss)
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]

    worst, where = 0.0, None
    rng = rng or np.random.default_rng(0)
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, max_coords, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + step
            up = float(loss_fn().data)
            flat[c] = orig - step
            down = float(loss_fn().data)
            flat[c] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise FloatingPointError("loss became non-finite during finite differences")
            numeric = (up - down) / (2 * step)
            a = analytic[pi].reshape(-1)[c]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            if err > worst:
                worst, where = err, (pi, int(c))
    return worst, where


# ---------------------------------------------------------------- checkpoints
#
# Layout (little-endian):
#   8 bytes   magic b"DIFFCKPT"
#   u32       format version
#   u32       entry count
#   per entry: u32 name length, utf-8 name, u32 rank, rank x u64 dims,
#              prod(dims) x f64 payload

MAGIC = b"DIFFCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, state: Dict[str, np.ndarray]):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(state)))
        for name, arr in state.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> Dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a diffconv checkpoint")
    pos = 8

    def read(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(blob):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        vals = struct.unpack_from(fmt, blob, pos)
        pos += size
        return vals

    version, count = read("<II")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    state = {}
    for _ in range(count):
        (n,) = read("<I")
        if pos + n > len(blob):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        name = blob[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = read("<I")
        shape = read(f"<{rank}Q") if rank else ()
        size = int(np.prod(shape)) * 8
        if pos + size > len(blob):
            raise CheckpointError(f"{path}: truncated payload for {name}")
        state[name] = np.frombuffer(blob, dtype="<f8", count=size // 8, offset=pos).reshape(shape).copy()
        pos += size
    return state
