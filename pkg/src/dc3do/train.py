"""Training loop, Adam, and the binary checkpoint format.

Checkpoint layout (all integers little-endian)::

    magic        6 bytes   b"DC3DO\\0"
    version      u16
    header       struct "<IIIIIIII B dd QQ I"
                 d_z, hidden, enc_hidden, n_classes, n_labels, d_e, d_t,
                 T, complements, beta_min, beta_max, step, init_seed,
                 n_tensors
    tensors      repeated n_tensors times:
                 name_len u16, name utf-8, ndim u8, dims u32 * ndim,
                 data float32 little-endian, C order

Tensor order is the parameter dict order, followed by optimizer moments
named ``adam.m/<param>`` and ``adam.v/<param>``.
"""

from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nets import Batch, DiffusionModel, ModelDims, complement_label, loss_and_grad, param_shapes, trainable_keys
from .rng import make_rng
from .schedule import make_schedule

log = logging.getLogger(__name__)

MAGIC = b"DC3DO\0"
VERSION = 1
_HEADER = struct.Struct("<IIIIIIIIBddQQI")


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class DimensionMismatchError(CheckpointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 3000
    batch_size: int = 64
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    seed: int = 0
    log_every: int = 100
    # fraction of examples conditioned on a complement ("not c") label
    complement_prob: float = 0.5
    train_encoder: bool = False
    # "constant", or "cosine" decay to zero over this run's steps
    lr_decay: str = "constant"

    def __post_init__(self):
        for name in ("steps", "batch_size", "log_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        for name in ("beta1", "beta2"):
            if not 0 <= getattr(self, name) < 1:
                raise ValueError(f"{name} must be in [0, 1)")
        if not self.adam_eps > 0 or self.weight_decay < 0:
            raise ValueError("adam_eps must be > 0 and weight_decay >= 0")
        if not 0 <= self.complement_prob <= 1:
            raise ValueError("complement_prob must be in [0, 1]")
        if self.lr_decay not in ("constant", "cosine"):
            raise ValueError("lr_decay must be 'constant' or 'cosine'")


class Adam:
    """Adam with bias correction and optional decoupled weight decay.

    ``state`` holds the moment buffers keyed ``adam.m/<name>``,
    ``adam.v/<name>`` so it can ride along in a checkpoint.
    """

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0, state=None, step=0):
        self.lr, self.beta1, self.beta2, self.eps, self.weight_decay = lr, beta1, beta2, eps, weight_decay
        self.state = state if state is not None else {}
        self.t = step

    def step(self, params, grads):
        self.t += 1
        bc1 = 1 - self.beta1**self.t
        bc2 = 1 - self.beta2**self.t
        for name, g in grads.items():
            p = params[name]
            m = self.state.setdefault(f"adam.m/{name}", np.zeros_like(p))
            v = self.state.setdefault(f"adam.v/{name}", np.zeros_like(p))
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p
            p -= (self.lr * update).astype(p.dtype, copy=False)


def conditioning_labels(labels, n_classes: int, complement_prob: float, rng) -> np.ndarray:
    """Swap a fraction of true labels for complement labels of a different class."""
    labels = np.asarray(labels, dtype=np.int64)
    cond = labels.copy()
    if complement_prob <= 0 or n_classes < 2:
        return cond
    flip = rng.random(len(labels)) < complement_prob
    # uniform over the other classes
    other = (labels + rng.integers(1, n_classes, len(labels))) % n_classes
    cond[flip] = complement_label(other[flip], n_classes)
    return cond


def train(model: DiffusionModel, config: TrainConfig, labels, latents=None, clouds=None, lr_scale: float = 1.0, callback=None):
    """Fit the denoiser (and optionally the encoder) by minimizing the epsilon loss.

    Pass precomputed ``latents`` (frozen encoder, or an encoder-free image
    model) or raw ``clouds`` (encoded each step). Each step draws a batch
    with replacement, one timestep per example, and fresh Gaussian noise.
    ``model`` is updated in place and its ``step`` advances; the return
    value is the loss trace as ``[(step, loss), ...]``.

    ``lr_scale`` multiplies the learning rate without going through config
    validation; 0 freezes the parameters.
    """
    dims, sched = model.dims, model.schedule
    labels = np.asarray(labels, dtype=np.int64)
    data = latents if latents is not None else clouds
    if data is None or len(data) != len(labels):
        raise ValueError("need latents or clouds, one per label")
    counts = np.bincount(labels, minlength=dims.n_classes)
    empty = [c for c in range(dims.n_classes) if counts[c] == 0]
    if empty:
        raise ValueError(f"no training samples for labels {empty}")
    if labels.max() >= dims.n_classes:
        raise ValueError("label out of range")
    train_encoder = config.train_encoder and clouds is not None and dims.has_encoder
    comp_prob = config.complement_prob if dims.complements else 0.0

    opt = Adam(config.learning_rate * lr_scale, config.beta1, config.beta2, config.adam_eps, config.weight_decay,
               state=model.optimizer_state, step=model.step)
    trace = []
    start = model.step
    base_lr = opt.lr
    for step in range(start + 1, start + config.steps + 1):
        if config.lr_decay == "cosine":
            opt.lr = base_lr * 0.5 * (1 + np.cos(np.pi * (step - start - 1) / config.steps))
        rng = make_rng(config.seed, "train", step)
        idx = rng.integers(0, len(labels), config.batch_size)
        cond = conditioning_labels(labels[idx], dims.n_classes, comp_prob, rng)
        t = rng.integers(1, sched.T + 1, config.batch_size)
        eps = rng.standard_normal((config.batch_size, dims.d_z))
        if latents is not None:
            batch = Batch(cond, t, eps, z0=np.asarray(latents)[idx])
        else:
            batch = Batch(cond, t, eps, clouds=np.asarray(clouds)[idx])
        loss, grads = loss_and_grad(model.params, batch, dims, sched, train_encoder)
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite loss {loss} at step {step}; lower the learning rate")
        opt.step(model.params, grads)
        model.step = step
        if step == start + 1 or step % config.log_every == 0:
            trace.append((step, loss))
            log.debug("step %d loss %.5f", step, loss)
            if callback is not None:
                callback(step, loss)
    model.optimizer_state = opt.state
    return trace


def write_loss_csv(trace, path, append: bool = False) -> None:
    path = Path(path)
    new = not (append and path.exists())
    with path.open("a" if append else "w", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(["step", "loss"])
        for step, loss in trace:
            w.writerow([step, repr(float(loss))])


def read_loss_csv(path) -> list[tuple[int, float]]:
    with Path(path).open(newline="") as fh:
        return [(int(r["step"]), float(r["loss"])) for r in csv.DictReader(fh)]


# ---------------------------------------------------------------- checkpoints


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode()
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def checkpoint_bytes(model: DiffusionModel) -> bytes:
    d = model.dims
    tensors = dict(model.params)
    for k in trainable_keys(model.params, train_encoder=True):
        for moment in ("m", "v"):
            key = f"adam.{moment}/{k}"
            if key in model.optimizer_state:
                tensors[key] = model.optimizer_state[key]
    out = [MAGIC, struct.pack("<H", VERSION)]
    out.append(_HEADER.pack(d.d_z, d.hidden, d.enc_hidden, d.n_classes, d.n_labels, d.d_e, d.d_t, d.T,
                            int(d.complements), model.schedule.beta_min, model.schedule.beta_max,
                            model.step, model.init_seed, len(tensors)))
    out += [_pack_tensor(k, v) for k, v in tensors.items()]
    return b"".join(out)


def save_checkpoint(model: DiffusionModel, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(model))
    tmp.replace(path)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(f"checkpoint truncated while reading {what}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk


def checkpoint_from_bytes(data: bytes) -> DiffusionModel:
    r = _Reader(data)
    if len(data) < len(MAGIC) or data[: len(MAGIC)] != MAGIC:
        raise BadMagicError("not a checkpoint file (bad magic)")
    r.pos = len(MAGIC)
    (version,) = struct.unpack("<H", r.take(2, "version"))
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, this build reads version {VERSION}")
    (d_z, hidden, enc_hidden, n_classes, n_labels, d_e, d_t, T, complements,
     beta_min, beta_max, step, init_seed, n_tensors) = _HEADER.unpack(r.take(_HEADER.size, "header"))
    try:
        dims = ModelDims(d_z=d_z, hidden=hidden, n_classes=n_classes, T=T, enc_hidden=enc_hidden,
                         complements=bool(complements), d_e=d_e, d_t=d_t)
    except ValueError as err:
        raise DimensionMismatchError(f"invalid dimensions in header: {err}") from None
    if dims.n_labels != n_labels:
        raise DimensionMismatchError(f"header says {n_labels} labels, dimensions imply {dims.n_labels}")

    tensors = {}
    for i in range(n_tensors):
        (name_len,) = struct.unpack("<H", r.take(2, f"tensor #{i} name length"))
        name = r.take(name_len, f"tensor #{i} name").decode()
        (ndim,) = struct.unpack("<B", r.take(1, f"tensor {name!r} rank"))
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim, f"tensor {name!r} shape"))
        size = int(np.prod(shape, dtype=np.int64)) * 4
        raw = r.take(size, f"tensor {name!r}")
        tensors[name] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape)
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after last tensor")

    expected = param_shapes(dims)
    params = {}
    for name, shape in expected.items():
        if name not in tensors:
            raise DimensionMismatchError(f"missing tensor {name!r}")
        if tensors[name].shape != shape:
            raise DimensionMismatchError(f"tensor {name!r} has shape {tensors[name].shape}, expected {shape}")
        params[name] = tensors[name]
    opt_state = {}
    for name, arr in tensors.items():
        if name in expected:
            continue
        moment, _, pname = name.partition("/")
        if moment not in ("adam.m", "adam.v") or pname not in expected:
            raise DimensionMismatchError(f"unexpected tensor {name!r}")
        if arr.shape != expected[pname]:
            raise DimensionMismatchError(f"tensor {name!r} has shape {arr.shape}, expected {expected[pname]}")
        opt_state[name] = arr
    schedule = make_schedule(T, beta_min, beta_max)
    return DiffusionModel(dims, params, schedule, step=step, init_seed=init_seed, optimizer_state=opt_state)


def load_checkpoint(path) -> DiffusionModel:
    return checkpoint_from_bytes(Path(path).read_bytes())
