"""Point-cloud encoder, class-conditional noise predictor, and their gradients.

Parameters live in a flat ``dict[str, ndarray]`` whose keys are prefixed
``enc.`` (encoder) or ``den.`` (denoiser). Gradients are dicts with the same
keys. Everything is plain numpy with hand-written backward passes; the dtype
of the parameters (float32 by default, float64 for gradient checks) sets the
dtype of the computation.

Encoder: a shared per-point MLP ``3 -> H -> H -> D_z`` with SiLU activations,
max-pooled over points, then shifted and scaled by fixed per-coordinate
constants (``enc.shift``, ``enc.scale``) so latents are roughly standardized.

Denoiser: ``[z_t, sinusoid(t / T), E[c]] -> H -> H -> D_z`` with SiLU, plus
two zero-initialized output paths: a per-coordinate gated skip
``g(t) * z_t`` with ``g`` linear in the timestep features, and a bilinear
time-by-class bias ``(sinusoid(t) outer E[c]) @ W``.
For roughly Gaussian data the optimal noise estimate is
``k(t) * (z_t - alpha_t * mean_c)``; the two extra paths hold exactly those
pieces, which a narrow trunk cannot represent when ``D_z`` is large
(flattened depth images).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .rng import make_rng
from .schedule import NoiseSchedule, forward_diffuse

ENCODER_WEIGHTS = ("enc.w1", "enc.b1", "enc.w2", "enc.b2", "enc.w3", "enc.b3")
ENCODER_STATS = ("enc.shift", "enc.scale")
DENOISER_WEIGHTS = ("den.embed", "den.w1", "den.b1", "den.w2", "den.b2", "den.w3", "den.b3", "den.ws", "den.bs", "den.wb")


@dataclass(frozen=True)
class ModelDims:
    d_z: int
    hidden: int
    n_classes: int
    T: int
    enc_hidden: int = 0  # 0 means no encoder: inputs are already vectors
    complements: bool = True
    d_e: int = 16
    d_t: int = 16

    def __post_init__(self):
        for name in ("d_z", "hidden", "n_classes", "T", "d_e", "d_t"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_t % 2:
            raise ValueError("d_t must be even")

    @property
    def n_labels(self) -> int:
        """Rows of the class-embedding table, complement labels included."""
        return 2 * self.n_classes if self.complements else self.n_classes

    @property
    def has_encoder(self) -> bool:
        return self.enc_hidden > 0


def complement_label(c: int, n_classes: int) -> int:
    """Conditioning label meaning "not class c"."""
    return n_classes + c


def param_shapes(dims: ModelDims) -> dict[str, tuple[int, ...]]:
    h, he = dims.hidden, dims.enc_hidden
    shapes = {}
    if dims.has_encoder:
        shapes.update({
            "enc.w1": (3, he), "enc.b1": (he,),
            "enc.w2": (he, he), "enc.b2": (he,),
            "enc.w3": (he, dims.d_z), "enc.b3": (dims.d_z,),
            "enc.shift": (dims.d_z,), "enc.scale": (dims.d_z,),
        })
    shapes.update({
        "den.embed": (dims.n_labels, dims.d_e),
        "den.w1": (dims.d_z + dims.d_t + dims.d_e, h), "den.b1": (h,),
        "den.w2": (h, h), "den.b2": (h,),
        "den.w3": (h, dims.d_z), "den.b3": (dims.d_z,),
        "den.ws": (dims.d_t, dims.d_z), "den.bs": (dims.d_z,),
        "den.wb": (dims.d_t * dims.d_e, dims.d_z),
    })
    return shapes


def init_params(dims: ModelDims, seed: int, dtype=np.float32) -> dict[str, np.ndarray]:
    """Glorot-uniform matrices, zero biases and skip, identity latent standardization."""
    rng = make_rng(seed, "init")
    params = {}
    for name, shape in param_shapes(dims).items():
        if name in ("den.ws", "den.wb"):
            params[name] = np.zeros(shape, dtype=dtype)
        elif name == "enc.scale":
            params[name] = np.ones(shape, dtype=dtype)
        elif len(shape) == 2:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-limit, limit, shape).astype(dtype)
        else:
            params[name] = np.zeros(shape, dtype=dtype)
    return params


def trainable_keys(params, train_encoder: bool) -> list[str]:
    keys = [k for k in DENOISER_WEIGHTS if k in params]
    if train_encoder:
        keys = [k for k in ENCODER_WEIGHTS if k in params] + keys
    return keys


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(x):
    return x * _sigmoid(x)


def silu_grad(x):
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def timestep_embedding(t, T: int, d_t: int, dtype=np.float64) -> np.ndarray:
    """Sinusoidal features of ``t / T`` with frequencies spaced geometrically in [1, 1000]."""
    s = np.asarray(t, dtype=np.float64).reshape(-1, 1) / T
    half = d_t // 2
    freqs = np.pi * np.exp(np.linspace(0.0, np.log(1000.0), half))
    ang = s * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(dtype)


# ---------------------------------------------------------------- encoder


def _encoder_forward(p, clouds, standardize=True):
    x = clouds.astype(p["enc.w1"].dtype, copy=False)
    a1 = x @ p["enc.w1"] + p["enc.b1"]
    h1 = silu(a1)
    a2 = h1 @ p["enc.w2"] + p["enc.b2"]
    h2 = silu(a2)
    a3 = h2 @ p["enc.w3"] + p["enc.b3"]
    idx = np.argmax(a3, axis=1)  # (B, D_z)
    pooled = np.take_along_axis(a3, idx[:, None, :], axis=1)[:, 0, :]
    z = (pooled - p["enc.shift"]) / p["enc.scale"] if standardize else pooled
    return z, (x, a1, h1, a2, h2, idx)


def encode_raw(params, clouds) -> np.ndarray:
    """Max-pooled features before standardization, shape (B, D_z)."""
    z, _ = _encoder_forward(params, _as_batch(clouds), standardize=False)
    return z


def _as_batch(clouds) -> np.ndarray:
    clouds = np.asarray(clouds)
    if clouds.ndim == 2:
        clouds = clouds[None]
    if clouds.ndim != 3 or clouds.shape[2] != 3:
        raise ValueError(f"expected (N, 3) or (B, N, 3) points, got shape {clouds.shape}")
    if clouds.shape[1] == 0:
        raise ValueError("cannot encode an empty point cloud")
    return clouds


def encode(params, clouds) -> np.ndarray:
    """Latent vector(s) for one ``(N, 3)`` cloud or a ``(B, N, 3)`` batch.

    Max pooling makes the output exactly invariant to point order.
    """
    single = np.asarray(clouds).ndim == 2
    z, _ = _encoder_forward(params, _as_batch(clouds))
    return z[0] if single else z


def _encoder_backward(p, cache, gz, grads):
    x, a1, h1, a2, h2, idx = cache
    B, N, _ = x.shape
    gpool = gz / p["enc.scale"]
    ga3 = np.zeros((B, N, gpool.shape[1]), dtype=gz.dtype)
    np.put_along_axis(ga3, idx[:, None, :], gpool[:, None, :], axis=1)
    grads["enc.w3"] = np.einsum("bnh,bnd->hd", h2, ga3)
    grads["enc.b3"] = gpool.sum(axis=0)
    ga2 = (ga3 @ p["enc.w3"].T) * silu_grad(a2)
    grads["enc.w2"] = np.einsum("bnh,bnk->hk", h1, ga2)
    grads["enc.b2"] = ga2.sum(axis=(0, 1))
    ga1 = (ga2 @ p["enc.w2"].T) * silu_grad(a1)
    grads["enc.w1"] = np.einsum("bni,bnk->ik", x, ga1)
    grads["enc.b1"] = ga1.sum(axis=(0, 1))


# ---------------------------------------------------------------- denoiser


def _denoise_forward(p, z_t, t, c, dims: ModelDims):
    dtype = p["den.w1"].dtype
    z_t = np.asarray(z_t, dtype=dtype)
    if z_t.ndim != 2 or z_t.shape[1] != dims.d_z:
        raise ValueError(f"expected latents of shape (B, {dims.d_z}), got {z_t.shape}")
    c = np.asarray(c, dtype=np.int64).reshape(-1)
    if c.size and (c.min() < 0 or c.max() >= dims.n_labels):
        raise ValueError(f"class id out of range [0, {dims.n_labels})")
    t = np.asarray(t).reshape(-1)
    if t.size and (t.min() < 1 or t.max() > dims.T):
        raise ValueError(f"timestep out of range [1, {dims.T}]")
    temb = timestep_embedding(t, dims.T, dims.d_t, dtype)
    emb = p["den.embed"][c]
    x = np.concatenate([z_t, temb, emb], axis=1)
    a1 = x @ p["den.w1"] + p["den.b1"]
    h1 = silu(a1)
    a2 = h1 @ p["den.w2"] + p["den.b2"]
    h2 = silu(a2)
    gate = temb @ p["den.ws"] + p["den.bs"]  # (B, D_z)
    tc = (temb[:, :, None] * emb[:, None, :]).reshape(len(emb), -1)
    out = h2 @ p["den.w3"] + p["den.b3"] + gate * z_t + tc @ p["den.wb"]
    return out, (x, a1, h1, a2, h2, c, temb, gate, z_t, emb, tc)


def denoise(params, z_t, t, c, dims: ModelDims) -> np.ndarray:
    """Predicted noise for a batch ``z_t`` (B, D_z) at steps ``t`` under labels ``c``."""
    out, _ = _denoise_forward(params, z_t, t, c, dims)
    return out


def _denoise_backward(p, cache, gout, dims, grads):
    x, a1, h1, a2, h2, c, temb, gate, z_t, emb, tc = cache
    grads["den.wb"] = tc.T @ gout
    gtc = (gout @ p["den.wb"].T).reshape(len(emb), dims.d_t, dims.d_e)
    gemb = np.einsum("btd,bt->bd", gtc, temb)
    ggate = gout * z_t
    grads["den.ws"] = temb.T @ ggate
    grads["den.bs"] = ggate.sum(axis=0)
    grads["den.w3"] = h2.T @ gout
    grads["den.b3"] = gout.sum(axis=0)
    ga2 = (gout @ p["den.w3"].T) * silu_grad(a2)
    grads["den.w2"] = h1.T @ ga2
    grads["den.b2"] = ga2.sum(axis=0)
    ga1 = (ga2 @ p["den.w2"].T) * silu_grad(a1)
    grads["den.w1"] = x.T @ ga1
    grads["den.b1"] = ga1.sum(axis=0)
    gx = ga1 @ p["den.w1"].T
    gembed = np.zeros_like(p["den.embed"])
    np.add.at(gembed, c, gx[:, dims.d_z + dims.d_t :] + gemb)
    grads["den.embed"] = gembed
    return gx[:, : dims.d_z] + gate * gout


@dataclass
class Batch:
    """One training batch. Give ``z0`` (latents) or ``clouds`` (encoded on the fly)."""

    c: np.ndarray
    t: np.ndarray
    eps: np.ndarray
    z0: np.ndarray | None = None
    clouds: np.ndarray | None = None

    def __len__(self):
        return len(self.c)


def loss_and_grad(params, batch: Batch, dims: ModelDims, sched: NoiseSchedule, train_encoder: bool = False):
    """Mean epsilon loss over the batch and its gradient.

    The loss per example is the unnormalized squared error summed over
    latent coordinates. Encoder gradients are included only when
    ``train_encoder`` is set and the batch carries ``clouds``.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    dtype = params["den.w1"].dtype
    enc_cache = None
    if batch.clouds is not None:
        z0, enc_cache = _encoder_forward(params, _as_batch(batch.clouds))
    elif batch.z0 is not None:
        z0 = np.asarray(batch.z0, dtype=dtype)
    else:
        raise ValueError("batch needs z0 or clouds")
    eps = np.asarray(batch.eps, dtype=dtype)
    t = sched.check_t(batch.t)
    z_t = forward_diffuse(z0, t, eps, sched).astype(dtype, copy=False)
    out, cache = _denoise_forward(params, z_t, t, batch.c, dims)
    diff = out - eps
    B = len(eps)
    loss = float(np.einsum("ij,ij->", diff, diff, dtype=np.float64) / B)

    grads: dict[str, np.ndarray] = {}
    gz_t = _denoise_backward(params, cache, (2.0 / B) * diff, dims, grads)
    if train_encoder and enc_cache is not None:
        gz0 = gz_t * sched.alpha[t - 1][:, None].astype(dtype)
        _encoder_backward(params, enc_cache, gz0, grads)
    return loss, {k: grads[k].astype(dtype, copy=False) for k in trainable_keys(params, train_encoder and enc_cache is not None)}


# ---------------------------------------------------------------- model


@dataclass
class DiffusionModel:
    """Parameters plus the dimensions and noise schedule they were built for.

    Calling the model runs the denoiser, so it can be handed to anything
    that expects ``f(z_t, t, c) -> eps_hat``.
    """

    dims: ModelDims
    params: dict[str, np.ndarray]
    schedule: NoiseSchedule
    step: int = 0
    init_seed: int = 0
    optimizer_state: dict[str, np.ndarray] = field(default_factory=dict)

    def __call__(self, z_t, t, c) -> np.ndarray:
        return denoise(self.params, z_t, t, c, self.dims)

    def encode(self, clouds) -> np.ndarray:
        if not self.dims.has_encoder:
            raise ValueError("model has no point-cloud encoder")
        return encode(self.params, clouds)

    def copy(self) -> "DiffusionModel":
        return replace(
            self,
            params={k: v.copy() for k, v in self.params.items()},
            optimizer_state={k: v.copy() for k, v in self.optimizer_state.items()},
        )


def create_model(dims: ModelDims, schedule: NoiseSchedule, seed: int, dtype=np.float32) -> DiffusionModel:
    if schedule.T != dims.T:
        raise ValueError(f"schedule has {schedule.T} steps, dims say {dims.T}")
    return DiffusionModel(dims, init_params(dims, seed, dtype), schedule, init_seed=seed)


def fit_latent_stats(params, clouds, batch_size: int = 64) -> None:
    """Set ``enc.shift``/``enc.scale`` to the mean and std of raw encoder outputs."""
    raw = np.concatenate([encode_raw(params, clouds[i : i + batch_size]) for i in range(0, len(clouds), batch_size)])
    dtype = params["enc.shift"].dtype
    params["enc.shift"] = raw.mean(axis=0).astype(dtype)
    params["enc.scale"] = np.maximum(raw.std(axis=0), 1e-6).astype(dtype)
