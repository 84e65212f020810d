"""Variance-preserving noise schedule, forward noising and the epsilon loss.

Timesteps are 1-based: ``t`` runs over ``1..T`` and index ``t - 1`` into the
coefficient arrays. A denoiser is any callable ``f(z_t, t, c) -> eps_hat``
taking a batch ``z_t`` of shape ``(B, D)`` with integer arrays ``t`` and ``c``
of shape ``(B,)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rng import make_rng

DEFAULT_T = 1000
DEFAULT_BETA_MIN = 1e-4
DEFAULT_BETA_MAX = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    beta_min: float
    beta_max: float
    betas: np.ndarray = field(repr=False)
    alpha_bar: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    sigma: np.ndarray = field(repr=False)

    @property
    def T(self) -> int:
        return len(self.betas)

    def check_t(self, t) -> np.ndarray:
        t = np.asarray(t)
        if not np.issubdtype(t.dtype, np.integer):
            if not np.all(t == np.round(t)):
                raise ValueError("timesteps must be integers")
            t = t.astype(np.int64)
        if t.size and (t.min() < 1 or t.max() > self.T):
            raise ValueError(f"timestep out of range [1, {self.T}]")
        return t


def make_schedule(T: int = DEFAULT_T, beta_min: float = DEFAULT_BETA_MIN, beta_max: float = DEFAULT_BETA_MAX) -> NoiseSchedule:
    """Linear beta ramp from ``beta_min`` to ``beta_max`` over ``T`` steps."""
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T}")
    if not 0 < beta_min <= beta_max < 1:
        raise ValueError(f"need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})")
    T = int(T)
    betas = np.linspace(beta_min, beta_max, T) if T > 1 else np.array([float(beta_min)])
    alpha_bar = np.cumprod(1.0 - betas)
    alpha, sigma = np.sqrt(alpha_bar), np.sqrt(1.0 - alpha_bar)
    assert np.all(np.abs(alpha**2 + sigma**2 - 1) <= 1e-9)
    for a in (betas, alpha_bar, alpha, sigma):
        a.setflags(write=False)
    return NoiseSchedule(float(beta_min), float(beta_max), betas, alpha_bar, alpha, sigma)


def forward_diffuse(z0: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """``alpha_t * z0 + sigma_t * eps``; ``t`` may be a scalar or one step per row."""
    z0, eps = np.asarray(z0), np.asarray(eps)
    if z0.shape != eps.shape:
        raise ValueError(f"z0 shape {z0.shape} != eps shape {eps.shape}")
    t = sched.check_t(t)
    a, s = sched.alpha[t - 1], sched.sigma[t - 1]
    if t.ndim == 1:
        a, s = a[:, None], s[:, None]
    return a * z0 + s * eps


def eps_losses(denoiser, z0, c, t, eps, sched: NoiseSchedule) -> np.ndarray:
    """Per-row squared error ``||eps - eps_hat(z_t, t, c)||^2`` for a batch."""
    z0, eps = np.atleast_2d(z0), np.atleast_2d(eps)
    t = np.broadcast_to(sched.check_t(t), (len(eps),))
    c = np.broadcast_to(np.asarray(c, dtype=np.int64), (len(eps),))
    z0 = np.broadcast_to(z0, eps.shape)
    pred = np.asarray(denoiser(forward_diffuse(z0, t, eps, sched), t, c))
    if pred.shape != eps.shape:
        raise ValueError(f"denoiser returned shape {pred.shape}, expected {eps.shape}")
    diff = eps - pred
    return np.einsum("ij,ij->i", diff, diff)


def eps_loss(denoiser, z0, c: int, t: int, eps, sched: NoiseSchedule) -> float:
    """Sum of squared coordinates of the noise-prediction error (no averaging)."""
    return float(eps_losses(denoiser, np.reshape(z0, (1, -1)), [c], [t], np.reshape(eps, (1, -1)), sched)[0])


def sampling_timesteps(T: int, n_steps: int) -> np.ndarray:
    """Evenly spaced timesteps in decreasing order, always starting at ``T``."""
    if n_steps < 1 or n_steps > T:
        raise ValueError(f"n_steps must be in [1, {T}], got {n_steps}")
    if n_steps == 1:
        return np.array([T])
    return np.rint(np.linspace(1, T, n_steps)).astype(np.int64)[::-1]


def reverse_step(z, eps_hat, t: int, t_prev: int, sched: NoiseSchedule, noise=None):
    """One ancestral update from step ``t`` to ``t_prev`` (0 means data).

    Uses the DDPM posterior mean with the effective beta for the stride,
    ``beta = 1 - abar_t / abar_prev``::

        mean = (z - beta / sqrt(1 - abar_t) * eps_hat) / sqrt(1 - beta)
        var  = beta * (1 - abar_prev) / (1 - abar_t)

    No noise is added on the final step.
    """
    ab_t = sched.alpha_bar[t - 1]
    ab_prev = sched.alpha_bar[t_prev - 1] if t_prev > 0 else 1.0
    beta = 1.0 - ab_t / ab_prev
    mean = (z - beta / np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(1.0 - beta)
    if t_prev == 0 or noise is None:
        return mean
    var = beta * (1.0 - ab_prev) / (1.0 - ab_t)
    return mean + np.sqrt(var) * noise


def reverse_sample(denoiser, c: int, sched: NoiseSchedule, n_steps: int, seed: int, dim: int, n_samples: int = 1) -> np.ndarray:
    """Ancestral sampling of ``n_samples`` vectors conditioned on class ``c``."""
    steps = sampling_timesteps(sched.T, n_steps)
    rng = make_rng(seed, "reverse")
    z = rng.standard_normal((n_samples, dim))
    labels = np.full(n_samples, c, dtype=np.int64)
    for i, t in enumerate(steps):
        t_prev = int(steps[i + 1]) if i + 1 < len(steps) else 0
        eps_hat = np.asarray(denoiser(z, np.full(n_samples, t), labels), dtype=np.float64)
        noise = rng.standard_normal(z.shape) if t_prev > 0 else None
        z = reverse_step(z, eps_hat, int(t), t_prev, sched, noise)
    return z
