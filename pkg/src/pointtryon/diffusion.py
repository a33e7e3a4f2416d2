"""Denoising-diffusion mechanics: schedules, losses, guidance and sampling.

Forward process:  x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps
Reverse step:     x_{t-1} = (x_t - (1-a_t)/sqrt(1-abar_t) eps_hat) / sqrt(a_t)
                           + sigma_t z,          sigma_t^2 = beta_t

All pointwise operations accept either numpy arrays or torch tensors; the
schedule coefficients are applied as Python floats so the arithmetic path is
identical for both backends. Timesteps are 1-based: t in [1, T].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance schedule with derived per-step quantities.

    ``timesteps`` maps each index to the model-facing timestep value; for a
    freshly built schedule it is simply 1..T, for a stride-subsampled
    schedule it names the surviving steps of the parent schedule.
    """

    beta: np.ndarray
    timesteps: np.ndarray
    alpha: np.ndarray = field(init=False)
    alpha_bar: np.ndarray = field(init=False)
    sigma: np.ndarray = field(init=False)

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 1:
            raise ValueError("beta must be a non-empty 1-d sequence")
        if np.any(beta <= 0.0) or np.any(beta >= 1.0):
            raise ValueError("beta values must lie in (0, 1)")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "timesteps", np.asarray(self.timesteps, dtype=np.int64))
        if self.timesteps.shape != beta.shape:
            raise ValueError("timesteps/beta length mismatch")
        object.__setattr__(self, "alpha", 1.0 - beta)
        object.__setattr__(self, "alpha_bar", np.cumprod(1.0 - beta))
        object.__setattr__(self, "sigma", np.sqrt(beta))

    @property
    def T(self) -> int:
        return int(self.beta.size)

    def check_t(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")
        return t


def build_schedule(
    T: int, beta_start: float = 1e-4, beta_end: float = 0.02, kind: str = "linear"
) -> NoiseSchedule:
    """Build a T-step schedule with linearly interpolated beta."""
    if kind != "linear":
        raise ValueError(f"unknown schedule kind {kind!r}")
    if int(T) < 1:
        raise ValueError("T must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    beta = np.linspace(beta_start, beta_end, int(T))
    return NoiseSchedule(beta=beta, timesteps=np.arange(1, int(T) + 1))


def strided_schedule(sched: NoiseSchedule, num_steps: int) -> NoiseSchedule:
    """Subsample a schedule to ``num_steps`` while preserving alpha_bar.

    The surviving steps keep their original alpha_bar values; the per-step
    beta is rebuilt so consecutive retained steps chain correctly
    (alpha'_i = abar(tau_i) / abar(tau_{i-1})).
    """
    if not 1 <= num_steps <= sched.T:
        raise ValueError("num_steps must be in [1, T]")
    taus = np.unique(np.linspace(1, sched.T, num_steps).round().astype(np.int64))
    abar = sched.alpha_bar[taus - 1]
    alpha = abar / np.concatenate(([1.0], abar[:-1]))
    return NoiseSchedule(beta=1.0 - alpha, timesteps=sched.timesteps[taus - 1])


def _check_same_shape(a, b, what: str = "operands") -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"{what} shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def add_noise(x0, eps, t: int, sched: NoiseSchedule):
    """Forward-noise a clean sample to step t in closed form."""
    _check_same_shape(x0, eps, "x0/eps")
    t = sched.check_t(t)
    ab = float(sched.alpha_bar[t - 1])
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def diffusion_loss(eps, eps_hat):
    """Mean squared error between true and predicted noise."""
    _check_same_shape(eps, eps_hat, "eps/eps_hat")
    d = eps - eps_hat
    return (d * d).mean()


def point_focused_loss(eps, eps_hat, mask, lam: float):
    """Denoising loss plus a masked term re-weighting semantic-point cells.

    loss = mean((eps - eps_hat)^2) + lam * mean(((eps - eps_hat) * mask)^2)

    Both terms use mean-over-elements reduction so ``lam`` is comparable
    across resolutions. With lam == 0 the result is exactly the plain loss.
    """
    if lam < 0:
        raise ValueError("lam must be >= 0")
    base = diffusion_loss(eps, eps_hat)
    if lam == 0:
        return base
    eshape, mshape = tuple(eps.shape), tuple(mask.shape)
    if np.broadcast_shapes(mshape, eshape) != eshape:
        raise ValueError(f"mask shape {mshape} not broadcastable to {eshape}")
    d = (eps - eps_hat) * mask
    return base + lam * (d * d).mean()


def cfg_combine(eps_uncond, eps_cond, scale: float):
    """Classifier-free guidance: move from the unconditional prediction
    toward (or past) the conditional one by ``scale``."""
    _check_same_shape(eps_uncond, eps_cond, "eps_uncond/eps_cond")
    return eps_uncond + scale * (eps_cond - eps_uncond)


def denoise_step(x_t, eps_hat, t: int, sched: NoiseSchedule, z=None):
    """One ancestral reverse step from t to t-1. ``z`` is standard-normal
    noise; pass None (or 0) at t == 1 for the final deterministic step."""
    _check_same_shape(x_t, eps_hat, "x_t/eps_hat")
    t = sched.check_t(t)
    a = float(sched.alpha[t - 1])
    ab = float(sched.alpha_bar[t - 1])
    sigma = float(sched.sigma[t - 1])
    mean = (x_t - ((1.0 - a) / math.sqrt(1.0 - ab)) * eps_hat) / math.sqrt(a)
    if z is None:
        return mean
    return mean + sigma * z


def sample(model, bundle, sched: NoiseSchedule, guidance: float, seed: int,
           num_steps: int | None = None):
    """Generate an image by iterating the conditioned reverse process.

    ``model`` must expose:
      * ``trained``                       -- bool, refused when False
      * ``sample_shape(bundle)``          -- output (B, C, H, W)
      * ``predict_pair(x_t, t, bundle)``  -- (eps_uncond, eps_cond); the
        unconditional branch drops every condition, mirroring training
        dropout.

    The implied clean image is clamped to the valid [-1, 1] range at every
    step (expressed through a corrected noise estimate, so each update is
    still the exact reverse-step formula); pixel-space sampling diverges
    without this. All randomness comes from a torch generator seeded with
    ``seed``, so the output is deterministic for a fixed (seed, platform).
    """
    import torch

    if not getattr(model, "trained", False):
        raise ValueError("refusing to sample from an untrained model")
    sub = strided_schedule(sched, num_steps) if num_steps is not None else sched
    gen = torch.Generator().manual_seed(int(seed))
    shape = model.sample_shape(bundle)
    x = torch.randn(*shape, generator=gen)
    for i in range(sub.T, 0, -1):
        t_model = int(sub.timesteps[i - 1])
        if guidance == 1.0:
            eps = model.predict_pair(x, t_model, bundle, need_uncond=False)[1]
        else:
            e_u, e_c = model.predict_pair(x, t_model, bundle)
            eps = cfg_combine(e_u, e_c, guidance)
        ab = float(sub.alpha_bar[i - 1])
        x0_hat = (x - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)
        eps = (x - math.sqrt(ab) * x0_hat.clamp(-1.0, 1.0)) / math.sqrt(1.0 - ab)
        z = torch.randn(*shape, generator=gen) if i > 1 else None
        x = denoise_step(x, eps, i, sub, z)
    return x
