"""Noise schedule, forward noising, DDIM updates, sampling, and training.

The schedule is a variance-preserving cosine over a grid of T+1 points
with clipped endpoints; a model may sample with any step count that
divides the grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, TrainingError
from .tensor import Tensor, backward, no_grad, square, tsum

ENDPOINT_CLIP = 1e-4


@dataclass
class NoiseSchedule:
    """Discretized mixing coefficients over t = i/T, i = 0..T.

    alpha[i]^2 + sigma[i]^2 == 1 on every grid point; ``lam`` is the
    log signal-to-noise ratio and ``w`` the per-step loss weight.
    """

    T: int
    alpha: np.ndarray
    sigma: np.ndarray
    lam: np.ndarray
    w: np.ndarray
    weighting: str = "uniform"


def make_schedule(T: int, weighting: str = "uniform") -> NoiseSchedule:
    """Cosine schedule with endpoints clipped away from 0 and 1.

    The clipped pair is renormalized to unit energy so the
    variance-preserving identity holds exactly on every grid point.
    """
    if T < 2 or T % 2 != 0:
        raise ConfigError(f"schedule needs an even T >= 2, got {T}")
    if weighting not in ("uniform", "truncated_snr"):
        raise ConfigError(f"unknown loss weighting {weighting!r}")
    phase = 0.5 * np.pi * np.arange(T + 1) / T
    a = np.clip(np.cos(phase), ENDPOINT_CLIP, 1.0 - ENDPOINT_CLIP)
    s = np.clip(np.sin(phase), ENDPOINT_CLIP, 1.0 - ENDPOINT_CLIP)
    norm = np.sqrt(a * a + s * s)
    a, s = a / norm, s / norm
    lam = 2.0 * (np.log(a) - np.log(s))
    w = np.ones(T + 1) if weighting == "uniform" else np.maximum(1.0, np.exp(lam))
    return NoiseSchedule(T=T, alpha=a, sigma=s, lam=lam, w=w, weighting=weighting)


def grid_index(t, T: int):
    """Map time values in [0, 1] to grid indices, rejecting off-grid input."""
    arr = np.asarray(t, dtype=np.float64) * T
    idx = np.rint(arr)
    if np.any(np.abs(arr - idx) > 1e-6) or np.any(idx < 0) or np.any(idx > T):
        raise ContractError(f"time step {t!r} is not on the T={T} grid")
    out = idx.astype(np.int64)
    return int(out) if out.ndim == 0 else out


@dataclass
class DiffusionBatch:
    """One training minibatch: clean data, noise, per-sample steps, noised state."""

    x: np.ndarray
    eps: np.ndarray
    t: np.ndarray
    z: np.ndarray

    @classmethod
    def make(cls, x: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule) -> "DiffusionBatch":
        return cls(x=x, eps=eps, t=np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],)).copy(),
                   z=forward_noise(x, t, eps, sched))


def forward_noise(x: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """z = alpha_t * x + sigma_t * eps, rowwise."""
    if x.shape != eps.shape:
        raise ContractError(f"forward_noise: x shape {x.shape} != eps shape {eps.shape}")
    idx = grid_index(t, sched.T)
    a = sched.alpha[idx]
    s = sched.sigma[idx]
    if np.ndim(idx) > 0:
        a, s = a[:, None], s[:, None]
    return a * x + s * eps


def dm_loss(model, batch: DiffusionBatch, sched: NoiseSchedule) -> Tensor:
    """Mean over the batch of w(lambda_t) * ||x - model(z_t, t)||^2."""
    expected = forward_noise(batch.x, batch.t, batch.eps, sched)
    if not np.allclose(expected, batch.z, atol=1e-9):
        raise ContractError("dm_loss: batch.z is inconsistent with batch.x, eps, t")
    idx = grid_index(batch.t, sched.T)
    w = sched.w[idx][:, None]
    pred = model.forward(batch.z, batch.t)
    diff = Tensor(batch.x) - pred
    n = batch.x.shape[0]
    return tsum(square(diff) * w) * (1.0 / n)


def ddim_step(model, z_t: np.ndarray, t, s, sched: NoiseSchedule) -> np.ndarray:
    """Deterministic update from time t to earlier time s.

    The residual keeps the source-step coefficient alpha_t, so a perfect
    predictor maps alpha_t*x exactly onto alpha_s*x and composing two
    half-steps equals one full step.
    """
    it = grid_index(t, sched.T)
    i_s = grid_index(s, sched.T)
    if i_s > it:
        raise ContractError(f"ddim_step: target s={s} is later than t={t}")
    with no_grad():
        xhat = model.forward(z_t, t).data
    a_t, s_t = sched.alpha[it], sched.sigma[it]
    a_s, s_s = sched.alpha[i_s], sched.sigma[i_s]
    return a_s * xhat + (s_s / s_t) * (z_t - a_t * xhat)


def sample(model, sched: NoiseSchedule, n: int, seed: int) -> np.ndarray:
    """Run n trajectories from t=1 to t=0 at the model's own step count.

    Returns the final x-predictions. Initial draws come from per-trajectory
    RNG streams so the result is independent of evaluation order.
    """
    steps = model.step_count
    if sched.T % steps != 0:
        raise ConfigError(f"step count {steps} does not divide the schedule grid T={sched.T}")
    dim = model.data_dim
    if n == 0:
        return np.zeros((0, dim))
    children = np.random.SeedSequence([seed, 0x5A11]).spawn(n)
    z = np.stack([np.random.default_rng(c).standard_normal(dim) for c in children])
    stride = sched.T // steps
    xhat = np.zeros_like(z)
    with no_grad():
        for k in range(steps, 0, -1):
            it, i_s = k * stride, (k - 1) * stride
            t = it / sched.T
            xhat = model.forward(z, t).data
            z = sched.alpha[i_s] * xhat + (sched.sigma[i_s] / sched.sigma[it]) * (z - sched.alpha[it] * xhat)
    return xhat


def train_dm(model, dataset: np.ndarray, sched: NoiseSchedule, steps: int, lr: float,
             seed: int, batch_size: int = 64) -> list[float]:
    """Plain SGD on the denoising loss; returns the per-step loss trace."""
    if steps < 0:
        raise ConfigError(f"train_dm: steps must be >= 0, got {steps}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7124]))
    params = model.parameters()
    trace: list[float] = []
    n = dataset.shape[0]
    for step in range(steps):
        x = dataset[rng.integers(0, n, batch_size)]
        t = rng.integers(1, sched.T + 1, batch_size) / sched.T
        eps = rng.standard_normal(x.shape)
        batch = DiffusionBatch.make(x, t, eps, sched)
        loss = dm_loss(model, batch, sched)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingError(f"training loss diverged at step {step}")
        for p in params:
            p.zero_grad()
        backward(loss, params)
        for p in params:
            p.data -= lr * p.grad
        trace.append(value)
    return trace
