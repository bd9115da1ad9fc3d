"""Calibration-assisted distillation: two-step teacher targets, pluggable
batch distances, and the student training loop that halves sampling steps.

The student starts as a deep copy of the quantized teacher (quantizers
included) with half the step count and is trained so one of its DDIM steps
matches two consecutive teacher steps, plus a weighted distance between
its predictions and full-precision calibration states.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .calib import CalibrationSet
from .diffusion import NoiseSchedule, grid_index
from .errors import (CalibrationError, ConfigError, ContractError,
                     DegenerateStepError, SizeError, TrainingError)
from .model import DenoiserModel
from .tensor import (Tensor, as_tensor, backward, div, exp, log, no_grad,
                     sqrt, square, tmean, tslice, tsum)

EM_BATCH_BOUND = 512
DENSITY_FLOOR = 1e-12
DEGENERATE_DENOM = 1e-10


@dataclass
class DistanceKind:
    tag: str                      # em | kl | jsd | cosine
    bins: int = 24                # kl/jsd grid resolution per dimension
    grid_range: float = 4.0       # kl/jsd grid half-width, symmetric per dim
    bandwidth: float | None = None  # kernel width; None -> Scott's rule on B

    def __post_init__(self):
        if self.tag not in ("em", "kl", "jsd", "cosine"):
            raise ConfigError(f"unknown distance tag {self.tag!r}")
        if self.bins < 8:
            raise ConfigError(f"density grid needs >= 8 bins, got {self.bins}")
        if self.bandwidth is not None and self.bandwidth <= 0:
            raise ConfigError(f"bandwidth must be positive, got {self.bandwidth}")


@dataclass
class CadConfig:
    lam: float = 0.1
    distance: DistanceKind = field(default_factory=lambda: DistanceKind("em"))
    steps: int = 800
    lr: float = 0.01
    batch: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")


# ---------------------------------------------------------------------------
# Two-step teacher target
# ---------------------------------------------------------------------------

def teacher_two_step(teacher: DenoiserModel, z_t: np.ndarray, t, sched: NoiseSchedule) -> np.ndarray:
    """The point one student step must hit to equal two teacher DDIM steps.

    Runs the teacher from t through two of its native steps to t'', then
    solves the single-step update for the prediction that lands there.
    """
    stride = sched.T // teacher.step_count
    i = grid_index(t, sched.T)
    i1, i2 = i - stride, i - 2 * stride
    if i2 < 0:
        raise ContractError(f"two-step target needs t >= 2 teacher steps, got grid index {i}")
    a, s = sched.alpha, sched.sigma
    with no_grad():
        x1 = teacher.forward(z_t, i / sched.T).data
        z1 = a[i1] * x1 + (s[i1] / s[i]) * (z_t - a[i] * x1)
        x2 = teacher.forward(z1, i1 / sched.T).data
        z2 = a[i2] * x2 + (s[i2] / s[i1]) * (z1 - a[i1] * x2)
    ratio = s[i2] / s[i]
    denom = a[i2] - ratio * a[i]
    if abs(denom) < DEGENERATE_DENOM:
        raise DegenerateStepError(f"two-step target denominator {denom:.3e} at grid index {i}")
    return (z2 - ratio * z_t) / denom


# ---------------------------------------------------------------------------
# Distances (scalar graph outputs, differentiable w.r.t. the first batch)
# ---------------------------------------------------------------------------

def _thin_to(a: np.ndarray, n: int) -> np.ndarray:
    """Deterministic subsample to n rows: evenly spaced indices."""
    if a.shape[0] <= n:
        return a
    keep = np.linspace(0, a.shape[0] - 1, n).round().astype(int)
    return a[keep]


def em_assignment(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact min-cost matching on squared Euclidean cost (no subsampling)."""
    cost = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
    return linear_sum_assignment(cost)


def em_distance_value(a: np.ndarray, b: np.ndarray) -> float:
    """Matching cost divided by the matched count (plain numbers, no graph).

    A larger B is first thinned deterministically to A's size.
    """
    b = _thin_to(b, a.shape[0])
    rows, cols = em_assignment(a, b)
    return float(((a[rows] - b[cols]) ** 2).sum() / len(rows))


def em_distance_1d_approx(a: np.ndarray, b: np.ndarray) -> float:
    """Approximate fallback for large batches: per-dimension sorted matching.

    Averages the 1-D optimal-transport cost over dimensions; only exact
    for product distributions, hence labeled approximate.
    """
    if a.shape != b.shape:
        raise ContractError("approximate EM needs equal batch shapes")
    return float(np.mean((np.sort(a, axis=0) - np.sort(b, axis=0)) ** 2) * a.shape[1])


def scott_bandwidth(batch: np.ndarray) -> float:
    """Scott's rule bandwidth from a sample batch."""
    n, d = batch.shape
    h = n ** (-1.0 / (d + 4)) * float(np.mean(batch.std(axis=0)))
    return max(h, 1e-3)


def _effective_bandwidth(kind: DistanceKind, b: np.ndarray) -> float:
    # A kernel narrower than the grid spacing aliases the density into
    # isolated spikes, so the default is floored at one cell.
    cell = 2.0 * kind.grid_range / (kind.bins - 1)
    h = kind.bandwidth if kind.bandwidth is not None else scott_bandwidth(b)
    return max(h, cell) if kind.bandwidth is None else h


def _kde_on_grid(points, grid: np.ndarray, bandwidth: float):
    """Normalized kernel density of `points` on fixed grid nodes.

    Returns a graph tensor when `points` is one, so gradients flow back
    into the batch; plain arrays stay plain.
    """
    inv = -0.5 / (bandwidth * bandwidth)
    if isinstance(points, Tensor):
        d2 = None
        for d in range(grid.shape[1]):
            col = tslice(points, (slice(None), slice(d, d + 1)))
            term = square(col - grid[:, d])
            d2 = term if d2 is None else d2 + term
        dens = tmean(exp(d2 * inv), axis=0)
        dens = dens + DENSITY_FLOOR
        return div(dens, tsum(dens))
    d2 = ((points[:, None, :] - grid[None, :, :]) ** 2).sum(axis=2)
    dens = np.exp(inv * d2).mean(axis=0) + DENSITY_FLOOR
    return dens / dens.sum()


def _density_grid(dim: int, kind: DistanceKind) -> np.ndarray:
    axes = [np.linspace(-kind.grid_range, kind.grid_range, kind.bins)] * dim
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=1)


def distance(kind: DistanceKind, a, b) -> Tensor:
    """Scalar distance between two sample batches, recorded for gradients
    with respect to ``a``. ``b`` is treated as constant."""
    a = as_tensor(a)
    b_arr = b.data if isinstance(b, Tensor) else np.asarray(b, dtype=np.float64)
    if a.data.ndim != 2 or b_arr.ndim != 2 or a.shape[1] != b_arr.shape[1]:
        raise ContractError(f"distance: batches must be (n, d) with equal d, "
                            f"got {a.shape} vs {b_arr.shape}")

    if kind.tag == "em":
        if a.shape[0] > EM_BATCH_BOUND or b_arr.shape[0] > EM_BATCH_BOUND:
            raise SizeError(f"exact EM is bounded at {EM_BATCH_BOUND} samples per batch; "
                            f"use em_distance_1d_approx for larger batches")
        b_arr = _thin_to(b_arr, a.shape[0])
        rows, cols = em_assignment(a.data, b_arr)
        # Assignment held fixed; gradients flow through the pair distances.
        matched = tslice(a, rows)
        return tsum(square(matched - b_arr[cols])) * (1.0 / len(rows))

    if kind.tag in ("kl", "jsd"):
        h = _effective_bandwidth(kind, b_arr)
        grid = _density_grid(a.shape[1], kind)
        pa = _kde_on_grid(a if a.requires_grad else a.data, grid, h)
        pb = _kde_on_grid(b_arr, grid, h)
        pa_t, pb_t = as_tensor(pa), as_tensor(pb)
        if kind.tag == "kl":
            return tsum(pa_t * (log(pa_t) - log(pb_t)))
        m = (pa_t + pb_t) * 0.5
        kl_am = tsum(pa_t * (log(pa_t) - log(m)))
        kl_bm = tsum(pb_t * (log(pb_t) - log(m)))
        return (kl_am + kl_bm) * 0.5

    # cosine: 1 - cos between mean profiles of the two batches
    u = tmean(a, axis=0)
    v = b_arr.mean(axis=0)
    v_norm2 = float(v @ v)
    if v_norm2 == 0.0:
        raise ContractError("cosine distance undefined against a zero mean profile")
    dot = tsum(u * v)
    denom = sqrt(tsum(square(u)) * v_norm2)
    return 1.0 - div(dot, denom)


def cad_loss(x_tilde: np.ndarray, student_out: Tensor, calib_batch: np.ndarray,
             w_t: float, cfg: CadConfig) -> tuple[Tensor, float, float]:
    """w_t * mean ||x_tilde - out||^2 + lambda * distance(out, calib).

    Returns (total, kd_value, cd_value); the distance term is always
    evaluated so traces stay comparable across lambda settings.
    """
    n = x_tilde.shape[0]
    kd = tsum(square(student_out - x_tilde)) * (w_t / n)
    cd = distance(cfg.distance, student_out, calib_batch)
    total = kd + cd * cfg.lam
    return total, kd.item(), cd.item()


def expand_record(state: np.ndarray, t, sched: NoiseSchedule, count: int,
                  rng: np.random.Generator) -> np.ndarray:
    """Batch-expand one calibration state by re-noising it at its own step."""
    idx = grid_index(t, sched.T)
    eps = rng.standard_normal((count, state.shape[0]))
    return sched.alpha[idx] * state + sched.sigma[idx] * eps


def distill(teacher_quant: DenoiserModel, c_dc: CalibrationSet, dataset: np.ndarray,
            sched: NoiseSchedule, cfg: CadConfig) -> tuple[DenoiserModel, list[tuple]]:
    """Train a half-step student against the quantized teacher.

    Returns the student and a trace of (iteration, kd, cd, total). The
    teacher is never mutated.
    """
    T = teacher_quant.step_count
    if T % 2 != 0:
        raise ConfigError(f"teacher step count must be even, got {T}")
    if c_dc.source_T != T:
        raise CalibrationError(f"calibration source_T={c_dc.source_T} does not match "
                               f"teacher steps T={T}")
    records = c_dc.by_step()
    for i in range(2, T + 1, 2):
        if i not in records:
            raise CalibrationError(f"calibration set is missing a record for step {i}")

    student = teacher_quant.clone()
    student.step_count = T // 2
    if cfg.steps == 0:
        return student, []

    stride = sched.T // T
    params = student.parameters()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xCAD]))
    trace: list[tuple] = []
    n_data = dataset.shape[0]
    for it in range(cfg.steps):
        x = dataset[rng.integers(0, n_data, cfg.batch)]
        eps = rng.standard_normal(x.shape)
        i = 2 * int(rng.integers(1, T // 2 + 1))   # even teacher step in {2..T}
        gi = i * stride
        t = gi / sched.T
        z = sched.alpha[gi] * x + sched.sigma[gi] * eps
        x_tilde = teacher_two_step(teacher_quant, z, t, sched)
        calib_batch = expand_record(records[i].state, t, sched, cfg.batch, rng)
        out = student.forward(z, t)
        total, kd, cd = cad_loss(x_tilde, out, calib_batch, float(sched.w[gi]), cfg)
        value = total.item()
        if not np.isfinite(value):
            raise TrainingError(f"distillation loss diverged at iteration {it}")
        for p in params:
            p.zero_grad()
        backward(total, params)
        for p in params:
            p.data -= cfg.lr * p.grad
        trace.append((it, kd, cd, value))
    return student, trace
