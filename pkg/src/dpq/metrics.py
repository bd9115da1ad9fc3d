"""Measurement: perturbation statistics, theoretical compute cost, and the
2-D Wasserstein sample-quality proxy.

No Inception-based scores here; quality comparisons made with these tools
are directional (orderings and improvement signs), never absolute-number
reproductions of full-scale image benchmarks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cad import em_distance_value
from .errors import ConfigError, ContractError
from .pq import PerturbationLog

LOSS_FLOOR = 1e-12
VALID_BITS = (4, 8, 16, 32)
SUBSAMPLE_SEED = 0x5C41E    # recorded seed for deterministic oversize subsampling
QUALITY_BATCH_BOUND = 2048


@dataclass
class PerturbationReport:
    blocks: list[int]
    final_ref: list[float]
    final_cand: list[float]
    g_mean_ref: float
    g_mean_cand: float
    delta_pert: float
    improved_fraction: float


def _g_mean(losses) -> float:
    floored = np.maximum(np.asarray(losses, dtype=np.float64), LOSS_FLOOR)
    return float(np.exp(np.mean(np.log(floored))))


def perturbation_report(log_ref: PerturbationLog, log_cand: PerturbationLog) -> PerturbationReport:
    """Compare final per-block reconstruction losses of two runs."""
    ref = log_ref.final_losses()
    cand = log_cand.final_losses()
    if set(ref) != set(cand):
        raise ContractError(f"block sets differ: {sorted(ref)} vs {sorted(cand)}")
    blocks = sorted(ref)
    r = np.array([ref[b] for b in blocks])
    c = np.array([cand[b] for b in blocks])
    return PerturbationReport(
        blocks=blocks,
        final_ref=r.tolist(),
        final_cand=c.tolist(),
        g_mean_ref=_g_mean(r),
        g_mean_cand=_g_mean(c),
        delta_pert=float(np.sum(r - c)),
        improved_fraction=float(np.mean(c < r)),
    )


@dataclass
class CostReport:
    model_size_bytes: float
    gbops_per_step: float
    gbops_trajectory: float
    per_layer_macs: list[int]
    w_bits: int
    a_bits: int
    steps: int


def gbops(model_arch, w_bits: int, a_bits: int, steps: int) -> CostReport:
    """Bit-operation accounting: per layer, MACs x w_bits x a_bits.

    ``model_arch`` is either a model exposing ``layer_dims()`` and
    ``num_parameters()`` or a plain list of (in, out) affine dims, in which
    case the parameter count is weights plus biases. Only affine layers
    are counted; embedding and activation costs are negligible here.
    """
    if w_bits not in VALID_BITS or a_bits not in VALID_BITS:
        raise ConfigError(f"bit-widths must be in {VALID_BITS}, got w={w_bits} a={a_bits}")
    if hasattr(model_arch, "layer_dims"):
        dims = model_arch.layer_dims()
        param_count = model_arch.num_parameters()
    else:
        dims = [tuple(d) for d in model_arch]
        param_count = sum(i * o + o for i, o in dims)
    macs = [i * o for i, o in dims]
    per_step = sum(macs) * w_bits * a_bits / 1e9
    return CostReport(
        model_size_bytes=param_count * w_bits / 8.0,
        gbops_per_step=per_step,
        gbops_trajectory=per_step * steps,
        per_layer_macs=macs,
        w_bits=w_bits,
        a_bits=a_bits,
        steps=steps,
    )


def sample_quality(generated: np.ndarray, reference: np.ndarray) -> float:
    """Wasserstein-2 estimate between two 2-D sample batches.

    Exact-assignment squared-cost matching, square-rooted. Batches beyond
    the bound are subsampled deterministically with a recorded seed.
    """
    gen = np.asarray(generated, dtype=np.float64)
    ref = np.asarray(reference, dtype=np.float64)
    if gen.ndim != 2 or ref.ndim != 2 or gen.shape[1] != ref.shape[1]:
        raise ContractError(f"sample_quality: expected (n, d) batches, got "
                            f"{gen.shape} vs {ref.shape}")
    if gen.shape[0] == 0 or ref.shape[0] == 0:
        raise ContractError("sample_quality: empty batch")
    rng = np.random.default_rng(SUBSAMPLE_SEED)
    if gen.shape[0] > QUALITY_BATCH_BOUND:
        gen = gen[rng.choice(gen.shape[0], QUALITY_BATCH_BOUND, replace=False)]
    if ref.shape[0] > QUALITY_BATCH_BOUND:
        ref = ref[rng.choice(ref.shape[0], QUALITY_BATCH_BOUND, replace=False)]
    return float(np.sqrt(em_distance_value(gen, ref)))
