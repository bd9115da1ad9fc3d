"""Progressive quantization: two-stage block reconstruction with a
momentum-gated bit transition, plus post-hoc activation calibration.

Per block, shadow weights stay full precision and are fake-quantized on
every forward; gradient descent on the block-output discrepancy runs at
the intermediate width tau until the transition policy fires, then the
clip ranges are refit at the target width kappa from the current shadow
weights and reconstruction continues on the remaining budget.
"""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .calib import CalibrationSet
from .errors import (CalibrationError, ConfigError, ContractError,
                     DetectorError, ReconstructionError)
from .model import Block, BlockIO, DenoiserModel
from .quant import fit_channel_quant_params, fit_quant_params, ste_quantize
from .tensor import Tensor, backward, no_grad, silu, square, tmean


@dataclass
class TransitionDetector:
    """Momentum-smoothed plateau detector over a loss window.

    The momentum tracks the loss via G <- beta*G + (1-beta)*loss (seeded
    from the first observation); once the window is full, the relative gap
    between the window average and G falling below the threshold fires the
    transition. Firing is monotone for the life of the detector.
    """

    beta: float = 0.9
    threshold: float = 0.04
    window_size: int = 500
    epsilon: float = 1e-8
    momentum: float | None = None
    fired: bool = False
    window: deque = field(default_factory=deque)

    def __post_init__(self):
        if not 0.0 <= self.beta < 1.0:
            raise ConfigError(f"beta must be in [0, 1), got {self.beta}")
        if self.window_size < 1:
            raise ConfigError(f"window size must be >= 1, got {self.window_size}")
        self.window = deque(self.window, maxlen=self.window_size)


def detector_step(detector: TransitionDetector, loss: float) -> bool:
    """Feed one loss; returns True once the plateau has been detected."""
    if not np.isfinite(loss):
        raise DetectorError(f"detector fed a non-finite loss: {loss}")
    detector.window.append(loss)
    if detector.momentum is None:
        detector.momentum = loss
    else:
        detector.momentum = detector.beta * detector.momentum + (1.0 - detector.beta) * loss
    if len(detector.window) == detector.window_size:
        l_avg = sum(detector.window) / detector.window_size
        rate = abs(l_avg - detector.momentum) / max(l_avg, detector.epsilon)
        if rate < detector.threshold:
            detector.fired = True
    return detector.fired


@dataclass
class PqConfig:
    tau: int = 8
    kappa: int = 4
    iterations: int = 2000
    gamma: float = 1e-3
    policy: str = "momentum"           # momentum | fixed_cycle | immediate
    pi: float = 0.04
    beta: float = 0.9
    window: int = 100
    epsilon: float = 1e-8
    fixed_k: int | None = None         # fixed_cycle transition point; None -> iterations // 4
    hessian_weighting: str = "identity"  # identity | diagonal_fisher
    act_bits: int | None = None        # None -> kappa
    act_two_stage: bool = False        # also calibrate activations at tau first
    range_method: str = "minmax"
    range_pct: float | None = None

    def __post_init__(self):
        if self.tau < self.kappa:
            raise ConfigError(f"tau={self.tau} must be >= kappa={self.kappa}")
        if self.policy not in ("momentum", "fixed_cycle", "immediate"):
            raise ConfigError(f"unknown policy {self.policy!r}")
        if self.hessian_weighting not in ("identity", "diagonal_fisher"):
            raise ConfigError(f"unknown weighting {self.hessian_weighting!r}")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")

    @property
    def transition_k(self) -> int:
        return self.fixed_k if self.fixed_k is not None else max(1, self.iterations // 4)

    @property
    def effective_act_bits(self) -> int:
        return self.act_bits if self.act_bits is not None else self.kappa

    def make_detector(self) -> TransitionDetector:
        return TransitionDetector(beta=self.beta, threshold=self.pi,
                                  window_size=self.window, epsilon=self.epsilon)


def block_loss(delta_a: Tensor, weighting: str = "identity",
               diag_h: np.ndarray | None = None) -> Tensor:
    """Mean squared block-output discrepancy, optionally Fisher-weighted."""
    if weighting == "identity":
        if diag_h is not None:
            raise ContractError("diag_h must be absent for identity weighting")
        return tmean(square(delta_a))
    if weighting == "diagonal_fisher":
        if diag_h is None:
            raise ContractError("diagonal_fisher weighting needs diag_h")
        h = np.asarray(diag_h, dtype=np.float64)
        if h.shape != delta_a.shape:
            raise ContractError(f"diag_h shape {h.shape} != delta shape {delta_a.shape}")
        if np.any(h < 0):
            raise ContractError("diag_h entries must be non-negative")
        return tmean(square(delta_a) * h)
    raise ConfigError(f"unknown weighting {weighting!r}")


@dataclass
class BlockLog:
    block: int
    entries: list[tuple[str, int, float]]       # (stage, iteration, loss)
    transition_iteration: int | None
    final_loss: float


@dataclass
class PerturbationLog:
    blocks: list[BlockLog]

    def final_losses(self) -> dict[int, float]:
        return {b.block: b.final_loss for b in self.blocks}

    def write_csv(self, path: str) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["block", "stage", "iteration", "loss", "transition_flag"])
            for b in self.blocks:
                for stage, it, loss in b.entries:
                    flag = int(b.transition_iteration == it and stage == "tau")
                    writer.writerow([b.block, stage, it, repr(loss), flag])


def _quantized_block_forward(block: Block, qparams, io: BlockIO) -> Tensor:
    w = ste_quantize(block.weight, qparams)
    h = Tensor(io.inputs) @ w + block.bias
    if io.extra is not None:
        h = h + io.extra
    if block.activation == "silu":
        h = silu(h)
    return h


def _block_recon_loss(block: Block, qparams, io: BlockIO, cfg: PqConfig,
                      diag_h: np.ndarray | None) -> Tensor:
    out = _quantized_block_forward(block, qparams, io)
    delta = out - io.outputs
    return block_loss(delta, cfg.hessian_weighting, diag_h)


def reconstruct_block(block: Block, io: BlockIO, bits: int, cfg: PqConfig,
                      detector: TransitionDetector | None = None,
                      max_iters: int | None = None, qparams=None,
                      diag_h: np.ndarray | None = None,
                      block_index: int = -1):
    """Gradient-descent reconstruction of one block at a fixed bit-width.

    Returns (qparams, losses, fired_at): the clip ranges used, the loss
    recorded at each iteration, and the iteration (1-based) at which the
    detector fired, if it did. The shadow weights are updated in place;
    the ranges stay fixed for the whole stage.
    """
    if qparams is None:
        qparams = fit_channel_quant_params(block.weight, bits,
                                           method=cfg.range_method, pct=cfg.range_pct)
    budget = cfg.iterations if max_iters is None else max_iters
    losses: list[float] = []
    fired_at: int | None = None
    for j in range(1, budget + 1):
        loss = _block_recon_loss(block, qparams, io, cfg, diag_h)
        value = loss.item()
        if not np.isfinite(value):
            raise ReconstructionError(f"block {block_index}: reconstruction loss diverged "
                                      f"at iteration {j}")
        losses.append(value)
        block.weight.zero_grad()
        backward(loss, [block.weight])
        block.weight.data -= cfg.gamma * block.weight.grad
        if detector is not None and detector_step(detector, value):
            fired_at = j
            break
    return qparams, losses, fired_at


def _eval_block_loss(block: Block, qparams, io: BlockIO, cfg: PqConfig,
                     diag_h: np.ndarray | None) -> float:
    with no_grad():
        return _block_recon_loss(block, qparams, io, cfg, diag_h).item()


def progressive_quantize(model_fp: DenoiserModel, c_qc: CalibrationSet, cfg: PqConfig,
                         diag_h_per_block: list[np.ndarray] | None = None,
                         ) -> tuple[DenoiserModel, PerturbationLog]:
    """Quantize every block of a copy of the FP model; the input is untouched.

    Policies: ``momentum`` transitions tau->kappa when the detector fires
    (forced at budget exhaustion); ``fixed_cycle`` transitions after a set
    iteration count; ``immediate`` skips the tau stage entirely.
    """
    if len(c_qc) == 0:
        raise CalibrationError("progressive_quantize needs a non-empty calibration set")
    if not model_fp.blocks:
        raise ContractError("model has no blocks")
    qmodel = model_fp.clone()
    states, steps = c_qc.states_and_steps()
    t_values = steps / model_fp.step_count
    _, fp_ios = model_fp.forward_with_block_io(states, t_values)

    block_logs: list[BlockLog] = []
    for bi, block in enumerate(qmodel.blocks):
        io = fp_ios[bi]
        diag_h = None if diag_h_per_block is None else diag_h_per_block[bi]
        entries: list[tuple[str, int, float]] = []
        transition: int | None = None
        remaining = cfg.iterations

        if cfg.policy != "immediate" and remaining > 0:
            if cfg.policy == "momentum":
                qp_tau, losses, _ = reconstruct_block(
                    block, io, cfg.tau, cfg, detector=cfg.make_detector(),
                    max_iters=remaining, diag_h=diag_h, block_index=bi)
            else:  # fixed_cycle
                qp_tau, losses, _ = reconstruct_block(
                    block, io, cfg.tau, cfg, max_iters=min(cfg.transition_k, remaining),
                    diag_h=diag_h, block_index=bi)
            entries.extend(("tau", j + 1, l) for j, l in enumerate(losses))
            transition = len(losses)
            remaining -= len(losses)
            kappa_params = qp_tau if cfg.tau == cfg.kappa else None
        else:
            kappa_params = None

        # Target stage: ranges refit from the post-tau shadow weights unless
        # the widths are equal, in which case the refit is skipped so the
        # run matches a single-stage one exactly.
        qp_kappa, losses, _ = reconstruct_block(
            block, io, cfg.kappa, cfg, max_iters=remaining,
            qparams=kappa_params, diag_h=diag_h, block_index=bi)
        entries.extend(("kappa", (transition or 0) + j + 1, l) for j, l in enumerate(losses))

        block.weight_q = qp_kappa
        final = _eval_block_loss(block, qp_kappa, io, cfg, diag_h)
        block_logs.append(BlockLog(block=bi, entries=entries,
                                   transition_iteration=transition, final_loss=final))

    if cfg.act_two_stage:
        calibrate_activations(qmodel, c_qc, cfg.tau)
    calibrate_activations(qmodel, c_qc, cfg.effective_act_bits)
    return qmodel, PerturbationLog(blocks=block_logs)


def calibrate_activations(model: DenoiserModel, c_qc: CalibrationSet, bits: int) -> DenoiserModel:
    """Fit per-block activation ranges on the weight-quantized model.

    Pools every block's outputs over the whole calibration set (all time
    steps together) and installs per-tensor minmax params.
    """
    if len(c_qc) == 0:
        raise ConfigError("calibrate_activations needs a non-empty calibration set")
    if all(b.weight_q is None for b in model.blocks):
        raise ContractError("weight quantization must be applied before activations")
    for b in model.blocks:
        b.act_q = None
    states, steps = c_qc.states_and_steps()
    t_values = steps / model.step_count
    _, ios = model.forward_with_block_io(states, t_values)
    for block, io in zip(model.blocks, ios):
        block.act_q = fit_quant_params(io.outputs, bits, method="minmax")
    return model
