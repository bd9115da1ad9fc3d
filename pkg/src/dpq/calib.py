"""Calibration dataset collection from full-precision denoising trajectories.

Two kinds of sets are collected by replaying the model's own sampler:

* QC — quantization calibration: at every step t of the trajectory, keep
  n_t of the n_max parallel states, where n_t is either fixed or drawn
  from a clamped normal around mid-trajectory.
* DC — distillation calibration: exactly one state per even step, chosen
  uniformly over the parallel trajectories (stochastic) or always from
  trajectory 0 (deterministic).

A record tagged with step t holds the state the denoiser call at t
consumes, i.e. the state left behind by the preceding update.
"""

from __future__ import annotations

import os
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from .diffusion import NoiseSchedule
from .errors import ConfigError, ContractError
from .tensor import no_grad

MAGIC = b"DPQCAL1"
# Entropy constant for deterministic DC mode: the collected set must not
# depend on the caller's seed.
_DETERMINISTIC_ENTROPY = 0xD31E2C


@dataclass
class CalibRecord:
    state: np.ndarray
    t: int                # step index on the generating model's grid, 1..T
    sample_index: int     # originating trajectory (provenance)


@dataclass
class CalibrationSet:
    kind: str                     # "QC" | "DC"
    records: list[CalibRecord]
    source_T: int
    collection_mode: str
    seed: int

    def __len__(self) -> int:
        return len(self.records)

    def states_and_steps(self) -> tuple[np.ndarray, np.ndarray]:
        states = np.stack([r.state for r in self.records])
        steps = np.array([r.t for r in self.records], dtype=np.int64)
        return states, steps

    def by_step(self) -> dict[int, CalibRecord]:
        if len({r.t for r in self.records}) != len(self.records):
            raise ContractError("by_step needs at most one record per step")
        return {r.t: r for r in self.records}


def _trajectory_states(model, sched: NoiseSchedule, n_max: int,
                       root: np.random.SeedSequence) -> dict[int, np.ndarray]:
    """States indexed by step k: what the denoiser call at step k consumes.

    Trajectory j's initial draw comes from the j-th child stream, so the
    result does not depend on batching or evaluation order.
    """
    steps = model.step_count
    if sched.T % steps != 0:
        raise ConfigError(f"model step count {steps} does not divide schedule T={sched.T}")
    stride = sched.T // steps
    children = root.spawn(n_max)
    z = np.stack([np.random.default_rng(c).standard_normal(model.data_dim) for c in children])
    states: dict[int, np.ndarray] = {}
    with no_grad():
        for k in range(steps, 0, -1):
            states[k] = z.copy()
            it, i_s = k * stride, (k - 1) * stride
            xhat = model.forward(z, it / sched.T).data
            z = sched.alpha[i_s] * xhat + (sched.sigma[i_s] / sched.sigma[it]) * (z - sched.alpha[it] * xhat)
    return states


def collect_qc(model_fp, sched: NoiseSchedule, mode: str, n_max: int, seed: int,
               n_fixed: int | None = None, mu: float | None = None) -> CalibrationSet:
    """Collect the quantization calibration set from n_max FP trajectories."""
    if n_max < 1:
        raise ConfigError(f"collect_qc: n_max must be >= 1, got {n_max}")
    steps = model_fp.step_count
    if mode == "fixed":
        if n_fixed is None:
            raise ConfigError("fixed mode needs n_fixed")
        if n_fixed > n_max:
            raise ConfigError(f"n_fixed={n_fixed} exceeds n_max={n_max}")
        mode_str = f"fixed({n_fixed})"
    elif mode == "ndtc":
        if mu is None:
            mu = steps / 2.0
        mode_str = f"ndtc({mu:g})"
    else:
        raise ConfigError(f"unknown QC collection mode {mode!r}")

    root = np.random.SeedSequence([seed, 0x9C])
    states = _trajectory_states(model_fp, sched, n_max, root)
    pick_rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9C, 1]))
    records: list[CalibRecord] = []
    std = np.sqrt(steps / 2.0)
    for k in range(1, steps + 1):
        if mode == "fixed":
            n_t = n_fixed
        else:
            n_t = int(np.clip(np.rint(pick_rng.normal(mu, std)), 0, n_max))
        for j in range(n_t):
            records.append(CalibRecord(state=states[k][j].copy(), t=k, sample_index=j))
    if not records:
        warnings.warn("collect_qc produced an empty calibration set (all n_t clamped to 0)")
    return CalibrationSet(kind="QC", records=records, source_T=steps,
                          collection_mode=mode_str, seed=seed)


def collect_dc(model_fp, sched: NoiseSchedule, deterministic: bool, n_max: int,
               seed: int) -> CalibrationSet:
    """Collect one state per even step for distillation calibration.

    Deterministic mode ignores the seed entirely (fixed internal entropy
    and always trajectory 0), so repeated collections are identical.
    """
    steps = model_fp.step_count
    if steps % 2 != 0:
        raise ConfigError(f"collect_dc needs an even step count, got {steps}")
    if n_max < 1:
        raise ConfigError(f"collect_dc: n_max must be >= 1, got {n_max}")
    if deterministic:
        root = np.random.SeedSequence([_DETERMINISTIC_ENTROPY, steps])
        pick = None
    else:
        root = np.random.SeedSequence([seed, 0xDC])
        pick = np.random.default_rng(np.random.SeedSequence([seed, 0xDC, 1]))
    states = _trajectory_states(model_fp, sched, n_max, root)
    records = []
    for k in range(2, steps + 1, 2):
        j = 0 if deterministic else int(pick.integers(0, n_max))
        records.append(CalibRecord(state=states[k][j].copy(), t=k, sample_index=j))
    return CalibrationSet(kind="DC", records=records, source_T=steps,
                          collection_mode="deterministic" if deterministic else "stochastic",
                          seed=seed)


# ---------------------------------------------------------------------------
# Persistence: magic, record count, then (int32 t, float64 state) per record,
# all little-endian, with a text sidecar manifest.
# ---------------------------------------------------------------------------

def save_calibration(cs: CalibrationSet, path: str) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(cs.records)))
        for r in cs.records:
            f.write(struct.pack("<i", r.t))
            f.write(np.ascontiguousarray(r.state, dtype="<f8").tobytes())
    with open(path + ".manifest", "w", encoding="utf-8") as f:
        f.write(f"kind={cs.kind}\n")
        f.write(f"mode={cs.collection_mode}\n")
        f.write(f"seed={cs.seed}\n")
        f.write(f"source_T={cs.source_T}\n")


def load_calibration(path: str) -> CalibrationSet:
    """Load a calibration file; provenance tags are not persisted (-1)."""
    size = os.path.getsize(path)
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise ContractError(f"{path}: not a calibration file (bad magic {magic!r})")
        (count,) = struct.unpack("<I", f.read(4))
        records = []
        if count:
            per_record = (size - len(MAGIC) - 4) // count
            dim = (per_record - 4) // 8
            for _ in range(count):
                (t,) = struct.unpack("<i", f.read(4))
                state = np.frombuffer(f.read(8 * dim), dtype="<f8").astype(np.float64)
                records.append(CalibRecord(state=state, t=t, sample_index=-1))
    manifest = {}
    with open(path + ".manifest", "r", encoding="utf-8") as f:
        for line in f:
            key, _, value = line.strip().partition("=")
            manifest[key] = value
    return CalibrationSet(kind=manifest["kind"], records=records,
                          source_T=int(manifest["source_T"]),
                          collection_mode=manifest["mode"], seed=int(manifest["seed"]))
