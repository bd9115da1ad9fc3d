"""Synthetic 2-D datasets used throughout: Gaussian ring and two moons."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError


def make_ring(n: int, seed: int, modes: int = 8, radius: float = 1.5,
              noise: float = 0.1) -> np.ndarray:
    """Mixture of ``modes`` Gaussians placed evenly on a circle."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x8126]))
    which = rng.integers(0, modes, n)
    angles = 2.0 * np.pi * which / modes
    centers = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return centers + noise * rng.standard_normal((n, 2))


def make_two_moons(n: int, seed: int, noise: float = 0.1) -> np.ndarray:
    """Two interleaved half circles, roughly centered on the origin."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x30035]))
    n_up = n // 2
    n_dn = n - n_up
    th_up = np.pi * rng.random(n_up)
    th_dn = np.pi * rng.random(n_dn)
    up = np.stack([np.cos(th_up), np.sin(th_up)], axis=1)
    dn = np.stack([1.0 - np.cos(th_dn), 0.5 - np.sin(th_dn)], axis=1)
    pts = np.concatenate([up, dn], axis=0) - np.array([0.5, 0.25])
    return pts + noise * rng.standard_normal((n, 2))


def make_dataset(kind: str, n: int, seed: int) -> np.ndarray:
    if kind == "ring":
        return make_ring(n, seed)
    if kind == "moons":
        return make_two_moons(n, seed)
    raise ConfigError(f"unknown dataset kind {kind!r}")
