"""Procedural breast phantom, sinogram synthesis and transmission noise.

Random numbers come from numpy's counter-based Philox bit generator seeded
with the integer ``seed``; the same seed reproduces the same phantom and
the same noise realisation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .operators import FanBeamGeometry, project


def philox(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed)))


@dataclass(frozen=True)
class PhantomSpec:
    M: int = 256
    seed: int = 0
    n_calcifications: int = 8
    n_fibroglandular: int = 14
    fat_value: float = 1.0
    fibroglandular_value: float = 1.1
    skin_value: float = 1.15
    calc_range: tuple = (1.8, 2.3)
    breast_radius: float = 0.92  # fraction of the half-width of the grid

    def __post_init__(self):
        if self.M < 32:
            raise ValueError("phantom needs M >= 32 to resolve skin and calcifications")
        lo, hi = self.calc_range
        if lo > hi:
            raise ValueError("calc_range must be (low, high) with low <= high")
        if not 0 < self.breast_radius <= 1:
            raise ValueError("breast_radius must lie in (0, 1]")


@dataclass(frozen=True)
class NoiseSpec:
    incident_counts: float = 1e4
    seed: int = 1

    def __post_init__(self):
        if not self.incident_counts > 0:
            raise ValueError("incident_counts must be positive")


def make_phantom(spec: PhantomSpec = PhantomSpec()) -> np.ndarray:
    """Circular breast cross-section on an ``M x M`` grid.

    Fat background inside a skin annulus, random elliptical fibroglandular
    blobs, and a cluster of 1-2 pixel calcifications. Zero outside the
    breast.
    """
    M = spec.M
    rng = philox(spec.seed)
    # Pixel-centre coordinates in [-1, 1].
    c = (np.arange(M) + 0.5) / M * 2.0 - 1.0
    x, y = np.meshgrid(c, c)
    r = np.hypot(x, y)

    R = spec.breast_radius
    skin = max(1.5 * 2.0 / M, 0.02)
    inside = r <= R
    u = np.zeros((M, M))
    u[inside] = spec.fat_value

    inner = R - skin
    for _ in range(spec.n_fibroglandular):
        rho = 0.65 * inner * np.sqrt(rng.uniform())
        phi = rng.uniform(0, 2 * np.pi)
        cx, cy = rho * np.cos(phi), rho * np.sin(phi)
        a = rng.uniform(0.05, 0.22) * inner
        b = rng.uniform(0.03, 0.12) * inner
        rot = rng.uniform(0, np.pi)
        dx, dy = x - cx, y - cy
        xr = dx * np.cos(rot) + dy * np.sin(rot)
        yr = -dx * np.sin(rot) + dy * np.cos(rot)
        blob = ((xr / a) ** 2 + (yr / b) ** 2 <= 1.0) & (r < inner)
        u[blob] = spec.fibroglandular_value

    u[inside & (r > inner)] = spec.skin_value

    # Calcification cluster: pixel-aligned 1x1 or 2x2 blocks near a centre.
    rho = 0.35 * inner * np.sqrt(rng.uniform())
    phi = rng.uniform(0, 2 * np.pi)
    ccol = int((rho * np.cos(phi) + 1.0) * 0.5 * M)
    crow = int((rho * np.sin(phi) + 1.0) * 0.5 * M)
    spread = max(2, M // 32)
    lo, hi = spec.calc_range
    for _ in range(spec.n_calcifications):
        size = int(rng.integers(1, 3))
        i = int(np.clip(ccol + rng.integers(-spread, spread + 1), 0, M - size))
        j = int(np.clip(crow + rng.integers(-spread, spread + 1), 0, M - size))
        u[j:j + size, i:i + size] = rng.uniform(lo, hi)
    return u


def simulate_sinogram(geom: FanBeamGeometry, u) -> np.ndarray:
    """Noiseless data ``A u`` using the reconstruction projector."""
    return project(geom, u)


def add_poisson_noise(g, noise: NoiseSpec = NoiseSpec()) -> np.ndarray:
    """Transmission Poisson noise on line integrals.

    Counts ``c ~ Poisson(N0 exp(-g))`` are converted back with
    ``ln(N0 / max(c, 1))``.
    """
    g = np.asarray(g, dtype=np.float64)
    if np.any(g < 0):
        raise ValueError("line integrals must be non-negative")
    rng = philox(noise.seed)
    n0 = float(noise.incident_counts)
    counts = rng.poisson(n0 * np.exp(-g))
    return np.log(n0 / np.maximum(counts, 1))
