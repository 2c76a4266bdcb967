"""Synthetic hyperspectral scenes following the linear mixing model."""
from dataclasses import dataclass

import numpy as np

__all__ = ["SceneSpec", "gen_scene", "PRNG"]

PRNG = "numpy.random.Generator(PCG64)"


@dataclass
class SceneSpec:
    """Scene dimensions and generator settings.

    ``background`` is the level of an extra spatially flat component
    (appended as the last endmember); 0 disables it. ``amplitude`` scales
    all abundances and hence the data, e.g. to a raw-count scale. ``cell``
    is the edge length in pixels of the constant patches of the abundance
    maps.
    """
    B: int
    H: int
    W: int
    K_true: int
    noise_sigma: float = 0.0
    seed: int = 0
    background: float = 0.0
    cell: int = 4
    amplitude: float = 1.0

    def __post_init__(self):
        for name in ("B", "H", "W", "K_true", "cell"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.noise_sigma < 0 or self.background < 0:
            raise ValueError("noise_sigma and background must be >= 0")
        if not self.amplitude > 0:
            raise ValueError("amplitude must be positive")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must be a 64-bit unsigned integer")


def gen_scene(spec):
    """Draw ``(D, A_true, S_true)`` for a :class:`SceneSpec`.

    Spectra are uniform draws normalized to unit sum. Each abundance map is
    constant on ``cell x cell`` patches, with about a third of the patches
    empty. ``D = A_true S_true`` plus Gaussian noise, clipped at zero.
    """
    rng = np.random.default_rng(spec.seed)
    K = spec.K_true + (spec.background > 0)
    A = rng.random((spec.B, K))
    A /= A.sum(axis=0)

    gh = -(-spec.H // spec.cell)
    gw = -(-spec.W // spec.cell)
    patches = rng.random((spec.K_true, gh, gw))
    patches *= rng.random((spec.K_true, gh, gw)) > 1 / 3
    block = np.ones((spec.cell, spec.cell))
    maps = np.stack([np.kron(p, block)[:spec.H, :spec.W] for p in patches])
    S = maps.reshape(spec.K_true, spec.H * spec.W)
    if spec.background > 0:
        S = np.vstack([S, np.full((1, S.shape[1]), float(spec.background))])
    S = S * spec.amplitude

    D = A @ S
    if spec.noise_sigma > 0:
        D = np.maximum(D + rng.normal(0.0, spec.noise_sigma, D.shape), 0.0)
    return D, A, S
