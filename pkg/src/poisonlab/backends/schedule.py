"""Variance-preserving cosine noise schedule for the toy backend."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import IntegrityError


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step signal/noise coefficients of a variance-preserving schedule.

    alpha[t] scales the clean signal and sigma[t] the injected noise at
    timestep t in 0..T; alpha**2 + sigma**2 == 1 everywhere.
    """

    T: int
    alpha: np.ndarray  # length T+1, alpha[0] ~ 1 down to alpha[T] == 0
    sigma: np.ndarray

    def __post_init__(self):
        a, s = np.asarray(self.alpha, np.float64), np.asarray(self.sigma, np.float64)
        if a.shape != (self.T + 1,) or s.shape != (self.T + 1,):
            raise IntegrityError("schedule arrays must have length T+1")
        if not np.all(np.diff(a) <= 1e-12):
            raise IntegrityError("alpha must be monotone non-increasing")
        if not np.all(np.diff(s) >= -1e-12):
            raise IntegrityError("sigma must be monotone non-decreasing")
        if np.max(np.abs(a ** 2 + s ** 2 - 1.0)) > 1e-6:
            raise IntegrityError("schedule is not variance-preserving")
        a.setflags(write=False)
        s.setflags(write=False)
        object.__setattr__(self, "alpha", a)
        object.__setattr__(self, "sigma", s)

    @classmethod
    def cosine(cls, T: int = 200) -> "NoiseSchedule":
        t = np.arange(T + 1, dtype=np.float64)
        alpha = np.cos(0.5 * np.pi * t / T)
        alpha[-1] = 0.0  # exact endpoint so full-strength edits forget the input
        sigma = np.sqrt(np.clip(1.0 - alpha ** 2, 0.0, 1.0))
        return cls(T=T, alpha=alpha, sigma=sigma)
