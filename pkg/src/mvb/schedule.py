"""Linear-beta noise schedule tables."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ConfigError


@dataclass(frozen=True)
class DiffusionSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    schedule_kind: str = "linear"

    def ab(self, t) -> np.ndarray:
        """alpha_bar at t, with alpha_bar[-1] := 1."""
        t = np.asarray(t)
        return np.where(t < 0, 1.0, self.alpha_bar[np.clip(t, 0, self.T - 1)])


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2) -> DiffusionSchedule:
    if T < 1:
        raise ConfigError("T must be at least 1")
    if not (0 < beta_start <= beta_end < 1):
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    for a in (beta, alpha, alpha_bar):
        a.setflags(write=False)
    return DiffusionSchedule(T, beta, alpha, alpha_bar)
