"""Forward-diffusion corruption of policy conditioning.

A linear-beta variance-preserving schedule maps a continuous smoothing level
u in [0, 1] to a discrete corruption index t_c and then to

    c_tilde = sqrt(alpha_bar[t_c]) * c + sqrt(1 - alpha_bar[t_c]) * eps.

u = 0 leaves the context untouched (bit for bit); u = 1 reduces it to pure
noise, so a policy conditioned on it can only express the behavioral
marginal. Intermediate levels interpolate between the two.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics.rng import RngStream

__all__ = ["NoiseSchedule", "SmoothingLevel", "linear_beta_schedule",
           "corrupt", "corrupt_batch"]


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta schedule; ``alpha_bars[t]`` is the signal variance kept
    after t corruption steps, with ``alpha_bars[0] == 1`` exactly."""

    n_steps: int
    beta_start: float
    beta_end: float
    betas: np.ndarray        # [T], betas[t-1] is the step-t variance increment
    alpha_bars: np.ndarray   # [T+1], cumulative signal fraction

    def signal_noise(self, t_c: int) -> tuple[float, float]:
        """(sqrt(alpha_bar), sqrt(1 - alpha_bar)) at index t_c."""
        ab = self.alpha_bars[t_c]
        return math.sqrt(ab), math.sqrt(1.0 - ab)


def linear_beta_schedule(n_steps: int = 1000, beta_start: float = 1e-4,
                         beta_end: float = 0.02) -> NoiseSchedule:
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    t = np.arange(1, n_steps + 1, dtype=np.float64)
    if n_steps == 1:
        betas = np.array([beta_start])
    else:
        betas = beta_start + (t - 1.0) / (n_steps - 1.0) * (beta_end - beta_start)
    alpha_bars = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(n_steps, float(beta_start), float(beta_end),
                         betas, alpha_bars)


@dataclass(frozen=True)
class SmoothingLevel:
    """Continuous level u in [0, 1] plus its discrete corruption index."""

    u: float
    t_c: int

    @classmethod
    def from_u(cls, u: float, schedule: NoiseSchedule) -> "SmoothingLevel":
        if not (0.0 <= u <= 1.0) or not math.isfinite(u):
            raise ValueError(f"smoothing level must lie in [0, 1], got {u}")
        # round half up; banker's rounding would make t_c depend on parity
        t_c = int(math.floor(u * schedule.n_steps + 0.5))
        return cls(float(u), t_c)


def level_indices(u: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Vectorized u -> t_c mapping with the same half-up rounding."""
    u = np.asarray(u, dtype=np.float64)
    if u.size and (u.min() < 0.0 or u.max() > 1.0 or not np.all(np.isfinite(u))):
        raise ValueError("smoothing levels must lie in [0, 1]")
    return np.floor(u * schedule.n_steps + 0.5).astype(np.int64)


def corrupt(context: np.ndarray, level: SmoothingLevel,
            schedule: NoiseSchedule, rng: RngStream) -> np.ndarray:
    """Corrupt one context vector to its smoothing level.

    At t_c == 0 the input is returned unchanged (a copy) and no randomness
    is consumed, so zero-level paths stay draw-aligned with pipelines that
    never corrupt.
    """
    context = np.asarray(context, dtype=np.float64)
    if level.t_c == 0:
        return context.copy()
    sig, noi = schedule.signal_noise(level.t_c)
    return sig * context + noi * rng.standard_normal(context.shape)


def corrupt_batch(contexts: np.ndarray, u: np.ndarray,
                  schedule: NoiseSchedule, rng: RngStream,
                  noise_mask: np.ndarray | None = None) -> np.ndarray:
    """Corrupt a [B, C] batch with per-row levels u [B].

    Rows at t_c == 0 come back bit-identical. If every row is at zero the
    call consumes no randomness. ``noise_mask`` selects which context
    dimensions are noisable (1) versus always clean (0); default all.
    """
    contexts = np.asarray(contexts, dtype=np.float64)
    t_c = level_indices(u, schedule)
    if not np.any(t_c):
        return contexts.copy()
    ab = schedule.alpha_bars[t_c][:, None]
    eps = rng.standard_normal(contexts.shape)
    out = np.sqrt(ab) * contexts + np.sqrt(1.0 - ab) * eps
    if noise_mask is not None:
        mask = np.asarray(noise_mask, dtype=bool)
        out = np.where(mask, out, contexts)
    zero = t_c == 0
    if np.any(zero):
        out[zero] = contexts[zero]
    return out
