"""Replay storage for decision-level transitions.

Each stored item spans one high-level decision: the latent/level pair the
agent committed to, the discounted reward accumulated while its chunk
executed, and the observations bracketing the chunk.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..numerics import RngStream

__all__ = ["Transition", "TransitionBatch", "ReplayBuffer"]


@dataclass(frozen=True)
class Transition:
    """One high-level decision and its H-step outcome.

    ``u`` carries whichever scalar the mode's second head controls: the
    smoothing level, the guidance weight, or 0 when that head is disabled.
    ``done`` marks success termination only; horizon timeouts keep
    bootstrapping, so ``done`` implies the target collapses to ``reward``.
    """

    s: np.ndarray
    z: np.ndarray
    u: float
    reward: float
    s_next: np.ndarray
    done: bool


@dataclass(frozen=True)
class TransitionBatch:
    s: np.ndarray        # [B, obs_dim]
    z: np.ndarray        # [B, z_dim]
    u: np.ndarray        # [B]
    reward: np.ndarray   # [B]
    s_next: np.ndarray   # [B, obs_dim]
    done: np.ndarray     # [B], 0.0/1.0


class ReplayBuffer:
    """Fixed-capacity FIFO ring with uniform sampling.

    Arrays are allocated lazily from the first transition's shapes, so one
    buffer class serves any observation/latent dimensionality.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self._n_added = 0
        self._s = None

    def _allocate(self, t: Transition) -> None:
        cap = self.capacity
        self._s = np.empty((cap, t.s.shape[0]))
        self._z = np.empty((cap, t.z.shape[0]))
        self._u = np.empty(cap)
        self._reward = np.empty(cap)
        self._s_next = np.empty((cap, t.s_next.shape[0]))
        self._done = np.empty(cap)

    def add(self, t: Transition) -> None:
        if self._s is None:
            self._allocate(t)
        i = self._n_added % self.capacity
        self._s[i] = t.s
        self._z[i] = t.z
        self._u[i] = t.u
        self._reward[i] = t.reward
        self._s_next[i] = t.s_next
        self._done[i] = float(t.done)
        self._n_added += 1

    def __len__(self) -> int:
        return min(self._n_added, self.capacity)

    def sample(self, batch_size: int, rng: RngStream) -> TransitionBatch:
        n = len(self)
        if n == 0:
            raise ValueError("cannot sample from an empty buffer")
        idx = rng.integers(0, n, size=int(batch_size))
        return TransitionBatch(self._s[idx], self._z[idx], self._u[idx],
                               self._reward[idx], self._s_next[idx],
                               self._done[idx])
