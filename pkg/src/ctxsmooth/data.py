"""Demonstration data: trajectories, action chunking, normalization, IO.

Trajectories are stored one-per-line as JSON. Chunking slides a window over
each trajectory's actions, pairing the chunk with the observation at the
window start; windows that run off the end are padded by repeating the last
action, so every timestep contributes a training pair.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

__all__ = ["Trajectory", "Normalizer", "ChunkedDataset", "make_chunks",
           "save_trajectories", "load_trajectories"]


@dataclass(frozen=True)
class Trajectory:
    contexts: np.ndarray   # [T, context_dim], conditioning before each action
    actions: np.ndarray    # [T, action_dim]

    def __post_init__(self):
        if len(self.contexts) != len(self.actions):
            raise ValueError("contexts and actions must pair one to one")
        if not (np.all(np.isfinite(self.contexts))
                and np.all(np.isfinite(self.actions))):
            raise ValueError("trajectory contains non-finite values")

    def __len__(self) -> int:
        return len(self.actions)


class Normalizer:
    """Per-dimension affine map to zero mean, unit variance.

    Degenerate dimensions (zero variance) get scale 1 so they pass through
    shifted but not amplified.
    """

    def __init__(self, mean: np.ndarray, std: np.ndarray):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.asarray(std, dtype=np.float64)
        if np.any(self.std <= 0):
            raise ValueError("std must be positive; use from_data for safety")

    @classmethod
    def from_data(cls, x: np.ndarray) -> "Normalizer":
        x = np.asarray(x, dtype=np.float64)
        std = x.std(axis=0)
        std = np.where(std < 1e-8, 1.0, std)
        return cls(x.mean(axis=0), std)

    @classmethod
    def identity(cls, dim: int) -> "Normalizer":
        return cls(np.zeros(dim), np.ones(dim))

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) * self.std + self.mean


@dataclass(frozen=True)
class ChunkedDataset:
    contexts: np.ndarray   # [N, C], normalized
    chunks: np.ndarray     # [N, horizon, action_dim], raw action units
    horizon: int
    normalizer: Normalizer

    def __len__(self) -> int:
        return len(self.contexts)

    @property
    def context_dim(self) -> int:
        return self.contexts.shape[1]

    @property
    def action_dim(self) -> int:
        return self.chunks.shape[2]


def make_chunks(trajectories, horizon: int, stride: int = 1,
                normalizer: Normalizer | None = None) -> ChunkedDataset:
    """Slice trajectories into (context, action-chunk) pairs.

    The context is the raw observation at the chunk start, normalized with
    statistics fitted over all contexts (or with a caller-supplied
    normalizer, e.g. to chunk evaluation data under training statistics).
    """
    if horizon < 1 or stride < 1:
        raise ValueError("horizon and stride must be >= 1")
    contexts, chunks = [], []
    for traj in trajectories:
        acts = np.asarray(traj.actions, dtype=np.float64)
        ctxs = np.asarray(traj.contexts, dtype=np.float64)
        n = len(acts)
        if n == 0:
            logging.getLogger(__name__).warning("skipping empty trajectory")
            continue
        for start in range(0, n, stride):
            window = acts[start:start + horizon]
            if len(window) < horizon:
                pad = np.repeat(window[-1:], horizon - len(window), axis=0)
                window = np.concatenate([window, pad], axis=0)
            contexts.append(ctxs[start])
            chunks.append(window)
    if not contexts:
        raise ValueError("no chunks produced; empty trajectory list?")
    contexts = np.asarray(contexts)
    chunks = np.asarray(chunks)
    if normalizer is None:
        normalizer = Normalizer.from_data(contexts)
    return ChunkedDataset(normalizer.normalize(contexts), chunks,
                          int(horizon), normalizer)


def save_trajectories(path: str, trajectories) -> None:
    """One JSON object per line: {"contexts": [[...]], "actions": [[...]]}."""
    with open(path, "w") as fh:
        for traj in trajectories:
            fh.write(json.dumps({
                "contexts": np.asarray(traj.contexts).tolist(),
                "actions": np.asarray(traj.actions).tolist(),
            }) + "\n")


def load_trajectories(path: str) -> list[Trajectory]:
    out = []
    with open(path) as fh:
        for i, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out.append(Trajectory(
                    contexts=np.asarray(rec["contexts"], dtype=np.float64),
                    actions=np.asarray(rec["actions"], dtype=np.float64)))
            except (KeyError, ValueError) as exc:
                raise ValueError(f"{path}:{i + 1}: bad trajectory record: {exc}") from exc
    return out
