"""Unit-circle conditional generation task.

Targets are 2D points (cos th, sin th) + Gaussian noise, conditioned on the
angle th. Restricting the angle range leaves part of the circle out of the
training support, which is the probe used for out-of-support generalization.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..data import ChunkedDataset, Normalizer
from ..numerics import RngStream

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class UnitCircleTask:
    """Sampling description for the noisy-circle dataset.

    theta_range is a closed interval inside [0, 2*pi]; angles are drawn
    uniformly from it. noise_std is the isotropic target noise.
    """

    theta_range: tuple[float, float] = (0.0, TWO_PI)
    noise_std: float = 0.1
    n_points: int = 4096

    def __post_init__(self) -> None:
        lo, hi = self.theta_range
        if not (0.0 <= lo <= hi <= TWO_PI):
            raise ValueError(
                f"theta_range must satisfy 0 <= lo <= hi <= 2*pi, got {self.theta_range}"
            )
        if self.noise_std < 0:
            raise ValueError(f"noise_std must be non-negative, got {self.noise_std}")
        if self.n_points < 1:
            raise ValueError(f"n_points must be >= 1, got {self.n_points}")


def circle_trajectories(task: UnitCircleTask, rng: RngStream) -> list:
    """Sample the task as length-1 trajectories (raw theta contexts).

    Same draw order as ``unit_circle_dataset`` (all angles, then all noise),
    so equal seeds describe the same point cloud; this is the record form
    the dataset file stores, chunked and normalized later at training time.
    """
    from ..data import Trajectory

    lo, hi = task.theta_range
    theta = lo + (hi - lo) * rng.uniform(size=task.n_points)
    points = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    points = points + task.noise_std * rng.standard_normal((task.n_points, 2))
    return [Trajectory(np.array([[t]]), p[None]) for t, p in zip(theta, points)]


def unit_circle_dataset(task: UnitCircleTask, rng: RngStream) -> ChunkedDataset:
    """Sample the task into a single-step chunked dataset.

    Context is the 1-vector [theta] (normalized); each action chunk is the
    matching noisy circle point with horizon 1.
    """
    lo, hi = task.theta_range
    theta = lo + (hi - lo) * rng.uniform(size=task.n_points)
    points = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    points = points + task.noise_std * rng.standard_normal((task.n_points, 2))

    contexts_raw = theta[:, None]
    normalizer = Normalizer.from_data(contexts_raw)
    return ChunkedDataset(
        contexts=normalizer.normalize(contexts_raw),
        chunks=points[:, None, :],
        horizon=1,
        normalizer=normalizer,
    )
