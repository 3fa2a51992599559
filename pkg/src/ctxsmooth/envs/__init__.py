"""Toy environments: goal-conditioned point maze and the unit-circle task."""
from .circle import (TWO_PI, UnitCircleTask, circle_trajectories,
                     unit_circle_dataset)
from .maze import (
    A_MAX,
    DT,
    EnvState,
    MazeSpec,
    StepResult,
    eval_maze,
    generate_dataset,
    maze_reset,
    maze_step,
    parse_maze,
    scripted_demonstrator,
    train_maze,
)

__all__ = [
    "A_MAX",
    "DT",
    "TWO_PI",
    "EnvState",
    "MazeSpec",
    "StepResult",
    "UnitCircleTask",
    "circle_trajectories",
    "eval_maze",
    "generate_dataset",
    "maze_reset",
    "maze_step",
    "parse_maze",
    "scripted_demonstrator",
    "train_maze",
    "unit_circle_dataset",
]
