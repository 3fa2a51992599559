"""Continuous point-maze navigation on an ASCII grid.

Maze files start with a ``cell-size=<float>`` line followed by equal-length
rows of ``#`` (wall), ``.`` (free), ``S`` (start cell), ``G`` (goal cell).
The agent is a point with per-axis blocked motion: each step moves
``dt * action`` (action clipped to the max-norm box), one axis at a time,
and an axis move is cancelled if it would put the agent in a wall cell.
Reward is -1 per step until the agent comes within half a cell of the goal,
which ends the episode with reward 0.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, replace

import numpy as np

from ..data import Trajectory
from ..numerics.rng import RngStream

__all__ = ["MazeSpec", "EnvState", "StepResult", "parse_maze", "maze_reset",
           "maze_step", "scripted_demonstrator", "generate_dataset",
           "train_maze", "eval_maze"]

WALL, FREE, START, GOAL = "#", ".", "S", "G"
A_MAX = 1.0
DT = 0.2


class MazeSpec:
    """Parsed maze: wall grid, start/goal cells, cell size."""

    def __init__(self, walls: np.ndarray, start_cells, goal_cells,
                 cell_size: float):
        self.walls = walls              # [rows, cols] bool
        self.start_cells = tuple(start_cells)  # (row, col) pairs
        self.goal_cells = tuple(goal_cells)
        self.cell_size = float(cell_size)
        self.rows, self.cols = walls.shape
        self._dist_cache: dict[tuple[int, int], np.ndarray] = {}

    @property
    def extent(self) -> tuple[float, float]:
        """(width, height) in world units."""
        return self.cols * self.cell_size, self.rows * self.cell_size

    def cell_of(self, pos: np.ndarray) -> tuple[int, int]:
        return int(pos[1] // self.cell_size), int(pos[0] // self.cell_size)

    def cell_center(self, cell: tuple[int, int]) -> np.ndarray:
        r, c = cell
        return np.array([(c + 0.5) * self.cell_size, (r + 0.5) * self.cell_size])

    def is_wall(self, cell: tuple[int, int]) -> bool:
        r, c = cell
        if not (0 <= r < self.rows and 0 <= c < self.cols):
            return True
        return bool(self.walls[r, c])

    def distance_field(self, goal_cell: tuple[int, int]) -> np.ndarray:
        """BFS step counts to the goal cell; walls and unreachable cells are
        +inf. Cached per goal cell."""
        goal_cell = (int(goal_cell[0]), int(goal_cell[1]))
        cached = self._dist_cache.get(goal_cell)
        if cached is not None:
            return cached
        dist = np.full(self.walls.shape, np.inf)
        if not self.is_wall(goal_cell):
            dist[goal_cell] = 0.0
            queue = deque([goal_cell])
            while queue:
                r, c = queue.popleft()
                for rr, cc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
                    if not self.is_wall((rr, cc)) and dist[rr, cc] == np.inf:
                        dist[rr, cc] = dist[r, c] + 1.0
                        queue.append((rr, cc))
        self._dist_cache[goal_cell] = dist
        return dist


def parse_maze(text: str) -> MazeSpec:
    lines = [ln for ln in text.strip().splitlines()]
    if not lines or not lines[0].startswith("cell-size="):
        raise ValueError("maze text must start with a 'cell-size=<float>' line")
    try:
        cell_size = float(lines[0].split("=", 1)[1])
    except ValueError as exc:
        raise ValueError(f"bad cell-size value: {lines[0]!r}") from exc
    if cell_size <= 0:
        raise ValueError("cell-size must be positive")
    grid = lines[1:]
    if len(grid) < 3:
        raise ValueError("maze needs at least 3 rows")
    width = len(grid[0])
    starts, goals = [], []
    walls = np.zeros((len(grid), width), dtype=bool)
    for r, row in enumerate(grid):
        if len(row) != width:
            raise ValueError(f"maze row {r} has length {len(row)}, expected {width}")
        for c, ch in enumerate(row):
            if ch == WALL:
                walls[r, c] = True
            elif ch == START:
                starts.append((r, c))
            elif ch == GOAL:
                goals.append((r, c))
            elif ch != FREE:
                raise ValueError(f"unknown maze character {ch!r} at row {r}")
    border = np.concatenate([walls[0], walls[-1], walls[:, 0], walls[:, -1]])
    if not border.all():
        raise ValueError("maze border must be solid walls")
    if not starts:
        raise ValueError("maze has no start cells")
    if not goals:
        raise ValueError("maze has no goal cells")
    spec = MazeSpec(walls, starts, goals, cell_size)
    for goal in goals:
        dist = spec.distance_field(goal)
        for start in starts:
            if not np.isfinite(dist[start]):
                raise ValueError(
                    f"goal cell {goal} is not reachable from start cell {start}")
    return spec


@dataclass(frozen=True)
class EnvState:
    agent: np.ndarray   # [2] world position
    goal: np.ndarray    # [2] world position
    t: int
    horizon: int

    def observation(self) -> np.ndarray:
        return np.concatenate([self.agent, self.goal])


@dataclass(frozen=True)
class StepResult:
    state: EnvState
    reward: float
    done: bool
    success: bool

    @property
    def observation(self) -> np.ndarray:
        return self.state.observation()


def maze_reset(spec: MazeSpec, rng: RngStream, horizon: int,
               start_idx: int | None = None,
               goal_idx: int | None = None) -> EnvState:
    """Place the agent uniformly inside a start cell and the goal uniformly
    inside a goal cell. Explicit cell indices bypass the random cell choice
    (both or neither); positions within the cells stay random."""
    if (start_idx is None) != (goal_idx is None):
        raise ValueError("give both start_idx and goal_idx, or neither")
    if start_idx is None:
        start_idx = int(rng.integers(0, len(spec.start_cells)))
        goal_idx = int(rng.integers(0, len(spec.goal_cells)))

    def _place(cell):
        r, c = cell
        off = rng.uniform(0.0, spec.cell_size, size=2)
        return np.array([c * spec.cell_size + off[0], r * spec.cell_size + off[1]])

    agent = _place(spec.start_cells[start_idx])
    goal = _place(spec.goal_cells[goal_idx])
    return EnvState(agent, goal, 0, int(horizon))


def maze_step(spec: MazeSpec, state: EnvState, action: np.ndarray) -> StepResult:
    a = np.clip(np.asarray(action, dtype=np.float64), -A_MAX, A_MAX)
    x, y = state.agent
    nx = x + DT * a[0]
    if spec.is_wall(spec.cell_of(np.array([nx, y]))):
        nx = x
    ny = y + DT * a[1]
    if spec.is_wall(spec.cell_of(np.array([nx, ny]))):
        ny = y
    agent = np.array([nx, ny])
    t = state.t + 1
    success = bool(np.linalg.norm(agent - state.goal) < 0.5 * spec.cell_size)
    done = success or t >= state.horizon
    reward = 0.0 if success else -1.0
    return StepResult(replace(state, agent=agent, t=t), reward, done, success)


def scripted_demonstrator(spec: MazeSpec, state: EnvState, rng: RngStream,
                          noise_std: float = 0.3) -> np.ndarray:
    """Greedy BFS waypoint follower with Gaussian action noise.

    Heads at full speed for the neighboring cell closest (in BFS steps) to
    the goal; once in the goal cell it aims at the goal point itself,
    slowing to avoid overshoot. Unreachable goals are a spec violation and
    raise. The returned action is clipped to the environment's box.
    """
    agent_cell = spec.cell_of(state.agent)
    goal_cell = spec.cell_of(state.goal)
    if agent_cell == goal_cell:
        delta = state.goal - state.agent
        scale = min(A_MAX, float(np.linalg.norm(delta)) / DT)
    else:
        dist = spec.distance_field(goal_cell)
        if not np.isfinite(dist[agent_cell]):
            raise ValueError(f"goal cell {goal_cell} unreachable from {agent_cell}")
        r, c = agent_cell
        best, best_d = agent_cell, dist[agent_cell]
        for rr, cc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
            if not spec.is_wall((rr, cc)) and dist[rr, cc] < best_d:
                best, best_d = (rr, cc), dist[rr, cc]
        delta = spec.cell_center(best) - state.agent
        scale = A_MAX
    norm = float(np.linalg.norm(delta))
    base = np.zeros(2) if norm < 1e-12 else delta / norm * scale
    return np.clip(base + noise_std * rng.standard_normal(2), -A_MAX, A_MAX)


def generate_dataset(spec: MazeSpec, n_episodes: int, rng: RngStream,
                     horizon: int = 400, noise_std: float = 0.3) -> list[Trajectory]:
    """Roll the scripted demonstrator; keeps successful episodes only.

    The per-step context is the 4-vector [agent-xy, goal-xy]; actions are
    recorded as executed. Warns when more than half the attempts fail, which
    usually means the noise level or horizon makes the demonstrator unsound.
    """
    kept = []
    for _ in range(n_episodes):
        state = maze_reset(spec, rng, horizon)
        ctxs, acts = [], []
        while True:
            a = scripted_demonstrator(spec, state, rng, noise_std)
            ctxs.append(state.observation())
            acts.append(a)
            result = maze_step(spec, state, a)
            state = result.state
            if result.done:
                if result.success:
                    kept.append(Trajectory(np.array(ctxs), np.array(acts)))
                break
    if n_episodes and len(kept) < 0.5 * n_episodes:
        logging.getLogger(__name__).warning(
            "demonstrator succeeded on only %d of %d episodes", len(kept),
            n_episodes)
    return kept


_TRAIN_MAZE = """\
cell-size=1.0
###########
#S..#.S.#G#
#.#.#.#.#.#
#.#.G.#...#
#.#.#####.#
#..S#..G#.#
#.#.#.#.#.#
#.#.#.#.#.#
#.#.G.#..S#
#G.S.#.G.##
###########
"""

_EVAL_MAZE = """\
cell-size=1.0
#####################
#...#...............#
#.#.#.###.#.##.####.#
#.#.......S.#...#...#
#.....###...#...G.#.#
#.#....S....G.#.....#
#...#.....#..##.#..G#
#.........#.........#
#.#.###.#S#.#####...#
#.#.....#.#.....#...#
#.###.#.#...#.#.##..#
#.#.....#.#......G..#
#.#.#.#.###.#.#.#.###
#...#.........#.....#
#####################
"""


def train_maze() -> MazeSpec:
    """11x11 training maze; all labeled cells share one connected region."""
    return parse_maze(_TRAIN_MAZE)


def eval_maze() -> MazeSpec:
    """15x21 evaluation maze. Goal cells sit at x > 11, outside the training
    maze's coordinate range, so evaluation goals are out of distribution for
    a policy trained on ``train_maze`` data."""
    return parse_maze(_EVAL_MAZE)
