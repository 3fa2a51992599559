"""Decision-level environment loop and the fine-tuning driver.

An environment here is anything with ``reset(rng) -> state``,
``step(state, action) -> StepResult`` and ``context(state) -> vector``;
``MazeEnv`` adapts the maze to that protocol. The driver interleaves
rollout decisions with replay updates and emits the metrics rows the CLI
serializes.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from ..data import Normalizer
from ..diffusion import NoiseSchedule, SmoothingLevel, corrupt
from ..envs.maze import MazeSpec, maze_reset, maze_step
from ..flow import FlowPolicy, cfg_sample, sample_actions
from ..numerics import RngStream
from .buffer import ReplayBuffer, Transition
from .sac import (FinetuneConfig, HighLevelAction, SacState, actor_update,
                  alpha_update, critic_update, hl_sample, scalar_bound)

__all__ = ["EnvFault", "MazeEnv", "FinetuneResult", "tmrl_rollout",
           "finetune_loop", "DIVERGENCE_THRESHOLD"]

DIVERGENCE_THRESHOLD = 1e6

logger = logging.getLogger(__name__)


class EnvFault(RuntimeError):
    """Unrecoverable environment failure; aborts the episode in flight."""


class MazeEnv:
    """Maze adapter pairing dynamics with the frozen policy's normalizer.

    The critic must read the same observation encoding the decoder was
    trained under, so contexts are normalized here, once, for both.
    """

    def __init__(self, spec: MazeSpec, normalizer: Normalizer,
                 horizon: int = 400):
        if horizon < 1:
            raise ValueError("horizon must be >= 1")
        self.spec = spec
        self.normalizer = normalizer
        self.horizon = int(horizon)

    def reset(self, rng: RngStream):
        return maze_reset(self.spec, rng, self.horizon)

    def step(self, state, action):
        return maze_step(self.spec, state, action)

    def context(self, state) -> np.ndarray:
        return self.normalizer.normalize(state.observation())


def _decode_chunk(csp: FlowPolicy, schedule: NoiseSchedule | None,
                  cfg: FinetuneConfig, context: np.ndarray,
                  hla: HighLevelAction, rng: RngStream) -> np.ndarray:
    if cfg.mode == "tmrl-cfg":
        return cfg_sample(csp, context, hla.z, hla.u)
    if cfg.mode == "dsrl":
        return sample_actions(csp, context, hla.z, 0.0)
    level = SmoothingLevel.from_u(hla.u, schedule)
    smoothed = corrupt(context, level, schedule, rng)
    return sample_actions(csp, smoothed, hla.z, hla.u)


def tmrl_rollout(env, sac: SacState, csp: FlowPolicy,
                 schedule: NoiseSchedule | None, cfg: FinetuneConfig,
                 rng: RngStream, explore=None, on_transition=None):
    """Run one episode of high-level control over the frozen policy.

    Per decision: draw (z, u) (from ``explore`` when it supplies an action,
    else the actor), decode an action chunk per the mode — smoothed
    conditioning, plain conditioning at zero level, or guided sampling —
    execute up to ``h_execute`` low-level steps, and emit one transition
    whose reward is the within-chunk discounted sum. ``done`` is recorded
    only for success, so horizon timeouts keep bootstrapping.

    ``on_transition(transition, n_steps)`` fires after each emission. An
    ``EnvFault`` aborts the episode: transitions already emitted are kept,
    and a partially executed chunk still yields its transition.

    Returns (transitions, stats); stats carries success, return, steps,
    mean_u, the per-decision u values, and a fault flag.
    """
    state = env.reset(rng.derive(0))
    transitions: list[Transition] = []
    u_values: list[float] = []
    total = 0.0
    steps = 0
    success = False
    fault = False
    k = 0
    while True:
        d = rng.derive(k + 1)
        s_obs = env.context(state)
        hla = explore(d.derive(0)) if explore is not None else None
        if hla is None:
            hla, _ = hl_sample(sac, s_obs, d.derive(0))
        chunk = _decode_chunk(csp, schedule, cfg, s_obs, hla, d.derive(1))

        r_disc = 0.0
        n_exec = 0
        done = False
        chunk_success = False
        try:
            for i in range(cfg.h_execute):
                res = env.step(state, chunk[i])
                state = res.state
                r_disc += cfg.gamma ** i * res.reward
                total += res.reward
                steps += 1
                n_exec += 1
                if res.done:
                    done = True
                    chunk_success = res.success
                    break
        except EnvFault:
            fault = True
        if fault and n_exec == 0:
            break
        tr = Transition(s_obs, hla.z, float(hla.u), r_disc,
                        env.context(state), bool(chunk_success))
        transitions.append(tr)
        u_values.append(float(hla.u))
        if on_transition is not None:
            on_transition(tr, n_exec)
        if fault or done:
            success = chunk_success
            break
        k += 1
    stats = {"success": int(success), "return": total, "steps": steps,
             "mean_u": float(np.mean(u_values)) if u_values else 0.0,
             "u_values": u_values, "fault": int(fault)}
    return transitions, stats


@dataclass
class FinetuneResult:
    metrics: list[dict]
    u_trace: list[tuple[int, int, float]]
    env_steps: int
    halted: bool


def finetune_loop(env, sac: SacState, csp: FlowPolicy,
                  schedule: NoiseSchedule | None, cfg: FinetuneConfig,
                  rng: RngStream) -> FinetuneResult:
    """Fine-tune the high-level policy online; the frozen policy only ever
    decodes.

    Warmup decisions draw both heads uniformly at random until the step
    budget is met; afterwards every decision triggers ``utd`` rounds of
    critic, actor, and temperature updates. One metrics row per episode follows the
    serialized schema (step, episode, success, return, mean_u, critic_loss,
    actor_loss, alpha_z, alpha_u); ``u_trace`` rows are (episode,
    decision-index, u). A critic loss above ``DIVERGENCE_THRESHOLD`` stops
    updates immediately and ends training at the episode boundary with the
    agent state left intact for inspection.
    """
    if cfg.offline_mix:
        raise NotImplementedError(
            "offline mixing is interface-only: demonstrations carry no "
            "(z, u) labels for the noise-space critic")
    if cfg.mode == "tmrl" and schedule is None:
        raise ValueError("tmrl mode requires a noise schedule")

    buf = ReplayBuffer(cfg.buffer_capacity)
    upd_rng = rng.derive(0)
    z_dim = sac.actor.z_dim
    bound = scalar_bound(cfg)

    metrics: list[dict] = []
    u_trace: list[tuple[int, int, float]] = []
    env_steps = 0
    halted = False
    last_closs = 0.0
    last_aloss = 0.0
    n_updates = 0

    def explore(r: RngStream):
        if env_steps >= cfg.warmup_steps:
            return None
        z = r.uniform(-cfg.z_bound, cfg.z_bound, size=z_dim)
        # the draw happens in every mode to keep seeded runs aligned
        u_draw = float(r.uniform(0.0, bound))
        return HighLevelAction(z, 0.0 if cfg.mode == "dsrl" else u_draw)

    def handle(tr: Transition, n_exec: int):
        nonlocal env_steps, halted, last_closs, last_aloss, n_updates
        buf.add(tr)
        env_steps += n_exec
        if halted or env_steps < cfg.warmup_steps or len(buf) < cfg.batch_size:
            return
        for _ in range(cfg.utd):
            r = upd_rng.derive(n_updates)
            n_updates += 1
            batch = buf.sample(cfg.batch_size, r.derive(0))
            last_closs = critic_update(sac, batch, r.derive(1))
            last_aloss = actor_update(sac, batch, r.derive(2))
            alpha_update(sac, batch)
            if not math.isfinite(last_closs) or last_closs > DIVERGENCE_THRESHOLD:
                halted = True
                logger.warning(
                    "critic loss %.3g above divergence threshold after %d env "
                    "steps; halting (alpha_z=%.3g, alpha_u=%.3g)",
                    last_closs, env_steps, sac.alpha_z, sac.alpha_u)
                break

    episode = 0
    while env_steps < cfg.total_env_steps and not halted:
        _, stats = tmrl_rollout(env, sac, csp, schedule, cfg,
                                rng.derive(episode + 1), explore=explore,
                                on_transition=handle)
        metrics.append({"step": env_steps, "episode": episode,
                        "success": stats["success"],
                        "return": stats["return"], "mean_u": stats["mean_u"],
                        "critic_loss": last_closs, "actor_loss": last_aloss,
                        "alpha_z": sac.alpha_z, "alpha_u": sac.alpha_u})
        u_trace.extend((episode, i, float(u))
                       for i, u in enumerate(stats["u_values"]))
        episode += 1
    return FinetuneResult(metrics, u_trace, env_steps, halted)
