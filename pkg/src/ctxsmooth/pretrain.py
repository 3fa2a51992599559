"""Pre-training loops for the flow policy.

Three modes share one optimization engine:

- ``csp``: per-sample smoothing level u ~ Uniform(0,1), contexts corrupted
  through the forward noising kernel before conditioning;
- ``bc``: plain behavior cloning, u pinned to 0, contexts untouched;
- ``cfg``: behavior cloning plus independent per-sample replacement of the
  context by the learned null token, enabling guided sampling later.

Pinning the csp level sampler to zero reproduces bc exactly, draw for draw;
the same holds for cfg with dropout 0. Training aborts on a non-finite loss
and restores the last end-of-epoch parameters.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .diffusion import NoiseSchedule, corrupt_batch
from .data import ChunkedDataset
from .flow import FlowPolicy, flow_matching_loss
from .numerics import Adam, RngStream

logger = logging.getLogger(__name__)

MODES = ("csp", "bc", "cfg")
SIGMA_SAMPLERS = ("uniform", "zero", "max")


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 40
    batch_size: int = 256
    learning_rate: float = 3e-4
    horizon: int = 8
    mode: str = "csp"
    dropout: float = 0.1
    sigma_sampler: str = "uniform"
    weight_decay: float = 1e-8
    beta1: float = 0.95
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.sigma_sampler not in SIGMA_SAMPLERS:
            raise ValueError(
                f"sigma_sampler must be one of {SIGMA_SAMPLERS}, got {self.sigma_sampler!r}")
        if not 0.0 <= self.dropout <= 1.0:
            raise ValueError(f"dropout must be in [0, 1], got {self.dropout}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {self.horizon}")


def _sample_levels(sampler: str, size: int, rng: RngStream) -> np.ndarray:
    """Smoothing levels for one batch; the pinned samplers draw nothing so
    traces stay aligned with the bc path under a shared seed."""
    if sampler == "uniform":
        return rng.uniform(size=size)
    if sampler == "zero":
        return np.zeros(size)
    return np.ones(size)


def _snapshot(policy: FlowPolicy) -> list[np.ndarray]:
    return [p.data.copy() for p in policy.params]


def _restore(policy: FlowPolicy, snap: list[np.ndarray]) -> None:
    for p, s in zip(policy.params, snap):
        p.data[...] = s


def pretrain(data: ChunkedDataset, policy: FlowPolicy,
             schedule: NoiseSchedule | None, cfg: PretrainConfig,
             rng: RngStream,
             on_epoch_end=None) -> tuple[FlowPolicy, list[float]]:
    """Run the configured training mode; returns the policy and the
    per-epoch mean loss trace.

    ``on_epoch_end(epoch, policy)``, when given, runs after each epoch;
    useful for probing convergence with pinned randomness, since the
    training trace itself fluctuates with the sampled interpolation times.
    """
    n = len(data.chunks)
    if n == 0:
        raise ValueError("dataset is empty")
    if data.horizon != policy.horizon:
        raise ValueError(
            f"dataset horizon {data.horizon} != policy horizon {policy.horizon}")
    if cfg.mode == "csp" and schedule is None:
        raise ValueError("csp mode needs a noise schedule")

    opt = Adam(policy.params, lr=cfg.learning_rate,
               betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps,
               weight_decay=cfg.weight_decay)
    trace: list[float] = []
    good = _snapshot(policy)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        losses = []
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            contexts = data.contexts[idx]
            chunks = data.chunks[idx]
            u = _sample_levels(
                cfg.sigma_sampler if cfg.mode == "csp" else "zero",
                len(idx), rng)
            if cfg.mode == "csp":
                contexts = corrupt_batch(contexts, u, schedule, rng)
            null_mask = None
            if cfg.mode == "cfg" and cfg.dropout > 0.0:
                # the 0/1 endpoints skip the draw so they reduce exactly to
                # bc / pure-null training under the same seed
                if cfg.dropout >= 1.0:
                    null_mask = np.ones(len(idx), dtype=bool)
                else:
                    null_mask = rng.uniform(size=len(idx)) < cfg.dropout
            loss = flow_matching_loss(policy, chunks, contexts, u, rng,
                                      null_mask=null_mask)
            value = loss.item()
            if not np.isfinite(value):
                _restore(policy, good)
                logger.warning(
                    "non-finite loss after %d finished epochs; restored last "
                    "good parameters", len(trace))
                return policy, trace
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(value)
        trace.append(float(np.mean(losses)))
        good = _snapshot(policy)
        if on_epoch_end is not None:
            on_epoch_end(len(trace) - 1, policy)
    return policy, trace


def csp_train(data: ChunkedDataset, policy: FlowPolicy,
              schedule: NoiseSchedule, cfg: PretrainConfig,
              rng: RngStream) -> tuple[FlowPolicy, list[float]]:
    if cfg.mode != "csp":
        raise ValueError(f"csp_train needs mode='csp', got {cfg.mode!r}")
    return pretrain(data, policy, schedule, cfg, rng)


def bc_train(data: ChunkedDataset, policy: FlowPolicy, cfg: PretrainConfig,
             rng: RngStream) -> tuple[FlowPolicy, list[float]]:
    if cfg.mode != "bc":
        raise ValueError(f"bc_train needs mode='bc', got {cfg.mode!r}")
    return pretrain(data, policy, None, cfg, rng)


def cfg_train(data: ChunkedDataset, policy: FlowPolicy, cfg: PretrainConfig,
              rng: RngStream) -> tuple[FlowPolicy, list[float]]:
    if cfg.mode != "cfg":
        raise ValueError(f"cfg_train needs mode='cfg', got {cfg.mode!r}")
    return pretrain(data, policy, None, cfg, rng)
