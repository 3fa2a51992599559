"""Two-headed soft actor-critic over a frozen chunk policy.

The agent acts in the decoder's input space instead of the action space:
one head emits the flow latent z, the other a scalar knob whose meaning is
mode-dependent (smoothing level, guidance weight, or pinned to zero). Both
heads are tanh-squashed Gaussians; the critics score (s, z, u) directly.

Update rules follow the RLPD recipe: an ensemble of layer-normalized
critics, a random two-member min in every target and in the actor
objective, no entropy term inside the bootstrap, and one autotuned
temperature per head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..checkpoint import load_checkpoint, save_checkpoint
from ..numerics import (Adam, EnsembleMlp, Linear, Mlp, Parameter, RngStream,
                        Tensor, concat, ensemble_forward_np, minimum)
from .buffer import TransitionBatch

__all__ = ["MODES", "FinetuneConfig", "HighLevelAction", "SacActor",
           "SacState", "init_sac", "hl_sample", "critic_update",
           "actor_update", "alpha_update", "head_logp_np", "scalar_bound",
           "save_actor", "load_actor"]

MODES = ("tmrl", "dsrl", "tmrl-cfg")

# pre-squash log-std is tanh-rescaled into this window
_LOGSTD_MIN = -5.0
_LOGSTD_MAX = 2.0

_LOG2 = math.log(2.0)
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class FinetuneConfig:
    """Hyperparameters for high-level fine-tuning.

    ``target_entropy_z = None`` resolves to minus the latent dimension at
    agent construction. ``hidden`` and ``batch_size`` are scaled down from
    the reference settings so full runs fit a single core; everything else
    keeps the reference values.
    """

    mode: str = "tmrl"
    gamma: float = 0.995
    h_execute: int = 8
    z_bound: float = 1.0
    u_bound: float = 1.0
    w_bound: float = 3.0
    target_entropy_z: float | None = None
    target_entropy_u: float = -1.0
    utd: int = 1
    warmup_steps: int = 500
    learning_rate: float = 3e-4
    tau: float = 0.005
    n_critics: int = 5
    n_target_min: int = 2
    hidden: tuple[int, ...] = (128, 128, 128)
    batch_size: int = 128
    buffer_capacity: int = 150_000
    total_env_steps: int = 150_000
    offline_mix: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.h_execute < 1:
            raise ValueError("h_execute must be >= 1")
        if self.z_bound <= 0 or self.u_bound <= 0 or self.w_bound <= 0:
            raise ValueError("bounds must be positive")
        if self.utd < 0 or self.warmup_steps < 0:
            raise ValueError("utd and warmup_steps must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        if self.n_critics < 2 or not 1 <= self.n_target_min <= self.n_critics:
            raise ValueError("need >= 2 critics and 1 <= n_target_min <= n_critics")
        if not self.hidden or any(h < 1 for h in self.hidden):
            raise ValueError("hidden must list positive widths")
        if self.batch_size < 1 or self.buffer_capacity < self.batch_size:
            raise ValueError("need batch_size >= 1 and capacity >= batch_size")
        if self.total_env_steps < 0:
            raise ValueError("total_env_steps must be >= 0")


def scalar_bound(cfg: FinetuneConfig) -> float:
    """Upper bound of the second head: smoothing level or guidance weight."""
    return cfg.w_bound if cfg.mode == "tmrl-cfg" else cfg.u_bound


@dataclass(frozen=True)
class HighLevelAction:
    """One decision of the high-level policy.

    ``z`` is the flow latent, flat [horizon * action_dim], inside
    [-z_bound, z_bound] per coordinate. ``u`` is the mode's scalar: the
    smoothing level in [0, u_bound], the guidance weight in [0, w_bound],
    or exactly 0 when the second head is disabled.
    """

    z: np.ndarray
    u: float


def _squash_logstd_graph(raw: Tensor) -> Tensor:
    half = 0.5 * (_LOGSTD_MAX - _LOGSTD_MIN)
    return (raw.tanh() + 1.0) * half + _LOGSTD_MIN


def _squash_logstd_np(raw: np.ndarray) -> np.ndarray:
    half = 0.5 * (_LOGSTD_MAX - _LOGSTD_MIN)
    return (np.tanh(raw) + 1.0) * half + _LOGSTD_MIN


def _log1m_tanh_sq_np(x: np.ndarray) -> np.ndarray:
    # log(1 - tanh(x)^2) = 2 (log 2 - x - softplus(-2x)); exact at any |x|
    return 2.0 * (_LOG2 - x - np.logaddexp(0.0, -2.0 * x))


class SacActor:
    """Shared relu trunk feeding four head projections (mean and log-std
    per head). The z head squashes to a symmetric box, the scalar head to
    [0, bound] via an affine remap of tanh."""

    def __init__(self, obs_dim: int, z_dim: int, cfg: FinetuneConfig,
                 rng: RngStream):
        self.obs_dim = int(obs_dim)
        self.z_dim = int(z_dim)
        self.mode = cfg.mode
        self.z_bound = float(cfg.z_bound)
        self.u_scale = float(scalar_bound(cfg))
        self.trunk = Mlp([obs_dim, *cfg.hidden], rng.derive(0),
                         activation="relu", out_activation="relu")
        width = cfg.hidden[-1]
        self.mu_z = Linear(width, z_dim, rng.derive(1))
        self.logstd_z = Linear(width, z_dim, rng.derive(2))
        self.mu_u = Linear(width, 1, rng.derive(3))
        self.logstd_u = Linear(width, 1, rng.derive(4))

    @property
    def params(self):
        return (self.trunk.params + self.mu_z.params + self.logstd_z.params
                + self.mu_u.params + self.logstd_u.params)

    def heads_graph(self, s: Tensor):
        feats = self.trunk(s)
        return (self.mu_z(feats), _squash_logstd_graph(self.logstd_z(feats)),
                self.mu_u(feats), _squash_logstd_graph(self.logstd_u(feats)))

    def heads_np(self, s: np.ndarray):
        feats = self.trunk.forward_np(s)
        return (self.mu_z.forward_np(feats),
                _squash_logstd_np(self.logstd_z.forward_np(feats)),
                self.mu_u.forward_np(feats),
                _squash_logstd_np(self.logstd_u.forward_np(feats)))

    def sample_np(self, s: np.ndarray, rng: RngStream):
        """Draw (z, u, logp_z, logp_u) for a batch of observations.

        Both heads consume randomness in every mode so that seeded runs
        stay draw-aligned when one head's output is discarded; dsrl then
        pins u to 0 with logp 0.
        """
        mu_z, ls_z, mu_u, ls_u = self.heads_np(s)
        eps_z = rng.standard_normal(mu_z.shape)
        eps_u = rng.standard_normal(mu_u.shape)

        xi = mu_z + np.exp(ls_z) * eps_z
        y = np.tanh(xi)
        z = self.z_bound * y
        base = -0.5 * eps_z * eps_z - _HALF_LOG_2PI - ls_z
        logp_z = (base - _log1m_tanh_sq_np(xi)).sum(axis=-1) \
            - self.z_dim * math.log(self.z_bound)

        xi_u = mu_u + np.exp(ls_u) * eps_u
        y_u = np.tanh(xi_u)
        u = 0.5 * self.u_scale * (y_u + 1.0)
        base_u = -0.5 * eps_u * eps_u - _HALF_LOG_2PI - ls_u
        logp_u = (base_u - _log1m_tanh_sq_np(xi_u)).sum(axis=-1) \
            - math.log(0.5 * self.u_scale)

        if self.mode == "dsrl":
            u = np.zeros_like(u)
            logp_u = np.zeros_like(logp_u)
        return z, u[:, 0], logp_z, logp_u


class SacState:
    """Mutable training state: actor, critic ensemble, frozen target copies,
    per-head temperatures, and one optimizer per group."""

    def __init__(self, actor: SacActor, critics: EnsembleMlp,
                 cfg: FinetuneConfig):
        self.actor = actor
        self.critics = critics
        self.target_params = critics.copy_raw()
        self.cfg = cfg
        self.target_entropy_z = (float(cfg.target_entropy_z)
                                 if cfg.target_entropy_z is not None
                                 else -float(actor.z_dim))
        self.target_entropy_u = float(cfg.target_entropy_u)
        self.log_alpha_z = Parameter(np.zeros(()))
        self.log_alpha_u = Parameter(np.zeros(()))
        lr = cfg.learning_rate
        self.actor_opt = Adam(actor.params, lr=lr)
        self.critic_opt = Adam(critics.params, lr=lr)
        self.alpha_opt = Adam([self.log_alpha_z, self.log_alpha_u], lr=lr)
        self.last_logp_z: float | None = None
        self.last_logp_u: float | None = None

    @property
    def alpha_z(self) -> float:
        return float(np.exp(self.log_alpha_z.data))

    @property
    def alpha_u(self) -> float:
        return float(np.exp(self.log_alpha_u.data))


def init_sac(obs_dim: int, z_dim: int, cfg: FinetuneConfig,
             rng: RngStream) -> SacState:
    actor = SacActor(obs_dim, z_dim, cfg, rng.derive(0))
    critics = EnsembleMlp(cfg.n_critics, [obs_dim + z_dim + 1, *cfg.hidden, 1],
                          rng.derive(1), activation="relu",
                          use_layer_norm=True)
    return SacState(actor, critics, cfg)


def hl_sample(sac: SacState, s: np.ndarray, rng: RngStream):
    """Sample one high-level action at observation ``s``.

    Returns (HighLevelAction, (logp_z, logp_u)); log-probabilities include
    the tanh change-of-variables correction per head.
    """
    s = np.asarray(s, dtype=np.float64)
    z, u, logp_z, logp_u = sac.actor.sample_np(s[None], rng)
    return (HighLevelAction(z[0], float(u[0])),
            (float(logp_z[0]), float(logp_u[0])))


def _critic_input(s: np.ndarray, z: np.ndarray, u: np.ndarray) -> np.ndarray:
    return np.concatenate([s, z, u[:, None]], axis=1)


def critic_update(sac: SacState, batch: TransitionBatch,
                  rng: RngStream) -> float:
    """One regression step on all critics plus a Polyak target update.

    The target bootstraps through a fresh actor sample at s' and the min
    over a random two-member subset of the target ensemble; done rows get
    y = reward exactly, and there is no entropy term in the target.
    """
    cfg = sac.cfg
    z2, u2, _, _ = sac.actor.sample_np(batch.s_next, rng)
    q2 = ensemble_forward_np(sac.target_params,
                             _critic_input(batch.s_next, z2, u2),
                             sac.critics.activation,
                             sac.critics.use_layer_norm)[..., 0]
    pair = rng.choice(cfg.n_critics, size=cfg.n_target_min, replace=False)
    q_min = q2[pair].min(axis=0)
    y = batch.reward + (1.0 - batch.done) * cfg.gamma ** cfg.h_execute * q_min
    if not np.all(np.isfinite(y)):
        raise FloatingPointError("non-finite critic target")

    sac.critic_opt.zero_grad()
    q = sac.critics(_critic_input(batch.s, batch.z, batch.u))
    loss = (q - y[None, :, None]).square().mean()
    loss.backward()
    sac.critic_opt.step()

    tau = cfg.tau
    for tgt, src in zip(sac.target_params, sac.critics.raw_params()):
        tgt *= 1.0 - tau
        tgt += tau * src
    return float(loss.data)


def _actor_loss(sac: SacState, batch: TransitionBatch, eps_z: np.ndarray,
                eps_u: np.ndarray, pair: np.ndarray):
    """Build the actor objective graph for pinned head noise and critic pair.

    Split out so gradient oracles can re-evaluate the same objective at
    perturbed parameters. Returns (loss, logp_z, logp_u) tensors.
    """
    cfg = sac.cfg
    actor = sac.actor
    mu_z, ls_z, mu_u, ls_u = actor.heads_graph(Tensor(batch.s))

    xi = mu_z + ls_z.exp() * eps_z
    y = xi.tanh()
    z = y * actor.z_bound
    corr = (_LOG2 - xi - (xi * (-2.0)).softplus()) * 2.0
    base = -ls_z - (0.5 * eps_z * eps_z + _HALF_LOG_2PI)
    logp_z = (base - corr).sum(axis=-1) \
        - actor.z_dim * math.log(actor.z_bound)

    xi_u = mu_u + ls_u.exp() * eps_u
    y_u = xi_u.tanh()
    u = (y_u + 1.0) * (0.5 * actor.u_scale)
    corr_u = (_LOG2 - xi_u - (xi_u * (-2.0)).softplus()) * 2.0
    base_u = -ls_u - (0.5 * eps_u * eps_u + _HALF_LOG_2PI)
    logp_u = (base_u - corr_u).sum(axis=-1) \
        - math.log(0.5 * actor.u_scale)

    if cfg.mode == "dsrl":
        u_in = Tensor(np.zeros((eps_u.shape[0], 1)))
    else:
        u_in = u
    q = sac.critics(concat([Tensor(batch.s), z, u_in], axis=-1))
    q_min = minimum(q.index0(int(pair[0])), q.index0(int(pair[1])))

    loss = -(q_min.mean()) + sac.alpha_z * logp_z.mean()
    if cfg.mode != "dsrl":
        loss = loss + sac.alpha_u * logp_u.mean()
    return loss, logp_z, logp_u


def actor_update(sac: SacState, batch: TransitionBatch,
                 rng: RngStream) -> float:
    """One step on the actor: maximize the two-member critic min minus the
    temperature-weighted head log-probabilities.

    Also records each head's mean log-probability for the temperature
    update that follows. Critic and temperature parameters receive no step
    here (their optimizers clear any incidental gradients before use).
    """
    cfg = sac.cfg
    b = batch.s.shape[0]
    eps_z = rng.standard_normal((b, sac.actor.z_dim))
    eps_u = rng.standard_normal((b, 1))
    pair = rng.choice(cfg.n_critics, size=cfg.n_target_min, replace=False)

    sac.actor_opt.zero_grad()
    loss, logp_z, logp_u = _actor_loss(sac, batch, eps_z, eps_u, pair)
    loss.backward()
    sac.actor_opt.step()

    sac.last_logp_z = float(logp_z.data.mean())
    sac.last_logp_u = (None if cfg.mode == "dsrl"
                       else float(logp_u.data.mean()))
    return float(loss.data)


def alpha_update(sac: SacState, batch: TransitionBatch) -> None:
    """Per-head temperature step toward its target entropy.

    Consumes the head log-probabilities recorded by the preceding
    actor_update on this same batch; the gradient on log(alpha) is
    alpha * (entropy_estimate - target), so each head's temperature falls
    while its entropy sits above target and rises below it. The heads stay
    uncoupled; dsrl leaves the second temperature untouched.
    """
    del batch
    if sac.last_logp_z is None:
        raise RuntimeError("alpha_update requires a preceding actor_update")
    sac.alpha_opt.zero_grad()
    loss = sac.log_alpha_z.exp() * (-sac.last_logp_z - sac.target_entropy_z)
    if sac.last_logp_u is not None:
        loss = loss + sac.log_alpha_u.exp() * (-sac.last_logp_u
                                               - sac.target_entropy_u)
    loss.backward()
    sac.alpha_opt.step()


def head_logp_np(mu: float, logstd: float, bound: float, value: np.ndarray,
                 kind: str = "symmetric") -> np.ndarray:
    """Analytic log-density of a 1-D squashed head at output values.

    ``kind="symmetric"`` is the z head, value = bound * tanh(xi);
    ``kind="affine"`` is the scalar head, value = bound * (tanh(xi)+1)/2.
    Values must lie strictly inside the head's range.
    """
    value = np.asarray(value, dtype=np.float64)
    if kind == "symmetric":
        y = value / bound
        scale = bound
    elif kind == "affine":
        y = 2.0 * value / bound - 1.0
        scale = 0.5 * bound
    else:
        raise ValueError("kind must be 'symmetric' or 'affine'")
    if np.any(np.abs(y) >= 1.0):
        raise ValueError("values must lie strictly inside the squashed range")
    xi = np.arctanh(y)
    std = math.exp(logstd)
    base = -0.5 * ((xi - mu) / std) ** 2 - _HALF_LOG_2PI - logstd
    return base - math.log(scale) - np.log1p(-y * y)


_HEAD_NAMES = ("mu_z", "logstd_z", "mu_u", "logstd_u")


def save_actor(path: str, sac: SacState) -> None:
    """Persist the actor plus temperatures with enough geometry to rebuild."""
    cfg = sac.cfg
    manifest = {
        "kind": "sac_actor",
        "mode": cfg.mode,
        "obs_dim": sac.actor.obs_dim,
        "z_dim": sac.actor.z_dim,
        "hidden": ",".join(str(h) for h in cfg.hidden),
        "z_bound": repr(cfg.z_bound),
        "u_bound": repr(cfg.u_bound),
        "w_bound": repr(cfg.w_bound),
    }
    tensors = []
    for i, layer in enumerate(sac.actor.trunk.layers):
        tensors.append((f"trunk.{i}.w", layer.w.data))
        tensors.append((f"trunk.{i}.b", layer.b.data))
    for name in _HEAD_NAMES:
        head = getattr(sac.actor, name)
        tensors.append((f"{name}.w", head.w.data))
        tensors.append((f"{name}.b", head.b.data))
    tensors.append(("log_alpha_z", sac.log_alpha_z.data))
    tensors.append(("log_alpha_u", sac.log_alpha_u.data))
    save_checkpoint(path, manifest, tensors)


def load_actor(path: str) -> tuple[SacActor, dict]:
    """Rebuild a saved actor; returns (actor, manifest).

    Only the sampling side comes back (critics and optimizer state are
    training-only); the stored temperatures ride along in the manifest's
    tensor set for inspection but are not re-attached.
    """
    manifest, tensors = load_checkpoint(path)
    if manifest.get("kind") != "sac_actor":
        raise ValueError(f"{path}: checkpoint kind {manifest.get('kind')!r}, "
                         "expected 'sac_actor'")
    cfg = FinetuneConfig(
        mode=manifest["mode"],
        hidden=tuple(int(h) for h in manifest["hidden"].split(",")),
        z_bound=float(manifest["z_bound"]),
        u_bound=float(manifest["u_bound"]),
        w_bound=float(manifest["w_bound"]))
    actor = SacActor(int(manifest["obs_dim"]), int(manifest["z_dim"]), cfg,
                     RngStream(0))
    for i, layer in enumerate(actor.trunk.layers):
        layer.w.data[...] = tensors[f"trunk.{i}.w"]
        layer.b.data[...] = tensors[f"trunk.{i}.b"]
    for name in _HEAD_NAMES:
        head = getattr(actor, name)
        head.w.data[...] = tensors[f"{name}.w"]
        head.b.data[...] = tensors[f"{name}.b"]
    return actor, manifest
