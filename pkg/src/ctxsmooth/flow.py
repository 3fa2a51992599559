"""Flow-matching action-chunk policy with smoothing-aware conditioning.

The policy regresses the straight-line velocity field between a standard
normal latent and a data chunk:

    x = (1 - t) * z + t * a,   v*(x, t) = a - z,

conditioned on a (possibly corrupted) context and on the smoothing level the
corruption used. Sampling integrates the field with a fixed-step Euler
scheme from the latent, so the entire action chunk is a deterministic
function of (context, latent, level).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import Normalizer
from .diffusion import NoiseSchedule, linear_beta_schedule
from .numerics.nn import Mlp, sinusoidal_embedding
from .numerics.rng import RngStream
from .numerics.tensor import Parameter, Tensor, concat

__all__ = ["FlowPolicy", "LatentNoise", "flow_matching_loss",
           "sample_actions", "cfg_sample", "save_policy", "load_policy"]

DEFAULT_SAMPLE_STEPS = 10


@dataclass(frozen=True)
class LatentNoise:
    """Initial latent of the flow sampler, flattened to [horizon * action_dim].

    Fixing z freezes every downstream sampling step, which is what lets an
    RL layer treat chunk generation as a deterministic decoder.
    """

    z: np.ndarray

    @classmethod
    def draw(cls, horizon: int, action_dim: int, rng: RngStream) -> "LatentNoise":
        return cls(rng.standard_normal(horizon * action_dim))


class FlowPolicy:
    """Velocity-field MLP over [x, emb(t_a), context, null-flag, emb(u)].

    ``null_context`` is a trainable stand-in for "no conditioning". Because
    contexts are normalized, any fixed token value would collide with real
    contexts near the dataset mean, so an explicit 0/1 indicator column rides
    along with the context; it is 1 exactly on dropped rows and during the
    unconditional pass of guided sampling.
    """

    def __init__(self, context_dim: int, action_dim: int, horizon: int,
                 rng: RngStream, hidden=(256, 256, 256), emb_dim: int = 32,
                 activation: str = "mish"):
        self.context_dim = int(context_dim)
        self.action_dim = int(action_dim)
        self.horizon = int(horizon)
        self.latent_dim = self.horizon * self.action_dim
        self.emb_dim = int(emb_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.activation = activation
        in_dim = (self.latent_dim + self.emb_dim + self.context_dim + 1
                  + self.emb_dim)
        self.net = Mlp([in_dim, *self.hidden, self.latent_dim], rng.derive(0),
                       activation=activation)
        self.null_context = Parameter(0.01 * rng.derive(1).standard_normal(self.context_dim))

    @property
    def params(self):
        return self.net.params + [self.null_context]

    def _features(self, x: np.ndarray, t_a: np.ndarray, u: np.ndarray):
        e_t = sinusoidal_embedding(np.asarray(t_a, dtype=np.float64), self.emb_dim)
        e_u = sinusoidal_embedding(np.asarray(u, dtype=np.float64), self.emb_dim)
        return e_t, e_u

    def velocity(self, x: np.ndarray, t_a: np.ndarray, context: np.ndarray,
                 u: np.ndarray, null_mask: np.ndarray | None = None) -> Tensor:
        """Graph-building forward for training; inputs are arrays.

        ``null_mask`` marks rows whose context is replaced by the trainable
        null token (their gradient flows into it).
        """
        e_t, e_u = self._features(x, t_a, u)
        b = x.shape[0]
        if null_mask is None:
            inp = Tensor(np.concatenate(
                [x, e_t, context, np.zeros((b, 1)), e_u], axis=-1))
            return self.net(inp)
        keep = ~np.asarray(null_mask, dtype=bool)
        base = np.where(keep[:, None], context, 0.0)
        mask_col = Tensor((~keep[:, None]).astype(np.float64))
        ctx = Tensor(base) + mask_col * self.null_context
        head = Tensor(np.concatenate([x, e_t], axis=-1))
        flag = Tensor((~keep[:, None]).astype(np.float64))
        tail = Tensor(e_u)
        return self.net(concat([head, ctx, flag, tail], axis=-1))

    def velocity_np(self, x: np.ndarray, t_a: np.ndarray, context: np.ndarray,
                    u: np.ndarray, null_flag: bool = False) -> np.ndarray:
        e_t, e_u = self._features(x, t_a, u)
        flag = np.full((x.shape[0], 1), 1.0 if null_flag else 0.0)
        return self.net.forward_np(
            np.concatenate([x, e_t, context, flag, e_u], axis=-1))


def flow_matching_loss(policy: FlowPolicy, chunks: np.ndarray,
                       contexts: np.ndarray, u: np.ndarray, rng: RngStream,
                       null_mask: np.ndarray | None = None) -> Tensor:
    """Mean squared velocity regression error over a batch.

    Draws one interpolation time t_a ~ U(0, 1) and one latent per row; the
    caller owns context corruption (these chunks' contexts arrive already
    smoothed to the levels in ``u``).
    """
    chunks = np.asarray(chunks, dtype=np.float64)
    b = chunks.shape[0]
    a = chunks.reshape(b, -1)
    if a.shape[1] != policy.latent_dim:
        raise ValueError(f"chunk size {a.shape[1]} != policy latent {policy.latent_dim}")
    t_a = rng.uniform(size=b)
    z = rng.standard_normal((b, policy.latent_dim))
    x = (1.0 - t_a[:, None]) * z + t_a[:, None] * a
    target = a - z
    v = policy.velocity(x, t_a, contexts, u, null_mask)
    return (v - Tensor(target)).square().mean()


def _as_batch(context, z, u):
    context = np.asarray(context, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    single = context.ndim == 1
    if single:
        context = context[None]
        z = z[None]
    b = context.shape[0]
    u = np.broadcast_to(np.asarray(u, dtype=np.float64), (b,))
    return context, z, u, single


def sample_actions(policy: FlowPolicy, context: np.ndarray, z: np.ndarray,
                   u, n_steps: int = DEFAULT_SAMPLE_STEPS) -> np.ndarray:
    """Euler-integrate the learned field from latent z; returns [.., H, A].

    x_{k+1} = x_k + (1/K) * v(x_k, k/K); deterministic given (context, z, u).
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    context, z, u, single = _as_batch(context, z, u)
    x = z.copy()
    for k in range(n_steps):
        t = np.full(x.shape[0], k / n_steps)
        x += policy.velocity_np(x, t, context, u) / n_steps
    out = x.reshape(-1, policy.horizon, policy.action_dim)
    return out[0] if single else out


def cfg_sample(policy: FlowPolicy, context: np.ndarray, z: np.ndarray,
               guidance: float, n_steps: int = DEFAULT_SAMPLE_STEPS) -> np.ndarray:
    """Sample with classifier-free guidance at zero smoothing.

    v = v_null + w * (v_cond - v_null); w = 1 is plain conditional sampling,
    w = 0 the null-token (marginal) field, larger w extrapolates toward the
    conditional.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    context, z, u, single = _as_batch(context, z, 0.0)
    null = np.broadcast_to(policy.null_context.data, context.shape)
    w = float(guidance)
    x = z.copy()
    for k in range(n_steps):
        t = np.full(x.shape[0], k / n_steps)
        v_c = policy.velocity_np(x, t, context, u)
        v_n = policy.velocity_np(x, t, null, u, null_flag=True)
        x += (v_n + w * (v_c - v_n)) / n_steps
    out = x.reshape(-1, policy.horizon, policy.action_dim)
    return out[0] if single else out


def save_policy(path: str, policy: FlowPolicy, schedule: NoiseSchedule,
                normalizer: Normalizer, train_mode: str,
                extra: dict | None = None) -> None:
    manifest = {
        "kind": "flow_policy",
        "context_dim": policy.context_dim,
        "action_dim": policy.action_dim,
        "horizon": policy.horizon,
        "emb_dim": policy.emb_dim,
        "activation": policy.activation,
        "hidden": ",".join(str(h) for h in policy.hidden),
        "schedule_steps": schedule.n_steps,
        "beta_start": repr(schedule.beta_start),
        "beta_end": repr(schedule.beta_end),
        "train_mode": train_mode,
    }
    if extra:
        manifest.update({str(k): str(v) for k, v in extra.items()})
    tensors = []
    for i, layer in enumerate(policy.net.layers):
        tensors.append((f"net.{i}.w", layer.w.data))
        tensors.append((f"net.{i}.b", layer.b.data))
    tensors.append(("null_context", policy.null_context.data))
    tensors.append(("norm.mean", normalizer.mean))
    tensors.append(("norm.std", normalizer.std))
    save_checkpoint(path, manifest, tensors)


def load_policy(path: str):
    """Returns (policy, schedule, normalizer, manifest)."""
    manifest, tensors = load_checkpoint(path)
    if manifest.get("kind") != "flow_policy":
        raise ValueError(f"{path}: checkpoint kind {manifest.get('kind')!r}, "
                         "expected 'flow_policy'")
    hidden = tuple(int(h) for h in manifest["hidden"].split(","))
    policy = FlowPolicy(int(manifest["context_dim"]), int(manifest["action_dim"]),
                        int(manifest["horizon"]), RngStream(0),
                        hidden=hidden, emb_dim=int(manifest["emb_dim"]),
                        activation=manifest["activation"])
    for i, layer in enumerate(policy.net.layers):
        layer.w.data[...] = tensors[f"net.{i}.w"]
        layer.b.data[...] = tensors[f"net.{i}.b"]
    policy.null_context.data[...] = tensors["null_context"]
    schedule = linear_beta_schedule(int(manifest["schedule_steps"]),
                                    float(manifest["beta_start"]),
                                    float(manifest["beta_end"]))
    normalizer = Normalizer(tensors["norm.mean"], tensors["norm.std"])
    return policy, schedule, normalizer, manifest
