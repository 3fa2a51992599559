import math

import numpy as np
import pytest

import ctxsmooth.tmrl.loop as loop_mod
from ctxsmooth.data import Normalizer
from ctxsmooth.diffusion import linear_beta_schedule
from ctxsmooth.envs import StepResult, parse_maze
from ctxsmooth.flow import FlowPolicy, sample_actions
from ctxsmooth.numerics import RngStream, concat
from ctxsmooth.tmrl import (FinetuneConfig, HighLevelAction, MazeEnv,
                            ReplayBuffer, Transition, actor_update,
                            alpha_update, critic_update, finetune_loop,
                            head_logp_np, hl_sample, init_sac, tmrl_rollout)
from ctxsmooth.tmrl.buffer import TransitionBatch
from ctxsmooth.tmrl.loop import EnvFault, _decode_chunk
from ctxsmooth.tmrl.sac import _actor_loss

from util import finite_diff_grad, rel_err

CORRIDOR = """\
cell-size=1.0
##########
#S......G#
##########
"""

OPEN_ROOM = """\
cell-size=1.0
#######
#S....#
#.....#
#....G#
#######
"""


def small_cfg(**kw):
    base = dict(h_execute=8, hidden=(16, 16), batch_size=16,
                buffer_capacity=4096, warmup_steps=64, total_env_steps=256)
    base.update(kw)
    return FinetuneConfig(**base)


def random_batch(rng, b, obs_dim, z_dim, done=0.0, reward=None):
    rewards = (np.full(b, reward) if reward is not None
               else -rng.uniform(0.0, 5.0, size=b))
    return TransitionBatch(rng.standard_normal((b, obs_dim)),
                           rng.uniform(-1.0, 1.0, size=(b, z_dim)),
                           rng.uniform(0.0, 1.0, size=b), rewards,
                           rng.standard_normal((b, obs_dim)),
                           np.full(b, float(done)))


@pytest.fixture(scope="module")
def csp():
    return FlowPolicy(context_dim=4, action_dim=2, horizon=8,
                      rng=RngStream(301), hidden=(16, 16))


@pytest.fixture(scope="module")
def schedule():
    return linear_beta_schedule()


class TestReplayBuffer:
    def test_fifo_eviction_and_uniform_sampling(self):
        buf = ReplayBuffer(8)
        obs = np.zeros(3)
        for i in range(12):
            buf.add(Transition(obs, np.zeros(2), 0.0, float(i), obs, False))
        assert len(buf) == 8

        draws = buf.sample(100_000, RngStream(17)).reward.astype(int)
        seen = set(draws.tolist())
        assert seen == set(range(4, 12)), "oldest items must be evicted"

        n, p = 100_000, 1.0 / 8.0
        se = math.sqrt(n * p * (1.0 - p))
        counts = np.bincount(draws, minlength=12)[4:]
        assert np.all(np.abs(counts - n * p) < 3.0 * se)

    def test_empty_buffer_rejects_sampling(self):
        with pytest.raises(ValueError):
            ReplayBuffer(4).sample(1, RngStream(0))

    def test_bad_capacity_rejected(self):
        with pytest.raises(ValueError):
            ReplayBuffer(0)


class TestConfig:
    @pytest.mark.parametrize("kw", [
        {"mode": "ppo"}, {"gamma": 1.0}, {"h_execute": 0}, {"z_bound": 0.0},
        {"tau": 0.0}, {"n_critics": 1}, {"n_target_min": 6},
        {"learning_rate": 0.0}, {"batch_size": 0}, {"hidden": ()},
    ])
    def test_invalid_values_rejected(self, kw):
        with pytest.raises(ValueError):
            small_cfg(**kw)

    def test_target_entropy_defaults_to_latent_dim(self):
        sac = init_sac(3, 7, small_cfg(), RngStream(0))
        assert sac.target_entropy_z == -7.0
        assert sac.target_entropy_u == -1.0


class TestHlSample:
    def test_degenerate_heads_hit_center(self):
        sac = init_sac(3, 4, small_cfg(), RngStream(1))
        for lin in (sac.actor.mu_z, sac.actor.mu_u):
            lin.w.data[...] = 0.0
            lin.b.data[...] = 0.0
        for lin in (sac.actor.logstd_z, sac.actor.logstd_u):
            lin.w.data[...] = 0.0
            lin.b.data[...] = -40.0  # tanh saturates, log-std pins at minimum

        rng = RngStream(2)
        s = rng.standard_normal((256, 3))
        z, u, _, _ = sac.actor.sample_np(s, rng)
        assert np.max(np.abs(z)) < 0.05
        assert np.max(np.abs(u - 0.5)) < 0.05

    def test_samples_respect_bounds(self):
        cfg = small_cfg(z_bound=0.7, u_bound=0.4)
        sac = init_sac(3, 4, cfg, RngStream(3))
        rng = RngStream(4)
        s = np.repeat(rng.standard_normal((1, 3)), 100_000, axis=0)
        z, u, _, _ = sac.actor.sample_np(s, rng)
        assert np.all(np.abs(z) <= 0.7)
        assert np.all((u >= 0.0) & (u <= 0.4))

    def test_mc_entropy_matches_quadrature(self):
        sac = init_sac(3, 1, small_cfg(), RngStream(5))
        rng = RngStream(6)
        s_row = rng.standard_normal(3)
        s = np.repeat(s_row[None], 100_000, axis=0)
        z, u, logp_z, logp_u = sac.actor.sample_np(s, rng)
        mu_z, ls_z, mu_u, ls_u = [a[0, 0] for a in sac.actor.heads_np(s_row[None])]

        grid = np.linspace(-1.0, 1.0, 400_001)[1:-1]
        lp = head_logp_np(mu_z, ls_z, 1.0, grid, "symmetric")
        quad = -np.trapezoid(np.exp(lp) * lp, grid)
        mc = (-logp_z).mean()
        se = (-logp_z).std(ddof=1) / math.sqrt(logp_z.size)
        assert abs(mc - quad) < 3.0 * se

        grid_u = np.linspace(0.0, 1.0, 400_001)[1:-1]
        lp_u = head_logp_np(mu_u, ls_u, 1.0, grid_u, "affine")
        quad_u = -np.trapezoid(np.exp(lp_u) * lp_u, grid_u)
        mc_u = (-logp_u).mean()
        se_u = (-logp_u).std(ddof=1) / math.sqrt(logp_u.size)
        assert abs(mc_u - quad_u) < 3.0 * se_u

    def test_sampler_logp_matches_analytic_density(self):
        sac = init_sac(3, 1, small_cfg(u_bound=0.8), RngStream(7))
        rng = RngStream(8)
        s_row = rng.standard_normal(3)
        s = np.repeat(s_row[None], 512, axis=0)
        z, u, logp_z, logp_u = sac.actor.sample_np(s, rng)
        mu_z, ls_z, mu_u, ls_u = [a[0, 0] for a in sac.actor.heads_np(s_row[None])]
        ref_z = head_logp_np(mu_z, ls_z, 1.0, z[:, 0], "symmetric")
        ref_u = head_logp_np(mu_u, ls_u, 0.8, u, "affine")
        assert np.allclose(logp_z, ref_z, atol=1e-9)
        assert np.allclose(logp_u, ref_u, atol=1e-9)

    def test_single_observation_interface(self):
        sac = init_sac(3, 4, small_cfg(), RngStream(9))
        hla, (lpz, lpu) = hl_sample(sac, np.zeros(3), RngStream(10))
        assert hla.z.shape == (4,) and isinstance(hla.u, float)
        assert np.isfinite([lpz, lpu]).all()

    def test_dsrl_pins_scalar_head_but_keeps_draws_aligned(self):
        kw = dict(obs_dim=3, z_dim=4)
        sac_t = init_sac(cfg=small_cfg(mode="tmrl"), rng=RngStream(11), **kw)
        sac_d = init_sac(cfg=small_cfg(mode="dsrl"), rng=RngStream(11), **kw)
        s = RngStream(12).standard_normal((64, 3))
        z_t, u_t, _, _ = sac_t.actor.sample_np(s, RngStream(13))
        z_d, u_d, _, lpu_d = sac_d.actor.sample_np(s, RngStream(13))
        assert np.array_equal(z_t, z_d)
        assert np.all(u_d == 0.0) and np.all(lpu_d == 0.0)
        assert np.any(u_t != 0.0)


class TestHeadLogp:
    def test_symmetric_density_integrates_to_one(self):
        grid = np.linspace(-1.0, 1.0, 200_001)[1:-1]
        p = np.exp(head_logp_np(0.3, -0.7, 1.0, grid, "symmetric"))
        assert abs(np.trapezoid(p, grid) - 1.0) < 0.01

    def test_affine_density_integrates_to_one(self):
        grid = np.linspace(0.0, 2.0, 200_001)[1:-1]
        p = np.exp(head_logp_np(-0.4, -1.1, 2.0, grid, "affine"))
        assert abs(np.trapezoid(p, grid) - 1.0) < 0.01

    def test_out_of_range_values_rejected(self):
        with pytest.raises(ValueError):
            head_logp_np(0.0, 0.0, 1.0, np.array([1.0]), "symmetric")
        with pytest.raises(ValueError):
            head_logp_np(0.0, 0.0, 1.0, np.array([0.5]), "typo")


class TestCriticUpdate:
    def test_done_rows_target_reward_exactly(self):
        cfg = small_cfg(gamma=0.9)
        sac = init_sac(3, 4, cfg, RngStream(20))
        batch = random_batch(RngStream(21), 16, 3, 4, done=1.0)
        x = np.concatenate([batch.s, batch.z, batch.u[:, None]], axis=1)
        q_before = sac.critics.forward_np(x)[..., 0]
        expected = float(((q_before - batch.reward) ** 2).mean())
        loss = critic_update(sac, batch, RngStream(22))
        assert math.isclose(loss, expected, rel_tol=1e-12)

    def test_gamma_zero_loss_is_mean_q_squared(self):
        cfg = small_cfg(gamma=0.0)
        sac = init_sac(3, 4, cfg, RngStream(23))
        for p in sac.critics.params:
            p.data[:] = p.data[0]  # all members identical
        batch = random_batch(RngStream(24), 16, 3, 4, reward=0.0)
        x = np.concatenate([batch.s, batch.z, batch.u[:, None]], axis=1)
        expected = float((sac.critics.forward_np(x) ** 2).mean())
        loss = critic_update(sac, batch, RngStream(25))
        assert math.isclose(loss, expected, rel_tol=1e-12)

    def test_single_transition_regression_converges(self):
        cfg = small_cfg(gamma=0.0, learning_rate=1e-2, batch_size=4)
        sac = init_sac(3, 4, cfg, RngStream(26))
        rng = RngStream(27)
        tr = Transition(rng.standard_normal(3), rng.uniform(-1, 1, size=4),
                        0.3, -0.5, rng.standard_normal(3), False)
        buf = ReplayBuffer(4)
        buf.add(tr)
        for i in range(500):
            critic_update(sac, buf.sample(4, rng.derive(i)), rng.derive(1000 + i))
        x = np.concatenate([tr.s, tr.z, [tr.u]])[None]
        q = sac.critics.forward_np(x)[..., 0]
        assert np.all(np.abs(q - tr.reward) < 0.01)

    def test_nonfinite_target_aborts(self):
        sac = init_sac(3, 4, small_cfg(), RngStream(28))
        batch = random_batch(RngStream(29), 8, 3, 4, reward=np.inf)
        with pytest.raises(FloatingPointError):
            critic_update(sac, batch, RngStream(30))

    def test_polyak_moves_targets_toward_critics(self):
        sac = init_sac(3, 4, small_cfg(), RngStream(31))
        before = [t.copy() for t in sac.target_params]
        critic_update(sac, random_batch(RngStream(32), 16, 3, 4), RngStream(33))
        after_src = sac.critics.raw_params()
        moved = [not np.array_equal(a, b)
                 for a, b in zip(sac.target_params, before)]
        assert any(moved)
        for tgt, b, src in zip(sac.target_params, before, after_src):
            assert np.allclose(tgt, 0.995 * b + 0.005 * src)


class _AnalyticCritics:
    """Graph-capable stand-in: every member returns -(z - target)^2."""

    def __init__(self, obs_dim, n_members=5, target=0.7):
        self.sel = np.zeros((obs_dim + 2, 1))
        self.sel[obs_dim, 0] = 1.0
        self.n_members = n_members
        self.target = target

    def __call__(self, x):
        q = -((x @ self.sel - self.target).square())
        b = q.data.shape[0]
        return concat([q] * self.n_members, axis=0).reshape(self.n_members, b, 1)


class TestActorUpdate:
    def test_entropy_ascends_under_zero_critics(self):
        cfg = small_cfg()
        sac = init_sac(3, 4, cfg, RngStream(40))
        for p in sac.critics.params:
            p.data[...] = 0.0
        rng = RngStream(41)
        batch = random_batch(rng, 128, 3, 4)
        probe = np.repeat(batch.s[:1], 4000, axis=0)

        def entropies(seed):
            _, _, lpz, lpu = sac.actor.sample_np(probe, RngStream(seed))
            return (-lpz).mean(), (-lpu).mean()

        hz0, hu0 = entropies(900)
        for i in range(200):
            actor_update(sac, batch, rng.derive(i))
        hz1, hu1 = entropies(900)
        assert hz1 > hz0
        assert hu1 > hu0

    def test_bandit_mean_converges_to_critic_optimum(self):
        cfg = small_cfg(learning_rate=1e-3)
        sac = init_sac(2, 1, cfg, RngStream(42))
        sac.critics = _AnalyticCritics(obs_dim=2, target=0.7)
        sac.log_alpha_z.data.fill(-1e9)  # alpha = 0: pure surrogate ascent
        sac.log_alpha_u.data.fill(-1e9)
        batch = random_batch(RngStream(43), 64, 2, 1)
        rng = RngStream(44)
        for i in range(2000):
            actor_update(sac, batch, rng.derive(i))
        z, _, _, _ = sac.actor.sample_np(np.repeat(batch.s[:1], 4000, axis=0),
                                         RngStream(45))
        assert abs(z.mean() - 0.7) < 0.05

    def test_gradient_matches_finite_differences(self):
        cfg = small_cfg(hidden=(8,))
        sac = init_sac(2, 2, cfg, RngStream(46))
        batch = random_batch(RngStream(47), 4, 2, 2)
        rng = RngStream(48)
        eps_z = rng.standard_normal((4, 2))
        eps_u = rng.standard_normal((4, 1))
        pair = np.array([1, 3])

        loss, _, _ = _actor_loss(sac, batch, eps_z, eps_u, pair)
        loss.backward()

        def value():
            l, _, _ = _actor_loss(sac, batch, eps_z, eps_u, pair)
            return float(l.data)

        checked = [sac.actor.trunk.layers[0].w, sac.actor.mu_z.w,
                   sac.actor.logstd_z.b, sac.actor.mu_u.b,
                   sac.actor.logstd_u.w, sac.critics.weights[-1]]
        for p in checked:
            assert p.grad is not None
            assert rel_err(p.grad, finite_diff_grad(value, p)) < 1e-3

    def test_graph_sampler_matches_np_sampler(self):
        cfg = small_cfg(u_bound=0.6)
        sac = init_sac(3, 4, cfg, RngStream(49))
        batch = random_batch(RngStream(50), 8, 3, 4)
        draw = RngStream(51)
        eps_z = draw.standard_normal((8, 4))
        eps_u = draw.standard_normal((8, 1))
        _, lpz_g, lpu_g = _actor_loss(sac, batch, eps_z, eps_u,
                                      np.array([0, 1]))
        _, _, lpz_n, lpu_n = sac.actor.sample_np(batch.s, RngStream(51))
        assert np.allclose(lpz_g.data, lpz_n, atol=1e-12)
        assert np.allclose(lpu_g.data, lpu_n, atol=1e-12)

    def test_dsrl_mode_skips_scalar_head(self):
        cfg = small_cfg(mode="dsrl")
        sac = init_sac(3, 4, cfg, RngStream(52))
        before = [p.data.copy()
                  for p in sac.actor.mu_u.params + sac.actor.logstd_u.params]
        actor_update(sac, random_batch(RngStream(53), 16, 3, 4, reward=-1.0),
                     RngStream(54))
        after = [p.data
                 for p in sac.actor.mu_u.params + sac.actor.logstd_u.params]
        assert all(np.array_equal(a, b) for a, b in zip(before, after))
        assert sac.last_logp_u is None
        assert sac.last_logp_z is not None


class TestAlphaUpdate:
    def test_requires_actor_update_first(self):
        sac = init_sac(3, 4, small_cfg(), RngStream(60))
        with pytest.raises(RuntimeError):
            alpha_update(sac, None)

    def test_stationary_at_target_entropy(self):
        sac = init_sac(3, 4, small_cfg(), RngStream(61))
        sac.last_logp_z = -sac.target_entropy_z
        sac.last_logp_u = -sac.target_entropy_u
        alpha_update(sac, None)
        assert sac.alpha_z == 1.0
        assert sac.alpha_u == 1.0

    def test_alpha_falls_while_entropy_above_target(self):
        sac = init_sac(3, 4, small_cfg(), RngStream(62))
        sac.last_logp_z = -(sac.target_entropy_z + 5.0)  # entropy 5 nats high
        sac.last_logp_u = -sac.target_entropy_u
        values = [sac.alpha_z]
        for _ in range(10):
            alpha_update(sac, None)
            values.append(sac.alpha_z)
        assert all(b < a for a, b in zip(values, values[1:]))
        assert sac.alpha_u == 1.0, "heads must not cross-couple"

    def test_alpha_rises_while_entropy_below_target(self):
        sac = init_sac(3, 4, small_cfg(), RngStream(63))
        sac.last_logp_z = -sac.target_entropy_z
        sac.last_logp_u = -(sac.target_entropy_u - 3.0)
        for _ in range(10):
            alpha_update(sac, None)
        assert sac.alpha_u > 1.0
        assert sac.alpha_z == 1.0

    def test_dsrl_leaves_scalar_temperature_untouched(self):
        sac = init_sac(3, 4, small_cfg(mode="dsrl"), RngStream(64))
        actor_update(sac, random_batch(RngStream(65), 16, 3, 4),
                     RngStream(66))
        for _ in range(5):
            alpha_update(sac, None)
        assert sac.alpha_u == 1.0


class ScriptedEnv:
    """Plays back a fixed (reward, done, success) script; steps past the end
    raise EnvFault."""

    def __init__(self, script, obs_dim=4):
        self.script = list(script)
        self.obs_dim = obs_dim

    def reset(self, rng):
        return 0

    def step(self, state, action):
        if state >= len(self.script):
            raise EnvFault("scripted fault")
        reward, done, success = self.script[state]
        return StepResult(state + 1, reward, done, success)

    def context(self, state):
        return np.full(self.obs_dim, 0.1 * state)


class TestRollout:
    def test_zero_level_decode_matches_direct_call(self, csp, schedule):
        rng = RngStream(70)
        context = rng.standard_normal(4)
        z = rng.standard_normal(16)
        chunk = _decode_chunk(csp, schedule, small_cfg(), context,
                              HighLevelAction(z, 0.0), rng.derive(0))
        direct = sample_actions(csp, context, z, 0.0)
        assert np.array_equal(chunk, direct)

    def test_transition_count_is_ceil_of_horizon(self, csp, schedule):
        env = MazeEnv(parse_maze(CORRIDOR), Normalizer.identity(4), horizon=16)
        cfg = small_cfg()
        sac = init_sac(4, 16, cfg, RngStream(71))
        transitions, stats = tmrl_rollout(env, sac, csp, schedule, cfg,
                                          RngStream(72))
        assert len(transitions) == 2  # ceil(16 / 8)
        assert stats["steps"] == 16
        assert stats["success"] == 0
        assert all(not t.done for t in transitions), \
            "timeouts must keep bootstrapping"

    def test_immediate_success_has_zero_reward(self, csp, schedule):
        env = ScriptedEnv([(0.0, True, True)])
        cfg = small_cfg()
        sac = init_sac(4, 16, cfg, RngStream(73))
        transitions, stats = tmrl_rollout(env, sac, csp, schedule, cfg,
                                          RngStream(74))
        assert len(transitions) == 1
        assert transitions[0].reward == 0.0
        assert transitions[0].done
        assert stats["success"] == 1 and stats["steps"] == 1

    def test_env_fault_keeps_partial_transitions(self, csp, schedule):
        env = ScriptedEnv([(-1.0, False, False)] * 11)
        cfg = small_cfg(h_execute=4)
        sac = init_sac(4, 16, cfg, RngStream(75))
        transitions, stats = tmrl_rollout(env, sac, csp, schedule, cfg,
                                          RngStream(76))
        assert stats["fault"] == 1
        assert len(transitions) == 3
        assert stats["steps"] == 11
        g = cfg.gamma
        assert math.isclose(transitions[-1].reward, -(1.0 + g + g * g))

    def test_discounted_chunk_reward(self, csp, schedule):
        env = MazeEnv(parse_maze(CORRIDOR), Normalizer.identity(4), horizon=8)
        cfg = small_cfg()
        sac = init_sac(4, 16, cfg, RngStream(77))
        transitions, _ = tmrl_rollout(env, sac, csp, schedule, cfg,
                                      RngStream(78))
        expected = -sum(cfg.gamma ** i for i in range(8))
        assert math.isclose(transitions[0].reward, expected)

    def test_dsrl_pipeline_byte_identical_to_pinned_tmrl(
            self, csp, schedule, monkeypatch):
        env = MazeEnv(parse_maze(OPEN_ROOM), Normalizer.identity(4),
                      horizon=24)

        def run(mode, pin):
            cfg = small_cfg(mode=mode, h_execute=4)
            sac = init_sac(4, 16, cfg, RngStream(80))
            if pin:
                real = hl_sample

                def pinned(sac_, s_, rng_):
                    hla, lp = real(sac_, s_, rng_)
                    return HighLevelAction(hla.z, 0.0), lp

                monkeypatch.setattr(loop_mod, "hl_sample", pinned)
            out = [tmrl_rollout(env, sac, csp, schedule, cfg,
                                RngStream(81, ep)) for ep in range(3)]
            monkeypatch.undo()
            return out

        for (tr_t, st_t), (tr_d, st_d) in zip(run("tmrl", pin=True),
                                              run("dsrl", pin=False)):
            assert st_t == st_d
            assert len(tr_t) == len(tr_d)
            for a, b in zip(tr_t, tr_d):
                assert np.array_equal(a.s, b.s)
                assert np.array_equal(a.z, b.z)
                assert a.u == b.u == 0.0
                assert a.reward == b.reward
                assert np.array_equal(a.s_next, b.s_next)
                assert a.done == b.done


class TestFinetuneLoop:
    def make_env(self, horizon=24):
        return MazeEnv(parse_maze(OPEN_ROOM), Normalizer.identity(4),
                       horizon=horizon)

    def run_loop(self, csp, schedule, seed=90, **kw):
        cfg = small_cfg(h_execute=4, warmup_steps=48, batch_size=16,
                        total_env_steps=240, **kw)
        sac = init_sac(4, 16, cfg, RngStream(seed, 1))
        res = finetune_loop(self.make_env(), sac, csp, schedule, cfg,
                            RngStream(seed, 2))
        return sac, cfg, res

    def test_seeded_reruns_identical_and_bounds_hold(self, csp, schedule):
        _, cfg, res1 = self.run_loop(csp, schedule)
        _, _, res2 = self.run_loop(csp, schedule)
        assert res1.metrics == res2.metrics
        assert res1.u_trace == res2.u_trace
        assert not res1.halted
        assert res1.env_steps >= cfg.total_env_steps
        assert all(0.0 <= u <= cfg.u_bound for (_, _, u) in res1.u_trace)
        for row in res1.metrics:
            assert set(row) == {"step", "episode", "success", "return",
                                "mean_u", "critic_loss", "actor_loss",
                                "alpha_z", "alpha_u"}

    def test_frozen_decoder_is_bit_identical(self, csp, schedule):
        before = [p.data.copy() for p in csp.params]
        self.run_loop(csp, schedule, seed=91)
        assert all(np.array_equal(b, p.data)
                   for b, p in zip(before, csp.params))

    def test_utd_zero_is_pure_collection(self, csp, schedule):
        cfg = small_cfg(h_execute=4, utd=0, warmup_steps=16,
                        total_env_steps=96)
        sac = init_sac(4, 16, cfg, RngStream(92))
        actor_before = [p.data.copy() for p in sac.actor.params]
        critic_before = [p.data.copy() for p in sac.critics.params]
        res = finetune_loop(self.make_env(), sac, csp, schedule, cfg,
                            RngStream(93))
        assert all(np.array_equal(a, p.data)
                   for a, p in zip(actor_before, sac.actor.params))
        assert all(np.array_equal(c, p.data)
                   for c, p in zip(critic_before, sac.critics.params))
        assert sac.alpha_z == 1.0 and sac.alpha_u == 1.0
        assert all(row["critic_loss"] == 0.0 for row in res.metrics)

    def test_divergence_detector_halts(self, csp, schedule, monkeypatch):
        monkeypatch.setattr(loop_mod, "critic_update",
                            lambda sac, batch, rng: 2e6)
        _, cfg, res = self.run_loop(csp, schedule, seed=94)
        assert res.halted
        assert res.env_steps < cfg.total_env_steps
        assert len(res.metrics) >= 1

    def test_offline_mix_flag_is_interface_only(self, csp, schedule):
        cfg = small_cfg(offline_mix=True)
        sac = init_sac(4, 16, cfg, RngStream(95))
        with pytest.raises(NotImplementedError):
            finetune_loop(self.make_env(), sac, csp, schedule, cfg,
                          RngStream(96))

    def test_tmrl_mode_requires_schedule(self, csp):
        cfg = small_cfg()
        sac = init_sac(4, 16, cfg, RngStream(97))
        with pytest.raises(ValueError):
            finetune_loop(self.make_env(), sac, csp, None, cfg, RngStream(98))

    def test_u_trace_rows_cover_every_decision(self, csp, schedule):
        _, _, res = self.run_loop(csp, schedule, seed=99)
        episodes = {row["episode"] for row in res.metrics}
        assert {e for (e, _, _) in res.u_trace} == episodes
        for e in episodes:
            idx = [i for (ep, i, _) in res.u_trace if ep == e]
            assert idx == list(range(len(idx)))


class TestMazeEnv:
    def test_context_is_normalized_observation(self):
        spec = parse_maze(OPEN_ROOM)
        norm = Normalizer(np.full(4, 2.0), np.full(4, 4.0))
        env = MazeEnv(spec, norm, horizon=10)
        state = env.reset(RngStream(100))
        assert np.allclose(env.context(state),
                           (state.observation() - 2.0) / 4.0)

    def test_bad_horizon_rejected(self):
        with pytest.raises(ValueError):
            MazeEnv(parse_maze(OPEN_ROOM), Normalizer.identity(4), horizon=0)
