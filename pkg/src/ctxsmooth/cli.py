"""Command-line workflow: data, pretraining, fine-tuning, eval, theory, export.

Every verb reads one INI config, applies the --seed/--out/--mode overrides,
and writes its artifacts plus a resolved-config copy and a JSON run manifest
into the output directory, so any file can be traced back to the exact
inputs that produced it. Artifacts other than figures and manifests are
byte-identical across reruns with the same config and seed.

Exit codes: 0 success, 1 assertion or bound violation, 2 config error,
3 I/O or checkpoint-format error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import re
import sys
import time

import numpy as np

from .analysis import (BoundReport, BoundRow, GaussianFamily, expected_norm,
                       success_at_k, verify_corollary, verify_theorem1)
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, load_config
from .data import load_trajectories, make_chunks, save_trajectories
from .diffusion import SmoothingLevel, corrupt, linear_beta_schedule
from .envs import (UnitCircleTask, circle_trajectories, eval_maze,
                   generate_dataset, maze_reset, parse_maze, train_maze)
from .flow import FlowPolicy, load_policy, sample_actions, save_policy
from .numerics import RngStream
from .plotting import (render_band_series, render_bound_rows,
                       render_coverage_tables, render_series)
from .pretrain import PretrainConfig, pretrain
from .tmrl import FinetuneConfig, MazeEnv, finetune_loop, init_sac, save_actor

EXIT_OK = 0
EXIT_VIOLATION = 1
EXIT_CONFIG = 2
EXIT_IO = 3

_BOUND_TOL = 1e-12
_ROLL_WINDOW = 20

logger = logging.getLogger(__name__)


def _maze_spec(name: str):
    if name == "train":
        return train_maze()
    if name == "eval":
        return eval_maze()
    with open(name) as fh:
        return parse_maze(fh.read())


def _resolve(cfg: RunConfig, name: str) -> str:
    """Paths in the config are relative to the output directory."""
    if os.path.isabs(name):
        return name
    return os.path.join(cfg.out_dir, name)


class RunWriter:
    """Tracks a verb's artifacts and seals them behind a run manifest.

    The manifest is written last, via an atomic rename, so its presence
    means every listed artifact is complete.
    """

    def __init__(self, cfg: RunConfig, command: str, tag: str = ""):
        self.cfg = cfg
        self.command = command
        self.suffix = f"_{tag}" if tag else ""
        self.out_dir = cfg.out_dir
        self.started = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
        self.artifacts: list[str] = []
        os.makedirs(self.out_dir, exist_ok=True)

    def path(self, name: str) -> str:
        self.artifacts.append(name)
        return os.path.join(self.out_dir, name)

    def finish(self) -> None:
        cfg_name = f"config_{self.command}{self.suffix}.ini"
        with open(os.path.join(self.out_dir, cfg_name), "w") as fh:
            fh.write(self.cfg.resolved_text())
        manifest = {
            "command": self.command,
            "config": cfg_name,
            "config_sha256": self.cfg.digest(),
            "started": self.started,
            "finished": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
            "artifacts": sorted(self.artifacts),
        }
        name = f"manifest_{self.command}{self.suffix}.json"
        tmp = os.path.join(self.out_dir, name + ".tmp")
        with open(tmp, "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, os.path.join(self.out_dir, name))


def _rolling_mean(xs, window: int):
    out = []
    for i in range(len(xs)):
        lo = max(0, i - window + 1)
        out.append(sum(xs[lo:i + 1]) / (i - lo + 1))
    return out


def cmd_gen_data(cfg: RunConfig, args) -> int:
    d = cfg["data"]
    rng = RngStream(cfg.seed).derive(1)
    w = RunWriter(cfg, "gen_data")
    if d["task"] == "maze":
        spec = _maze_spec(d["maze"])
        trajs = generate_dataset(spec, d["episodes"], rng,
                                 horizon=d["horizon"],
                                 noise_std=d["noise_std"])
    elif d["task"] == "circle":
        task = UnitCircleTask((d["theta_lo"], d["theta_hi"]),
                              d["circle_noise_std"], d["n_points"])
        trajs = circle_trajectories(task, rng)
    else:
        raise ConfigError(
            f"[data] task must be 'maze' or 'circle', got {d['task']!r}")
    if not trajs:
        logger.warning("dataset is empty; writing zero records")
    out = w.path(d["file"])
    save_trajectories(out, trajs)
    w.finish()
    print(f"gen-data: wrote {len(trajs)} trajectories to {out}")
    return EXIT_OK


def cmd_pretrain(cfg: RunConfig, args) -> int:
    p = cfg["pretrain"]
    mode = p["mode"]
    w = RunWriter(cfg, "pretrain", tag=mode)
    trajs = load_trajectories(_resolve(cfg, p["dataset"]))
    if not trajs:
        raise ConfigError("dataset is empty; nothing to pretrain on")
    ds = make_chunks(trajs, p["horizon"])
    rng = RngStream(cfg.seed).derive(2)
    policy = FlowPolicy(ds.context_dim, ds.action_dim, ds.horizon,
                        rng.derive(0), hidden=p["hidden"],
                        emb_dim=p["emb_dim"])
    # bc and cfg never corrupt, but the schedule still rides along in the
    # checkpoint so every policy can be smoothed at evaluation time
    schedule = linear_beta_schedule(p["schedule_steps"], p["beta_start"],
                                    p["beta_end"])
    pcfg = PretrainConfig(epochs=p["epochs"], batch_size=p["batch_size"],
                          learning_rate=p["learning_rate"],
                          horizon=p["horizon"], mode=mode,
                          dropout=p["dropout"],
                          sigma_sampler=p["sigma_sampler"],
                          weight_decay=p["weight_decay"], beta1=p["beta1"],
                          beta2=p["beta2"])
    policy, trace = pretrain(ds, policy, schedule, pcfg, rng.derive(1))
    ckpt = w.path(f"policy_{mode}.ckpt")
    save_policy(ckpt, policy, schedule, ds.normalizer, mode)
    with open(w.path(f"pretrain_loss_{mode}.jsonl"), "w") as fh:
        for i, loss in enumerate(trace):
            fh.write(json.dumps({"epoch": i, "loss": loss}) + "\n")
    render_series(w.path(f"pretrain_loss_{mode}.png"),
                  list(range(len(trace))), trace, "epoch", "loss",
                  f"pretraining loss ({mode})")
    w.finish()
    if len(trace) < pcfg.epochs:
        print(f"pretrain: stopped after {len(trace)} epochs on non-finite "
              f"loss; last good parameters saved to {ckpt}")
        return EXIT_VIOLATION
    tail = f", final loss {trace[-1]:.6f}" if trace else ""
    print(f"pretrain: {mode} for {len(trace)} epochs{tail} -> {ckpt}")
    return EXIT_OK


_CKPT_FOR_MODE = {"tmrl": "policy_csp.ckpt", "dsrl": "policy_bc.ckpt",
                  "tmrl-cfg": "policy_cfg.ckpt"}


def cmd_finetune(cfg: RunConfig, args) -> int:
    f = cfg["finetune"]
    mode = f["mode"]
    if mode not in _CKPT_FOR_MODE:
        raise ConfigError(f"[finetune] mode must be one of "
                          f"{sorted(_CKPT_FOR_MODE)}, got {mode!r}")
    tag = f"{mode}_s{cfg.seed}"
    w = RunWriter(cfg, "finetune", tag=tag)
    ckpt_path = _resolve(cfg, f["checkpoint"] or _CKPT_FOR_MODE[mode])
    if not os.path.exists(ckpt_path):
        print(f"finetune: checkpoint not found: {ckpt_path}",
              file=sys.stderr)
        return EXIT_IO
    policy, schedule, normalizer, _ = load_policy(ckpt_path)
    env = MazeEnv(_maze_spec(f["maze"]), normalizer, horizon=f["horizon"])
    fcfg = FinetuneConfig(
        mode=mode, gamma=f["gamma"], h_execute=f["h_execute"],
        z_bound=f["z_bound"], u_bound=f["u_bound"], w_bound=f["w_bound"],
        target_entropy_z=f["target_entropy_z"],
        target_entropy_u=f["target_entropy_u"], utd=f["utd"],
        warmup_steps=f["warmup_steps"], learning_rate=f["learning_rate"],
        tau=f["tau"], n_critics=f["n_critics"],
        n_target_min=f["n_target_min"], hidden=f["hidden"],
        batch_size=f["batch_size"], buffer_capacity=f["buffer_capacity"],
        total_env_steps=f["total_env_steps"], offline_mix=f["offline_mix"])
    rng = RngStream(cfg.seed).derive(3)
    sac = init_sac(policy.context_dim, policy.latent_dim, fcfg,
                   rng.derive(0))
    res = finetune_loop(env, sac, policy, schedule, fcfg, rng.derive(1))

    metrics_path = w.path(f"metrics_{tag}.jsonl")
    with open(metrics_path, "w") as fh:
        for row in res.metrics:
            fh.write(json.dumps(row) + "\n")
    with open(w.path(f"u_trace_{tag}.csv"), "w", newline="") as fh:
        cw = csv.writer(fh)
        cw.writerow(["episode", "decision_index", "u"])
        for ep, di, u in res.u_trace:
            cw.writerow([ep, di, repr(u)])
    save_actor(w.path(f"actor_{tag}.ckpt"), sac)
    steps = [r["step"] for r in res.metrics]
    render_series(w.path(f"learning_{tag}.png"), steps,
                  _rolling_mean([r["success"] for r in res.metrics],
                                _ROLL_WINDOW),
                  "env step", "success (rolling mean)", f"fine-tuning {mode}")
    render_series(w.path(f"mean_u_{tag}.png"), steps,
                  [r["mean_u"] for r in res.metrics], "env step",
                  "mean u per episode", f"fine-tuning {mode}")
    w.finish()
    if res.halted:
        print(f"finetune: halted on critic divergence after {res.env_steps} "
              f"env steps; artifacts written for inspection")
        return EXIT_VIOLATION
    print(f"finetune: {mode} seed {cfg.seed}, {res.env_steps} env steps, "
          f"{len(res.metrics)} episodes -> {metrics_path}")
    return EXIT_OK


def _coverage_runner(policy, schedule, u_level: float, h_execute: int,
                     n_steps: int):
    """One evaluation episode: decode with fresh latents until done."""
    level = None
    if u_level > 0.0:
        level = SmoothingLevel.from_u(u_level, schedule)

    def run(env, start, rng) -> bool:
        state = start
        k = 0
        while True:
            d = rng.derive(k)
            s_obs = env.context(state)
            if level is not None:
                s_obs = corrupt(s_obs, level, schedule, d.derive(0))
            z = d.derive(1).standard_normal(policy.latent_dim)
            chunk = sample_actions(policy, s_obs, z, u_level,
                                   n_steps=n_steps)
            for i in range(h_execute):
                res = env.step(state, chunk[i])
                state = res.state
                if res.done:
                    return bool(res.success)
            k += 1

    return run


def cmd_eval_coverage(cfg: RunConfig, args) -> int:
    e = cfg["eval"]
    names = [c.strip() for c in e["checkpoints"].split(",") if c.strip()]
    if not names:
        raise ConfigError("[eval] checkpoints must list at least one "
                          "checkpoint (comma separated)")
    for name in names:
        path = _resolve(cfg, name)
        if not os.path.exists(path):
            print(f"eval-coverage: checkpoint not found: {path}",
                  file=sys.stderr)
            return EXIT_IO
    w = RunWriter(cfg, "eval_coverage")
    rng = RngStream(cfg.seed).derive(4)
    spec = _maze_spec(e["maze"])
    # one start set, shared across checkpoints, so curves stay paired
    start_rng = rng.derive(0)
    starts = [maze_reset(spec, start_rng.derive(i), e["horizon"])
              for i in range(e["n_starts"])]
    tables = {}
    for name in names:
        policy, schedule, normalizer, _ = load_policy(_resolve(cfg, name))
        env = MazeEnv(spec, normalizer, horizon=e["horizon"])
        runner = _coverage_runner(policy, schedule, e["sigma"],
                                  e["h_execute"], e["n_euler_steps"])
        table = success_at_k(runner, env, starts, e["k_max"], rng.derive(1))
        stem = os.path.splitext(os.path.basename(name))[0]
        table.write_csv(w.path(f"coverage_{stem}.csv"))
        tables[stem] = (table.ks, table.fractions)
        print(f"eval-coverage: {stem} success@K "
              + " ".join(f"{k}:{frac:.3f}"
                         for k, frac in zip(table.ks, table.fractions)))
    render_coverage_tables(w.path("coverage.png"), tables)
    w.finish()
    return EXIT_OK


def cmd_verify_theory(cfg: RunConfig, args) -> int:
    t = cfg["theory"]
    w = RunWriter(cfg, "verify_theory")
    scale = t["bound_scale"]
    sig_grid = np.linspace(t["sigma_lo"], t["sigma_hi"], t["n_sigma"])
    del_grid = np.linspace(t["delta_lo"], t["delta_hi"], t["n_delta"])
    failure = None
    for d in t["dims"]:
        family = GaussianFamily(t["s"], d)
        report = verify_theorem1(family, sig_grid, del_grid)
        if scale != 1.0:
            # violation-detector hook: rescale the bound and re-judge
            rows = tuple(
                BoundRow(r.sigma, r.delta_norm, r.tv, r.overlap,
                         r.bound * scale,
                         r.tv <= r.bound * scale + _BOUND_TOL)
                for r in report.rows)
            report = BoundReport(rows, report.monotone_in_sigma,
                                 report.monotone_in_delta)
        report.write_csv(w.path(f"theory_bounds_d{d}.csv"))
        render_bound_rows(w.path(f"theory_d{d}.png"), report.rows,
                          f"tv vs bound, d={d}")
        if failure is None and not report.ok:
            bad = next((r for r in report.rows if not r.satisfied), None)
            if bad is not None:
                failure = (f"d={d} sigma={bad.sigma!r} "
                           f"delta={bad.delta_norm!r}: tv={bad.tv!r} > "
                           f"bound={bad.bound!r}")
            else:
                failure = f"d={d}: tv not monotone over the grid"

        threshold = expected_norm(d) / t["m"]
        if t["cor_sigma_hi"] < threshold:
            raise ConfigError(
                f"[theory] cor_sigma_hi {t['cor_sigma_hi']!r} is below the "
                f"d={d} threshold {threshold:.4f}")
        cor_grid = np.linspace(threshold, t["cor_sigma_hi"], t["cor_points"])
        reports = [verify_corollary(family, t["m"], float(s), t["delta"])
                   for s in cor_grid]
        with open(w.path(f"theory_corollary_d{d}.csv"), "w",
                  newline="") as fh:
            cw = csv.writer(fh)
            cw.writerow(["m", "sigma", "delta_norm", "threshold",
                         "tv_base", "tv_smoothed", "overlap_base",
                         "overlap_smoothed", "identifiable",
                         "threshold_met", "asserted", "overlap_increased",
                         "message"])
            for r in reports:
                cw.writerow([repr(r.m), repr(r.sigma), repr(r.delta_norm),
                             repr(r.threshold), repr(r.tv_base),
                             repr(r.tv_smoothed), repr(r.overlap_base),
                             repr(r.overlap_smoothed), int(r.identifiable),
                             int(r.threshold_met), int(r.asserted),
                             int(r.overlap_increased), r.message])
        if failure is None:
            bad = next((r for r in reports if r.message != "ok"), None)
            if bad is not None:
                failure = (f"d={d} sigma={bad.sigma!r} "
                           f"delta={bad.delta_norm!r}: {bad.message}")
    w.finish()
    if failure is not None:
        print(f"verify-theory: FAIL {failure}")
        return EXIT_VIOLATION
    print(f"verify-theory: all bounds hold for d in "
          f"{','.join(str(d) for d in t['dims'])} "
          f"({t['n_sigma']}x{t['n_delta']} grid, "
          f"{t['cor_points']} corollary points)")
    return EXIT_OK


_METRICS_RE = re.compile(r"metrics_([a-z-]+)_s(\d+)\.jsonl$")
_COVERAGE_RE = re.compile(r"coverage_(.+)\.csv$")


def _read_metrics(path: str) -> list[dict]:
    rows = []
    with open(path) as fh:
        for i, line in enumerate(fh):
            if line.strip():
                try:
                    rows.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise ConfigError(f"{path}:{i + 1}: bad metrics row: "
                                      f"{exc}") from exc
    return rows


def _export_learning(w: RunWriter, mode: str, runs: dict) -> None:
    """Merge per-seed learning curves onto one step grid."""
    curves = {}
    for seed, rows in sorted(runs.items()):
        steps = [r["step"] for r in rows]
        curves[seed] = (steps,
                        _rolling_mean([r["success"] for r in rows],
                                      _ROLL_WINDOW))
    grids = [steps for steps, _ in curves.values()]
    base = min(grids, key=len)
    if any(g != base for g in grids):
        logger.warning("%s: step grids differ across seeds; resampling to "
                       "the coarsest grid (%d points)", mode, len(base))
    stacked = [np.interp(base, steps, ys) if steps != base else np.array(ys)
               for steps, ys in curves.values()]
    mean = np.mean(stacked, axis=0)
    std = np.std(stacked, axis=0)
    with open(w.path(f"export_learning_{mode}.csv"), "w", newline="") as fh:
        cw = csv.writer(fh)
        cw.writerow(["step", "mean_success", "std_success"])
        for s, m, sd in zip(base, mean, std):
            cw.writerow([s, repr(float(m)), repr(float(sd))])
    render_band_series(w.path(f"export_learning_{mode}.png"), base, mean,
                       std, "env step", "success (rolling mean)",
                       f"learning curve ({mode}, {len(runs)} seeds)")


def _export_u(w: RunWriter, mode: str, traces: dict) -> None:
    """Raw merge plus a per-decision-index aggregate of the u traces."""
    raw_path = w.path(f"export_u_raw_{mode}.csv")
    by_index: dict[int, list[float]] = {}
    with open(raw_path, "w", newline="") as fh:
        cw = csv.writer(fh)
        cw.writerow(["seed", "episode", "decision_index", "u"])
        for seed, rows in sorted(traces.items()):
            for ep, di, u in rows:
                cw.writerow([seed, ep, di, repr(u)])
                by_index.setdefault(di, []).append(u)
    idxs = sorted(by_index)
    means = [float(np.mean(by_index[i])) for i in idxs]
    with open(w.path(f"export_u_{mode}.csv"), "w", newline="") as fh:
        cw = csv.writer(fh)
        cw.writerow(["decision_index", "mean_u", "n"])
        for i, m in zip(idxs, means):
            cw.writerow([i, repr(m), len(by_index[i])])
    render_series(w.path(f"export_u_{mode}.png"), idxs, means,
                  "decision index", "mean u", f"smoothing trace ({mode})")


def cmd_export(cfg: RunConfig, args) -> int:
    out_dir = cfg.out_dir
    if not os.path.isdir(out_dir):
        print(f"export: no run directory at {out_dir}", file=sys.stderr)
        return EXIT_IO
    names = sorted(os.listdir(out_dir))
    metrics: dict[str, dict[int, list[dict]]] = {}
    for n in names:
        m = _METRICS_RE.fullmatch(n)
        if m:
            rows = _read_metrics(os.path.join(out_dir, n))
            metrics.setdefault(m.group(1), {})[int(m.group(2))] = rows
    w = RunWriter(cfg, "export")
    exported = 0
    for mode, runs in sorted(metrics.items()):
        if not any(runs.values()):
            logger.warning("%s: metrics files are empty; skipping", mode)
            continue
        _export_learning(w, mode, runs)
        traces = {}
        for seed in runs:
            tpath = os.path.join(out_dir, f"u_trace_{mode}_s{seed}.csv")
            if os.path.exists(tpath):
                with open(tpath, newline="") as fh:
                    rd = csv.reader(fh)
                    next(rd, None)
                    traces[seed] = [(int(ep), int(di), float(u))
                                    for ep, di, u in rd]
        if traces:
            _export_u(w, mode, traces)
        exported += 1
    cov_tables = {}
    for n in names:
        m = _COVERAGE_RE.fullmatch(n)
        if m and not n.startswith("export_"):
            with open(os.path.join(out_dir, n), newline="") as fh:
                rd = csv.reader(fh)
                next(rd, None)
                pairs = [(int(k), float(frac)) for k, frac in rd]
            cov_tables[m.group(1)] = ([k for k, _ in pairs],
                                      [frac for _, frac in pairs])
    if cov_tables:
        with open(w.path("export_coverage.csv"), "w", newline="") as fh:
            cw = csv.writer(fh)
            cw.writerow(["checkpoint", "k", "success_fraction"])
            for stem in sorted(cov_tables):
                ks, fracs = cov_tables[stem]
                for k, frac in zip(ks, fracs):
                    cw.writerow([stem, k, repr(frac)])
        render_coverage_tables(w.path("export_coverage.png"), cov_tables)
        exported += 1
    if exported == 0:
        print(f"export: nothing to export in {out_dir}", file=sys.stderr)
        return EXIT_IO
    w.finish()
    print(f"export: wrote {len(w.artifacts)} files to {out_dir}")
    return EXIT_OK


def _apply_overrides(cfg: RunConfig, args) -> None:
    if args.seed is not None:
        cfg.sections["run"]["seed"] = args.seed
    if args.out is not None:
        cfg.sections["run"]["out_dir"] = args.out
    mode = getattr(args, "mode", None)
    if mode is not None:
        section = "pretrain" if args.command == "pretrain" else "finetune"
        cfg.sections[section]["mode"] = mode


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctxsmooth",
        description="Context-smoothed policies: train, evaluate, verify.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_, with_mode=False):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True,
                       help="path to the INI config")
        p.add_argument("--seed", type=int, default=None,
                       help="override [run] seed")
        p.add_argument("--out", default=None,
                       help="override [run] out_dir")
        if with_mode:
            p.add_argument("--mode", default=None,
                           help="override the section's mode")
        p.set_defaults(func=func)
        return p

    add("gen-data", cmd_gen_data, "generate a demonstration dataset")
    add("pretrain", cmd_pretrain, "train the low-level chunk policy",
        with_mode=True)
    add("finetune", cmd_finetune, "fine-tune the high-level agent online",
        with_mode=True)
    add("eval-coverage", cmd_eval_coverage,
        "best-of-K success on a fixed start set")
    add("verify-theory", cmd_verify_theory,
        "check the smoothing bounds on analytic families")
    add("export", cmd_export, "merge run artifacts into tables and figures")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        _apply_overrides(cfg, args)
        return args.func(cfg, args)
    except ConfigError as exc:
        print(f"{args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"{args.command}: checkpoint error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NotImplementedError as exc:
        print(f"{args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"{args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"{args.command}: i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
