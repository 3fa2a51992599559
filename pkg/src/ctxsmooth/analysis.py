"""Closed-form verification of the smoothing bounds, plus empirical estimators.

The analytic testbed is the isotropic Gaussian family, where smoothing has an
exact form: convolving N(c, s^2 I) with level-sigma context noise gives
N(c, (s^2 + sigma^2) I). That turns the TV/overlap inequalities into exact
arithmetic that can be swept over grids with zero sampling error. The
empirical side (histogram TV, coverage tables, Gaussian-fit KL) serves
low-dimensional diagnostics of trained policies.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .diffusion import NoiseSchedule, corrupt_batch
from .flow import FlowPolicy, sample_actions
from .numerics import RngStream

__all__ = ["GaussianFamily", "BoundRow", "BoundReport", "CorollaryReport",
           "CoverageTable", "TvEstimate", "OverlapRow", "expected_norm",
           "gaussian_tv_analytic", "verify_theorem1", "verify_corollary",
           "mc_tv_estimate", "smoothed_overlap_curve", "success_at_k",
           "gaussian_kl", "kl_to_target_gaussian"]

_TOL = 1e-12


def expected_norm(d: int) -> float:
    """Mean norm of a d-dimensional standard normal (chi-distribution mean).

    sqrt(2) * Gamma((d+1)/2) / Gamma(d/2), evaluated in log space so large d
    does not overflow.
    """
    if d < 1:
        raise ValueError("dimension must be >= 1")
    return math.sqrt(2.0) * math.exp(math.lgamma((d + 1) / 2.0)
                                     - math.lgamma(d / 2.0))


def gaussian_tv_analytic(delta_norm: float, std: float) -> float:
    """TV distance of two isotropic Gaussians with equal std, mean gap delta.

    The optimal discriminating set is a halfspace through the midpoint, so
    the distance reduces to the 1-D case: erf(delta / (2*sqrt(2)*std)).
    """
    if std <= 0.0:
        raise ValueError("std must be positive")
    if delta_norm < 0.0:
        raise ValueError("delta_norm is a distance, must be >= 0")
    return math.erf(delta_norm / (2.0 * math.sqrt(2.0) * std))


@dataclass(frozen=True)
class GaussianFamily:
    """Conditional family p(.|c) = N(c, std^2 I) on R^dim."""

    std: float
    dim: int

    def __post_init__(self):
        if not (self.std > 0.0 and math.isfinite(self.std)):
            raise ValueError("std must be positive and finite")
        if self.dim < 1:
            raise ValueError("dim must be >= 1")

    def smoothed_std(self, sigma: float) -> float:
        return math.sqrt(self.std * self.std + sigma * sigma)

    def tv(self, delta_norm: float, sigma: float = 0.0) -> float:
        return gaussian_tv_analytic(delta_norm, self.smoothed_std(sigma))


@dataclass(frozen=True)
class BoundRow:
    sigma: float
    delta_norm: float
    tv: float
    overlap: float
    bound: float
    satisfied: bool


@dataclass(frozen=True)
class BoundReport:
    rows: tuple
    monotone_in_sigma: bool
    monotone_in_delta: bool

    @property
    def all_satisfied(self) -> bool:
        return all(r.satisfied for r in self.rows)

    @property
    def ok(self) -> bool:
        return (self.all_satisfied and self.monotone_in_sigma
                and self.monotone_in_delta)

    def write_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sigma", "delta_norm", "tv", "overlap", "bound",
                        "satisfied"])
            for r in self.rows:
                w.writerow([repr(r.sigma), repr(r.delta_norm), repr(r.tv),
                            repr(r.overlap), repr(r.bound),
                            int(r.satisfied)])


def verify_theorem1(family: GaussianFamily, sigma_grid, delta_grid) -> BoundReport:
    """Sweep the TV-Lipschitz bound tv <= E||w||/sigma * ||delta|| exactly.

    Each grid cell compares the closed-form smoothed TV against the bound;
    the report also records whether tv is non-increasing in sigma at fixed
    delta and non-decreasing in delta at fixed sigma.
    """
    sigmas = [float(s) for s in sigma_grid]
    deltas = [float(d) for d in delta_grid]
    if not sigmas or not deltas:
        raise ValueError("grids must be non-empty")
    if any(s <= 0.0 for s in sigmas):
        raise ValueError("sigma grid must be strictly positive")
    if any(d < 0.0 for d in deltas):
        raise ValueError("delta grid must be non-negative")

    coef = expected_norm(family.dim)
    rows = []
    for s in sigmas:
        for d in deltas:
            tv = family.tv(d, s)
            bound = coef / s * d
            rows.append(BoundRow(s, d, tv, 1.0 - tv, bound,
                                 tv <= bound + _TOL))

    def tv_at(s, d):
        return family.tv(d, s)

    mono_sigma = all(
        tv_at(hi, d) <= tv_at(lo, d) + _TOL
        for d in deltas
        for lo, hi in zip(sorted(sigmas), sorted(sigmas)[1:]))
    mono_delta = all(
        tv_at(s, lo) <= tv_at(s, hi) + _TOL
        for s in sigmas
        for lo, hi in zip(sorted(deltas), sorted(deltas)[1:]))
    return BoundReport(tuple(rows), mono_sigma, mono_delta)


@dataclass(frozen=True)
class CorollaryReport:
    m: float
    sigma: float
    delta_norm: float
    threshold: float
    tv_base: float
    tv_smoothed: float
    overlap_base: float
    overlap_smoothed: float
    identifiable: bool
    threshold_met: bool
    asserted: bool
    overlap_increased: bool
    message: str


def verify_corollary(family: GaussianFamily, m: float, sigma: float,
                     delta_norm: float) -> CorollaryReport:
    """Check the overlap-increase guarantee at one (m, sigma, pair) point.

    Gates first: the pair must be m-identifiable (unsmoothed tv >= m*delta)
    and sigma must clear the threshold E||w||/m. Only then is the overlap
    comparison asserted; otherwise the report says which gate failed and
    leaves the assertion off.
    """
    if m <= 0.0:
        raise ValueError("identifiability slope m must be positive")
    if sigma <= 0.0:
        raise ValueError("sigma must be positive")
    if delta_norm < 0.0:
        raise ValueError("delta_norm must be >= 0")

    tv0 = family.tv(delta_norm, 0.0)
    tv1 = family.tv(delta_norm, sigma)
    threshold = expected_norm(family.dim) / m
    identifiable = tv0 >= m * delta_norm - _TOL
    threshold_met = sigma >= threshold - _TOL
    asserted = identifiable and threshold_met
    increased = asserted and (1.0 - tv1) >= (1.0 - tv0) - _TOL
    if not identifiable:
        message = "identifiability not met"
    elif not threshold_met:
        message = "threshold not met"
    else:
        message = "ok" if increased else "overlap decreased"
    return CorollaryReport(m, sigma, delta_norm, threshold, tv0, tv1,
                           1.0 - tv0, 1.0 - tv1, identifiable, threshold_met,
                           asserted, increased, message)


@dataclass(frozen=True)
class TvEstimate:
    tv: float
    se: float


def _cell_ids(x: np.ndarray, lows: np.ndarray, highs: np.ndarray,
              bins: int) -> tuple[np.ndarray, float]:
    """Flatten points to histogram cell ids; out-of-box points share one
    extra cell so both estimates stay normalized over the same partition."""
    inside = np.all((x >= lows) & (x <= highs), axis=1)
    scaled = (x - lows) / (highs - lows) * bins
    idx = np.clip(scaled.astype(np.int64), 0, bins - 1)
    flat = np.zeros(len(x), dtype=np.int64)
    for k in range(x.shape[1]):
        flat = flat * bins + idx[:, k]
    flat[~inside] = bins ** x.shape[1]
    return flat, 1.0 - float(inside.mean())


def mc_tv_estimate(sampler_p, sampler_q, n_samples: int, bins_per_dim: int,
                   support_box, rng: RngStream,
                   n_bootstrap: int = 50) -> TvEstimate:
    """Histogram TV between two samplers, with a bootstrap standard error.

    Samplers are callables (n, rng) -> [n, d] arrays. The support box is a
    sequence of (low, high) pairs, one per dimension, d <= 3; more than 5%
    of either sample set outside the box is an error. The bootstrap
    resamples points (as cell ids) with replacement, independently per set.
    """
    box = np.asarray(support_box, dtype=np.float64)
    if box.ndim != 2 or box.shape[1] != 2 or not 1 <= box.shape[0] <= 3:
        raise ValueError("support_box must be 1-3 (low, high) pairs")
    lows, highs = box[:, 0], box[:, 1]
    if np.any(highs <= lows):
        raise ValueError("each box side needs high > low")
    if n_samples < 1 or bins_per_dim < 1:
        raise ValueError("n_samples and bins_per_dim must be >= 1")
    d = box.shape[0]

    def draw(sampler, r, name):
        x = np.asarray(sampler(n_samples, r), dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        if x.shape != (n_samples, d):
            raise ValueError(f"{name} returned shape {x.shape}, "
                             f"expected {(n_samples, d)}")
        ids, overflow = _cell_ids(x, lows, highs, bins_per_dim)
        if overflow > 0.05:
            raise ValueError(f"{overflow:.1%} of {name} samples fall outside "
                             "the support box")
        return ids

    ids_p = draw(sampler_p, rng.derive(0), "sampler_p")
    ids_q = draw(sampler_q, rng.derive(1), "sampler_q")
    n_cells = bins_per_dim ** d + 1

    def tv_of(a, b):
        p = np.bincount(a, minlength=n_cells) / n_samples
        q = np.bincount(b, minlength=n_cells) / n_samples
        return 0.5 * float(np.abs(p - q).sum())

    boot_rng = rng.derive(2)
    reps = np.empty(n_bootstrap)
    for r in range(n_bootstrap):
        br = boot_rng.derive(r)
        ip = br.integers(0, n_samples, size=n_samples)
        iq = br.integers(0, n_samples, size=n_samples)
        reps[r] = tv_of(ids_p[ip], ids_q[iq])
    return TvEstimate(tv_of(ids_p, ids_q), float(reps.std(ddof=1)))


@dataclass(frozen=True)
class OverlapRow:
    pair_index: int
    u: float
    tv: float
    se: float
    overlap: float


def smoothed_overlap_curve(policy: FlowPolicy, schedule: NoiseSchedule,
                           context_pairs, u_grid, n_samples: int,
                           support_box, rng: RngStream,
                           bins_per_dim: int = 8,
                           n_steps: int = 10) -> list[OverlapRow]:
    """Measure how smoothing changes action-distribution overlap, per pair.

    For each context pair and level u, draws n_samples actions at each
    context with its conditioning independently corrupted to level u per
    sample (the smoothed policy is a mixture over corruption draws), then
    histogram-estimates TV between the two sample clouds.
    """
    rows = []
    levels = [float(u) for u in u_grid]
    for i, (c_a, c_b) in enumerate(context_pairs):
        for j, u in enumerate(levels):

            def make_sampler(ctx):
                ctx = np.asarray(ctx, dtype=np.float64)

                def sampler(n, r):
                    tiled = np.repeat(ctx[None], n, axis=0)
                    smoothed = corrupt_batch(tiled, np.full(n, u), schedule,
                                             r.derive(0))
                    z = r.derive(1).standard_normal((n, policy.latent_dim))
                    return sample_actions(policy, smoothed, z, u,
                                          n_steps).reshape(n, -1)

                return sampler

            est = mc_tv_estimate(make_sampler(c_a), make_sampler(c_b),
                                 n_samples, bins_per_dim, support_box,
                                 rng.derive(i * len(levels) + j))
            rows.append(OverlapRow(i, u, est.tv, est.se, 1.0 - est.tv))
    return rows


@dataclass(frozen=True)
class CoverageTable:
    ks: tuple
    fractions: tuple

    def __post_init__(self):
        if any(b < a for a, b in zip(self.ks, self.ks[1:])):
            raise ValueError("K column must be increasing")
        if any(not 0.0 <= f <= 1.0 for f in self.fractions):
            raise ValueError("fractions must lie in [0, 1]")
        if any(b < a - _TOL for a, b in zip(self.fractions,
                                            self.fractions[1:])):
            raise ValueError("success@K cannot decrease in K")

    def write_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k", "success_fraction"])
            for k, f in zip(self.ks, self.fractions):
                w.writerow([k, repr(f)])


def success_at_k(runner, env, start_set, k_max: int,
                 rng: RngStream) -> CoverageTable:
    """Fraction of starts solved within the first K of k_max rollouts.

    runner(env, start, rng) -> bool runs one episode. K doubles from 1 up
    to k_max (k_max itself is always reported). Rollout j for start i uses
    the substream rng.derive(i).derive(j), so tables are reproducible and
    extending k_max keeps earlier columns unchanged.
    """
    starts = list(start_set)
    if not starts:
        raise ValueError("start_set must be non-empty")
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    wins = np.zeros((len(starts), k_max), dtype=bool)
    for i, start in enumerate(starts):
        s_rng = rng.derive(i)
        for j in range(k_max):
            wins[i, j] = bool(runner(env, start, s_rng.derive(j)))
    ks = []
    k = 1
    while k <= k_max:
        ks.append(k)
        k *= 2
    if ks[-1] != k_max:
        ks.append(k_max)
    any_win = np.maximum.accumulate(wins, axis=1)
    fracs = [float(any_win[:, k - 1].mean()) for k in ks]
    return CoverageTable(tuple(ks), tuple(fracs))


def gaussian_kl(mean0, cov0, mean1, cov1) -> float:
    """KL(N0 || N1) in closed form; raises on non-positive-definite inputs."""
    mu0 = np.atleast_1d(np.asarray(mean0, dtype=np.float64))
    mu1 = np.atleast_1d(np.asarray(mean1, dtype=np.float64))
    s0 = np.atleast_2d(np.asarray(cov0, dtype=np.float64))
    s1 = np.atleast_2d(np.asarray(cov1, dtype=np.float64))
    d = mu0.shape[0]
    if mu1.shape != (d,) or s0.shape != (d, d) or s1.shape != (d, d):
        raise ValueError("mean/covariance shapes do not agree")
    try:
        chol1 = np.linalg.cholesky(s1)
        _, logdet0 = np.linalg.slogdet(s0)
        _, logdet1 = np.linalg.slogdet(s1)
        if not (np.isfinite(logdet0) and np.isfinite(logdet1)):
            raise np.linalg.LinAlgError
        inv1 = np.linalg.inv(s1)
    except np.linalg.LinAlgError as exc:
        raise ValueError("covariance must be positive definite") from exc
    del chol1  # only needed as the PD gate
    gap = mu1 - mu0
    return 0.5 * (float(np.trace(inv1 @ s0)) + float(gap @ inv1 @ gap)
                  - d + logdet1 - logdet0)


def kl_to_target_gaussian(samples, target_mean, target_cov) -> float:
    """Gaussian plug-in KL: fit (mean, ridged covariance), compare closed form.

    Measures KL(target || fitted), so a sample cloud that fails to cover the
    target is penalized; a cloud that merely over-spreads is penalized far
    less. The 1e-6 ridge keeps tight sample clouds invertible; a covariance
    still singular after the ridge is an error.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n, d = x.shape
    if n < d + 2:
        raise ValueError(f"need at least {d + 2} samples for a rank-{d} fit")
    mu = x.mean(axis=0)
    cov = np.atleast_2d(np.cov(x, rowvar=False, ddof=1)) + 1e-6 * np.eye(d)
    return gaussian_kl(np.asarray(target_mean, dtype=np.float64),
                       np.asarray(target_cov, dtype=np.float64), mu, cov)
