"""Headless figure rendering for the CLI's report paths.

Every figure is a companion rendering of a delimited artifact written next
to it; the CSV/JSONL files are the contract, the PNGs a convenience. The
Agg backend keeps runs display-free.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

__all__ = ["render_series", "render_band_series", "render_coverage_tables",
           "render_bound_rows"]


def render_series(path: str, x, y, xlabel: str, ylabel: str,
                  title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(x, y)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_band_series(path: str, x, mean, std, xlabel: str, ylabel: str,
                       title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(x, mean)
    lo = [m - s for m, s in zip(mean, std)]
    hi = [m + s for m, s in zip(mean, std)]
    ax.fill_between(x, lo, hi, alpha=0.25, linewidth=0)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_coverage_tables(path: str, tables: dict) -> None:
    """tables: name -> (ks, fractions)."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, (ks, fracs) in sorted(tables.items()):
        ax.plot(ks, fracs, marker="o", label=name)
    ax.set_xscale("log", base=2)
    ax.set_xlabel("K rollouts")
    ax.set_ylabel("success@K")
    ax.set_ylim(-0.02, 1.02)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_bound_rows(path: str, rows, title: str = "") -> None:
    """rows: BoundRow-like objects grouped into tv-vs-bound curves per sigma."""
    by_sigma = {}
    for r in rows:
        by_sigma.setdefault(r.sigma, []).append(r)
    fig, ax = plt.subplots(figsize=(6, 4))
    for sigma, group in sorted(by_sigma.items()):
        group = sorted(group, key=lambda r: r.delta_norm)
        deltas = [r.delta_norm for r in group]
        ax.plot(deltas, [r.tv for r in group], label=f"tv, sigma={sigma:g}")
        ax.plot(deltas, [r.bound for r in group], linestyle="--",
                label=f"bound, sigma={sigma:g}")
    ax.set_xlabel("context distance")
    ax.set_ylabel("total variation")
    ax.set_ylim(0.0, 1.05)
    if title:
        ax.set_title(title)
    if len(by_sigma) <= 5:
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
