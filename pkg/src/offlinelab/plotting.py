"""Figures for experiment reports, rendered to files with the Agg backend."""
from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_bias_curve(rows: list[dict], summary: dict, path: Path) -> Path:
    sigma = np.array([r["sigma"] for r in rows])
    bias = np.array([r["bias"] for r in rows])
    fig, ax = plt.subplots(figsize=(5.5, 3.6))
    ax.plot(sigma, bias, label="expected estimate minus truth")
    mc = [r for r in rows if not math.isnan(r["mc_mean"])]
    if mc:
        ax.errorbar([r["sigma"] for r in mc], [r["mc_mean"] - r["sigma"] for r in mc],
                    yerr=[3 * r["mc_se"] for r in mc], fmt="o", ms=3, label="Monte Carlo (3 SE)")
    ax.axvline(summary["argmax_sigma"], color="grey", lw=0.8, ls=":")
    ax.set_xlabel("sigma")
    ax.set_ylabel("bias")
    ax.set_title(f"single-path bias, max {summary['max_bias']:.4f}")
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_ope_sweep(summary: dict, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(5.5, 3.6))
    table = summary["table"]
    for est in sorted({r["estimator"] for r in table}):
        rows = [r for r in table if r["estimator"] == est]
        n = [r["n_paths"] for r in rows]
        ax.plot(n, [r["median"] for r in rows], marker="o", label=f"{est} median")
        ax.fill_between(n, [r["q25"] for r in rows], [r["q75"] for r in rows], alpha=0.2)
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("paths")
    ax.set_ylabel("|estimate - true value|")
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_error_hist(results, path: Path, keys=("is_error", "mb_error")) -> Path:
    fig, ax = plt.subplots(figsize=(5.5, 3.6))
    for k in keys:
        v = np.array([r.metrics[k] for r in results])
        ax.hist(v, bins=50, alpha=0.5, label=k, log=True)
    ax.set_xlabel("absolute error")
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_coverage(summary: dict, path: Path, title: str) -> Path:
    fig, ax = plt.subplots(figsize=(4.0, 3.2))
    rate = summary["failure_rate"]
    ax.bar([0], [rate], color="tab:blue", width=0.5)
    ax.errorbar([0], [rate], yerr=[[rate - summary["wilson_low"]], [summary["wilson_high"] - rate]],
                color="k", capsize=4)
    ax.axhline(summary["delta"], color="tab:red", ls="--", label="allowed failure rate")
    ax.set_xticks([])
    ax.set_ylabel("failure rate")
    ax.set_title(title, fontsize=9)
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_theorem2(summary: dict, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    names = ["favored", "sample mean", "bound"]
    vals = [summary["mse_df"], summary["mse_sm"], summary["bound"]]
    ax.bar(names, vals, yerr=[3 * summary["se_df"], 3 * summary["se_sm"], 0], capsize=4)
    ax.set_ylabel("MSE")
    ax.set_title(f"p={summary['p_i']}, N={summary['N']}", fontsize=9)
    return _save(fig, path)


def plot_gaps(results, path: Path, key: str, title: str) -> Path:
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    ax.hist([r.metrics[key] for r in results], bins=40)
    ax.set_xlabel(key)
    ax.set_title(title, fontsize=9)
    return _save(fig, path)


def experiment_figure(kind: str, results, summary: dict, path: Path) -> Path | None:
    path = Path(path)
    if kind == "bias_curve":
        return plot_bias_curve([r.metrics for r in results], summary, path)
    if kind == "ope_sweep":
        return plot_ope_sweep(summary, path)
    if kind == "is_unbiasedness":
        return plot_error_hist(results, path)
    if kind == "theorem2_mse":
        return plot_theorem2(summary, path)
    if kind == "corollary1_coverage":
        return plot_gaps(results, path, "gap", "suboptimality of the learned policy")
    if "failure_rate" in summary:
        return plot_coverage(summary, path, kind)
    return None
