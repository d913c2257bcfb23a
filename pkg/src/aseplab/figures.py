"""Figure rendering for the report path.

Every experiment with plottable structure gets a PNG next to its
delimited output: scaling runs a log-log moment plot with the fitted
slope, identity runs an overlay of both members with error bars, tail
runs a semilog comparison against the bound.  Rendering is headless
(Agg) and optional at the CLI.
"""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def _fig_scaling(arts, path: Path) -> Path:
    series = arts["series"]
    fit = arts["fit"]
    t = series.t_values
    y = np.array([e.estimate for e in series.estimates])
    err = 3.0 * np.array([e.stderr for e in series.estimates])
    fig, (ax, ax2) = plt.subplots(1, 2, figsize=(9, 3.6))
    ax.errorbar(t, y, yerr=err, fmt="o", capsize=3, label=r"$\hat\Psi(t)$")
    grid = np.linspace(t.min(), t.max(), 64)
    ax.plot(grid, np.exp(fit.intercept) * grid**fit.slope, "-",
            label=f"fit slope {fit.slope:.3f}")
    ax.plot(grid, y[0] * (grid / t[0]) ** (2 / 3), "--", color="gray", label=r"$t^{2/3}$ guide")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("t")
    ax.set_ylabel(r"$E|Q(t) - Vt|$")
    ax.legend(fontsize=8)
    ax2.plot(t, y / t ** (2 / 3), "s-")
    ax2.set_xscale("log")
    ax2.set_xlabel("t")
    ax2.set_ylabel(r"$\hat\Psi(t)\,/\,t^{2/3}$")
    return _save(fig, path)


def _fig_two_point(arts, path: Path) -> Path:
    j = np.asarray(arts["j"])
    fig, ax = plt.subplots(figsize=(5.5, 3.6))
    ax.errorbar(j, arts["cov"], yerr=3 * np.array(arts["cov_se"]), fmt="o",
                capsize=3, label=r"$\mathrm{Cov}[\omega_j(t), \omega_0(0)]$")
    ax.errorbar(j + 0.15, arts["q_scaled"], yerr=3 * np.array(arts["q_se"]), fmt="s",
                capsize=3, label=r"$\rho(1{-}\rho)\,P(Q(t){=}j)$")
    ax.set_xlabel("j")
    ax.legend(fontsize=8)
    return _save(fig, path)


def _fig_identity(arts, path: Path) -> Path:
    lhs, rhs = arts["lhs"], arts["rhs"]
    fig, ax = plt.subplots(figsize=(4.2, 3.6))
    ax.errorbar([0], [lhs.estimate], yerr=[3 * lhs.stderr], fmt="o", capsize=4)
    ax.errorbar([1], [rhs.estimate], yerr=[3 * rhs.stderr], fmt="s", capsize=4)
    ax.set_xticks([0, 1], ["lhs", "rhs"])
    ax.set_xlim(-0.5, 1.5)
    return _save(fig, path)


def _fig_marginal(arts, path: Path) -> Path:
    sites = arts["sites"]
    n = arts["n"]
    sel = np.flatnonzero((arts["hist_new"] + arts["hist_ref"]) > 0)
    lo, hi = sel.min(), sel.max()
    fig, ax = plt.subplots(figsize=(5.5, 3.6))
    ax.step(sites[lo:hi + 1], arts["hist_new"][lo:hi + 1] / n, where="mid",
            label="two-label coupling")
    ax.step(sites[lo:hi + 1], arts["hist_ref"][lo:hi + 1] / n, where="mid", ls="--",
            label="basic coupling")
    ax.set_xlabel("position at t")
    ax.set_ylabel("probability")
    ax.legend(fontsize=8)
    return _save(fig, path)


def _fig_label_tail(arts, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    for side, res in arts["sides"].items():
        ax.semilogy(res.k_values, np.maximum(res.tails, 1e-12), "o-",
                    label=f"{side} tail")
    res = next(iter(arts["sides"].values()))
    ax.semilogy(res.k_values, res.bounds, "k--", label=r"$e^{-2\theta k}$")
    ax.set_xlabel("k")
    ax.set_ylabel("tail probability")
    ax.legend(fontsize=8)
    return _save(fig, path)


def _fig_rw(arts, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(5.5, 3.6))
    for idx, counts, expect, _ in arts["schedules"]:
        n = counts.sum()
        ax.semilogy(np.arange(len(counts)), np.maximum(counts / n, 1e-9), "o-",
                    label=f"schedule {idx}", alpha=0.7)
    idx, counts, expect, _ = arts["schedules"][0]
    ax.semilogy(np.arange(len(expect)), expect / expect.sum(), "k--", label="geometric")
    ax.set_xlabel("-Y(t)")
    ax.set_ylabel("probability")
    ax.legend(fontsize=8)
    return _save(fig, path)


def _fig_oracle(arts, path: Path) -> Path:
    emp, exact = arts["emp"], arts["exact"]
    sel = np.flatnonzero(exact > 1e-12)
    fig, ax = plt.subplots(figsize=(5.5, 3.6))
    w = 0.4
    ax.bar(np.arange(len(sel)) - w / 2, exact[sel], width=w, label="exact")
    ax.bar(np.arange(len(sel)) + w / 2, emp[sel], width=w, label="Monte Carlo")
    ax.set_xlabel("occupancy vector (enumerated)")
    ax.set_ylabel("probability")
    ax.set_title(f"TV = {arts['tv']:.4f}")
    ax.legend(fontsize=8)
    return _save(fig, path)


_RENDERERS = {
    "scaling-psi": _fig_scaling,
    "identity-covariance": _fig_two_point,
    "identity-variance": _fig_identity,
    "identity-derivative": _fig_identity,
    "mean-current": None,
    "mean-q": None,
    "coupling-order": None,
    "coupling-marginal": _fig_marginal,
    "label-tail": _fig_label_tail,
    "rw-environment": _fig_rw,
    "oracle-compare": _fig_oracle,
    "window-doubling": None,
}


def render(arts: dict, out_base: Path) -> Path | None:
    """Render the experiment's figure next to the delimited output, if it has one."""
    fn = _RENDERERS.get(arts.get("kind"))
    if fn is None:
        return None
    return fn(arts, out_base.with_suffix(".png"))


def render_worldlines(traj, path: Path) -> Path:
    """Space-time world lines of a desk-scale trajectory."""
    fig, ax = plt.subplots(figsize=(5.5, 4.2))
    pos = {int(s): [(0.0, int(s))] for s in traj.initial.positions()}
    live = {int(s): int(s) for s in traj.initial.positions()}  # site -> label site
    for t, o, d, eff in zip(traj.times, traj.origins, traj.targets, traj.effected):
        if not eff:
            continue
        label = live.pop(int(o))
        live[int(d)] = label
        pos[label].append((float(t), int(o)))
        pos[label].append((float(t), int(d)))
    for label, pts in pos.items():
        pts.append((float(traj.times[-1]) if len(traj.times) else 0.0, pts[-1][1]))
        arr = np.array(pts)
        ax.plot(arr[:, 1], arr[:, 0], lw=1)
    ax.set_xlabel("site")
    ax.set_ylabel("time")
    return _save(fig, path)
