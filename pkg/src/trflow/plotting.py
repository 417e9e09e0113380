"""Figure rendering for the report path of the CLI.

Renders the monitored time series from a list of DiagnosticsRecord into
PNG files next to the delimited output.  Uses the Agg backend so runs
work headless.
"""

from __future__ import annotations

import math

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def _finite(ts, ys):
    ts = np.asarray(ts, dtype=float)
    ys = np.asarray(ys, dtype=float)
    keep = np.isfinite(ts) & np.isfinite(ys)
    return ts[keep], ys[keep]


def render_figures(records, outdir, baseline=None, fit=None) -> list:
    """Write decay, norm, spectrum and residual figures; returns the paths."""
    ts = [r.t for r in records]
    written = []

    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    t_pos, h2 = _finite(ts, [r.int_H2 for r in records])
    mask = h2 > 0
    ax.semilogy(t_pos[mask], h2[mask], "-", lw=1.2, label=r"$\int |H|^2$")
    t_o, o2 = _finite(ts, [r.int_omega2 for r in records])
    mo = o2 > 0
    if mo.any():
        ax.semilogy(t_o[mo], o2[mo], "--", lw=1.0, label=r"$\int |\omega|^2$")
    if fit is not None and mask.sum() > 1:
        rate, r2 = fit
        t_ref = t_pos[mask]
        y0 = h2[mask][0]
        ax.semilogy(t_ref, y0 * np.exp(-rate * (t_ref - t_ref[0])), ":", lw=1.0,
                    label=f"fit rate {rate:.3g} (R$^2$={r2:.4f})")
    ax.set_xlabel("t")
    ax.set_ylabel("L2 norms")
    ax.legend(loc="best", fontsize=8)
    ax.set_title("decay of the mean curvature")
    fig.tight_layout()
    p = f"{outdir}/decay.png"
    fig.savefig(p, dpi=130)
    plt.close(fig)
    written.append(p)

    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    for attr, label in (("sup_A2", r"$\sup|A|^2$"), ("sup_H2", r"$\sup|H|^2$"),
                        ("sup_omega2", r"$\sup|\omega|^2$")):
        tt, yy = _finite(ts, [getattr(r, attr) for r in records])
        ax.plot(tt, yy, lw=1.1, label=label)
    ax.set_xlabel("t")
    ax.legend(loc="best", fontsize=8)
    ax.set_title("pointwise monitors")
    fig.tight_layout()
    p = f"{outdir}/norms.png"
    fig.savefig(p, dpi=130)
    plt.close(fig)
    written.append(p)

    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    for attr, label in (("lambda0", r"$\lambda_1^0$"), ("rho1", r"$\rho_1$"),
                        ("lambda11", r"$\lambda_1^1$")):
        tt, yy = _finite(ts, [getattr(r, attr) for r in records])
        ax.plot(tt, yy, lw=1.1, label=label)
    if baseline is not None and len(records):
        mu = np.asarray([r.mu for r in records])
        ax.plot(ts, baseline.lambda11_0 * np.exp(-3 * mu), "k:", lw=0.9,
                label="envelope")
        ax.plot(ts, baseline.lambda11_0 * np.exp(3 * mu), "k:", lw=0.9)
    ax.set_xlabel("t")
    ax.legend(loc="best", fontsize=8)
    ax.set_title("eigenvalues (interpolated between recomputations)")
    fig.tight_layout()
    p = f"{outdir}/spectrum.png"
    fig.savefig(p, dpi=130)
    plt.close(fig)
    written.append(p)

    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    keys = sorted(records[0].res_identities) if records else []
    for k in keys:
        tt, yy = _finite(ts, [r.res_identities.get(k, math.nan) for r in records])
        good = yy > 0
        if good.any():
            ax.semilogy(tt[good], yy[good], lw=1.0, label=k)
    ax.set_xlabel("t")
    ax.set_ylabel("sup residual")
    ax.legend(loc="best", fontsize=7)
    ax.set_title("structural identity residuals")
    fig.tight_layout()
    p = f"{outdir}/residuals.png"
    fig.savefig(p, dpi=130)
    plt.close(fig)
    written.append(p)
    return written
