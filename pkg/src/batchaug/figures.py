"""Figure rendering for the report files every subcommand writes.

Each function takes already-computed results and a target path, draws one
PNG with a non-interactive backend, and returns the path.  Figures mirror
the CSV schemas one-to-one so the delimited output stays the source of
truth.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  backend must be set first
import numpy as np  # noqa: E402


def _finish(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def save_train_curves(report, path):
    """Error and loss per epoch from a training report."""
    rows = [r for r in report.rows if not np.isnan(r["val_err"])]
    epochs = [r["epoch"] for r in rows]
    fig, (ax_err, ax_loss) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax_err.plot(epochs, [r["train_err"] for r in rows], label="train err")
    ax_err.plot(epochs, [r["val_err"] for r in rows], label="val err")
    ax_err.set_xlabel("epoch")
    ax_err.set_ylabel("error")
    ax_err.legend()
    ax_loss.plot(epochs, [r["train_loss"] for r in rows], color="tab:red")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("train loss")
    fig.suptitle(f"mode={report.mode}")
    return _finish(fig, path)


def save_trajectory_figure(results, path):
    """Norm decay/growth per trial on a log scale."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for trial, res in enumerate(results):
        ax.semilogy(np.maximum(res.norms, 1e-300),
                    label=f"trial {trial} ({res.verdict})")
    ax.set_xlabel("step")
    ax.set_ylabel("iterate norm")
    ax.legend(fontsize=8)
    return _finish(fig, path)


def save_correlation_figure(reports, path):
    """Median correlation per category, one bar group per network state."""
    fig, ax = plt.subplots(figsize=(6, 4))
    categories = list(reports[0].medians)
    width = 0.8 / len(reports)
    xs = np.arange(len(categories))
    for i, rep in enumerate(reports):
        meds = [rep.medians[c] for c in categories]
        errs = [rep.mads[c] for c in categories]
        ax.bar(xs + i * width, meds, width, yerr=errs, capsize=3,
               label=rep.state_tag)
    ax.set_xticks(xs + width * (len(reports) - 1) / 2)
    ax.set_xticklabels(categories, fontsize=8)
    ax.set_ylabel("median pearson rho")
    ax.axhline(0.0, color="grey", linewidth=0.8)
    ax.legend()
    return _finish(fig, path)


def save_grad_norm_figure(trace, path):
    """Median replica-averaged gradient norm against replica count."""
    meds = trace.medians()
    fig, ax = plt.subplots(figsize=(5, 4))
    ms = list(meds)
    ax.plot(ms, [meds[m] for m in ms], marker="o")
    by_m = {}
    for m, _, norm in trace.rows:
        by_m.setdefault(m, []).append(norm)
    for m in ms:
        ax.scatter([m] * len(by_m[m]), by_m[m], s=8, alpha=0.4,
                   color="tab:grey")
    ax.set_xscale("log", base=2)
    ax.set_xticks(ms, [str(m) for m in ms])
    ax.set_xlabel("replicas per sample")
    ax.set_ylabel("gradient L2 norm")
    return _finish(fig, path)


def save_throughput_figure(rows, path):
    """rows: (batch, median imgs/sec, std)."""
    fig, ax = plt.subplots(figsize=(5, 4))
    batches = [r[0] for r in rows]
    ax.errorbar(batches, [r[1] for r in rows], yerr=[r[2] for r in rows],
                marker="o", capsize=3)
    ax.set_xscale("log", base=2)
    ax.set_xticks(batches, [str(b) for b in batches])
    ax.set_xlabel("batch size")
    ax.set_ylabel("images / second")
    return _finish(fig, path)


def save_distsim_figure(rows, path):
    """Per-worker local norms and the aggregated norm over steps."""
    fig, ax = plt.subplots(figsize=(6, 4))
    workers = sorted({r[1] for r in rows})
    for w in workers:
        sub = [(r[0], r[2]) for r in rows if r[1] == w]
        ax.plot([s for s, _ in sub], [n for _, n in sub], alpha=0.4,
                linewidth=0.8)
    agg = sorted({(r[0], r[3]) for r in rows})
    ax.plot([s for s, _ in agg], [n for _, n in agg], color="black",
            linewidth=1.8, label="aggregated")
    ax.set_xlabel("step")
    ax.set_ylabel("gradient L2 norm")
    ax.legend()
    return _finish(fig, path)
