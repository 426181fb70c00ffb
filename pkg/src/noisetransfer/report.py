"""Optional figures rendered next to the CSV outputs.

Uses the non-interactive Agg backend, so nothing needs a display. PNG
metadata is pinned so re-runs give identical bytes.
"""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

PNG_METADATA = {"Software": None}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=PNG_METADATA)
    plt.close(fig)
    return path


def plot_theory(rows, path):
    """Left: f_bar_mse against f_hat_mse per point. Right: margin histogram."""
    f_hat = np.array([r["f_hat_mse"] for r in rows])
    f_bar = np.array([r["f_bar_mse"] for r in rows])
    holds = np.array([r["holds"] for r in rows], dtype=bool)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 4))
    ax1.scatter(f_hat[holds], f_bar[holds], s=10, c="tab:blue", label="holds")
    ax1.scatter(f_hat[~holds], f_bar[~holds], s=10, c="tab:red", label="fails")
    top = max(f_hat.max(initial=0.0), f_bar.max(initial=0.0)) or 1.0
    ax1.plot([0, top], [0, top], "k--", lw=1)
    ax1.set_xlabel("f_hat_mse")
    ax1.set_ylabel("f_bar_mse")
    ax1.legend(loc="upper left")
    ax2.hist(f_hat - f_bar, bins=30, color="tab:gray")
    ax2.axvline(0, color="k", lw=1)
    ax2.set_xlabel("margin (f_hat_mse - f_bar_mse)")
    ax2.set_ylabel("points")
    return _save(fig, path)


def plot_transfer(rows, path):
    """Per-source transfer rate of both methods."""
    sources = sorted({r["source"] for r in rows})
    rate = {(r["method"], r["source"]): r["transfer_rate"] for r in rows}
    pos = np.arange(len(sources))
    fig, ax = plt.subplots(figsize=(6, 4))
    for k, method in enumerate(("baseline", "noise")):
        ax.bar(pos + (k - 0.5) * 0.4, [rate[method, s] for s in sources], width=0.4, label=method)
    ax.set_xticks(pos)
    ax.set_xticklabels([str(s) for s in sources])
    ax.set_xlabel("source member")
    ax.set_ylabel("transfer rate")
    ax.set_ylim(0, 1)
    ax.legend()
    return _save(fig, path)


def plot_gradcheck(rows, path, tol):
    errs = np.array([max(r["rel_error"], 1e-16) for r in rows])
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.semilogy(np.arange(len(errs)), errs, "o")
    ax.axhline(tol, color="tab:red", lw=1)
    ax.set_xlabel("trial")
    ax.set_ylabel("relative error")
    return _save(fig, path)


def plot_train(rows, path):
    members = [r["member"] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(members, [r["train_accuracy"] for r in rows], "o-", label="train")
    ax.plot(members, [r["test_accuracy"] for r in rows], "s-", label="test")
    ax.set_xlabel("member")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1.05)
    ax.legend()
    return _save(fig, path)
