"""Figure rendering for experiment reports (PNG next to the CSV output)."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

_ARM_STYLE = {
    "cnn": dict(color="tab:blue", label="deep sensing"),
    "llr": dict(color="tab:green", label="optimal (LLR)"),
    "llr_est": dict(color="tab:olive", label="LLR (estimated cov)", linestyle=":"),
    "ed": dict(color="tab:red", label="energy detector", linestyle="--"),
    "same": dict(color="tab:blue", label="same-domain CNN"),
    "cross": dict(color="tab:orange", label="cross-domain CNN"),
    "tca": dict(color="tab:purple", label="MMD-projection transfer"),
    "fine_tune": dict(color="tab:blue", label="fine-tune", marker="o"),
    "scratch": dict(color="tab:orange", label="train from scratch", marker="s"),
}


def _style(arm: str) -> dict:
    return dict(_ARM_STYLE.get(arm, dict(label=arm)))


def save_roc_figure(curves: dict, path, title: str) -> None:
    """curves: arm name -> RocCurve."""
    fig, ax = plt.subplots(figsize=(6.0, 4.5))
    for arm, roc in curves.items():
        ax.plot(roc.pfa, roc.pd, **_style(arm))
    ax.plot([0, 1], [0, 1], color="0.7", linewidth=0.8, zorder=0)
    ax.set_xlabel(r"probability of false alarm $p_{fa}$")
    ax.set_ylabel(r"probability of detection $p_d$")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    ax.legend(loc="lower right")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_sweep_figure(summary, ed_pd: float, pfa_star: float, path, title: str) -> None:
    """summary: rows of (n_examples, arm, mean_pd, std_pd)."""
    fig, ax = plt.subplots(figsize=(6.0, 4.5))
    arms = sorted({row[1] for row in summary})
    for arm in arms:
        pts = [(n, m, s) for n, a, m, s in summary if a == arm]
        pts.sort()
        ns = [p[0] for p in pts]
        means = [p[1] for p in pts]
        stds = [p[2] for p in pts]
        ax.errorbar(ns, means, yerr=stds, capsize=3, **_style(arm))
    ax.axhline(ed_pd, **_style("ed"))
    ax.set_xlabel("labeled target examples")
    ax.set_ylabel(rf"$p_d$ at $p_{{fa}}={pfa_star:g}$")
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    ax.legend(loc="lower right")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
