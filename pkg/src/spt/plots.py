"""SVG figures for metric curves and placement proportions."""

from __future__ import annotations

__all__ = ["write_accuracy_svg", "write_patterns_svg"]


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def write_accuracy_svg(records, path) -> None:
    plt = _pyplot()
    steps = [r["step"] for r in records]
    accs = [r["val_top1"] for r in records]
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(steps, accs, marker="o", lw=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("val top-1")
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def write_patterns_svg(report, path) -> None:
    plt = _pyplot()
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3))
    blocks = sorted(report.block_share)
    ax1.bar([str(b) for b in blocks], [report.block_share[b] for b in blocks], color="#4878a8")
    ax1.set_xlabel("block")
    ax1.set_ylabel("share of selected connections")
    roles = list(report.role_share)
    ax2.bar(roles, [report.role_share[r] for r in roles], color="#a87848")
    ax2.set_xlabel("matrix role")
    for ax in (ax1, ax2):
        ax.set_ylim(0, 1.0)
        ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
