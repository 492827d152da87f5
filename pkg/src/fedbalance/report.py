"""Run outputs: delimited files, a JSON report, and rendered figures.

The CSV and JSON files are the machine-readable contract; the matplotlib
figures rendered next to them are for eyeballing the same numbers.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import TYPE_CHECKING

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

if TYPE_CHECKING:
    from .harness import RunReport


def _ensure_dir(out_dir) -> Path:
    path = Path(out_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _round_csv_rows(rep: "RunReport") -> tuple[list[str], list[list]]:
    q = len(rep.rounds[0]["true_counts"])
    header = [
        "round",
        "mean_client_loss",
        "loss_kind",
        "mitigation_active",
        "decision",
        "status",
        "cs_estimate_truth",
        *[f"true_{c}" for c in range(q)],
        *[f"est_{c}" for c in range(q)],
        *[f"surviving_{c}" for c in range(q)],
    ]
    rows = []
    for r in rep.rounds:
        est = r["est_counts"] if r["est_counts"] is not None else [""] * q
        surviving = r["surviving_counts"] if r["surviving_counts"] is not None else [""] * q
        rows.append(
            [
                r["round"],
                r["mean_client_loss"],
                r["loss_kind"],
                r["mitigation_active"],
                r["decision"],
                r["status"],
                "" if r["cs_estimate_truth"] is None else r["cs_estimate_truth"],
                *r["true_counts"],
                *est,
                *surviving,
            ]
        )
    return header, rows


def write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)


def write_run_outputs(rep: "RunReport", out_dir) -> None:
    out = _ensure_dir(out_dir)
    with open(out / "report.json", "w", encoding="utf-8") as f:
        json.dump(rep.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    header, rows = _round_csv_rows(rep)
    write_csv(out / "rounds.csv", header, rows)
    render_run_figures(rep, out)


def render_run_figures(rep: "RunReport", out_dir) -> None:
    out = _ensure_dir(out_dir)
    rounds = [r["round"] for r in rep.rounds]

    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(rounds, [r["mean_client_loss"] for r in rep.rounds], marker=".")
    ax.set_xlabel("round")
    ax.set_ylabel("mean client training loss")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out / "training_loss.png", dpi=120)
    plt.close(fig)

    cs = [
        (r["round"], r["cs_estimate_truth"])
        for r in rep.rounds
        if r["cs_estimate_truth"] is not None
    ]
    if cs:
        fig, ax = plt.subplots(figsize=(6, 3.5))
        ax.plot([c[0] for c in cs], [c[1] for c in cs], marker=".")
        ax.set_xlabel("round")
        ax.set_ylabel("similarity: estimated vs true composition")
        ax.set_ylim(min(0.9, min(c[1] for c in cs if c[1] == c[1]) - 0.02), 1.001)
        ax.grid(alpha=0.3)
        fig.tight_layout()
        fig.savefig(out / "monitor_similarity.png", dpi=120)
        plt.close(fig)

    last = rep.rounds[-1]
    if last["est_counts"] is not None:
        q = len(last["true_counts"])
        x = range(q)
        fig, ax = plt.subplots(figsize=(6, 3.5))
        width = 0.4
        ax.bar([i - width / 2 for i in x], last["true_counts"], width, label="true")
        ax.bar([i + width / 2 for i in x], last["est_counts"], width, label="estimated")
        ax.set_xlabel("class")
        ax.set_ylabel(f"samples in round {last['round']}")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / "composition.png", dpi=120)
        plt.close(fig)


def _rows_to_csv(rows: list[dict], path: Path) -> None:
    header = list(rows[0].keys())
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=header)
        writer.writeheader()
        writer.writerows(rows)


def write_comparison_outputs(rows: list[dict], out_dir) -> None:
    out = _ensure_dir(out_dir)
    _rows_to_csv(rows, out / "comparison.csv")
    means = [r for r in rows if r["seed"] == "mean"]
    if not means:
        return
    losses = sorted({r["loss"] for r in means})
    gammas = sorted({r["gamma"] for r in means})
    for metric, fname in (("ac_minority", "acm_vs_gamma.png"), ("auc", "auc_vs_gamma.png")):
        if all(r.get(metric) is None for r in means):
            continue
        fig, ax = plt.subplots(figsize=(6, 3.5))
        for kind in losses:
            ys = [
                next(r[metric] for r in means if r["loss"] == kind and r["gamma"] == g)
                for g in gammas
            ]
            ax.plot(gammas, ys, marker="o", label=kind)
        ax.set_xlabel("global imbalance ratio")
        ax.set_ylabel(metric)
        ax.set_xscale("log")
        ax.legend()
        ax.grid(alpha=0.3)
        fig.tight_layout()
        fig.savefig(out / fname, dpi=120)
        plt.close(fig)


def write_mismatch_outputs(rows: list[dict], out_dir) -> None:
    out = _ensure_dir(out_dir)
    _rows_to_csv(rows, out / "mismatch.csv")
    means = [r for r in rows if r["seed"] == "mean"]
    if not means:
        return
    losses = sorted({r["loss"] for r in means})
    fig, ax = plt.subplots(figsize=(6, 3.5))
    plotted = False
    for kind in losses:
        pts = sorted(
            ((r["mean_client_cs"], r["ac_minority"]) for r in means if r["loss"] == kind),
            key=lambda t: t[0],
        )
        if all(p[1] is None for p in pts):
            continue
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=kind)
        plotted = True
    ax.set_xlabel("mean client similarity to global composition")
    ax.set_ylabel("minority-class accuracy (%)")
    if plotted:
        ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out / "acm_vs_mismatch.png", dpi=120)
    plt.close(fig)


def write_sweep_outputs(rows: list[dict], x_key: str, y_keys: tuple[str, ...], out_dir) -> None:
    out = _ensure_dir(out_dir)
    _rows_to_csv(rows, out / f"sweep_{x_key}.csv")
    fig, axes = plt.subplots(1, len(y_keys), figsize=(5 * len(y_keys), 3.5))
    if len(y_keys) == 1:
        axes = [axes]
    for ax, y_key in zip(axes, y_keys):
        xs = [r[x_key] for r in rows]
        ys = [r[y_key] for r in rows]
        ax.plot(xs, ys, marker="o")
        ax.set_xlabel(x_key)
        ax.set_ylabel(y_key)
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out / f"sweep_{x_key}.png", dpi=120)
    plt.close(fig)


def write_hl_outputs(rows: list[dict], out_dir) -> None:
    out = _ensure_dir(out_dir)
    _rows_to_csv(rows, out / "hl_similarity.csv")
    classes = [r["class"] for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.bar(classes, [r["mean_pairwise_cs"] for r in rows])
    ax1.set_xlabel("class")
    ax1.set_ylabel("mean pairwise cosine similarity")
    ax1.set_ylim(0, 1.05)
    ax2.bar(classes, [r["dot_cov"] for r in rows])
    ax2.set_xlabel("class")
    ax2.set_ylabel("dot-product coefficient of variation")
    fig.tight_layout()
    fig.savefig(out / "hl_similarity.png", dpi=120)
    plt.close(fig)
