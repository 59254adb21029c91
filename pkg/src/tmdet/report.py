"""Report rendering: CSV alongside matplotlib figures.

The eval path writes the report JSON/CSV plus precision-recall curves and a
per-unit count comparison; the train path plots the loss trajectory. All
figures go to files (Agg backend), nothing opens a window.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .boxes import BoxXYWH  # noqa: E402
from .data import PredictionEntry  # noqa: E402
from .infer import Detection  # noqa: E402
from .metrics import EvalReport  # noqa: E402
from .synth import SampleAnnotation  # noqa: E402
from .trainer import TrainLogEntry  # noqa: E402


def write_eval_report(report: EvalReport, out_dir,
                      preds: Optional[Sequence[PredictionEntry]] = None,
                      gts: Optional[Sequence[SampleAnnotation]] = None) -> List[Path]:
    """report.json + report.csv + pr_curves.png (+ counts.png when the raw
    predictions are available). Returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    json_path = out / "report.json"
    json_path.write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True)
                         + "\n")
    written.append(json_path)

    csv_path = out / "report.csv"
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["pattern", "ap", "ap50", "ap75", "mae", "rmse",
                         "n_units", "n_gt"])
        writer.writerow(["all", f"{report.ap:.6f}", f"{report.ap50:.6f}",
                         f"{report.ap75:.6f}", f"{report.mae:.6f}",
                         f"{report.rmse:.6f}", report.n_units, report.n_gt])
        for pid, row in sorted(report.per_pattern.items()):
            writer.writerow([pid, f"{row['ap']:.6f}", f"{row['ap50']:.6f}",
                             f"{row['ap75']:.6f}", f"{row['mae']:.6f}",
                             f"{row['rmse']:.6f}", int(row["n_units"]),
                             int(row["n_gt"])])
    written.append(csv_path)

    if report.pr_curves:
        fig, ax = plt.subplots(figsize=(5, 4))
        for t in (0.5, 0.75):
            if t in report.pr_curves:
                rec, prec = report.pr_curves[t]
                ax.plot(rec, prec, label=f"IoU {t:.2f}")
        ax.set_xlabel("recall")
        ax.set_ylabel("precision")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.02)
        ax.grid(alpha=0.3)
        ax.legend()
        ax.set_title(f"AP={report.ap:.3f}  AP50={report.ap50:.3f}  "
                     f"AP75={report.ap75:.3f}")
        fig.tight_layout()
        fig_path = out / "pr_curves.png"
        fig.savefig(fig_path, dpi=120)
        plt.close(fig)
        written.append(fig_path)

    if preds is not None and gts is not None:
        gt_counts = {(a.image, p.pattern_id): len(p.boxes)
                     for a in gts for p in a.patterns}
        xs = [gt_counts.get(e.key, 0) for e in preds]
        ys = [len(e.boxes) for e in preds]
        lim = max(xs + ys + [1]) + 1
        fig, ax = plt.subplots(figsize=(4.2, 4))
        ax.plot([0, lim], [0, lim], "k--", lw=0.8)
        ax.scatter(xs, ys, s=18, alpha=0.6)
        ax.set_xlabel("ground-truth count")
        ax.set_ylabel("predicted count")
        ax.set_title(f"MAE={report.mae:.2f}  RMSE={report.rmse:.2f}")
        ax.grid(alpha=0.3)
        fig.tight_layout()
        counts_path = out / "counts.png"
        fig.savefig(counts_path, dpi=120)
        plt.close(fig)
        written.append(counts_path)
    return written


def write_training_curves(log: Sequence[TrainLogEntry], out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    steps = [e.step for e in log]
    fig, ax = plt.subplots(figsize=(5.5, 4))
    ax.plot(steps, [e.loss_p for e in log], label="presence")
    ax.plot(steps, [e.loss_b for e in log], label="box")
    ax.plot(steps, [e.loss for e in log], label="total", lw=1.8)
    ax.set_xlabel("optimizer step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    path = out / "loss_curves.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_detections(image: np.ndarray, detections: Sequence[Detection],
                      gt_boxes: Sequence[BoxXYWH], path) -> Path:
    """Overlay GT (solid) and detections (dashed, score-labelled) on the image."""
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.imshow(image, interpolation="nearest")
    for b in gt_boxes:
        ax.add_patch(plt.Rectangle((b.x1, b.y1), b.w, b.h, fill=False,
                                   edgecolor="lime", lw=1.2))
    for d in detections:
        b = d.box
        ax.add_patch(plt.Rectangle((b.x1, b.y1), b.w, b.h, fill=False,
                                   edgecolor="red", lw=1.0, linestyle="--"))
        ax.text(b.x1, b.y1 - 1, f"{d.score:.2f}", color="red", fontsize=6)
    ax.set_axis_off()
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return Path(path)


def write_ablation_table(rows, out_dir) -> Tuple[Path, Path]:
    """Machine-readable ablation table (JSON + CSV) plus a bar figure."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    json_path = out / "ablation.json"
    json_path.write_text(json.dumps([r.to_dict() for r in rows], indent=1,
                                    sort_keys=True) + "\n")
    csv_path = out / "ablation.csv"
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["match_variant", "decode_variant", "ap", "ap50",
                         "ap75", "mae", "rmse"])
        for r in rows:
            writer.writerow([r.match_variant, r.decode_variant,
                             f"{r.report.ap:.6f}", f"{r.report.ap50:.6f}",
                             f"{r.report.ap75:.6f}", f"{r.report.mae:.6f}",
                             f"{r.report.rmse:.6f}"])
    labels = [f"{r.match_variant}\n{r.decode_variant}" for r in rows]
    fig, ax = plt.subplots(figsize=(1.2 + 1.1 * len(rows), 4))
    x = np.arange(len(rows))
    ax.bar(x - 0.2, [r.report.ap for r in rows], width=0.4, label="AP")
    ax.bar(x + 0.2, [r.report.ap50 for r in rows], width=0.4, label="AP50")
    ax.set_xticks(x, labels, fontsize=8)
    ax.grid(axis="y", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "ablation.png", dpi=120)
    plt.close(fig)
    return json_path, csv_path
