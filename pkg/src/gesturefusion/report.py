"""Tables and figures for aggregated results.

Figures are drawn on bare :class:`matplotlib.figure.Figure` objects, so no
pyplot state or interactive backend is involved.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Mapping

import numpy as np
from matplotlib.figure import Figure

from .metrics import GRAINS, AggregateReport, ConfusionMatrix, GrainReport, decompose_drop

METHOD_LABELS = {
    "depth_cnn": "Depth CNN",
    "depth_cnn_lstm": "Depth CNN+LSTM",
    "skeleton_lstm": "Skeleton LSTM",
    "fl_concat": "FL-fusion-Concat",
    "sl_average": "SL-fusion-Average",
    "sl_max": "SL-fusion-Maximum",
}
METHOD_ORDER = tuple(METHOD_LABELS)
FIGURE_DPI = 100


def method_label(network: str) -> str:
    return METHOD_LABELS.get(network, network)


def ordered(reports: Mapping[str, AggregateReport]) -> list[str]:
    known = [m for m in METHOD_ORDER if m in reports]
    return known + sorted(set(reports) - set(known))


def _cell(value: float) -> str:
    return f"{value:.2f}"


def grain_table(rows: Mapping[str, GrainReport], title: str = "Recognition rates (%)") -> str:
    """Fixed-width table: one row per method, Fine/Coarse/Both x Best/Worst/Avg +- Std."""
    name_w = max([len("Method")] + [len(method_label(m)) for m in rows])
    group_w = 29
    lines = [title]
    head1 = "Method".ljust(name_w) + " | " + " | ".join(g.capitalize().center(group_w) for g in GRAINS)
    sub = f"{'Best':>6} {'Worst':>6} {'Avg +- Std':>15}"
    head2 = " " * name_w + " | " + " | ".join(sub.ljust(group_w) for _ in GRAINS)
    rule = "-" * len(head1)
    lines += [rule, head1, head2, rule]
    for method, report in rows.items():
        cells = []
        for g in GRAINS:
            s = report[g]
            avg = f"{_cell(s.mean)} +- {_cell(s.std)}"
            cells.append(f"{_cell(s.best):>6} {_cell(s.worst):>6} {avg:>15}".ljust(group_w))
        lines.append(method_label(method).ljust(name_w) + " | " + " | ".join(cells))
    lines.append(rule)
    return "\n".join(lines) + "\n"


def grain_table_csv(rows: Mapping[str, GrainReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["method"] + [f"{g}_{k}" for g in GRAINS for k in ("best", "worst", "avg", "std")])
    for method, report in rows.items():
        row = [method_label(method)]
        for g in GRAINS:
            s = report[g]
            row += [_cell(s.best), _cell(s.worst), _cell(s.mean), _cell(s.std)]
        writer.writerow(row)
    return buf.getvalue()


def fold_accuracy_csv(reports: Mapping[str, AggregateReport]) -> str:
    methods = ordered(reports)
    folds = sorted({f for r in reports.values() for f in r.folds})
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["fold"] + methods)
    for fold in folds:
        row = [str(fold)]
        for m in methods:
            r = reports[m]
            row.append(f"{100 * r.fold_accuracy[r.folds.index(fold)]:.2f}" if fold in r.folds else "")
        writer.writerow(row)
    return buf.getvalue()


def confusion_figure(cm: ConfusionMatrix, title: str = "") -> Figure:
    """Row-percent heatmap: true class on the y axis, predicted class on the x axis."""
    rates = cm.rates()
    c = len(cm.labels)
    size = 6 if c <= 14 else 11
    fig = Figure(figsize=(size, size * 0.9))
    ax = fig.add_subplot()
    image = ax.imshow(np.nan_to_num(rates), cmap="Blues", vmin=0, vmax=100)
    ax.set_xticks(range(c), labels=cm.labels, rotation=90, fontsize=7 if c > 14 else 9)
    ax.set_yticks(range(c), labels=cm.labels, fontsize=7 if c > 14 else 9)
    ax.set_xlabel("Predicted gesture")
    ax.set_ylabel("True gesture")
    if title:
        ax.set_title(title)
    for i in range(c):
        for j in range(c):
            v = rates[i, j]
            if not np.isnan(v) and v >= 0.5:
                ax.text(j, i, f"{v:.1f}", ha="center", va="center", fontsize=5 if c > 14 else 7,
                        color="white" if v > 60 else "black")
    fig.colorbar(image, ax=ax, fraction=0.046, pad=0.04, label="% of true class")
    fig.tight_layout()
    return fig


def fold_accuracy_figure(reports: Mapping[str, AggregateReport]) -> Figure:
    methods = ordered(reports)
    folds = sorted({f for r in reports.values() for f in r.folds})
    fig = Figure(figsize=(max(5, 0.5 * len(folds) * max(1, len(methods)) + 2), 3.5))
    ax = fig.add_subplot()
    width = 0.8 / max(1, len(methods))
    for k, m in enumerate(methods):
        r = reports[m]
        xs = [folds.index(f) + k * width for f in r.folds]
        ax.bar(xs, [100 * a for a in r.fold_accuracy], width, label=method_label(m))
    ax.set_xticks([i + 0.4 - width / 2 for i in range(len(folds))], labels=[str(f) for f in folds])
    ax.set_xlabel("Held-out subject")
    ax.set_ylabel("Accuracy (%)")
    ax.set_ylim(0, 100)
    ax.legend(fontsize=7, loc="lower right")
    fig.tight_layout()
    return fig


def save_figure(fig: Figure, path: Path) -> Path:
    fig.savefig(path, dpi=FIGURE_DPI, metadata={"Software": None})
    return path


def summary_text(reports: Mapping[str, AggregateReport], reference14: Mapping[str, float] | None = None) -> str:
    lines = []
    for m in ordered(reports):
        r = reports[m]
        lines.append(f"{method_label(m)} [{r.class_mode}]: pooled accuracy {100 * r.accuracy:.2f}% "
                     f"over {len(r.folds)} folds ({r.confusion.total} sequences)")
        if r.lawrfd is not None:
            lines.append(f"  collapsed 14-gesture accuracy {100 * r.collapsed.accuracy:.2f}%")
            lines.append(f"  LAWRFD {r.lawrfd:.5f}")
            if reference14 and m in reference14:
                d = decompose_drop(reference14[m], r.accuracy, r.lawrfd)
                lines.append(
                    f"  14->28 drop {100 * d['total_drop']:.2f} points = {100 * d['intra_gesture']:.2f} intra-gesture "
                    f"+ {100 * d['residual']:.2f} residual"
                )
    return "\n".join(lines) + "\n"


def write_report(reports: Mapping[str, AggregateReport], out_dir, reference14: Mapping[str, float] | None = None,
                 figures: bool = True) -> list[Path]:
    """Write tables, confusion matrices, figures and a JSON dump; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    modes = {r.class_mode for r in reports.values()}
    if len(modes) > 1:
        raise ValueError(f"cannot report mixed class modes {sorted(modes)}")
    mode = modes.pop() if modes else "c14"
    methods = ordered(reports)
    written = []

    def emit(name: str, text: str):
        path = out / name
        path.write_text(text)
        written.append(path)

    fold_rows = {m: reports[m].grain_report for m in methods}
    gesture_rows = {m: reports[m].gesture_report for m in methods}
    n_classes = 14 if mode == "c14" else 28
    emit("grain_table.txt", grain_table(fold_rows, f"Recognition rates (%) of {n_classes} gestures, units = LOSO folds"))
    emit("grain_table.csv", grain_table_csv(fold_rows))
    emit("grain_table_per_gesture.txt",
         grain_table(gesture_rows, f"Recognition rates (%) of {n_classes} gestures, units = gestures"))
    emit("fold_accuracy.csv", fold_accuracy_csv(reports))
    emit("summary.txt", summary_text(reports, reference14))
    for m in methods:
        r = reports[m]
        emit(f"{m}_confusion_counts.csv", r.confusion.to_csv())
        emit(f"{m}_confusion_percent.csv", r.confusion.to_csv(percent=True))
        if r.collapsed is not None:
            emit(f"{m}_collapsed_confusion_counts.csv", r.collapsed.to_csv())
        if figures:
            written.append(save_figure(confusion_figure(r.confusion, method_label(m)), out / f"{m}_confusion.png"))
    if figures and reports:
        written.append(save_figure(fold_accuracy_figure(reports), out / "fold_accuracy.png"))
    payload = {m: reports[m].to_dict() for m in methods}
    if reference14:
        for m in methods:
            r = reports[m]
            if r.lawrfd is not None and m in reference14:
                payload[m]["decomposition"] = decompose_drop(reference14[m], r.accuracy, r.lawrfd)
    emit("report.json", json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return written
