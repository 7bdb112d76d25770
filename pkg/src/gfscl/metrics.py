"""Evaluation indicators for alternating class-/domain-incremental runs.

All functions take per-session accuracy values in percent and return percent.
Accuracies are kept as exact correct/total ratios inside session reports and
only converted to percent at the reporting boundary, so these aggregations
see full float64 precision.
"""

from __future__ import annotations

import csv

import numpy as np

__all__ = [
    "average_accuracy",
    "average_dge",
    "average_forgetting",
    "average_novel_accuracy",
    "final_accuracy",
    "final_dg",
    "aggregate_metrics",
    "write_session_csv",
    "write_aggregate_csv",
    "format_summary_table",
]


def average_accuracy(alpha) -> float:
    """Mean of the per-session seen-domain accuracies."""
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.size == 0:
        raise ValueError("average_accuracy needs at least one session")
    return float(alpha.mean())


def average_dge(delta, intervals) -> float:
    """Mean unseen-domain gain over class-group intervals.

    Each interval (i, j) pairs the session that introduced a class group with
    the last session that extended it to a new domain; the gain is
    ``delta[j] - delta[i]``. Session ids are 1-based.
    """
    delta = np.asarray(delta, dtype=np.float64)
    if len(intervals) == 0:
        raise ValueError("average_dge needs at least one interval")
    gains = []
    for i, j in intervals:
        if not (1 <= i < j <= delta.size):
            raise ValueError(f"interval ({i}, {j}) out of range for {delta.size} sessions")
        gains.append(delta[j - 1] - delta[i - 1])
    return float(np.mean(gains))


def average_forgetting(alpha_base) -> float:
    """Mean drop of base-class accuracy relative to the first session."""
    alpha_base = np.asarray(alpha_base, dtype=np.float64)
    if alpha_base.size < 2:
        raise ValueError("average_forgetting needs at least two sessions")
    return float(np.mean(alpha_base[0] - alpha_base[1:]))


def average_novel_accuracy(alpha_novel) -> float:
    """Mean accuracy of novel classes over the incremental sessions."""
    alpha_novel = np.asarray(alpha_novel, dtype=np.float64)
    if alpha_novel.size == 0:
        raise ValueError("average_novel_accuracy needs at least one incremental session")
    return float(alpha_novel.mean())


def final_accuracy(alpha) -> float:
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.size == 0:
        raise ValueError("final_accuracy needs at least one session")
    return float(alpha[-1])


def final_dg(delta) -> float:
    delta = np.asarray(delta, dtype=np.float64)
    if delta.size == 0:
        raise ValueError("final_dg needs at least one session")
    return float(delta[-1])


def aggregate_metrics(reports, intervals) -> dict:
    """All six indicators from an ordered list of session reports."""
    alpha = [r.alpha for r in reports]
    delta = [r.delta for r in reports]
    alpha_base = [r.base_accuracy for r in reports]
    alpha_novel = [r.novel_accuracy for r in reports[1:] if r.novel_accuracy is not None]
    out = {
        "final_accuracy": final_accuracy(alpha),
        "average_accuracy": average_accuracy(alpha),
        "final_dg": final_dg(delta),
        "average_dge": average_dge(delta, intervals) if intervals else 0.0,
        "average_forgetting": average_forgetting(alpha_base) if len(alpha_base) > 1 else 0.0,
        "average_novel_accuracy": (
            average_novel_accuracy(alpha_novel) if alpha_novel else 0.0
        ),
    }
    return out


SESSION_FIELDS = [
    "session_id",
    "task_kind",
    "alpha",
    "delta",
    "base_accuracy",
    "novel_accuracy",
    "seen_correct",
    "seen_total",
    "unseen_correct",
    "unseen_total",
]


def write_session_csv(path, reports) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SESSION_FIELDS)
        for r in reports:
            writer.writerow(
                [
                    r.session_id,
                    r.task_kind,
                    f"{r.alpha:.6f}",
                    f"{r.delta:.6f}",
                    f"{r.base_accuracy:.6f}",
                    "" if r.novel_accuracy is None else f"{r.novel_accuracy:.6f}",
                    r.seen_correct,
                    r.seen_total,
                    r.unseen_correct,
                    r.unseen_total,
                ]
            )


def write_aggregate_csv(path, aggregates: dict) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        for key in sorted(aggregates):
            writer.writerow([key, f"{aggregates[key]:.6f}"])


def format_summary_table(reports, aggregates: dict) -> str:
    """Plain-text table: accuracy and unseen-domain rows per session plus
    the aggregate column, one line per evaluation kind."""
    ids = " ".join(f"{r.session_id:>6d}" for r in reports)
    acc = " ".join(f"{r.alpha:6.2f}" for r in reports)
    dg = " ".join(f"{r.delta:6.2f}" for r in reports)
    lines = [
        f"{'session':<10} {ids}   {'aggregate':>18}",
        f"{'acc':<10} {acc}   avg {aggregates['average_accuracy']:6.2f}",
        f"{'dg':<10} {dg}   dge {aggregates['average_dge']:6.2f}",
        f"{'forgetting':<10} {'':<{7 * len(reports) - 1}}   {aggregates['average_forgetting']:10.2f}",
        f"{'novel acc':<10} {'':<{7 * len(reports) - 1}}   {aggregates['average_novel_accuracy']:10.2f}",
        f"{'final':<10} {'':<{7 * len(reports) - 1}}   acc {aggregates['final_accuracy']:6.2f} dg {aggregates['final_dg']:6.2f}",
    ]
    return "\n".join(lines) + "\n"
