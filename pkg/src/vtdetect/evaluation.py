"""Pixel-level average precision, PR-curve export and heatmap emission.

All positive/negative counts are pooled over the whole evaluation set before
the threshold sweep (micro-averaging), and tied scores are handled as one
threshold group, so the result is independent of pixel order.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ShapeMismatchError, UndefinedAPError
from .labels import BoxAnnotation
from .data import write_pgm


@dataclass
class PRCurve:
    """Precision/recall at each distinct score threshold, descending."""

    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    ap: float

    def __post_init__(self) -> None:
        n = len(self.thresholds)
        if len(self.precision) != n or len(self.recall) != n:
            raise ShapeMismatchError("PR arrays must share one length")


def _pool(maps, masks) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(maps, np.ndarray) and maps.ndim == 2:
        maps, masks = [maps], [masks]
    scores, labels = [], []
    for m, g in zip(maps, masks, strict=True):
        m = np.asarray(m, dtype=np.float64)
        g = np.asarray(g, dtype=bool)
        if m.shape != g.shape:
            raise ShapeMismatchError(
                f"scores {m.shape} and ground truth {g.shape} disagree"
            )
        scores.append(m.reshape(-1))
        labels.append(g.reshape(-1))
    return np.concatenate(scores), np.concatenate(labels)


def pixel_ap(scores, gt) -> PRCurve:
    """Average precision over individual pixels.

    Sweeping distinct scores descending, a pixel is predicted positive when
    its score >= threshold; AP is the increase in recall at each threshold
    times the precision there, i.e. the mean precision over positive pixels
    with ties grouped.  Raises when the ground truth has no positive pixel,
    since every recall is then undefined.
    """
    flat_scores, flat_gt = _pool(scores, gt)
    n_pos = int(flat_gt.sum())
    if n_pos == 0:
        raise UndefinedAPError("no positive ground-truth pixels; AP is undefined")
    order = np.argsort(-flat_scores, kind="stable")
    s = flat_scores[order]
    y = flat_gt[order].astype(np.float64)
    # Last index of each tied-score group.
    group_end = np.flatnonzero(np.concatenate((s[1:] != s[:-1], [True])))
    tp = np.cumsum(y)[group_end]
    predicted = group_end + 1.0
    precision = tp / predicted
    recall = tp / n_pos
    ap = float(np.sum(np.diff(np.concatenate(([0.0], tp))) * precision) / n_pos)
    return PRCurve(thresholds=s[group_end], precision=precision, recall=recall, ap=ap)


def boxes_to_heatmap(ann: BoxAnnotation | None, scores, h: int, w: int) -> np.ndarray:
    """Render box detections as a heatmap: per-pixel max over covering boxes.

    A pixel is covered when its center lies inside the box, matching the
    mask rasterization convention; `scores` gives one value in [0, 1] per box.
    """
    heat = np.zeros((h, w))
    if ann is None or not ann.boxes:
        return heat
    scores = list(scores)
    if len(scores) != len(ann.boxes):
        raise ShapeMismatchError(
            f"{len(scores)} scores for {len(ann.boxes)} boxes"
        )
    cy = np.arange(h) + 0.5
    cx = np.arange(w) + 0.5
    for (x, y, bw, bh), score in zip(ann.boxes, scores):
        if not 0.0 <= score <= 1.0:
            raise ValueError(f"box score must be in [0, 1], got {score}")
        rows = (cy >= y) & (cy < y + bh)
        cols = (cx >= x) & (cx < x + bw)
        region = rows[:, None] & cols[None, :]
        heat[region] = np.maximum(heat[region], score)
    return heat


def emit_heatmap(pred_map: np.ndarray, path) -> None:
    """Write a probability map as an 8-bit PGM, value = round(255 * p)."""
    pred_map = np.asarray(pred_map, dtype=np.float64)
    if pred_map.min() < 0.0 or pred_map.max() > 1.0:
        raise ValueError("heatmap values must lie in [0, 1]")
    write_pgm(path, pred_map)


def emit_pr_csv(curve: PRCurve, path) -> None:
    """Write threshold/precision/recall rows; the final row records the AP."""
    if len(curve.thresholds) == 0:
        raise ValueError("cannot emit an empty PR curve")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "precision", "recall"])
        for t, p, r in zip(curve.thresholds, curve.precision, curve.recall):
            writer.writerow([repr(float(t)), repr(float(p)), repr(float(r))])
        writer.writerow(["AP", repr(float(curve.ap)), ""])


def read_pr_csv(path) -> PRCurve:
    """Parse a file written by emit_pr_csv back into a PRCurve, exactly."""
    rows = list(csv.reader(Path(path).open()))
    if not rows or rows[0] != ["threshold", "precision", "recall"]:
        raise ValueError(f"{path}: not a PR-curve CSV")
    if not rows[-1] or rows[-1][0] != "AP":
        raise ValueError(f"{path}: missing AP row")
    body = rows[1:-1]
    return PRCurve(
        thresholds=np.array([float(r[0]) for r in body]),
        precision=np.array([float(r[1]) for r in body]),
        recall=np.array([float(r[2]) for r in body]),
        ap=float(rows[-1][1]),
    )
