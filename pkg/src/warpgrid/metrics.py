"""Evaluation metrics: PCK, Synthetic Dense, end-point error and confidence calibration."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from .warp import bilinear_sample

__all__ = [
    "MetricError",
    "EvalReport",
    "pck",
    "synthetic_dense",
    "end_point_error",
    "calibration",
    "write_csv",
]

MIN_CALIBRATION_PIXELS = 10


class MetricError(ValueError):
    pass


def pck(pred, gt, alpha: float, height: int, width: int, visible=None) -> float | None:
    """Fraction of points within ``alpha * max(H, W)`` pixels of ground truth (inclusive).

    Points whose ground truth is invisible are dropped from numerator and
    denominator; ``None`` when no point remains.
    """
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 2)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 2)
    if pred.shape != gt.shape:
        raise MetricError(f"point lists differ in length: {len(pred)} vs {len(gt)}")
    if alpha <= 0:
        raise MetricError("alpha must be positive")
    vis = np.ones(len(gt), dtype=bool) if visible is None else np.asarray(visible, dtype=bool)
    if not vis.any():
        return None
    radius = alpha * max(height, width)
    dist = np.linalg.norm(pred[vis] - gt[vis], axis=1)
    return float(np.mean(dist <= radius))


def synthetic_dense(pred_st, pred_ts, gt_st, gt_ts, I_s, I_t, vis_s, vis_t) -> float | None:
    """Mean squared intensity gap between images warped by predicted and by true grids.

    Direction s->t is scored on the target visibility, t->s on the source
    visibility; the two directions are averaged. ``None`` when nothing is visible.
    """
    I_s = np.asarray(I_s, dtype=np.float64)
    I_t = np.asarray(I_t, dtype=np.float64)
    shapes = {np.shape(g)[1:] for g in (pred_st, pred_ts, gt_st, gt_ts)}
    shapes |= {np.shape(v) for v in (vis_s, vis_t)}
    shapes |= {I_s.shape[-2:], I_t.shape[-2:]}
    if len(shapes) != 1:
        raise MetricError(f"dimension mismatch: {sorted(shapes)}")
    scores = []
    for img, pred, gt, vis in ((I_s, pred_st, gt_st, vis_t), (I_t, pred_ts, gt_ts, vis_s)):
        v = np.asarray(vis) > 0
        if not v.any():
            continue
        diff = bilinear_sample(img, pred) - bilinear_sample(img, gt)
        scores.append(float((diff ** 2).mean(axis=0)[v].mean()))
    return float(np.mean(scores)) if scores else None


def end_point_error(pred, gt, visibility, height: int | None = None, width: int | None = None) -> float | None:
    """Mean pixel distance between predicted and true coordinates over visible pixels."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    vis = np.asarray(visibility) > 0
    if pred.shape != gt.shape or pred.shape[1:] != vis.shape:
        raise MetricError(f"dimension mismatch: {pred.shape}, {gt.shape}, {vis.shape}")
    h = height if height is not None else pred.shape[1]
    w = width if width is not None else pred.shape[2]
    if not vis.any():
        return None
    dx = (pred[0] - gt[0]) * (w - 1) / 2.0
    dy = (pred[1] - gt[1]) * (h - 1) / 2.0
    return float(np.hypot(dx, dy)[vis].mean())


def calibration(confidence, error, mask) -> float | None:
    """Spearman rank correlation (average ranks for ties) between confidence and error.

    ``None`` when fewer than 10 masked pixels exist or either map is constant there.
    """
    c = np.asarray(confidence, dtype=np.float64)
    e = np.asarray(error, dtype=np.float64)
    m = np.asarray(mask) > 0
    if c.shape != e.shape or c.shape != m.shape:
        raise MetricError(f"dimension mismatch: {c.shape}, {e.shape}, {m.shape}")
    if m.sum() < MIN_CALIBRATION_PIXELS:
        return None
    c, e = c[m], e[m]
    if np.ptp(c) == 0 or np.ptp(e) == 0:
        return None
    rho = stats.spearmanr(c, e).statistic
    return float(rho) if np.isfinite(rho) else None


@dataclass
class EvalReport:
    pck: dict[str, float | None] = field(default_factory=dict)
    synthetic_dense: float | None = None
    epe: float | None = None
    calibration: float | None = None
    n_pixels: int = 0
    n_keypoints: int = 0
    per_pair: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def write_csv(rows: list[dict], path) -> None:
    if not rows:
        open(path, "w").close()
        return
    keys = list(rows[0])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in keys})
