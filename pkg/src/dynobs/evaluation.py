"""Detection metrics over an IoU-threshold sweep: precision, recall, F1, position error."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .dataset_io import GtLabel, ResultFrame
from .geometry import AABB3, iou3d


@dataclass
class FrameMatch:
    tp: int
    fp: int
    fn: int
    pairs: list[tuple[int, int, float]]  # (pred index, gt index, iou)
    pos_errors: list[float] = field(default_factory=list)


def _iou_matrix(preds: list[AABB3], gts: list[AABB3]) -> np.ndarray:
    return np.array([[iou3d(p, g) for g in gts] for p in preds]).reshape(len(preds), len(gts))


def match_frame(preds: list[AABB3], gts: list[AABB3], iou_thresh: float, optimal: bool = False) -> FrameMatch:
    """Match predictions to ground truth one-to-one; a pair is a TP iff IoU >= ``iou_thresh``.

    Greedy in descending IoU by default; ``optimal=True`` maximises the TP count with
    ties broken by total IoU.
    """
    ious = _iou_matrix(preds, gts)
    pairs: list[tuple[int, int, float]] = []
    if ious.size:
        if optimal:
            ok = ious >= iou_thresh
            # 1 per TP dominates; IoU sum breaks ties among maximum matchings
            gain = np.where(ok, 1.0 + ious / (1.0 + len(preds) + len(gts)), 0.0)
            rows, cols = linear_sum_assignment(-gain)
            pairs = [(int(r), int(c), float(ious[r, c])) for r, c in zip(rows, cols) if ok[r, c]]
        else:
            cand = sorted(((-ious[i, j], i, j) for i in range(len(preds)) for j in range(len(gts)) if ious[i, j] >= iou_thresh and ious[i, j] > 0))
            used_p, used_g = set(), set()
            for neg, i, j in cand:
                if i in used_p or j in used_g:
                    continue
                used_p.add(i)
                used_g.add(j)
                pairs.append((i, j, -neg))
    errs = [float(np.linalg.norm(preds[i].center - gts[j].center)) for i, j, _ in pairs]
    tp = len(pairs)
    return FrameMatch(tp, len(preds) - tp, len(gts) - tp, pairs, errs)


@dataclass
class ThresholdMetrics:
    iou_thresh: float
    precision: float
    recall: float
    f1: float
    mean_pos_err: float
    tp: int
    fp: int
    fn: int


@dataclass
class EvalReport:
    grid: list[float]
    rows: list[ThresholdMetrics]
    n_frames: int
    n_gt: int
    n_pred: int

    def at(self, iou_thresh: float) -> ThresholdMetrics:
        for r in self.rows:
            if abs(r.iou_thresh - iou_thresh) < 1e-9:
                return r
        raise KeyError(f"threshold {iou_thresh} not in sweep grid")

    def to_dict(self) -> dict:
        return {
            "grid": self.grid,
            "n_frames": self.n_frames,
            "n_gt": self.n_gt,
            "n_pred": self.n_pred,
            "rows": [asdict(r) for r in self.rows],
        }

    def write_table_csv(self, path, thresholds=(0.3, 0.5, 0.7)) -> None:
        """One row, column groups of (precision, recall, F1, pos. err.) per threshold."""
        header, row = ["method"], ["dynobs"]
        for th in thresholds:
            m = self.at(th)
            header += [f"precision@{th:g}", f"recall@{th:g}", f"f1@{th:g}", f"pos_err@{th:g}"]
            row += [f"{m.precision:.4f}", f"{m.recall:.4f}", f"{m.f1:.4f}", f"{m.mean_pos_err:.4f}"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerow(row)

    def write_curve_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iou_thresh", "precision", "recall", "f1", "mean_pos_err", "tp", "fp", "fn"])
            for r in self.rows:
                w.writerow([f"{r.iou_thresh:.2f}", f"{r.precision:.6f}", f"{r.recall:.6f}", f"{r.f1:.6f}", f"{r.mean_pos_err:.6f}", r.tp, r.fp, r.fn])


def iou_grid(start: float = 0.05, end: float = 0.95, step: float = 0.05) -> list[float]:
    n = int(round((end - start) / step))
    return [round(start + k * step, 10) for k in range(n + 1)]


def _ratio(num: int, den: int) -> float:
    return num / den if den > 0 else 0.0


def pair_frames(preds: list[ResultFrame], gts: list[GtLabel], tol: float = 1e-6) -> list[tuple[list[AABB3], list[AABB3]]]:
    """Align by stamp. Only dynamic predictions and dynamic GT are kept; a GT frame with
    no result frame counts all its boxes as missed."""
    by_stamp = {round(p.stamp / tol): p for p in preds}
    out = []
    for g in gts:
        p = by_stamp.get(round(g.stamp / tol))
        pb = [o.box for o in p.obstacles if o.motion_class == "dynamic"] if p else []
        out.append((pb, [b.box for b in g.boxes if b.is_dynamic]))
    return out


def sweep(frames: list[tuple[list[AABB3], list[AABB3]]], grid: list[float] | None = None, optimal: bool = False) -> EvalReport:
    """Aggregate :func:`match_frame` over frames at each threshold of ``grid``."""
    grid = iou_grid() if grid is None else list(grid)
    rows = []
    for th in grid:
        tp = fp = fn = 0
        errs: list[float] = []
        for preds, gts in frames:
            m = match_frame(preds, gts, th, optimal)
            tp, fp, fn = tp + m.tp, fp + m.fp, fn + m.fn
            errs += m.pos_errors
        p, r = _ratio(tp, tp + fp), _ratio(tp, tp + fn)
        f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
        rows.append(ThresholdMetrics(th, p, r, f1, float(np.mean(errs)) if errs else 0.0, tp, fp, fn))
    n_gt = sum(len(g) for _, g in frames)
    n_pred = sum(len(p) for p, _ in frames)
    return EvalReport(grid, rows, len(frames), n_gt, n_pred)


def evaluate(results: list[ResultFrame], gts: list[GtLabel], grid=None, optimal: bool = False) -> EvalReport:
    return sweep(pair_frames(results, gts), grid, optimal)


def static_false_alarm_rate(results: list[ResultFrame], gts: list[GtLabel], min_iou: float = 0.1) -> dict[int, float]:
    """Per static GT object: fraction of frames in which an overlapping output is labelled dynamic."""
    by_stamp = {round(r.stamp * 1e6): r for r in results}
    hits: dict[int, int] = {}
    for g in gts:
        res = by_stamp.get(round(g.stamp * 1e6))
        for b in g.boxes:
            if b.is_dynamic:
                continue
            bad = res is not None and any(o.motion_class == "dynamic" and iou3d(o.box, b.box) >= min_iou for o in res.obstacles)
            hits[b.track_id] = hits.get(b.track_id, 0) + int(bad)
    return {k: v / max(len(gts), 1) for k, v in hits.items()}
