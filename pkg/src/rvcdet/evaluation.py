"""Detection-set evaluation: greedy IoU matching, precision tables, baselines."""

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .cloudio import CLASS_NAMES, PointCloud
from .geometry import bev_iou, points_in_box

__all__ = [
    "bev_iou",
    "MatchResult",
    "ClassCounts",
    "PrecisionReport",
    "match",
    "precision_report",
    "filter_by_points",
    "filter_by_score",
    "format_table",
    "table_csv",
]

IOU_THRESHOLD = 0.4
POINT_THRESHOLD = 5
SCORE_THRESHOLD = 0.3


@dataclass(frozen=True, eq=False)
class MatchResult:
    det_tp: np.ndarray  # (D,) bool
    det_gt: np.ndarray  # (D,) matched GT index or -1
    det_iou: np.ndarray  # (D,) IoU of the match, 0 for FP
    gt_matched: np.ndarray  # (G,) bool
    det_class: np.ndarray
    gt_class: np.ndarray


def match(dets, gts, iou_thresh: float = IOU_THRESHOLD) -> MatchResult:
    """Score-ordered greedy matching, one claim per ground-truth box.

    Within a class, detections are visited by descending score (ties by input
    order); each takes the unclaimed same-class GT with the highest IoU at or
    above ``iou_thresh``, ties going to the lower GT index.
    """
    dets, gts = list(dets), list(gts)
    nd, ng = len(dets), len(gts)
    det_tp = np.zeros(nd, dtype=bool)
    det_gt = np.full(nd, -1, dtype=np.int64)
    det_iou = np.zeros(nd)
    claimed = np.zeros(ng, dtype=bool)
    det_class = np.array([d.box.class_id for d in dets], dtype=np.int64)
    gt_class = np.array([g.class_id for g in gts], dtype=np.int64)
    order = sorted(range(nd), key=lambda i: (-dets[i].score, i))
    for i in order:
        best_j, best_iou = -1, -1.0
        for j in range(ng):
            if claimed[j] or gt_class[j] != det_class[i]:
                continue
            iou = bev_iou(dets[i].box, gts[j])
            if iou >= iou_thresh and iou > best_iou:
                best_j, best_iou = j, iou
        if best_j >= 0:
            claimed[best_j] = True
            det_tp[i] = True
            det_gt[i] = best_j
            det_iou[i] = best_iou
    return MatchResult(det_tp, det_gt, det_iou, claimed, det_class, gt_class)


@dataclass
class ClassCounts:
    tp: int = 0
    fp: int = 0
    n_gt: int = 0

    @property
    def precision(self):
        n = self.tp + self.fp
        return self.tp / n if n else None

    @property
    def recall(self):
        return self.tp / self.n_gt if self.n_gt else None


@dataclass
class PrecisionReport:
    per_class: dict = field(default_factory=lambda: {c: ClassCounts() for c in range(len(CLASS_NAMES))})

    @property
    def overall(self) -> ClassCounts:
        tot = ClassCounts()
        for c in self.per_class.values():
            tot.tp += c.tp
            tot.fp += c.fp
            tot.n_gt += c.n_gt
        return tot

    @property
    def precision(self):
        return self.overall.precision

    @property
    def recall(self):
        return self.overall.recall


def precision_report(results) -> PrecisionReport:
    """Aggregate match results (micro-averaged overall)."""
    rep = PrecisionReport()
    for r in results:
        for c, cc in rep.per_class.items():
            dmask = r.det_class == c
            cc.tp += int(np.count_nonzero(r.det_tp & dmask))
            cc.fp += int(np.count_nonzero(~r.det_tp & dmask))
            cc.n_gt += int(np.count_nonzero(r.gt_class == c))
    return rep


def filter_by_points(dets, cloud: PointCloud, threshold: int = POINT_THRESHOLD) -> list:
    """Keep detections whose 3D box holds at least ``threshold`` points (inclusive)."""
    xyz = cloud.xyz
    return [d for d in dets if int(np.count_nonzero(points_in_box(xyz, d.box))) >= threshold]


def filter_by_score(dets, threshold: float = SCORE_THRESHOLD) -> list:
    return [d for d in dets if d.score >= threshold]


def _pct(v):
    return "undefined" if v is None else f"{100.0 * v:.2f} %"


def format_table(rows, title=None, header_lines=()) -> str:
    """Pretty table: one row per pipeline variant, precision per class."""
    cols = ["Pipeline", "Overall", *CLASS_NAMES]
    body = [[name, _pct(rep.precision), *(_pct(rep.per_class[c].precision) for c in range(len(CLASS_NAMES)))]
            for name, rep in rows]
    widths = [max(len(r[i]) for r in [cols, *body]) for i in range(len(cols))]
    sep = "-+-".join("-" * w for w in widths)
    out = []
    if title:
        out.append(title)
    out.extend(header_lines)
    out.append(" | ".join(c.ljust(w) for c, w in zip(cols, widths)))
    out.append(sep)
    for r in body:
        out.append(" | ".join(c.ljust(w) for c, w in zip(r, widths)))
    return "\n".join(out) + "\n"


def table_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    head = ["pipeline", "overall_precision", "overall_tp", "overall_fp", "overall_recall"]
    for name in CLASS_NAMES:
        key = name.lower()
        head += [f"{key}_precision", f"{key}_tp", f"{key}_fp"]
    w.writerow(head)

    def fmt(v):
        return "" if v is None else repr(v)

    for name, rep in rows:
        o = rep.overall
        row = [name, fmt(o.precision), o.tp, o.fp, fmt(o.recall)]
        for c in range(len(CLASS_NAMES)):
            cc = rep.per_class[c]
            row += [fmt(cc.precision), cc.tp, cc.fp]
        w.writerow(row)
    return buf.getvalue()
