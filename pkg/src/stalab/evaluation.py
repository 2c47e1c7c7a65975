"""Tracking metrics: IOU, drift detection, per-video reports and the
texture-transfer matrix."""

import csv
import json
from dataclasses import asdict, dataclass

import numpy as np

from stalab.autodiff import Tensor
from stalab.renderer import render_sequence
from stalab.tracker import BBox, SiameseTracker


def iou(a, b):
    """Intersection over union of two boxes; 0 when they are disjoint."""
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.w * a.h + b.w * b.h - inter
    return float(min(1.0, max(0.0, inter / union)))


def detect_drift(ious, tau=0.1):
    """Earliest frame from which every IOU stays below ``tau``, else None."""
    if not 0.0 < tau < 1.0:
        raise ValueError(f"drift threshold must lie in (0, 1), got {tau}")
    frame = None
    for t in range(len(ious) - 1, -1, -1):
        if ious[t] < tau:
            frame = t
        else:
            break
    return frame


@dataclass
class EvalReport:
    ious: list
    raw_scores: list
    penalized_scores: list
    drift_frame: object
    mean_iou: float
    score_drop: object = None

    def to_dict(self):
        return asdict(self)

    def save_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    def save_curves(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame", "iou", "raw_max", "penalized_max"])
            for t, (i, r, p) in enumerate(zip(self.ious, self.raw_scores, self.penalized_scores)):
                w.writerow([t, repr(i), repr(r), repr(p)])


def evaluate(steps, ground_truth, baseline=None, tau=0.1):
    """Build an :class:`EvalReport` from tracker output and ground-truth boxes.

    ``baseline`` is an optional clean-run step list of the same length; the
    score drop is ``mean(baseline raw max) - mean(raw max)``.  The mean IOU
    includes frame 0.
    """
    if len(steps) != len(ground_truth):
        raise ValueError(f"tracker output has {len(steps)} frames, ground truth {len(ground_truth)}")
    if len(steps) == 0:
        raise ValueError("empty video")
    ious = [iou(s.box, g) for s, g in zip(steps, ground_truth)]
    raw = [float(s.raw_max) for s in steps]
    pen = [float(s.penalized_max) for s in steps]
    drop = None
    if baseline is not None:
        if len(baseline) != len(steps):
            raise ValueError("baseline length differs from the evaluated run")
        drop = float(np.mean([s.raw_max for s in baseline]) - np.mean(raw))
    return EvalReport(ious, raw, pen, detect_drift(ious, tau), float(np.mean(ious)), drop)


def run_video(victim, scene, obj, texture=None, penalty=0.3):
    """Render ``scene`` with ``texture`` (a TextureMap or None for the object's
    own) and track it from the frame-0 ground truth."""
    tex = None if texture is None else Tensor._wrap(texture.chw())
    frames, boxes = render_sequence(scene, obj, tex)
    steps = SiameseTracker(victim, penalty).track(frames, boxes[0])
    return steps, boxes


# ---------------------------------------------------------------- calibration

@dataclass
class CalibrationReport:
    passed: bool
    mean_iou: float
    threshold: float
    ious: list


def calibrate_tracker(victim, scene, obj, threshold=0.5, penalty=0.3):
    """Gate: the clean texture must be tracked with mean IOU >= ``threshold``."""
    steps, boxes = run_video(victim, scene, obj, None, penalty)
    rep = evaluate(steps, boxes)
    return CalibrationReport(rep.mean_iou >= threshold, rep.mean_iou, threshold, rep.ious)


# ---------------------------------------------------------------- transfer

@dataclass
class TransferMatrix:
    """Mean IOU in percent; ``cells[i][j]`` is victim ``rows[i]`` on texture ``columns[j]``."""

    rows: list
    columns: list
    cells: list

    def __post_init__(self):
        a = np.asarray(self.cells, dtype=np.float64)
        if a.shape != (len(self.rows), len(self.columns)):
            raise ValueError("cell grid does not match row/column labels")
        if np.any(a < 0) or np.any(a > 100):
            raise ValueError("mIOU cells must lie in [0, 100]")

    def cell(self, row, column):
        return self.cells[self.rows.index(row)][self.columns.index(column)]

    def save_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["victim"] + list(self.columns))
            for name, row in zip(self.rows, self.cells):
                w.writerow([name] + [f"{v:.4f}" for v in row])

    def save_json(self, path):
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2)

    @classmethod
    def load_csv(cls, path):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        return cls([r[0] for r in rows[1:]], rows[0][1:], [[float(v) for v in r[1:]] for r in rows[1:]])


def transfer_matrix(victims, textures, scene, obj, penalty=0.3):
    """Track every texture with every victim.

    ``victims`` and ``textures`` are ordered mappings name -> object; a texture
    value of None means the clean texture.  Cells are filled row-major.
    """
    rows, cols = list(victims), list(textures)
    cells = []
    for r in rows:
        line = []
        for c in cols:
            steps, boxes = run_video(victims[r], scene, obj, textures[c], penalty)
            line.append(100.0 * evaluate(steps, boxes).mean_iou)
        cells.append(line)
    return TransferMatrix(rows, cols, cells)


def box_from_row(row):
    return BBox(*row)
