"""3D detection evaluation: rotated-box IoU, greedy matching, AP and mAP."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .box3d import Box3D, corners
from .errors import NoGroundTruth

DEFAULT_IOU_THRESHOLD = 0.15
CLIP_EPS = 1e-12


# --- polygons ---------------------------------------------------------------


def polygon_area(poly) -> float:
    """Signed shoelace area; positive for counterclockwise vertex order."""
    poly = np.asarray(poly, dtype=float)
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_convex(subject, clipper) -> np.ndarray:
    """Sutherland-Hodgman clipping of ``subject`` by a convex ``clipper``.

    Both polygons must be counterclockwise. Returns the intersection polygon,
    possibly empty (shape (0, 2)).
    """
    output = [np.asarray(p, dtype=float) for p in subject]
    clipper = np.asarray(clipper, dtype=float)
    for i in range(len(clipper)):
        if not output:
            break
        c1, c2 = clipper[i], clipper[(i + 1) % len(clipper)]
        edge = c2 - c1

        def side(p):
            return edge[0] * (p[1] - c1[1]) - edge[1] * (p[0] - c1[0])

        inp, output = output, []
        prev = inp[-1]
        s_prev = side(prev)
        for cur in inp:
            s_cur = side(cur)
            if s_cur >= -CLIP_EPS:
                if s_prev < -CLIP_EPS:
                    output.append(prev + (cur - prev) * (s_prev / (s_prev - s_cur)))
                output.append(cur)
            elif s_prev >= -CLIP_EPS:
                output.append(prev + (cur - prev) * (s_prev / (s_prev - s_cur)))
            prev, s_prev = cur, s_cur
    return np.array(output).reshape(-1, 2)


def footprint(box: Box3D) -> np.ndarray:
    """Plan-view rectangle (x, z) of the box, counterclockwise."""
    poly = corners(box)[:4][:, [0, 2]]
    return poly if polygon_area(poly) > 0 else poly[::-1]


def footprint_overlap(a: Box3D, b: Box3D) -> float:
    inter = clip_convex(footprint(a), footprint(b))
    return max(polygon_area(inter), 0.0) if len(inter) >= 3 else 0.0


def iou3d(a: Box3D, b: Box3D) -> float:
    """Intersection over union of two gravity-aligned boxes."""
    area = footprint_overlap(a, b)
    if area <= 0.0:
        return 0.0
    # vertical extents along gravity (+y)
    lo = max(a.center[1] - a.size[2] / 2, b.center[1] - b.size[2] / 2)
    hi = min(a.center[1] + a.size[2] / 2, b.center[1] + b.size[2] / 2)
    inter = area * max(hi - lo, 0.0)
    union = a.volume + b.volume - inter
    return float(min(max(inter / union, 0.0), 1.0)) if union > 0 else 0.0


# --- detections ---------------------------------------------------------------


@dataclass(frozen=True)
class Detection:
    image_id: str
    cls: int
    score: float
    box: Box3D

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise ValueError("detection score must be finite")

    def to_dict(self) -> dict:
        return {"image_id": self.image_id, "class": self.cls, "score": self.score, "box": self.box.to_dict()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Detection":
        return cls(str(d["image_id"]), int(d["class"]), float(d["score"]), Box3D.from_dict(d["box"]))


@dataclass(frozen=True)
class GroundTruth:
    image_id: str
    cls: int
    box: Box3D


def sort_by_score(dets: Sequence[Detection]) -> list[int]:
    """Indices by descending score; ties keep input order."""
    scores = np.array([d.score for d in dets], dtype=float)
    return list(np.argsort(-scores, kind="stable"))


def match_detections(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruth],
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
) -> np.ndarray:
    """True-positive flags aligned with ``dets`` (input order).

    Detections are visited by descending score; each takes the unmatched
    same-class, same-image ground truth with the highest IoU if that IoU
    reaches the threshold.
    """
    flags = np.zeros(len(dets), dtype=bool)
    pool: dict[tuple, list] = defaultdict(list)
    for g in gts:
        pool[(g.image_id, g.cls)].append(g.box)
    used = {key: np.zeros(len(boxes), dtype=bool) for key, boxes in pool.items()}
    for i in sort_by_score(dets):
        d = dets[i]
        key = (d.image_id, d.cls)
        if key not in pool:
            continue
        best, best_iou = -1, -1.0
        for j, box in enumerate(pool[key]):
            if used[key][j]:
                continue
            iou = iou3d(d.box, box)
            if iou > best_iou:
                best, best_iou = j, iou
        if best >= 0 and best_iou >= iou_threshold:
            used[key][best] = True
            flags[i] = True
    return flags


@dataclass
class PRSeries:
    recall: np.ndarray
    precision: np.ndarray
    ap: float
    num_gt: int

    def to_csv(self) -> str:
        lines = ["recall,precision"]
        lines += [f"{r!r},{p!r}" for r, p in zip(self.recall.tolist(), self.precision.tolist())]
        return "\n".join(lines) + "\n"


def average_precision(flags, num_gt: int) -> PRSeries:
    """Area under the precision envelope for score-ordered TP flags.

    The envelope makes precision non-increasing from the right (all-point
    interpolation), then integrates it over recall.
    """
    if num_gt <= 0:
        raise NoGroundTruth("average precision needs at least one ground truth")
    flags = np.asarray(flags, dtype=bool)
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / num_gt
    precision = tp / np.maximum(tp + fp, 1)
    mrec = np.concatenate([[0.0], recall, [recall[-1] if len(recall) else 0.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    ap = float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))
    return PRSeries(recall.astype(float), precision.astype(float), ap, int(num_gt))


def mean_ap(per_class: Mapping[int, float]) -> float:
    """Unweighted mean over classes that have ground truth."""
    if not per_class:
        raise NoGroundTruth("mAP needs at least one class with ground truth")
    return float(np.mean(list(per_class.values())))


@dataclass
class EvalResult:
    per_class: dict  # class -> PRSeries
    iou_threshold: float

    @property
    def ap(self) -> dict:
        return {c: s.ap for c, s in self.per_class.items()}

    @property
    def map(self) -> float:
        return mean_ap(self.ap)

    def to_dict(self, class_names: Sequence[str] | None = None) -> dict:
        per = {}
        for c in sorted(self.per_class):
            s = self.per_class[c]
            name = class_names[c] if class_names and c < len(class_names) else str(c)
            per[str(c)] = {"name": name, "ap": s.ap, "num_gt": s.num_gt, "num_det": int(len(s.recall))}
        return {"iou_threshold": self.iou_threshold, "mAP": self.map if per else 0.0, "per_class": per}


def evaluate(
    dets: Sequence[Detection],
    gts: Iterable[GroundTruth],
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
) -> EvalResult:
    gts = list(gts)
    flags = match_detections(dets, gts, iou_threshold)
    order = sort_by_score(dets)
    num_gt: dict[int, int] = defaultdict(int)
    for g in gts:
        num_gt[g.cls] += 1
    per_class = {}
    for c in sorted(num_gt):
        idx = [i for i in order if dets[i].cls == c]
        per_class[c] = average_precision(flags[idx], num_gt[c])
    return EvalResult(per_class, iou_threshold)
