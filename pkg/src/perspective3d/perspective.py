"""Perspective points: nine 2D keypoints (projected center plus the eight
projected corners) expressed in the frame of a doubled RoI, and the
template-mixture model that predicts them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .box3d import Box3D, keypoints
from .camera import Camera, project_point
from .errors import DegenerateLine

NUM_POINTS = 9


@dataclass(frozen=True)
class RoI:
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (self.x1 > self.x0 and self.y1 > self.y0):
            raise ValueError(f"invalid RoI {self}")

    @property
    def origin(self) -> np.ndarray:
        return np.array([self.x0, self.y0])

    @property
    def extent(self) -> np.ndarray:
        return np.array([self.x1 - self.x0, self.y1 - self.y0])

    @property
    def center(self) -> np.ndarray:
        return np.array([(self.x0 + self.x1) / 2, (self.y0 + self.y1) / 2])

    def as_list(self) -> list:
        return [self.x0, self.y0, self.x1, self.y1]

    @classmethod
    def from_points(cls, pixels, inflate: float = 0.1) -> "RoI":
        """Bounding rectangle of ``pixels`` with width and height scaled by
        ``1 + inflate`` about its center."""
        pixels = np.asarray(pixels, dtype=float)
        lo, hi = pixels.min(axis=0), pixels.max(axis=0)
        c, half = (lo + hi) / 2, (hi - lo) * (1 + inflate) / 2
        return cls(*(c - half), *(c + half))


@dataclass(frozen=True, eq=False)
class PerspectivePoints:
    """Points of shape (9, 2) in normalized extended-RoI coordinates,
    ordered ``[center, a, b, c, d, e, f, g, h]``."""

    points: np.ndarray
    clipped: np.ndarray = field(default=None)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(NUM_POINTS, 2)
        object.__setattr__(self, "points", pts)
        clipped = self.clipped
        if clipped is None:
            clipped = np.zeros(NUM_POINTS, dtype=bool)
        object.__setattr__(self, "clipped", np.asarray(clipped, dtype=bool).reshape(NUM_POINTS))

    def to_dict(self) -> dict:
        return {
            "points": [[float(u), float(v)] for u, v in self.points],
            "clipped": [bool(c) for c in self.clipped],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PerspectivePoints":
        return cls(np.array(d["points"], dtype=float), np.array(d.get("clipped", [False] * 9)))


def extended_roi(roi: RoI) -> RoI:
    """Same center, twice the width and height."""
    w, h = roi.extent
    return RoI(roi.x0 - w / 2, roi.y0 - h / 2, roi.x1 + w / 2, roi.y1 + h / 2)


def normalize_points(pixels, roi: RoI, clip: bool = True) -> PerspectivePoints:
    ext = extended_roi(roi)
    p = (np.asarray(pixels, dtype=float) - ext.origin) / ext.extent
    if not clip:
        return PerspectivePoints(p)
    clipped = np.any((p < 0) | (p > 1), axis=1)
    return PerspectivePoints(np.clip(p, 0.0, 1.0), clipped)


def denormalize_points(points, roi: RoI) -> np.ndarray:
    if isinstance(points, PerspectivePoints):
        points = points.points
    ext = extended_roi(roi)
    return np.asarray(points, dtype=float) * ext.extent + ext.origin


def gt_perspective_points(box: Box3D, cam: Camera, roi: RoI) -> PerspectivePoints:
    """Project the center and corners of ``box`` and normalize into the
    extended RoI. Raises BehindCamera if any keypoint is not in front."""
    return normalize_points(project_point(keypoints(box), cam), roi)


# --- template mixture -------------------------------------------------------


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


def softmax(x, axis=-1):
    x = np.asarray(x, dtype=float)
    e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


@dataclass(frozen=True, eq=False)
class TemplateBank:
    """Raw template logits (C, K, 9, 2) and coefficient logits (C, K)."""

    templates: np.ndarray
    coeff_logits: np.ndarray

    def __post_init__(self):
        t = np.array(self.templates, dtype=float)
        w = np.array(self.coeff_logits, dtype=float)
        if t.ndim != 4 or t.shape[2:] != (NUM_POINTS, 2):
            raise ValueError(f"templates must have shape (C, K, 9, 2), got {t.shape}")
        if w.shape != t.shape[:2]:
            raise ValueError(f"coeff_logits shape {w.shape} does not match templates {t.shape[:2]}")
        t.flags.writeable = False
        w.flags.writeable = False
        object.__setattr__(self, "templates", t)
        object.__setattr__(self, "coeff_logits", w)

    @property
    def num_classes(self) -> int:
        return self.templates.shape[0]

    @property
    def num_templates(self) -> int:
        return self.templates.shape[1]

    def activated(self, cls: int) -> tuple[np.ndarray, np.ndarray]:
        """Sigmoid templates (K, 9, 2) and softmax coefficients (K,)."""
        return sigmoid(self.templates[cls]), softmax(self.coeff_logits[cls])

    def to_dict(self) -> dict:
        return {
            "C": self.num_classes,
            "K": self.num_templates,
            "templates": self.templates.tolist(),
            "coeff_logits": self.coeff_logits.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TemplateBank":
        bank = cls(np.array(d["templates"], dtype=float), np.array(d["coeff_logits"], dtype=float))
        if bank.num_classes != d.get("C", bank.num_classes) or bank.num_templates != d.get("K", bank.num_templates):
            raise ValueError("C/K fields disagree with template array shape")
        return bank


def mix_templates(bank: TemplateBank, cls: int, coeff_logits=None) -> PerspectivePoints:
    """Convex combination of the sigmoid-activated templates of one class.

    ``coeff_logits`` overrides the bank's stored coefficients, e.g. with
    per-instance coefficients from :func:`fitting.fit_coefficients`.
    """
    if not 0 <= cls < bank.num_classes:
        raise IndexError(f"class {cls} out of range for {bank.num_classes} classes")
    T = sigmoid(bank.templates[cls])
    logits = bank.coeff_logits[cls] if coeff_logits is None else np.asarray(coeff_logits, dtype=float)
    w = softmax(logits)
    return PerspectivePoints(np.tensordot(w, T, axes=1))


# --- lines ------------------------------------------------------------------


def line_through(p1, p2, tol: float = 1e-12) -> np.ndarray:
    """Homogeneous line through two points, scaled so its normal (a, b) is
    a unit vector."""
    p1 = np.asarray(p1, dtype=float)
    p2 = np.asarray(p2, dtype=float)
    if np.linalg.norm(p1 - p2) <= tol:
        raise DegenerateLine(f"points {p1} and {p2} coincide")
    line = np.cross(np.append(p1, 1.0), np.append(p2, 1.0))
    return line / np.hypot(line[0], line[1])


def line_intersection(p1, p2, q1, q2) -> np.ndarray:
    """Homogeneous intersection of line p1p2 with line q1q2.

    With unit line normals the third component is the sine of the angle
    between the lines, so a value near zero marks a point at infinity whose
    first two components give its direction.
    """
    return np.cross(line_through(p1, p2), line_through(q1, q2))
