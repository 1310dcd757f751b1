"""Differentiable objectives on perspective points and 3D boxes.

Every loss returns its value together with an analytic gradient. Points are
(9, 2) arrays in normalized extended-RoI coordinates, indexed
``[center, a, b, c, d, e, f, g, h]``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Mapping

import numpy as np

from .box3d import Box3D, box_to_params, keypoints, keypoints_jacobian, params_to_box
from .camera import Camera, project_point, projection_jacobian
from .errors import DegenerateLine, NonFinite
from .perspective import PerspectivePoints, RoI, extended_roi, normalize_points

HUBER_DELTA = 1.0
PARALLEL_TOL = 1e-9
DEGENERATE_TOL = 1e-12
DEGENERATE_PENALTY = 10.0

# keypoint indices (0 is the projected center)
A, B, C, D, E, F, G, H = range(1, 9)
# two line pairs per horizontal direction; each pair shares a vanishing point
D1_PAIRS = (((A, D), (E, H)), ((B, C), (F, G)))
D2_PAIRS = (((A, B), (E, F)), ((D, C), (H, G)))
VERTICAL_EDGES = ((A, E), (B, F), (C, G), (D, H))


def _points(p) -> np.ndarray:
    if isinstance(p, PerspectivePoints):
        return p.points
    return np.asarray(p, dtype=float).reshape(9, 2)


# --- point MSE --------------------------------------------------------------


def loss_pp(pred, gt) -> tuple[float, np.ndarray]:
    """Mean squared error over the 18 coordinates; gradient w.r.t. ``pred``."""
    diff = _points(pred) - _points(gt)
    return float(np.mean(diff**2)), 2.0 * diff / diff.size


# --- perspective loss -------------------------------------------------------


def _skew(a):
    return np.array([[0.0, -a[2], a[1]], [a[2], 0.0, -a[0]], [-a[1], a[0], 0.0]])


def _fold(theta):
    """Fold angle(s) into [-pi/2, pi/2)."""
    return (theta + np.pi / 2) % np.pi - np.pi / 2


def _huber(delta_vec, delta=HUBER_DELTA):
    r = np.linalg.norm(delta_vec)
    if r <= delta:
        return 0.5 * r * r, delta_vec
    return delta * (r - 0.5 * delta), delta * delta_vec / r


def _angle_spread(pts, segments):
    """Population variance of segment direction angles measured from the
    image vertical, folded relative to the first segment; with gradient."""
    grad = np.zeros_like(pts)
    vecs = np.array([pts[j] - pts[i] for i, j in segments])
    sq = np.sum(vecs**2, axis=1)
    if np.any(sq <= DEGENERATE_TOL**2):
        return DEGENERATE_PENALTY, grad
    theta = np.arctan2(vecs[:, 0], vecs[:, 1])
    rel = _fold(theta - theta[0])
    dev = rel - rel.mean()
    n = len(segments)
    value = float(np.mean(dev**2))
    dtheta = 2.0 * dev / n
    # d atan2(x, y) = (y dx - x dy) / (x^2 + y^2)
    dvec = dtheta[:, None] * np.stack([vecs[:, 1], -vecs[:, 0]], axis=1) / sq[:, None]
    for (i, j), g in zip(segments, dvec):
        grad[j] += g
        grad[i] -= g
    return value, grad


def _intersection(pts, seg1, seg2):
    """Homogeneous intersection of two point-pair lines, its Jacobian
    w.r.t. the four endpoints, and the sine of the angle between the lines."""
    (i1, i2), (j1, j2) = seg1, seg2
    P = np.hstack([pts, np.ones((len(pts), 1))])
    for a, b in (seg1, seg2):
        if np.linalg.norm(pts[a] - pts[b]) <= DEGENERATE_TOL:
            raise DegenerateLine(f"keypoints {a} and {b} coincide")
    l1 = np.cross(P[i1], P[i2])
    l2 = np.cross(P[j1], P[j2])
    x = np.cross(l1, l2)
    sine = x[2] / (np.hypot(l1[0], l1[1]) * np.hypot(l2[0], l2[1]))
    dx_dl1, dx_dl2 = -_skew(l2), _skew(l1)
    jac = {
        i1: dx_dl1 @ -_skew(P[i2])[:, :2],
        i2: dx_dl1 @ _skew(P[i1])[:, :2],
        j1: dx_dl2 @ -_skew(P[j2])[:, :2],
        j2: dx_dl2 @ _skew(P[j1])[:, :2],
    }
    return x, jac, sine


def _vanishing_term(pts, pair_u1, pair_u2):
    """Robust distance between the two intersection points of one direction."""
    grad = np.zeros_like(pts)
    try:
        x1, jac1, s1 = _intersection(pts, *pair_u1)
        x2, jac2, s2 = _intersection(pts, *pair_u2)
    except DegenerateLine:
        return DEGENERATE_PENALTY, grad
    if abs(s1) < PARALLEL_TOL or abs(s2) < PARALLEL_TOL:
        segs = [pair_u1[0], pair_u1[1], pair_u2[0], pair_u2[1]]
        return _angle_spread(pts, segs)
    u1, u2 = x1[:2] / x1[2], x2[:2] / x2[2]
    value, dval = _huber(u1 - u2)
    for x, jac, sign in ((x1, jac1, 1.0), (x2, jac2, -1.0)):
        w = x[2]
        du_dx = np.array([[1 / w, 0.0, -x[0] / w**2], [0.0, 1 / w, -x[1] / w**2]])
        g = sign * (dval @ du_dx)
        for idx, J in jac.items():
            grad[idx] += g @ J
    return float(value), grad


@dataclass
class PerspectiveLoss:
    d1: float
    d2: float
    grav: float
    grad_d1: np.ndarray
    grad_d2: np.ndarray
    grad_grav: np.ndarray

    @property
    def total(self) -> float:
        return self.d1 + self.d2 + self.grav

    @property
    def grad(self) -> np.ndarray:
        return self.grad_d1 + self.grad_d2 + self.grad_grav

    def weighted(self, w_d1=1.0, w_d2=1.0, w_grav=1.0) -> tuple[float, np.ndarray]:
        value = w_d1 * self.d1 + w_d2 * self.d2 + w_grav * self.grav
        grad = w_d1 * self.grad_d1 + w_d2 * self.grad_d2 + w_grav * self.grad_grav
        return value, grad


def loss_perspective(points) -> PerspectiveLoss:
    """Vanishing-point agreement for both horizontal box directions plus
    the spread of the vertical-edge angles."""
    pts = _points(points)
    d1, g1 = _vanishing_term(pts, *D1_PAIRS)
    d2, g2 = _vanishing_term(pts, *D2_PAIRS)
    grav, gg = _angle_spread(pts, VERTICAL_EDGES)
    return PerspectiveLoss(d1, d2, grav, g1, g2, gg)


# --- 3D attributes ----------------------------------------------------------


@dataclass
class BoxAttributes:
    distance: float
    size: np.ndarray
    yaw: float

    def __post_init__(self):
        self.distance = float(self.distance)
        self.size = np.asarray(self.size, dtype=float).reshape(3)
        self.yaw = float(self.yaw)

    def vector(self) -> np.ndarray:
        return np.array([self.distance, *self.size, self.yaw])

    @classmethod
    def from_vector(cls, x) -> "BoxAttributes":
        return cls(x[0], x[1:4], x[4])


@dataclass
class Loss3D:
    dis: float
    size: float
    ori: float
    box3d: float
    grad_dis: np.ndarray
    grad_size: np.ndarray
    grad_ori: np.ndarray
    grad_box3d: np.ndarray

    @property
    def total(self) -> float:
        return self.dis + self.size + self.ori + self.box3d

    @property
    def grad(self) -> np.ndarray:
        return self.grad_dis + self.grad_size + self.grad_ori + self.grad_box3d


def _ring_shift(k: int) -> np.ndarray:
    """Corner relabeling for a yaw turn of k quarter turns."""
    ring = (np.arange(4) + k) % 4
    return np.concatenate([ring, ring + 4])


def loss_3d(pred: BoxAttributes, gt: BoxAttributes, cam: Camera, center2d) -> Loss3D:
    """Attribute losses plus a corner loss between the two composed boxes.

    Gradients are w.r.t. ``pred.vector()`` = (distance, w, l, h, yaw). The
    corner loss takes the minimum over the four cyclic corner relabelings,
    so boxes that coincide as solids score zero.
    """
    center2d = np.asarray(center2d, dtype=float)
    zeros = np.zeros(5)

    dis = (pred.distance - gt.distance) ** 2
    g_dis = zeros.copy()
    g_dis[0] = 2 * (pred.distance - gt.distance)

    ds = pred.size - gt.size
    size = float(np.mean(ds**2))
    g_size = zeros.copy()
    g_size[1:4] = 2 * ds / 3

    dsin = np.sin(pred.yaw) - np.sin(gt.yaw)
    dcos = np.cos(pred.yaw) - np.cos(gt.yaw)
    ori = dsin**2 + dcos**2
    g_ori = zeros.copy()
    g_ori[4] = 2 * dsin * np.cos(pred.yaw) - 2 * dcos * np.sin(pred.yaw)

    theta_p = np.array([*center2d, *pred.vector()])
    theta_g = np.array([*center2d, *gt.vector()])
    cp = keypoints(params_to_box(theta_p, cam))[1:]
    cg = keypoints(params_to_box(theta_g, cam))[1:]
    costs = [np.mean(np.sum((cp - cg[_ring_shift(k)]) ** 2, axis=1)) for k in range(4)]
    k = int(np.argmin(costs))
    delta = cp - cg[_ring_shift(k)]
    J = keypoints_jacobian(theta_p, cam)[1:, :, 2:]
    g_box = 2.0 / 8.0 * np.einsum("ni,nij->j", delta, J)
    return Loss3D(float(dis), size, float(ori), float(costs[k]), g_dis, g_size, g_ori, g_box)


# --- reprojection consistency -----------------------------------------------


def projected_points(theta, cam: Camera, roi: RoI):
    """Normalized perspective points of the box with parameters ``theta``
    and their Jacobian (9, 2, 7); clipped coordinates get zero rows."""
    box = params_to_box(theta, cam)
    X = keypoints(box)
    ext = extended_roi(roi)
    raw = (project_point(X, cam) - ext.origin) / ext.extent
    J = projection_jacobian(X, cam) @ keypoints_jacobian(theta, cam)
    J = J / ext.extent[None, :, None]
    inside = (raw >= 0.0) & (raw <= 1.0)
    J = J * inside[..., None]
    return normalize_points(project_point(X, cam), roi), J


def loss_proj(box, cam: Camera, roi: RoI, gt) -> tuple[float, np.ndarray]:
    """MSE between the exact normalized projection of ``box`` and ``gt``.

    ``box`` is a :class:`Box3D` or a parameter vector
    ``(u, v, distance, w, l, h, yaw)``; the gradient is w.r.t. that vector.
    """
    theta = box_to_params(box, cam) if isinstance(box, Box3D) else np.asarray(box, dtype=float)
    if isinstance(box, Box3D):
        pts = normalize_points(project_point(keypoints(box), cam), roi)
        _, J = projected_points(theta, cam, roi)
    else:
        pts, J = projected_points(theta, cam, roi)
    value, dpts = loss_pp(pts, gt)
    return value, np.einsum("ij,ijk->k", dpts, J)


# --- aggregation ------------------------------------------------------------

TOP_LEVEL = ("pp", "p", "3d", "proj")
P_TERMS = ("d1", "d2", "grav")
TERMS_3D = ("dis", "size", "ori", "box3d")


@dataclass(frozen=True)
class LossWeights:
    pp: float = 1.0
    p: float = 1.0
    three_d: float = 1.0
    proj: float = 1.0
    d1: float = 1.0
    d2: float = 1.0
    grav: float = 1.0
    dis: float = 1.0
    size: float = 1.0
    ori: float = 1.0
    box3d: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {f.name!r} must be a finite non-negative number, got {v!r}")

    @classmethod
    def from_dict(cls, d: Mapping) -> "LossWeights":
        d = dict(d)
        if "3d" in d:
            d["three_d"] = d.pop("3d")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown loss weight(s): {', '.join(sorted(unknown))}")
        return cls(**{k: float(v) for k, v in d.items()})

    def to_dict(self) -> dict:
        return asdict(self)

    def for_phase(self, phase: str) -> "LossWeights":
        if phase == "full":
            return self
        if phase == "warmup":
            return LossWeights(**{**asdict(self), "p": 0.0, "proj": 0.0})
        raise ValueError(f"unknown phase {phase!r}")


@dataclass
class LossBreakdown:
    components: dict = field(default_factory=dict)
    total: float = 0.0

    def as_row(self) -> dict:
        return {**self.components, "total": self.total}


def combine(components: Mapping[str, float], weights: LossWeights = LossWeights(), phase: str = "full") -> LossBreakdown:
    """Weighted sum of loss components.

    ``components`` may give ``p`` and ``3d`` directly or through their sub-terms
    (``d1, d2, grav`` and ``dis, size, ori, box3d``), which are then combined
    with their sub-weights.
    """
    w = weights.for_phase(phase)
    comps = {k: float(v) for k, v in components.items()}
    if any(k in comps for k in P_TERMS):
        comps["p"] = sum(getattr(w, k) * comps.get(k, 0.0) for k in P_TERMS)
    if any(k in comps for k in TERMS_3D):
        comps["3d"] = sum(getattr(w, k) * comps.get(k, 0.0) for k in TERMS_3D)
    top = {"pp": w.pp, "p": w.p, "3d": w.three_d, "proj": w.proj}
    total = sum(top[k] * comps.get(k, 0.0) for k in TOP_LEVEL)
    return LossBreakdown(comps, float(total))


def total_loss(
    pred_points,
    gt_points,
    pred_attrs: BoxAttributes,
    gt_attrs: BoxAttributes,
    cam: Camera,
    roi: RoI,
    weights: LossWeights = LossWeights(),
    phase: str = "full",
) -> LossBreakdown:
    """All per-RoI losses for one prediction against its ground truth.

    The predicted box is composed from the first predicted point (the
    projected center) and the predicted attributes; the attribute losses are
    evaluated at the ground-truth center.
    """
    from .perspective import denormalize_points

    pred = _points(pred_points)
    gt = _points(gt_points)
    pp, _ = loss_pp(pred, gt)
    lp = loss_perspective(pred)
    l3 = loss_3d(pred_attrs, gt_attrs, cam, denormalize_points(gt, roi)[0])
    center2d = denormalize_points(pred, roi)[0]
    proj, _ = loss_proj(np.array([*center2d, *pred_attrs.vector()]), cam, roi, gt)
    comps = {
        "pp": pp, "d1": lp.d1, "d2": lp.d2, "grav": lp.grav,
        "dis": l3.dis, "size": l3.size, "ori": l3.ori, "box3d": l3.box3d,
        "proj": proj,
    }
    return combine(comps, weights, phase)


# --- gradient verification --------------------------------------------------


def grad_check(loss: Callable, x, step: float = 1e-5) -> float:
    """Max relative error between the analytic gradient of ``loss`` and
    central finite differences at ``x``.

    ``loss(x)`` must return ``(value, gradient)``. The step for coordinate
    ``i`` is ``step * max(1, |x_i|)``.
    """
    x = np.array(x, dtype=float)
    value, g_an = loss(x)
    if not np.isfinite(value) or not np.all(np.isfinite(g_an)):
        raise NonFinite(f"loss or gradient is not finite at x={x}")
    g_an = np.asarray(g_an, dtype=float).reshape(x.shape)
    worst = 0.0
    for i in np.ndindex(x.shape):
        h = step * max(1.0, abs(x[i]))
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        fp, fm = loss(xp)[0], loss(xm)[0]
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFinite(f"loss is not finite near x={x}")
        g_fd = (fp - fm) / (2 * h)
        denom = max(abs(g_fd), abs(g_an[i]), 1e-8)
        worst = max(worst, abs(g_fd - g_an[i]) / denom)
    return worst
