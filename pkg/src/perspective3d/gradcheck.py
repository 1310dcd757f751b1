"""Finite-difference verification suite for every analytic loss gradient."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import losses
from .box3d import Box3D, box_to_params, keypoints
from .camera import Camera, CameraExtrinsics, CameraIntrinsics, project_point
from .perspective import RoI, gt_perspective_points

GRADCHECK_TOLERANCE = 1e-5

# a configuration is valid when it is well away from the non-smooth or
# ill-conditioned regions of the perspective loss
MIN_SEGMENT = 0.25
MIN_SINE = 0.2
MAX_VANISHING = 5.0
HUBER_MARGIN = 0.05
FOLD_MARGIN = np.pi / 4


def _random_camera(rng) -> Camera:
    return Camera(
        CameraIntrinsics(500.0, 500.0, 320.0, 240.0, 640.0, 480.0),
        CameraExtrinsics(rng.uniform(-0.3, 0.3), rng.uniform(-0.1, 0.1), rng.uniform(1.0, 1.8)),
    )


def _random_box(rng, cam: Camera) -> Box3D:
    while True:
        size = rng.uniform(0.4, 2.0, 3)
        r, az = rng.uniform(2.5, 7.0), rng.uniform(-0.4, 0.4)
        center = np.array([r * np.sin(az), cam.extrinsics.cam_height - size[2] / 2, r * np.cos(az)])
        box = Box3D(center, size, rng.uniform(-np.pi, np.pi))
        try:
            project_point(keypoints(box), cam)
        except Exception:
            continue
        return box


def perspective_config_ok(pts) -> bool:
    pts = np.asarray(pts, dtype=float).reshape(9, 2)
    segments = [s for pair in losses.D1_PAIRS + losses.D2_PAIRS for s in pair] + list(losses.VERTICAL_EDGES)
    if min(np.linalg.norm(pts[j] - pts[i]) for i, j in segments) < MIN_SEGMENT:
        return False
    for pairs in (losses.D1_PAIRS, losses.D2_PAIRS):
        vps = []
        for seg1, seg2 in pairs:
            x, _, sine = losses._intersection(pts, seg1, seg2)
            if abs(sine) < MIN_SINE:
                return False
            vps.append(x[:2] / x[2])
        if max(np.linalg.norm(v) for v in vps) > MAX_VANISHING:
            return False
        if abs(np.linalg.norm(vps[0] - vps[1]) - losses.HUBER_DELTA) < HUBER_MARGIN:
            return False
    vecs = np.array([pts[j] - pts[i] for i, j in losses.VERTICAL_EDGES])
    theta = np.arctan2(vecs[:, 0], vecs[:, 1])
    rel = theta - theta[0]
    folded = losses._fold(rel)
    return bool(np.all(np.abs(folded) < np.pi / 2 - FOLD_MARGIN))


def sample_perspective_points(rng) -> np.ndarray:
    while True:
        pts = rng.uniform(0.0, 1.0, (9, 2))
        if perspective_config_ok(pts):
            return pts


def _check_pp(rng) -> float:
    pred, gt = rng.uniform(0, 1, (9, 2)), rng.uniform(0, 1, (9, 2))
    return losses.grad_check(lambda x: losses.loss_pp(x.reshape(9, 2), gt), pred.ravel())


def _check_perspective(rng) -> float:
    pts = sample_perspective_points(rng)

    def f(x):
        lp = losses.loss_perspective(x.reshape(9, 2))
        return lp.total, lp.grad.ravel()

    return losses.grad_check(f, pts.ravel())


def _check_3d(rng) -> float:
    cam = _random_camera(rng)
    box = _random_box(rng, cam)
    theta = box_to_params(box, cam)
    gt = losses.BoxAttributes.from_vector(theta[2:])
    pred = theta[2:] + rng.normal(0.0, [0.3, 0.1, 0.1, 0.1, 0.3])
    pred[1:4] = np.abs(pred[1:4]) + 0.05

    def f(x):
        l3 = losses.loss_3d(losses.BoxAttributes.from_vector(x), gt, cam, theta[:2])
        return l3.total, l3.grad

    return losses.grad_check(f, pred)


def _check_proj(rng) -> float:
    cam = _random_camera(rng)
    box = _random_box(rng, cam)
    theta = box_to_params(box, cam)
    roi = RoI.from_points(project_point(keypoints(box), cam))
    gt = gt_perspective_points(box, cam, roi)
    while True:
        pred = theta + rng.normal(0.0, [3.0, 3.0, 0.1, 0.05, 0.05, 0.05, 0.05])
        pts, _ = losses.projected_points(pred, cam, roi)
        if not pts.clipped.any():
            break
    return losses.grad_check(lambda x: losses.loss_proj(x, cam, roi, gt), pred)


CHECKS: dict[str, Callable] = {
    "loss_pp": _check_pp,
    "loss_perspective": _check_perspective,
    "loss_3d": _check_3d,
    "loss_proj": _check_proj,
}


@dataclass
class GradCheckReport:
    max_error: dict
    num_configs: int
    tolerance: float = GRADCHECK_TOLERANCE

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.max_error.values())

    def lines(self) -> list[str]:
        out = []
        for name, err in self.max_error.items():
            verdict = "PASS" if err < self.tolerance else "FAIL"
            out.append(f"{name:18s} max_rel_err={err:.3e} ({self.num_configs} configs) {verdict}")
        return out

    def to_dict(self) -> dict:
        return {
            "tolerance": self.tolerance,
            "num_configs": self.num_configs,
            "max_error": dict(self.max_error),
            "passed": self.passed,
        }


def run_suite(seed: int = 0, num_configs: int = 100, checks: dict | None = None) -> GradCheckReport:
    """Worst relative gradient error per loss over ``num_configs`` random
    valid configurations each."""
    checks = CHECKS if checks is None else checks
    errors = {}
    for k, (name, check) in enumerate(checks.items()):
        rng = np.random.default_rng([seed, k])
        errors[name] = max(check(rng) for _ in range(num_configs))
    return GradCheckReport(errors, num_configs)
