"""Gravity-aligned oriented 3D boxes.

A box has a center, a size ``(w, l, h)`` and a yaw about the gravity axis.
Locally, ``w`` runs along x, ``l`` along z and ``h`` along gravity (+y).
Yaw rotates the plan view counterclockwise as seen from above (x toward z).

Corner order (``a..h``): the bottom face ``a, b, c, d`` counterclockwise
from above starting at local ``(+w/2, +l/2)``, then the top face
``e, f, g, h`` directly above ``a, b, c, d``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import Camera, back_project, project_point, viewing_ray

# local (x, y, z) corner signs; y = +1 is the bottom face (gravity is +y)
CORNER_SIGNS = np.array(
    [
        [+1, +1, +1],
        [-1, +1, +1],
        [-1, +1, -1],
        [+1, +1, -1],
        [+1, -1, +1],
        [-1, -1, +1],
        [-1, -1, -1],
        [+1, -1, -1],
    ],
    dtype=float,
)
CORNER_NAMES = "abcdefgh"

# parameter vector layout used by losses and fitting
PARAM_NAMES = ("u", "v", "distance", "w", "l", "h", "yaw")


def wrap_angle(a):
    """Map angle(s) to [-pi, pi)."""
    return (np.asarray(a, dtype=float) + np.pi) % (2 * np.pi) - np.pi


@dataclass(frozen=True, eq=False)
class Box3D:
    center: np.ndarray
    size: np.ndarray
    yaw: float

    def __post_init__(self):
        center = np.asarray(self.center, dtype=float).reshape(3)
        size = np.asarray(self.size, dtype=float).reshape(3)
        if np.any(size <= 0):
            raise ValueError(f"box size must be positive, got {size}")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "yaw", float(wrap_angle(self.yaw)))

    @property
    def volume(self) -> float:
        return float(np.prod(self.size))

    def to_dict(self) -> dict:
        return {
            "center": [float(x) for x in self.center],
            "size": [float(x) for x in self.size],
            "yaw": self.yaw,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Box3D":
        return cls(np.array(d["center"], dtype=float), np.array(d["size"], dtype=float), float(d["yaw"]))

    def __repr__(self):
        c = ", ".join(f"{x:.4g}" for x in self.center)
        s = ", ".join(f"{x:.4g}" for x in self.size)
        return f"Box3D(center=[{c}], size=[{s}], yaw={self.yaw:.4g})"


def yaw_rotation(yaw: float) -> np.ndarray:
    """Rotation about gravity, acting on world (x, y, z) column vectors."""
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c]])


# size index (w, l, h) -> local axis (x, z, y)
SIZE_AXIS = (0, 2, 1)


def local_offsets(size) -> np.ndarray:
    w, l, h = np.asarray(size, dtype=float)
    return CORNER_SIGNS * (np.array([w, h, l]) / 2.0)


def corners(box: Box3D) -> np.ndarray:
    """The 8 corners, shape (8, 3), in ``a..h`` order."""
    return box.center + local_offsets(box.size) @ yaw_rotation(box.yaw).T


def compose_box(center2d, distance: float, size, yaw: float, cam: Camera) -> Box3D:
    """Inverse projection: place a box whose center projects to ``center2d``
    at Euclidean ``distance`` from the camera."""
    if not distance > 0:
        raise ValueError("distance must be positive")
    return Box3D(back_project(np.asarray(center2d, dtype=float), distance, cam), size, yaw)


def box_to_params(box: Box3D, cam: Camera) -> np.ndarray:
    """Box -> ``(u, v, distance, w, l, h, yaw)``."""
    uv = project_point(box.center, cam)
    d = np.linalg.norm(box.center - cam.center)
    return np.array([uv[0], uv[1], d, *box.size, box.yaw])


def params_to_box(theta, cam: Camera) -> Box3D:
    theta = np.asarray(theta, dtype=float)
    return compose_box(theta[:2], theta[2], theta[3:6], theta[6], cam)


def keypoints(box: Box3D) -> np.ndarray:
    """Center followed by the 8 corners, shape (9, 3)."""
    return np.vstack([box.center[None], corners(box)])


def keypoints_jacobian(theta, cam: Camera) -> np.ndarray:
    """d(keypoints)/d(params), shape (9, 3, 7), for the parameter layout
    ``(u, v, distance, w, l, h, yaw)``."""
    u, v, d, w, l, h, yaw = np.asarray(theta, dtype=float)
    k = cam.intrinsics
    Rt = cam.rotation.T
    ray = viewing_ray(np.array([u, v]), cam)
    r = np.linalg.norm(ray)
    n = ray / r
    dn_dray = (np.eye(3) - np.outer(n, n)) / r
    J = np.zeros((9, 3, 7))
    # center: X = R^T (d n)
    J[:, :, 0] = (Rt @ (d * dn_dray[:, 0] / k.fx))[None]
    J[:, :, 1] = (Rt @ (d * dn_dray[:, 1] / k.fy))[None]
    J[:, :, 2] = (Rt @ n)[None]
    # corner offsets: Ryaw @ (signs * size / 2)
    Ry = yaw_rotation(yaw)
    c, s = np.cos(yaw), np.sin(yaw)
    dRy = np.array([[-s, 0.0, -c], [0.0, 0.0, 0.0], [c, 0.0, -s]])
    half = CORNER_SIGNS / 2.0
    for j, axis in enumerate(SIZE_AXIS):
        J[1:, :, 3 + j] = half[:, axis:axis + 1] * Ry[:, axis][None]
    J[1:, :, 6] = local_offsets([w, l, h]) @ dRy.T
    return J
