"""Pinhole camera with a gravity-aligned world frame.

World frame conventions:

* the origin is the camera center;
* +y points along gravity (down), so height above the floor is
  ``cam_height - y``;
* x and z span the horizontal plane; with zero tilt and roll the world
  frame coincides with the camera frame (x right, y down, z forward).

The camera heading (yaw) is fixed at zero, which only fixes the horizontal
orientation of the world frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BehindCamera

EPS_DEPTH = 1e-6


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: float
    height: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point must lie inside the image")

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )


@dataclass(frozen=True)
class CameraExtrinsics:
    tilt: float = 0.0  # pitch about camera x; positive looks down
    roll: float = 0.0  # about the optical axis
    cam_height: float = 1.5  # camera center above the floor, meters

    def __post_init__(self):
        if abs(self.tilt) >= np.pi / 2 or abs(self.roll) >= np.pi / 2:
            raise ValueError("|tilt| and |roll| must be below pi/2")
        if not self.cam_height > 0:
            raise ValueError("cam_height must be positive")


@dataclass(frozen=True)
class Camera:
    intrinsics: CameraIntrinsics
    extrinsics: CameraExtrinsics = CameraExtrinsics()

    @property
    def center(self) -> np.ndarray:
        return np.zeros(3)

    @property
    def rotation(self) -> np.ndarray:
        return rotation_matrix(self.extrinsics)

    def to_dict(self) -> dict:
        k, e = self.intrinsics, self.extrinsics
        return {
            "fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy,
            "width": k.width, "height": k.height,
            "tilt": e.tilt, "roll": e.roll, "cam_height": e.cam_height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            CameraIntrinsics(
                float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                float(d["width"]), float(d["height"]),
            ),
            CameraExtrinsics(
                float(d.get("tilt", 0.0)),
                float(d.get("roll", 0.0)),
                float(d.get("cam_height", 1.5)),
            ),
        )


def rotation_matrix(ext: CameraExtrinsics) -> np.ndarray:
    """World-to-camera rotation: tilt about x first, then roll about z."""
    ct, st = np.cos(ext.tilt), np.sin(ext.tilt)
    cr, sr = np.cos(ext.roll), np.sin(ext.roll)
    r_tilt = np.array([[1.0, 0.0, 0.0], [0.0, ct, -st], [0.0, st, ct]])
    r_roll = np.array([[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]])
    return r_roll @ r_tilt


def to_camera_frame(X, cam: Camera) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    return (X - cam.center) @ cam.rotation.T


def project_point(X, cam: Camera, eps_depth: float = EPS_DEPTH) -> np.ndarray:
    """Project world point(s) of shape (3,) or (N, 3) to pixels.

    Raises:
        BehindCamera: if any point has camera-frame depth <= ``eps_depth``.
    """
    Xc = to_camera_frame(X, cam)
    z = Xc[..., 2]
    if np.any(z <= eps_depth):
        raise BehindCamera(f"point depth {np.min(z):.3g} m is not in front of the camera")
    k = cam.intrinsics
    u = k.fx * Xc[..., 0] / z + k.cx
    v = k.fy * Xc[..., 1] / z + k.cy
    return np.stack([u, v], axis=-1)


def projection_jacobian(X, cam: Camera) -> np.ndarray:
    """d(pixel)/d(world point), shape (..., 2, 3). Assumes positive depth."""
    Xc = to_camera_frame(X, cam)
    x, y, z = Xc[..., 0], Xc[..., 1], Xc[..., 2]
    k = cam.intrinsics
    zeros = np.zeros_like(z)
    J = np.stack(
        [
            np.stack([k.fx / z, zeros, -k.fx * x / z**2], axis=-1),
            np.stack([zeros, k.fy / z, -k.fy * y / z**2], axis=-1),
        ],
        axis=-2,
    )
    return J @ cam.rotation


def viewing_ray(p, cam: Camera) -> np.ndarray:
    """Unnormalized camera-frame ray ((u-cx)/fx, (v-cy)/fy, 1)."""
    p = np.asarray(p, dtype=float)
    k = cam.intrinsics
    ones = np.ones(p.shape[:-1])
    return np.stack([(p[..., 0] - k.cx) / k.fx, (p[..., 1] - k.cy) / k.fy, ones], axis=-1)


def back_project(p, distance, cam: Camera) -> np.ndarray:
    """World point on the ray through pixel ``p`` at Euclidean ``distance``
    from the camera center."""
    distance = np.asarray(distance, dtype=float)
    if np.any(distance <= 0):
        raise ValueError("distance must be positive")
    ray = viewing_ray(p, cam)
    n = ray / np.linalg.norm(ray, axis=-1, keepdims=True)
    return cam.center + (distance[..., None] * n) @ cam.rotation
