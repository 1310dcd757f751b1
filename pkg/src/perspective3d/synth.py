"""Synthetic indoor scenes: a tilted camera looking at gravity-aligned boxes
resting on the floor, with ground-truth and noisy perspective points."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Mapping

import numpy as np

from .box3d import Box3D, keypoints
from .camera import EPS_DEPTH, Camera, CameraExtrinsics, CameraIntrinsics, to_camera_frame, project_point
from .errors import RejectionOverflow
from .evaluation import footprint_overlap
from .perspective import PerspectivePoints, RoI, gt_perspective_points

SCHEMA_VERSION = 1
ROI_INFLATE = 0.1

CLASS_NAMES = ("bed", "chair", "sofa", "table", "desk", "toilet", "bin", "sink", "shelf", "lamp")
# (w, l, h) ranges in meters; loosely themed, not dataset statistics
CLASS_SIZES = {
    "bed": ((1.4, 1.9, 0.4), (2.0, 2.2, 1.0)),
    "chair": ((0.4, 0.4, 0.7), (0.6, 0.6, 1.1)),
    "sofa": ((1.5, 0.8, 0.7), (2.4, 1.0, 1.0)),
    "table": ((0.8, 0.6, 0.5), (1.8, 1.0, 0.8)),
    "desk": ((1.0, 0.5, 0.7), (1.6, 0.8, 0.8)),
    "toilet": ((0.35, 0.6, 0.7), (0.45, 0.75, 0.85)),
    "bin": ((0.25, 0.25, 0.3), (0.4, 0.4, 0.6)),
    "sink": ((0.4, 0.4, 0.8), (0.8, 0.6, 0.95)),
    "shelf": ((0.6, 0.3, 1.0), (1.2, 0.45, 2.0)),
    "lamp": ((0.3, 0.3, 1.2), (0.5, 0.5, 1.8)),
}


def _pair(v, name):
    lo, hi = (float(v[0]), float(v[1]))
    if not lo <= hi:
        raise ValueError(f"{name}: empty range [{lo}, {hi}]")
    return (lo, hi)


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    num_scenes: int = 10
    objects: tuple = (1, 4)
    class_names: tuple = CLASS_NAMES
    size_ranges: tuple = tuple(CLASS_SIZES[c] for c in CLASS_NAMES)
    distance: tuple = (2.0, 7.0)  # horizontal camera-to-center distance, meters
    tilt: tuple = (0.0, 0.2)
    roll: tuple = (-0.05, 0.05)
    cam_height: tuple = (1.2, 1.6)
    noise: float = 0.0
    intrinsics: tuple = (529.5, 529.5, 365.0, 265.0, 730.0, 530.0)  # fx, fy, cx, cy, w, h
    max_attempts: int = 1000

    def __post_init__(self):
        set_ = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        set_("objects", tuple(int(x) for x in self.objects))
        if not 0 <= self.objects[0] <= self.objects[1]:
            raise ValueError(f"objects: invalid count range {self.objects}")
        if self.num_scenes < 0:
            raise ValueError("num_scenes must be non-negative")
        for name in ("distance", "tilt", "roll", "cam_height"):
            set_(name, _pair(getattr(self, name), name))
        if self.distance[0] <= 0 or self.cam_height[0] <= 0:
            raise ValueError("distance and cam_height ranges must be positive")
        if max(abs(x) for x in self.tilt + self.roll) >= np.pi / 2:
            raise ValueError("tilt and roll must stay below pi/2")
        set_("class_names", tuple(str(c) for c in self.class_names))
        sizes = tuple((tuple(map(float, lo)), tuple(map(float, hi))) for lo, hi in self.size_ranges)
        if len(sizes) != len(self.class_names):
            raise ValueError("size_ranges must have one entry per class")
        for (lo, hi), name in zip(sizes, self.class_names):
            if len(lo) != 3 or len(hi) != 3 or min(lo) <= 0 or any(a > b for a, b in zip(lo, hi)):
                raise ValueError(f"size_ranges[{name}]: invalid range {lo} - {hi}")
        set_("size_ranges", sizes)
        if not self.noise >= 0:
            raise ValueError("noise must be non-negative")
        set_("intrinsics", tuple(float(x) for x in self.intrinsics))
        CameraIntrinsics(*self.intrinsics)
        if self.max_attempts <= 0:
            raise ValueError("max_attempts must be positive")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["size_ranges"] = {n: [list(lo), list(hi)] for n, (lo, hi) in zip(self.class_names, self.size_ranges)}
        d["class_names"] = list(self.class_names)
        for k in ("objects", "distance", "tilt", "roll", "cam_height", "intrinsics"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "SynthConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synth option(s): {', '.join(sorted(unknown))}")
        if isinstance(d.get("size_ranges"), Mapping):
            names = d.get("class_names") or list(d["size_ranges"])
            d["class_names"] = names
            d["size_ranges"] = [d["size_ranges"][n] for n in names]
        for k in ("seed", "num_scenes", "max_attempts"):
            if k in d:
                if isinstance(d[k], bool) or int(d[k]) != d[k]:
                    raise ValueError(f"{k}: expected an integer, got {d[k]!r}")
                d[k] = int(d[k])
        if "noise" in d:
            d["noise"] = float(d["noise"])
        return cls(**d)


@dataclass(frozen=True)
class SceneObject:
    cls: int
    box: Box3D
    roi: RoI


@dataclass(frozen=True)
class Scene:
    scene_id: str
    camera: Camera
    objects: tuple = field(default_factory=tuple)
    observations: tuple | None = None  # PerspectivePoints per object
    noise: float = 0.0

    def to_dict(self) -> dict:
        d = {
            "schema": SCHEMA_VERSION,
            "id": self.scene_id,
            "camera": self.camera.to_dict(),
            "objects": [{"class": o.cls, "box": o.box.to_dict(), "roi": o.roi.as_list()} for o in self.objects],
        }
        if self.observations is not None:
            d["noise"] = self.noise
            d["observations"] = [p.to_dict() for p in self.observations]
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "Scene":
        if d.get("schema") != SCHEMA_VERSION:
            raise ValueError(f"unsupported scene schema {d.get('schema')!r}")
        objects = tuple(
            SceneObject(int(o["class"]), Box3D.from_dict(o["box"]), RoI(*map(float, o["roi"])))
            for o in d["objects"]
        )
        obs = d.get("observations")
        if obs is not None:
            obs = tuple(PerspectivePoints.from_dict(p) for p in obs)
        return cls(str(d["id"]), Camera.from_dict(d["camera"]), objects, obs, float(d.get("noise", 0.0)))


def _visible(box: Box3D, cam: Camera) -> bool:
    X = keypoints(box)
    if np.any(to_camera_frame(X, cam)[:, 2] <= EPS_DEPTH):
        return False
    uv = project_point(X, cam)
    k = cam.intrinsics
    return bool(np.all((uv >= 0) & (uv <= [k.width, k.height])))


def generate_scene(cfg: SynthConfig, index: int = 0) -> Scene:
    """Scene ``index`` of the dataset defined by ``cfg``; deterministic in
    ``(cfg.seed, index)``."""
    rng = np.random.default_rng([cfg.seed, index])
    ext = CameraExtrinsics(
        tilt=rng.uniform(*cfg.tilt), roll=rng.uniform(*cfg.roll), cam_height=rng.uniform(*cfg.cam_height)
    )
    cam = Camera(CameraIntrinsics(*cfg.intrinsics), ext)
    k = cam.intrinsics
    half_fov = np.arctan2(k.width / 2, k.fx)
    n_obj = int(rng.integers(cfg.objects[0], cfg.objects[1] + 1))
    objects: list[SceneObject] = []
    attempts = 0
    while len(objects) < n_obj:
        attempts += 1
        if attempts > cfg.max_attempts:
            raise RejectionOverflow(
                f"scene {index}: placed {len(objects)}/{n_obj} objects in {cfg.max_attempts} attempts"
            )
        cls = int(rng.integers(cfg.num_classes))
        lo, hi = cfg.size_ranges[cls]
        size = rng.uniform(lo, hi)
        r = rng.uniform(*cfg.distance)
        azimuth = rng.uniform(-half_fov, half_fov)
        yaw = rng.uniform(-np.pi, np.pi)
        # resting on the floor: bottom face at y = cam_height
        center = np.array([r * np.sin(azimuth), ext.cam_height - size[2] / 2, r * np.cos(azimuth)])
        box = Box3D(center, size, yaw)
        if not _visible(box, cam):
            continue
        if any(footprint_overlap(box, o.box) > 0 for o in objects):
            continue
        roi = RoI.from_points(project_point(keypoints(box), cam), inflate=ROI_INFLATE)
        objects.append(SceneObject(cls, box, roi))
    return Scene(f"scene_{index:05d}", cam, tuple(objects))


def observe(scene: Scene, sigma: float, seed) -> list[PerspectivePoints]:
    """Ground-truth perspective points plus i.i.d. Gaussian noise of std
    ``sigma`` (normalized units) on every coordinate."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    rng = np.random.default_rng(seed)
    out = []
    for obj in scene.objects:
        gt = gt_perspective_points(obj.box, scene.camera, obj.roi)
        if sigma == 0:
            out.append(gt)
        else:
            out.append(PerspectivePoints(gt.points + rng.normal(0.0, sigma, gt.points.shape), gt.clipped))
    return out


def generate_dataset_scene(cfg: SynthConfig, index: int) -> Scene:
    """Scene with its noisy observations attached, as written by ``gen``."""
    scene = generate_scene(cfg, index)
    obs = observe(scene, cfg.noise, [cfg.seed, index, 1])
    return Scene(scene.scene_id, scene.camera, scene.objects, tuple(obs), cfg.noise)


def default_sizes(cfg: SynthConfig) -> np.ndarray:
    """Mid-range size per class, (C, 3)."""
    return np.array([(np.array(lo) + np.array(hi)) / 2 for lo, hi in cfg.size_ranges])
