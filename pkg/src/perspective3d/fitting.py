"""Recover boxes (and template banks) from perspective points by first-order
descent with backtracking line search."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Mapping, Sequence

import numpy as np

from .box3d import Box3D, box_to_params, params_to_box, wrap_angle, keypoints_jacobian
from .camera import Camera, project_point, viewing_ray
from .errors import InsufficientData
from .losses import LossWeights, loss_perspective, loss_pp, projected_points
from .perspective import (
    PerspectivePoints,
    RoI,
    TemplateBank,
    denormalize_points,
    logit,
    sigmoid,
    softmax,
)

logger = logging.getLogger(__name__)

ARMIJO = 1e-4
SHRINK = 0.5
MAX_SHRINKS = 40
GRAD_TOL = 1e-14

# The fitted points are exact box projections, so the vanishing-point terms
# vanish at every iterate (up to clipping). The vertical-edge term is zero only
# for an untilted camera and would pull tilted fits off the true box, so it is
# switched off by default.
FIT_WEIGHTS = LossWeights(grav=0.0)


@dataclass(frozen=True)
class FitConfig:
    max_iters: int = 400
    step_size: float = 1.0
    step_decay: float = 1.0
    decay_interval: int = 100
    phase_switch: int = 50
    tol: float = 1e-10  # relative loss decrease that ends a phase
    min_distance: float = 0.1
    min_size: float = 0.05
    floor_weight: float = 1.0
    preconditioner: str = "gauss_newton"  # or "diagonal"
    damping: float = 1e-3
    patience: int = 50
    trace_every: int = 1

    def __post_init__(self):
        if self.max_iters <= 0 or self.decay_interval <= 0 or self.patience <= 0 or self.trace_every <= 0:
            raise ValueError("iteration counts must be positive")
        if not (self.step_size > 0 and self.tol > 0 and 0 < self.step_decay <= 1):
            raise ValueError("step_size and tol must be positive, step_decay in (0, 1]")
        if self.phase_switch < 0 or self.floor_weight < 0:
            raise ValueError("phase_switch and floor_weight must be non-negative")
        if not (self.min_distance > 0 and self.min_size > 0):
            raise ValueError("parameter bounds must be positive")
        if self.preconditioner not in ("gauss_newton", "diagonal") or self.damping < 0:
            raise ValueError("preconditioner must be 'gauss_newton' or 'diagonal', damping >= 0")

    @classmethod
    def from_dict(cls, d: Mapping) -> "FitConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown fit option(s): {', '.join(sorted(unknown))}")
        conv = {"int": int, "float": float, "str": str}
        cast = {k: conv[known[k]](v) for k, v in d.items()}
        return cls(**cast)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FitTrace:
    rows: list = field(default_factory=list)

    def record(self, iteration: int, phase: str, components: Mapping[str, float], total: float):
        self.rows.append({"iteration": iteration, "phase": phase, **components, "total": total})

    @property
    def totals(self) -> np.ndarray:
        return np.array([r["total"] for r in self.rows])

    def to_csv(self, extra: Mapping | None = None) -> str:
        buf = io.StringIO()
        self.write_csv(buf, extra=extra, header=True)
        return buf.getvalue()

    def write_csv(self, fh, extra: Mapping | None = None, header: bool = True):
        extra = dict(extra or {})
        cols = list(extra) + ["iteration", "phase"] + sorted(
            {k for r in self.rows for k in r} - {"iteration", "phase", "total"}
        ) + ["total"]
        writer = csv.DictWriter(fh, fieldnames=cols, restval="", lineterminator="\n")
        if header:
            writer.writeheader()
        for r in self.rows:
            writer.writerow({**extra, **{k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()}})


@dataclass
class FitResult:
    box: Box3D
    params: np.ndarray
    loss: float
    components: dict
    trace: FitTrace
    status: str  # "converged" | "max_iters" | "did_not_improve"
    accepted_steps: int

    @property
    def did_not_improve(self) -> bool:
        return self.status == "did_not_improve"


def _descend(objective: Callable, x0: np.ndarray, cfg: FitConfig, phases: Sequence[str], project=None):
    """Backtracking gradient descent over a sequence of objective phases.

    ``objective(x, phase)`` returns ``(value, grad, components, scale)`` where
    ``scale`` is an optional preconditioner (a vector multiplies the gradient,
    a symmetric positive definite matrix is solved against it), and
    ``objective(x, phase, value_only=True)`` returns the value alone. A phase
    ends at ``cfg.phase_switch`` or once it stalls. Returns the best iterate
    of the last phase reached, the trace, a status and the accepted-step count.
    """
    project = project or (lambda x: x)
    x = project(np.array(x0, dtype=float))
    trace = FitTrace()
    phase_idx = 0
    f, g, comps, scale = objective(x, phases[0])
    trace.record(0, phases[0], comps, f)
    best = (f, x.copy(), comps)
    accepted, stationary, status = 0, False, "max_iters"
    alpha_prev = cfg.step_size

    for it in range(1, cfg.max_iters + 1):
        cap = cfg.step_size * cfg.step_decay ** ((it - 1) // cfg.decay_interval)
        if scale is None:
            direction = -g
        elif scale.ndim == 2:
            direction = -np.linalg.solve(scale, g)
        else:
            direction = -g * scale
        slope = float(np.dot(g, direction))
        stalled = False
        if not np.isfinite(slope) or -slope <= GRAD_TOL * max(1.0, abs(f)):
            stalled = stationary = True
        else:
            alpha = min(2.0 * alpha_prev, cap)
            for _ in range(MAX_SHRINKS):
                x_new = project(x + alpha * direction)
                f_new = objective(x_new, phases[phase_idx], value_only=True)
                if np.isfinite(f_new) and f_new <= f + ARMIJO * alpha * slope:
                    break
                alpha *= SHRINK
            else:
                stalled = True
            if not stalled:
                f_old = f
                alpha_prev = alpha
                x = x_new
                f, g, comps, scale = objective(x, phases[phase_idx])
                accepted += 1
                if it % cfg.trace_every == 0:
                    trace.record(it, phases[phase_idx], comps, f)
                if f < best[0]:
                    best = (f, x.copy(), comps)
                stalled = (f_old - f) <= cfg.tol * f_old
        last_phase = phase_idx + 1 == len(phases)
        if not last_phase and (stalled or it >= cfg.phase_switch):
            phase_idx += 1
            f, g, comps, scale = objective(x, phases[phase_idx])
            trace.record(it, phases[phase_idx], comps, f)
            best = (f, x.copy(), comps)
            alpha_prev = cfg.step_size
            continue
        if stalled:
            status = "converged"
            break
        if accepted == 0 and it >= cfg.patience:
            break
    if accepted == 0 and not stationary:
        status = "did_not_improve"
    return best, trace, status, accepted


# --- box fitting -------------------------------------------------------------


def _init_params(init, cam: Camera) -> np.ndarray:
    if isinstance(init, Box3D):
        theta = box_to_params(init, cam)
    elif isinstance(init, Mapping):
        theta = np.array([*init["center2d"], init["distance"], *init["size"], init["yaw"]], dtype=float)
    else:
        theta = np.array(init, dtype=float).reshape(7)
    theta[6] = wrap_angle(theta[6])
    return theta


def box_objective(
    observed,
    cam: Camera,
    roi: RoI,
    weights: LossWeights,
    floor_weight: float,
    preconditioner: str = "gauss_newton",
    damping: float = 1e-3,
):
    """Fitting objective over ``(u, v, distance, w, l, h, yaw)``.

    ``warmup`` uses the reprojection term and the floor-contact term;
    ``full`` adds the weighted perspective loss of the projected points.
    The floor term is the squared gap between the box bottom and the floor
    plane, which fixes the global scale that projections alone leave free.
    """
    obs = observed.points if isinstance(observed, PerspectivePoints) else np.asarray(observed, dtype=float)
    w_proj = weights.proj
    w_p = weights.p
    floor_y = cam.extrinsics.cam_height

    def objective(theta, phase, value_only=False):
        try:
            pts, J = projected_points(theta, cam, roi)
        except Exception:
            return np.inf if value_only else (np.inf, np.zeros(7), {}, None)
        proj, dpts = loss_pp(pts, obs)
        total = w_proj * proj
        grad_pts = w_proj * dpts
        comps = {"proj": proj}
        if phase == "full" and w_p > 0:
            lp = loss_perspective(pts)
            value_p, grad_p = lp.weighted(weights.d1, weights.d2, weights.grav)
            total += w_p * value_p
            grad_pts = grad_pts + w_p * grad_p
            comps.update(d1=lp.d1, d2=lp.d2, grav=lp.grav)
        # box bottom: center height + h/2 along gravity (+y)
        center = params_to_box(theta, cam).center
        gap = center[1] + theta[5] / 2 - floor_y
        floor = gap * gap
        total += floor_weight * floor
        comps["floor"] = floor
        if value_only:
            return total
        grad = np.einsum("ij,ijk->k", grad_pts, J)
        Jc = keypoints_jacobian(theta, cam)[0, 1].copy()
        Jc[5] += 0.5
        grad += floor_weight * 2 * gap * Jc
        # Gauss-Newton matrix of the least-squares terms; the perspective
        # term only contributes its gradient
        Jf = J.reshape(18, 7)
        gn = w_proj * 2.0 / 18.0 * Jf.T @ Jf + floor_weight * 2 * np.outer(Jc, Jc)
        diag = np.diag(gn)
        floor_diag = 1e-12 + 1e-9 * diag.max()
        if preconditioner == "diagonal":
            return total, grad, comps, 1.0 / (diag + floor_diag)
        return total, grad, comps, gn + np.diag(damping * diag + floor_diag)

    return objective


def fit_box(
    observed,
    init,
    cam: Camera,
    roi: RoI,
    weights: LossWeights = FIT_WEIGHTS,
    cfg: FitConfig = FitConfig(),
) -> FitResult:
    """Fit box parameters so the box's projection matches ``observed``.

    ``init`` is a :class:`Box3D`, a mapping with ``center2d``, ``distance``,
    ``size`` and ``yaw``, or a parameter vector. The best iterate of the
    final phase is returned; if no step was accepted and the start is not
    stationary, the result carries ``status == "did_not_improve"`` and the
    initial box.
    """
    theta0 = _init_params(init, cam)
    lo = np.array([-np.inf, -np.inf, cfg.min_distance, cfg.min_size, cfg.min_size, cfg.min_size, -np.inf])

    def clamp(theta):
        return np.maximum(theta, lo)

    objective = box_objective(observed, cam, roi, weights, cfg.floor_weight, cfg.preconditioner, cfg.damping)
    (f, theta, comps), trace, status, accepted = _descend(objective, theta0, cfg, ("warmup", "full"), clamp)
    if status == "did_not_improve":
        logger.debug("fit_box made no progress from %s", theta0)
        theta = clamp(theta0)
    theta = theta.copy()
    theta[6] = wrap_angle(theta[6])
    return FitResult(params_to_box(theta, cam), theta, float(f), comps, trace, status, accepted)


def _floor_hit(pixel, cam: Camera):
    d = viewing_ray(pixel, cam) @ cam.rotation  # world direction (R^T ray)
    if d[1] <= 1e-6:
        return None
    return d * (cam.extrinsics.cam_height / d[1])


def _height_above(pixel, foot, cam: Camera):
    """Height of the point on the ray through ``pixel`` closest to the vertical
    line through floor point ``foot``."""
    d = viewing_ray(pixel, cam) @ cam.rotation
    # minimize horizontal distance between t*d and foot
    dh = d[[0, 2]]
    t = float(np.dot(dh, foot[[0, 2]]) / np.dot(dh, dh))
    return cam.extrinsics.cam_height - t * d[1]


def initial_guess(observed, cam: Camera, roi: RoI, default_size=(1.0, 1.0, 1.0), default_distance=3.0) -> np.ndarray:
    """Closed-form starting parameters assuming the box rests on the floor.

    Bottom corners are intersected with the floor plane to get footprint,
    yaw and plan size; top corners give the height. Falls back to the
    observed center with default size when the bottom rays miss the floor.
    """
    px = denormalize_points(observed, roi)
    feet = [_floor_hit(px[i], cam) for i in range(1, 5)]
    if all(f is not None for f in feet):
        a, b, c, d = feet
        w = (np.linalg.norm(a - b) + np.linalg.norm(d - c)) / 2
        l = (np.linalg.norm(a - d) + np.linalg.norm(b - c)) / 2
        ex = (a - b) + (d - c)
        yaw = np.arctan2(ex[2], ex[0])
        h = np.mean([_height_above(px[i + 4], feet[i - 1], cam) for i in range(1, 5)])
        if w > 1e-3 and l > 1e-3 and h > 1e-3:
            center = np.mean(feet, axis=0)
            center[1] = cam.extrinsics.cam_height - h / 2
            try:
                uv = project_point(center, cam)
                return np.array([uv[0], uv[1], np.linalg.norm(center), w, l, h, wrap_angle(yaw)])
            except Exception:
                pass
    uv = px[0]
    size = np.asarray(default_size, dtype=float)
    ray = viewing_ray(uv, cam) @ cam.rotation
    ray = ray / np.linalg.norm(ray)
    dist = default_distance
    if ray[1] > 1e-3:
        dist = (cam.extrinsics.cam_height - size[2] / 2) / ray[1]
    return np.array([uv[0], uv[1], max(dist, 0.5), *size, 0.0])


# --- template fitting --------------------------------------------------------


@dataclass
class TemplateFit:
    bank: TemplateBank
    coeff_logits: dict  # class -> (N_c, K) per-example coefficient logits
    losses: dict  # class -> final mean loss_pp
    traces: dict  # class -> FitTrace

    @property
    def mean_loss(self) -> float:
        n = sum(len(v) for v in self.coeff_logits.values())
        return sum(self.losses[c] * len(self.coeff_logits[c]) for c in self.losses) / n


def _template_objective(P: np.ndarray, K: int):
    N = len(P)

    def unpack(x):
        return x[: K * 18].reshape(K, 9, 2), x[K * 18:].reshape(N, K)

    def objective(x, phase, value_only=False):
        T, c = unpack(x)
        S = sigmoid(T)
        W = softmax(c, axis=1)
        pred = np.einsum("nk,kij->nij", W, S)
        diff = pred - P
        value = float(np.mean(diff**2))  # mean over examples of per-example MSE
        if value_only:
            return value
        dpred = 2.0 * diff / diff.size
        dS = np.einsum("nk,nij->kij", W, dpred)
        dT = dS * S * (1 - S)
        dW = np.einsum("nij,kij->nk", dpred, S)
        dc = W * (dW - np.sum(W * dW, axis=1, keepdims=True))
        return value, np.concatenate([dT.ravel(), dc.ravel()]), {"pp": value}, None

    return objective, unpack


def fit_templates(
    dataset: Sequence[tuple[int, PerspectivePoints]],
    K: int,
    cfg: FitConfig = FitConfig(max_iters=2000, step_size=1e3, tol=1e-12),
    num_classes: int | None = None,
    seed: int = 0,
) -> TemplateFit:
    """Learn per-class templates (shared) and per-example mixture coefficients.

    Templates start from K distinct random examples of the class passed
    through the inverse sigmoid (clamped to [0.01, 0.99]). The bank's stored
    coefficients are the log of the mean per-example mixture weights.
    """
    by_class: dict[int, list] = {}
    for cls, pts in dataset:
        p = pts.points if isinstance(pts, PerspectivePoints) else np.asarray(pts, dtype=float).reshape(9, 2)
        by_class.setdefault(int(cls), []).append(p)
    C = num_classes if num_classes is not None else (max(by_class) + 1 if by_class else 0)
    templates = np.zeros((C, K, 9, 2))
    coeffs = np.zeros((C, K))
    per_example, losses, traces = {}, {}, {}
    rng = np.random.default_rng(seed)
    for cls in sorted(by_class):
        P = np.array(by_class[cls])
        if len(P) < K:
            raise InsufficientData(f"class {cls} has {len(P)} examples, needs at least K={K}")
        seeds = rng.choice(len(P), size=K, replace=False)
        T0 = logit(np.clip(P[seeds], 0.01, 0.99))
        x0 = np.concatenate([T0.ravel(), np.zeros(len(P) * K)])
        objective, unpack = _template_objective(P, K)
        (f, x, _), trace, status, _ = _descend(objective, x0, cfg, ("full",))
        T, c = unpack(x)
        templates[cls] = T
        coeffs[cls] = np.log(np.mean(softmax(c, axis=1), axis=0))
        per_example[cls], losses[cls], traces[cls] = c, f, trace
    return TemplateFit(TemplateBank(templates, coeffs), per_example, losses, traces)


def fit_coefficients(bank: TemplateBank, cls: int, target, cfg: FitConfig = FitConfig(max_iters=500, step_size=1e3)) -> np.ndarray:
    """Per-instance coefficient logits that best reproduce ``target`` with
    the bank's templates held fixed."""
    P = target.points if isinstance(target, PerspectivePoints) else np.asarray(target, dtype=float)
    S = sigmoid(bank.templates[cls])

    def objective(c, phase, value_only=False):
        w = softmax(c)
        diff = np.tensordot(w, S, axes=1) - P
        value = float(np.mean(diff**2))
        if value_only:
            return value
        dW = np.tensordot(S, 2.0 * diff / diff.size, axes=([1, 2], [0, 1]))
        return value, w * (dW - np.dot(w, dW)), {"pp": value}, None

    (_, c, _), _, _, _ = _descend(objective, bank.coeff_logits[cls].copy(), cfg, ("full",))
    return c
