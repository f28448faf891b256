"""Pose algebra for category-level refinement.

Rotations are 3x3 numpy arrays acting on column vectors. A pose maps a
canonical (object-frame) point ``p`` to the camera frame as ``R @ p + t``;
``s`` is the per-axis extent of the object's oriented bounding box.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog
from scipy.spatial import ConvexHull, HalfspaceIntersection, QhullError
from scipy.spatial.transform import Rotation

ORTHO_TOL = 1e-6
SIZE_FLOOR = 1e-4


class InvalidInputError(ValueError):
    pass


class DegenerateAxesError(ValueError):
    pass


class InvalidSizeError(ValueError):
    pass


def _vec3(x, name):
    v = np.asarray(x, dtype=np.float64).reshape(-1)
    if v.shape != (3,):
        raise InvalidInputError(f"{name} must be a 3-vector, got shape {np.shape(x)}")
    if not np.all(np.isfinite(v)):
        raise InvalidInputError(f"{name} has non-finite entries")
    return v


def check_rotation(R, name="R", tol=ORTHO_TOL):
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise InvalidInputError(f"{name} must be a finite 3x3 matrix")
    if np.abs(R.T @ R - np.eye(3)).max() > tol or abs(np.linalg.det(R) - 1.0) > tol:
        raise InvalidInputError(f"{name} is not a proper rotation (tol {tol})")
    return R


@dataclass(frozen=True, eq=False)
class PoseState:
    R: np.ndarray
    t: np.ndarray
    s: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "R", check_rotation(self.R, "PoseState.R").copy())
        object.__setattr__(self, "t", _vec3(self.t, "PoseState.t").copy())
        s = _vec3(self.s, "PoseState.s").copy()
        if np.any(s <= 0):
            raise InvalidSizeError(f"size components must be positive, got {s}")
        object.__setattr__(self, "s", s)

    def __eq__(self, other):
        if not isinstance(other, PoseState):
            return NotImplemented
        return (np.array_equal(self.R, other.R) and np.array_equal(self.t, other.t)
                and np.array_equal(self.s, other.s))

    def allclose(self, other, atol=1e-9):
        return (np.allclose(self.R, other.R, rtol=0, atol=atol)
                and np.allclose(self.t, other.t, rtol=0, atol=atol)
                and np.allclose(self.s, other.s, rtol=0, atol=atol))

    def to_dict(self):
        return {"R": self.R.tolist(), "t": self.t.tolist(), "s": self.s.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["R"]), np.array(d["t"]), np.array(d["s"]))


@dataclass(frozen=True, eq=False)
class PoseError:
    dR: np.ndarray
    dt: np.ndarray
    ds: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "dR", check_rotation(self.dR, "PoseError.dR").copy())
        object.__setattr__(self, "dt", _vec3(self.dt, "PoseError.dt").copy())
        object.__setattr__(self, "ds", _vec3(self.ds, "PoseError.ds").copy())

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3), np.zeros(3))

    def allclose(self, other, atol=1e-9):
        return (np.allclose(self.dR, other.dR, rtol=0, atol=atol)
                and np.allclose(self.dt, other.dt, rtol=0, atol=atol)
                and np.allclose(self.ds, other.ds, rtol=0, atol=atol))


@dataclass(frozen=True)
class SymmetrySpec:
    kind: str = "none"
    axis: tuple = field(default=(0.0, 1.0, 0.0))

    def __post_init__(self):
        if self.kind not in ("none", "axial"):
            raise InvalidInputError(f"unknown symmetry kind {self.kind!r}")
        axis = tuple(float(a) for a in self.axis)
        if len(axis) != 3:
            raise InvalidInputError("symmetry axis must have 3 components")
        if self.kind == "axial" and abs(np.linalg.norm(axis) - 1.0) > 1e-9:
            raise InvalidInputError("symmetry axis must be a unit vector")
        object.__setattr__(self, "axis", axis)

    @property
    def is_axial(self):
        return self.kind == "axial"

    def to_dict(self):
        return {"kind": self.kind, "axis": list(self.axis)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], tuple(d.get("axis", (0.0, 1.0, 0.0))))


NO_SYMMETRY = SymmetrySpec("none")
AXIAL_Y = SymmetrySpec("axial", (0.0, 1.0, 0.0))


@dataclass(frozen=True)
class PerturbationLimits:
    rot_deg: float = 20.0
    trans_m: float = 0.05
    scale_frac: float = 0.2

    def __post_init__(self):
        if min(self.rot_deg, self.trans_m, self.scale_frac) < 0:
            raise InvalidInputError("perturbation limits must be non-negative")


def as_points(points, name="points"):
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
        raise InvalidInputError(f"{name} must be an (N>=1, 3) array, got {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise InvalidInputError(f"{name} has non-finite coordinates")
    return pts


def focalize(observed, prior, init: PoseState):
    """Center the observation on ``init.t`` and pose the prior by ``diag(s0) R0``."""
    obs = as_points(observed, "observed")
    pri = as_points(prior, "prior")
    obs_f = obs - init.t
    pri_f = (pri @ init.R.T) * init.s
    return obs_f, pri_f


def rotation_from_axes(rx, ry, min_angle=1e-3):
    """Gram-Schmidt two predicted axes into a rotation with columns [x, y, x*y]."""
    rx = np.asarray(rx, dtype=np.float64)
    ry = np.asarray(ry, dtype=np.float64)
    nx, ny = np.linalg.norm(rx), np.linalg.norm(ry)
    if not (np.isfinite(nx) and np.isfinite(ny)) or nx < 1e-12 or ny < 1e-12:
        raise DegenerateAxesError(f"near-zero axis (|rx|={nx:.3g}, |ry|={ny:.3g})")
    cos = np.clip(rx @ ry / (nx * ny), -1.0, 1.0)
    angle = np.arccos(abs(cos))
    if angle < min_angle:
        raise DegenerateAxesError(f"axes nearly collinear (angle {angle:.3g} rad)")
    x = rx / nx
    y = ry - (ry @ x) * x
    y = y / np.linalg.norm(y)
    z = np.cross(x, y)
    return np.stack([x, y, z], axis=1)


def compose_update(init: PoseState, err: PoseError) -> PoseState:
    s = init.s + err.ds
    if not np.all(np.isfinite(s)):
        raise InvalidSizeError(f"updated size is not finite: {s}")
    s = np.maximum(s, SIZE_FLOOR)
    return PoseState(err.dR @ init.R, init.t + err.dt, s)


def error_between(gt: PoseState, init: PoseState) -> PoseError:
    return PoseError(gt.R @ init.R.T, gt.t - init.t, gt.s - init.s)


def geodesic_deg(Ra, Rb):
    cos = (np.trace(np.asarray(Ra).T @ np.asarray(Rb)) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))))


def rotation_error_deg(Ra, Rb, sym: SymmetrySpec = NO_SYMMETRY) -> float:
    if not sym.is_axial:
        return geodesic_deg(Ra, Rb)
    axis = np.asarray(sym.axis)
    a, b = np.asarray(Ra) @ axis, np.asarray(Rb) @ axis
    cos = a @ b / (np.linalg.norm(a) * np.linalg.norm(b))
    return float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))))


def axis_angle_matrix(axis, angle_rad):
    axis = np.asarray(axis, dtype=np.float64)
    return Rotation.from_rotvec(axis / np.linalg.norm(axis) * angle_rad).as_matrix()


def rot_x(deg):
    return axis_angle_matrix((1.0, 0.0, 0.0), np.radians(deg))


def rot_y(deg):
    return axis_angle_matrix((0.0, 1.0, 0.0), np.radians(deg))


def rot_z(deg):
    return axis_angle_matrix((0.0, 0.0, 1.0), np.radians(deg))


def random_rotation(rng):
    return Rotation.random(random_state=rng).as_matrix()


def sample_pose_perturbation(rng, limits: PerturbationLimits) -> PoseError:
    """Draw a random pose error within ``limits``.

    ``ds`` holds relative size fractions; :func:`perturb_pose` scales them by
    the reference size.
    """
    axis = rng.normal(size=3)
    while np.linalg.norm(axis) < 1e-9:
        axis = rng.normal(size=3)
    angle = rng.uniform(0.0, np.radians(limits.rot_deg))
    dR = axis_angle_matrix(axis, angle) if angle > 0 else np.eye(3)
    dt = rng.uniform(-limits.trans_m, limits.trans_m, size=3)
    ds = rng.uniform(-limits.scale_frac, limits.scale_frac, size=3)
    return PoseError(dR, dt, ds)


def perturb_pose(gt: PoseState, limits: PerturbationLimits, rng) -> PoseState:
    pert = sample_pose_perturbation(rng, limits)
    return compose_update(gt, PoseError(pert.dR, pert.dt, pert.ds * gt.s))


def box_corners(pose: PoseState):
    signs = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], dtype=np.float64)
    return (signs * (pose.s / 2.0)) @ pose.R.T + pose.t


def box_halfspaces(pose: PoseState):
    """Rows ``[n, b]`` with ``n @ x + b <= 0`` for points inside the box."""
    rows = []
    for i in range(3):
        n = pose.R[:, i]
        c = n @ pose.t
        rows.append(np.r_[n, -(c + pose.s[i] / 2.0)])
        rows.append(np.r_[-n, c - pose.s[i] / 2.0])
    return np.array(rows)


def _chebyshev_center(halfspaces):
    A, b = halfspaces[:, :3], halfspaces[:, 3]
    norms = np.linalg.norm(A, axis=1, keepdims=True)
    res = linprog(c=np.r_[0.0, 0.0, 0.0, -1.0], A_ub=np.hstack([A, norms]), b_ub=-b,
                  bounds=[(None, None)] * 3 + [(0.0, None)], method="highs")
    if not res.success:
        return None, 0.0
    return res.x[:3], res.x[3]


def box_volume(pose: PoseState):
    return float(np.prod(pose.s))


def intersection_volume(a: PoseState, b: PoseState):
    hs = np.vstack([box_halfspaces(a), box_halfspaces(b)])
    center, radius = _chebyshev_center(hs)
    scale = min(a.s.min(), b.s.min())
    if center is None or radius <= 1e-9 * scale:
        return 0.0
    try:
        verts = HalfspaceIntersection(hs, center).intersections
        return float(ConvexHull(verts).volume)
    except QhullError:
        return 0.0


def iou3d(a: PoseState, b: PoseState) -> float:
    """Exact IoU of two oriented boxes via convex polytope intersection."""
    inter = intersection_volume(a, b)
    union = box_volume(a) + box_volume(b) - inter
    return float(np.clip(inter / union, 0.0, 1.0))


def iou3d_monte_carlo(a: PoseState, b: PoseState, n_samples=100_000, seed=0) -> float:
    corners = np.vstack([box_corners(a), box_corners(b)])
    lo, hi = corners.min(axis=0), corners.max(axis=0)
    rng = np.random.default_rng(seed)
    pts = rng.uniform(lo, hi, size=(n_samples, 3))

    def inside(pose):
        local = (pts - pose.t) @ pose.R
        return np.all(np.abs(local) <= pose.s / 2.0, axis=1)

    ia, ib = inside(a), inside(b)
    union = np.count_nonzero(ia | ib)
    return 0.0 if union == 0 else np.count_nonzero(ia & ib) / union
