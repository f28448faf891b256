"""Procedural category libraries, partial-view sampling and the dataset format."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import (
    AXIAL_Y,
    NO_SYMMETRY,
    PerturbationLimits,
    PoseState,
    SymmetrySpec,
    perturb_pose,
    random_rotation,
)

FORMAT_VERSION = "georef-ds/1"
DEFAULT_N_POINTS = 512

SHAPE_PARAMS = {
    "cylinder": ("radius", "height"),
    "tapered_cylinder": ("radius", "height", "taper"),
    "box": ("width", "height", "depth"),
    "cup_with_handle": ("radius", "height", "handle"),
}


class ConfigurationError(ValueError):
    pass


class DegenerateViewError(RuntimeError):
    pass


class DatasetParseError(ValueError):
    def __init__(self, message, record_index=None):
        super().__init__(message)
        self.record_index = record_index


@dataclass(frozen=True)
class CategorySpec:
    name: str
    base_shape: str
    param_ranges: dict
    symmetry: SymmetrySpec = NO_SYMMETRY
    scale_m: float = 0.2  # physical bounding-box diagonal of the normalized shape

    def __post_init__(self):
        if self.base_shape not in SHAPE_PARAMS:
            raise ConfigurationError(f"unknown base shape {self.base_shape!r}")
        needed = SHAPE_PARAMS[self.base_shape]
        missing = [p for p in needed if p not in self.param_ranges]
        extra = [p for p in self.param_ranges if p not in needed]
        if missing or extra:
            raise ConfigurationError(
                f"{self.name}: parameters for {self.base_shape} are {needed}; "
                f"missing {missing}, unexpected {extra}")
        ranges = {}
        for k in needed:
            lo, hi = (float(v) for v in self.param_ranges[k])
            if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi or lo <= 0:
                raise ConfigurationError(f"{self.name}: invalid range for {k}: ({lo}, {hi})")
            ranges[k] = (lo, hi)
        object.__setattr__(self, "param_ranges", ranges)
        if self.scale_m <= 0:
            raise ConfigurationError("scale_m must be positive")

    def to_dict(self):
        d = asdict(self)
        d["param_ranges"] = {k: list(v) for k, v in self.param_ranges.items()}
        d["symmetry"] = self.symmetry.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["symmetry"] = SymmetrySpec.from_dict(d.get("symmetry", {"kind": "none"}))
        d["param_ranges"] = {k: tuple(v) for k, v in d["param_ranges"].items()}
        return cls(**d)


DEFAULT_CATEGORIES = (
    CategorySpec("bottle", "tapered_cylinder",
                 {"radius": (0.25, 0.4), "height": (1.6, 2.4), "taper": (0.3, 0.6)},
                 AXIAL_Y, scale_m=0.25),
    CategorySpec("can", "cylinder", {"radius": (0.35, 0.55), "height": (0.8, 1.4)},
                 AXIAL_Y, scale_m=0.15),
    CategorySpec("box", "box", {"width": (0.6, 1.2), "height": (0.8, 1.6), "depth": (0.3, 0.7)},
                 NO_SYMMETRY, scale_m=0.2),
    CategorySpec("mug", "cup_with_handle",
                 {"radius": (0.35, 0.5), "height": (0.8, 1.2), "handle": (0.5, 0.8)},
                 NO_SYMMETRY, scale_m=0.15),
)


def default_categories():
    return {c.name: c for c in DEFAULT_CATEGORIES}


# --- analytic surfaces -------------------------------------------------------
# Shapes are built around the y axis with raw parameters, then normalized so
# the bounding box is centered at the origin with unit diagonal.

def _raw_bbox(base, p):
    if base in ("cylinder", "tapered_cylinder"):
        r, h = p["radius"], p["height"]
        return np.array([-r, -h / 2, -r]), np.array([r, h / 2, r])
    if base == "box":
        half = np.array([p["width"], p["height"], p["depth"]]) / 2
        return -half, half
    r, h = p["radius"], p["height"]
    R_h, r_t = _handle_dims(p)
    return (np.array([-r, -h / 2, -r]),
            np.array([r + R_h + r_t, h / 2, r]))


def _handle_dims(p):
    major = p["handle"] * p["height"] * 0.4
    return major, 0.2 * major


def _disc(rng, n, radius, y, up):
    rho = radius * np.sqrt(rng.uniform(size=n))
    phi = rng.uniform(0, 2 * np.pi, n)
    pts = np.stack([rho * np.cos(phi), np.full(n, y), rho * np.sin(phi)], axis=1)
    nrm = np.tile([0.0, 1.0 if up else -1.0, 0.0], (n, 1))
    return pts, nrm


def _frustum(rng, n, r0, r1, h):
    """Lateral surface from radius r0 at y=-h/2 to r1 at y=+h/2, area-uniform."""
    rmax = max(r0, r1)
    us = np.empty(0)
    while us.size < n:
        u = rng.uniform(size=2 * n + 8)
        keep = rng.uniform(size=u.size) * rmax <= r0 + (r1 - r0) * u
        us = np.concatenate([us, u[keep]])
    u = us[:n]
    r = r0 + (r1 - r0) * u
    phi = rng.uniform(0, 2 * np.pi, n)
    pts = np.stack([r * np.cos(phi), -h / 2 + h * u, r * np.sin(phi)], axis=1)
    slope = (r0 - r1) / h
    nrm = np.stack([np.cos(phi), np.full(n, slope), np.sin(phi)], axis=1)
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    return pts, nrm


def _frustum_area(r0, r1, h):
    return np.pi * (r0 + r1) * math.hypot(h, r0 - r1)


def _box_faces(rng, n, dims):
    half = np.asarray(dims) / 2
    areas = np.array([dims[1] * dims[2], dims[0] * dims[2], dims[0] * dims[1]] * 2)
    face = rng.choice(6, size=n, p=areas / areas.sum())
    pts = rng.uniform(-half, half, size=(n, 3))
    nrm = np.zeros((n, 3))
    for f in range(6):
        axis, sign = f % 3, (1.0 if f < 3 else -1.0)
        m = face == f
        pts[m, axis] = sign * half[axis]
        nrm[m, axis] = sign
    return pts, nrm


def _half_torus(rng, n, center_x, major, minor):
    """Handle on the +x side: the half of a torus (in the xy plane) outside the body."""
    out_phi, out_theta = np.empty(0), np.empty(0)
    while out_phi.size < n:
        m = 2 * n + 8
        phi = rng.uniform(-np.pi / 2, np.pi / 2, m)
        theta = rng.uniform(0, 2 * np.pi, m)
        keep = rng.uniform(size=m) * (major + minor) <= major + minor * np.cos(theta)
        out_phi = np.concatenate([out_phi, phi[keep]])
        out_theta = np.concatenate([out_theta, theta[keep]])
    phi, theta = out_phi[:n], out_theta[:n]
    u = np.stack([np.cos(phi), np.sin(phi), np.zeros(n)], axis=1)
    ez = np.array([0.0, 0.0, 1.0])
    nrm = np.cos(theta)[:, None] * u + np.sin(theta)[:, None] * ez
    pts = np.array([center_x, 0.0, 0.0]) + major * u + minor * nrm
    return pts, nrm


def _raw_parts(base, p):
    """(area, sampler) pairs describing the closed surface."""
    if base == "box":
        dims = (p["width"], p["height"], p["depth"])
        area = 2 * (dims[0] * dims[1] + dims[1] * dims[2] + dims[0] * dims[2])
        return [(area, lambda rng, n: _box_faces(rng, n, dims))]
    r, h = p["radius"], p["height"]
    r_top = r * p["taper"] if base == "tapered_cylinder" else r
    parts = [
        (_frustum_area(r, r_top, h), lambda rng, n: _frustum(rng, n, r, r_top, h)),
        (np.pi * r ** 2, lambda rng, n: _disc(rng, n, r, -h / 2, up=False)),
        (np.pi * r_top ** 2, lambda rng, n: _disc(rng, n, r_top, h / 2, up=True)),
    ]
    if base == "cup_with_handle":
        major, minor = _handle_dims(p)
        area = 2 * np.pi * minor * np.pi * major  # half torus
        parts.append((area, lambda rng, n: _half_torus(rng, n, r, major, minor)))
    return parts


@dataclass
class ShapeInstance:
    category: str
    base_shape: str
    params: dict
    instance_id: str = ""
    center: np.ndarray = field(default=None, repr=False)
    diag: float = 1.0
    unit_extent: np.ndarray = field(default=None, repr=False)
    scale_m: float = 1.0

    def __post_init__(self):
        lo, hi = _raw_bbox(self.base_shape, self.params)
        self.center = (lo + hi) / 2
        self.diag = float(np.linalg.norm(hi - lo))
        self.unit_extent = (hi - lo) / self.diag

    @property
    def canonical_size(self):
        return self.unit_extent * self.scale_m

    @property
    def param_vector(self):
        return np.array([self.params[k] for k in SHAPE_PARAMS[self.base_shape]])

    def sample_surface(self, n, rng):
        """Area-uniform surface samples in the normalized frame, with outward normals."""
        parts = _raw_parts(self.base_shape, self.params)
        areas = np.array([a for a, _ in parts])
        counts = rng.multinomial(n, areas / areas.sum())
        pts, nrms = [], []
        for (_, sampler), c in zip(parts, counts):
            if c:
                p, q = sampler(rng, int(c))
                pts.append(p)
                nrms.append(q)
        pts = (np.concatenate(pts) - self.center) / self.diag
        return pts, np.concatenate(nrms)


def make_instance(spec: CategorySpec, params, instance_id=""):
    return ShapeInstance(spec.name, spec.base_shape, dict(params), instance_id, scale_m=spec.scale_m)


def build_category_library(spec: CategorySpec, n_instances: int, rng, prefix=""):
    if n_instances < 1:
        raise ConfigurationError("n_instances must be >= 1")
    names = SHAPE_PARAMS[spec.base_shape]
    lib = []
    for i in range(n_instances):
        params = {k: float(rng.uniform(*spec.param_ranges[k])) for k in names}
        lib.append(make_instance(spec, params, f"{spec.name}-{prefix}{i:04d}"))
    return lib


PRIOR_SEED = 20240601


def mean_shape_prior(library, n_points=DEFAULT_N_POINTS, seed=PRIOR_SEED):
    if not library:
        raise ConfigurationError("empty library")
    first = library[0]
    names = SHAPE_PARAMS[first.base_shape]
    mean = {k: float(np.mean([inst.params[k] for inst in library])) for k in names}
    inst = ShapeInstance(first.category, first.base_shape, mean, f"{first.category}-mean",
                         scale_m=first.scale_m)
    pts, _ = inst.sample_surface(n_points, np.random.default_rng(seed))
    return pts - pts.mean(axis=0)


@dataclass(frozen=True)
class NoiseSpec:
    sigma_m: float = 0.002
    dropout_frac: float = 0.0

    def __post_init__(self):
        if not 0 <= self.dropout_frac < 1:
            raise ConfigurationError("dropout_frac must lie in [0, 1)")
        if self.sigma_m < 0:
            raise ConfigurationError("sigma_m must be non-negative")


@dataclass(eq=False)
class SampleRecord:
    observed: np.ndarray
    prior: np.ndarray
    gt: PoseState
    init: PoseState
    category: str
    symmetry: SymmetrySpec
    instance_id: str

    def __eq__(self, other):
        if not isinstance(other, SampleRecord):
            return NotImplemented
        return (np.array_equal(self.observed, other.observed) and np.array_equal(self.prior, other.prior)
                and self.gt == other.gt and self.init == other.init and self.category == other.category
                and self.symmetry == other.symmetry and self.instance_id == other.instance_id)

    def replace(self, **kw):
        d = dict(observed=self.observed, prior=self.prior, gt=self.gt, init=self.init,
                 category=self.category, symmetry=self.symmetry, instance_id=self.instance_id)
        d.update(kw)
        return SampleRecord(**d)


def resample_to(points, n, rng):
    """Exactly ``n`` rows: subsample without replacement or pad with replacement."""
    m = len(points)
    if m == n:
        return points
    if m > n:
        return points[np.sort(rng.choice(m, n, replace=False))]
    extra = rng.choice(m, n - m, replace=True)
    return np.concatenate([points, points[extra]])


def visible_surface(instance: ShapeInstance, R, view_dir, n_surface, rng):
    """Surface samples whose rotated normal faces the camera (n . -view_dir > 0).

    Returns normalized-frame points and camera-frame normals.
    """
    pts, nrm = instance.sample_surface(n_surface, rng)
    nrm_cam = nrm @ np.asarray(R).T
    keep = nrm_cam @ -np.asarray(view_dir, dtype=np.float64) > 0
    return pts[keep], nrm_cam[keep]


GT_T_LOW = np.array([-0.5, -0.5, 0.5])
GT_T_HIGH = np.array([0.5, 0.5, 1.5])


def sample_record(instance: ShapeInstance, prior, view_dir, noise: NoiseSpec,
                  pert_limits: PerturbationLimits, rng, symmetry: SymmetrySpec = NO_SYMMETRY,
                  n_points=DEFAULT_N_POINTS, surface_factor=4):
    view_dir = np.asarray(view_dir, dtype=np.float64)
    view_dir = view_dir / np.linalg.norm(view_dir)
    if not 0 <= noise.dropout_frac < 1:
        raise ConfigurationError("dropout_frac must lie in [0, 1)")

    R = random_rotation(rng)
    t = rng.uniform(GT_T_LOW, GT_T_HIGH)
    g = rng.uniform(0.8, 1.2)
    gt = PoseState(R, t, instance.canonical_size * g)

    pts, _ = visible_surface(instance, R, view_dir, max(1, int(surface_factor * n_points)), rng)
    if len(pts) < 8:
        raise DegenerateViewError(f"only {len(pts)} front-facing points for view {view_dir}")
    obs = pts * (instance.scale_m * g) @ R.T + t
    if noise.sigma_m > 0:
        obs = obs + rng.normal(scale=noise.sigma_m, size=obs.shape)
    if noise.dropout_frac > 0:
        keep = max(1, int(round(len(obs) * (1 - noise.dropout_frac))))
        obs = obs[np.sort(rng.choice(len(obs), keep, replace=False))]
    obs = resample_to(obs, n_points, rng)

    init = perturb_pose(gt, pert_limits, rng)
    return SampleRecord(obs, np.asarray(prior, dtype=np.float64).copy(), gt, init,
                        instance.category, symmetry, instance.instance_id)


# --- desk-scale dataset generation --------------------------------------------

@dataclass
class DataConfig:
    categories: list = field(default_factory=lambda: [c.to_dict() for c in DEFAULT_CATEGORIES])
    n_train_instances: int = 30
    n_test_instances: int = 10
    n_train_records: int = 2000
    n_test_records: int = 200
    n_points: int = DEFAULT_N_POINTS
    sigma_m: float = 0.002
    dropout_frac: float = 0.1
    rot_deg: float = 20.0
    trans_m: float = 0.05
    scale_frac: float = 0.2
    view_dir: tuple = (0.0, 0.0, 1.0)

    def category_specs(self):
        return [c if isinstance(c, CategorySpec) else CategorySpec.from_dict(c) for c in self.categories]

    @property
    def pert_limits(self):
        return PerturbationLimits(self.rot_deg, self.trans_m, self.scale_frac)


def _draw_record(inst, prior, cfg: DataConfig, sym, rng, max_tries=20):
    for _ in range(max_tries):
        try:
            return sample_record(inst, prior, cfg.view_dir, NoiseSpec(cfg.sigma_m, cfg.dropout_frac),
                                 cfg.pert_limits, rng, sym, cfg.n_points)
        except DegenerateViewError:
            continue
    raise DegenerateViewError(f"no usable view for {inst.instance_id} after {max_tries} tries")


def generate_dataset(cfg: DataConfig, seed: int):
    """Train/test splits; test records use held-out shape instances.

    Categories are assigned round-robin so every split is balanced; every
    record gets its own spawned seed so the output depends only on (cfg, seed).
    """
    specs = cfg.category_specs()
    root = np.random.SeedSequence(seed)
    lib_seq, rec_seq = root.spawn(2)
    libs, priors = {}, {}
    for spec, ss in zip(specs, lib_seq.spawn(len(specs))):
        rng = np.random.default_rng(ss)
        train_lib = build_category_library(spec, cfg.n_train_instances, rng, prefix="tr")
        test_lib = build_category_library(spec, cfg.n_test_instances, rng, prefix="te")
        libs[spec.name] = {"train": train_lib, "test": test_lib}
        priors[spec.name] = mean_shape_prior(train_lib, cfg.n_points)

    splits = {}
    for split, count, ss in zip(("train", "test"), (cfg.n_train_records, cfg.n_test_records),
                                rec_seq.spawn(2)):
        records = []
        for i, child in enumerate(ss.spawn(count)):
            spec = specs[i % len(specs)]
            rng = np.random.default_rng(child)
            lib = libs[spec.name][split]
            inst = lib[rng.integers(len(lib))]
            records.append(_draw_record(inst, priors[spec.name], cfg, spec.symmetry, rng))
        splits[split] = records
    return splits


# --- on-disk format -----------------------------------------------------------

def _record_floats(n_points):
    return 2 * n_points * 3 + 2 * 15


def _pose_flat(p: PoseState):
    return np.concatenate([p.R.reshape(-1), p.t, p.s])


def _pose_unflat(v):
    return PoseState(v[:9].reshape(3, 3), v[9:12], v[12:15])


def write_dataset(records, path, split="train", meta=None):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    n_points = len(records[0].observed) if records else DEFAULT_N_POINTS
    blob = np.empty((len(records), _record_floats(n_points)), dtype="<f8")
    side = []
    for i, r in enumerate(records):
        if r.observed.shape != (n_points, 3) or r.prior.shape != (n_points, 3):
            raise ValueError(f"record {i}: clouds must both be ({n_points}, 3)")
        blob[i] = np.concatenate([r.observed.reshape(-1), r.prior.reshape(-1),
                                  _pose_flat(r.gt), _pose_flat(r.init)])
        side.append({"category": r.category, "symmetry": r.symmetry.to_dict(),
                     "instance_id": r.instance_id})
    (path / f"{split}.bin").write_bytes(blob.tobytes())
    (path / f"{split}.json").write_text(json.dumps(side, indent=1))

    meta_path = path / "meta.json"
    full = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    full.update(meta or {})
    full["format"] = FORMAT_VERSION
    full.setdefault("splits", {})[split] = {"count": len(records), "n_points": n_points}
    meta_path.write_text(json.dumps(full, indent=1, sort_keys=True))


def read_meta(path):
    meta_path = Path(path) / "meta.json"
    try:
        meta = json.loads(meta_path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DatasetParseError(f"cannot read {meta_path}: {e}") from e
    if meta.get("format") != FORMAT_VERSION:
        raise DatasetParseError(f"unsupported dataset format {meta.get('format')!r}")
    return meta


def read_dataset(path, split="train"):
    path = Path(path)
    meta = read_meta(path)
    if split not in meta.get("splits", {}):
        raise DatasetParseError(f"split {split!r} not in dataset {path}")
    info = meta["splits"][split]
    n_points, count = info["n_points"], info["count"]
    rec_bytes = _record_floats(n_points) * 8
    raw = (path / f"{split}.bin").read_bytes()
    try:
        side = json.loads((path / f"{split}.json").read_text())
    except json.JSONDecodeError as e:
        raise DatasetParseError(f"malformed sidecar for split {split!r}: {e}") from e
    n_full, rem = divmod(len(raw), rec_bytes)
    if rem or n_full < count:
        raise DatasetParseError(
            f"record {n_full} of split {split!r} is truncated "
            f"({len(raw)} bytes, expected {count * rec_bytes})", record_index=n_full)
    if n_full > count or len(side) != count:
        raise DatasetParseError(f"split {split!r}: record count mismatch "
                                f"(meta {count}, binary {n_full}, sidecar {len(side)})")
    blob = np.frombuffer(raw, dtype="<f8").reshape(count, rec_bytes // 8).astype(np.float64)
    records = []
    k = n_points * 3
    for i in range(count):
        row = blob[i]
        try:
            records.append(SampleRecord(
                observed=row[:k].reshape(n_points, 3).copy(),
                prior=row[k:2 * k].reshape(n_points, 3).copy(),
                gt=_pose_unflat(row[2 * k:2 * k + 15]),
                init=_pose_unflat(row[2 * k + 15:2 * k + 30]),
                category=side[i]["category"],
                symmetry=SymmetrySpec.from_dict(side[i]["symmetry"]),
                instance_id=side[i]["instance_id"],
            ))
        except (KeyError, ValueError, TypeError) as e:
            raise DatasetParseError(f"record {i} of split {split!r} is malformed: {e}", record_index=i) from e
    return records
