"""The full refinement network and its ablation switches.

Given an observed cloud, a category prior and an initial pose, the network
predicts the pose error ``(dR, dt, ds)`` that moves the initial pose toward the
ground truth. Every ablation axis is a :class:`ModelConfig` field so that each
studied variant is a reachable configuration of one code path.

Tensors inside the network are ``(batch, channels, points)``. The public numpy
entry point is :meth:`GeoReF.predict_errors`.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from . import geometry
from .geometry import DegenerateAxesError, PoseError, PoseState
from .netblocks import (
    ConfigurationError,
    GlobalFeatureExtractor,
    GraphConvLayer,
    HSLayer,
    MatrixNet,
    PoseErrorPredictor,
    SharedPointLayers,
    ShapeError,
)

ENCODERS = ("georef", "pointnet_baseline", "hs_plain", "gc3d_plain")
FUSIONS = ("cct", "global_concat", "none")


def _tuple_field(default):
    return field(default_factory=lambda: tuple(default))


@dataclass(frozen=True)
class ModelConfig:
    encoder: str = "georef"
    lat_on_points: bool = True
    lat_on_features: bool = True
    separate_rotation_lat: bool = True
    cct: bool = True
    fusion: str = "cct"
    prior_in_ts: bool = True
    # apply the observed cloud's own feature LATs before mixing
    own_cloud_lat: bool = True
    n_points: int = 512
    feature_width: int = 64
    k_neighbors: int = 10
    matrix_widths: tuple = _tuple_field((64, 128, 1024))
    matrix_dense: tuple = _tuple_field((512, 256))
    gfe_widths: tuple = _tuple_field((128, 512, 1024))
    head_hidden: tuple = _tuple_field((512, 256))
    ts_width: int = 256

    def __post_init__(self):
        for name in ("matrix_widths", "matrix_dense", "gfe_widths", "head_hidden"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if self.encoder not in ENCODERS:
            raise ConfigurationError(f"encoder must be one of {ENCODERS}, got {self.encoder!r}")
        if self.fusion not in FUSIONS:
            raise ConfigurationError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if (self.fusion == "cct") != bool(self.cct):
            raise ConfigurationError("fusion='cct' and cct=True must be set together")
        if self.cct and self.encoder != "georef":
            raise ConfigurationError("cross-cloud mixing needs the feature LATs of the georef encoder")
        if len(self.matrix_widths) != 3 or len(self.gfe_widths) != 3:
            raise ConfigurationError("matrix_widths and gfe_widths take exactly three widths")
        if len(self.head_hidden) != 2:
            raise ConfigurationError("head_hidden takes exactly two widths")
        if min(self.n_points, self.feature_width, self.ts_width, *self.matrix_widths, *self.matrix_dense,
               *self.gfe_widths, *self.head_hidden) < 1:
            raise ConfigurationError("widths and counts must be positive")
        if not 2 <= self.k_neighbors < self.n_points:
            raise ConfigurationError("k_neighbors must lie in [2, n_points)")

    @property
    def uses_lats(self):
        return self.encoder == "georef"

    def to_dict(self):
        d = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {unknown}")
        return cls(**d)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    @classmethod
    def desk(cls, **kw):
        """Narrower layers sized for single-machine CPU training."""
        base = dict(matrix_widths=(32, 64, 128), matrix_dense=(128, 64), gfe_widths=(64, 128, 256),
                    head_hidden=(256, 128), ts_width=128)
        base.update(kw)
        return cls(**base)


# Ablation rows; each entry overrides the full configuration.
TABLE2_ROWS = {
    "A0": dict(encoder="pointnet_baseline", lat_on_points=False, lat_on_features=False,
               separate_rotation_lat=False, cct=False, fusion="none", prior_in_ts=False),
    "B0": dict(),
    "C0": dict(encoder="hs_plain", lat_on_points=False, lat_on_features=False,
               separate_rotation_lat=False, cct=False, fusion="none", prior_in_ts=False),
    "C1": dict(encoder="gc3d_plain", lat_on_points=False, lat_on_features=False,
               separate_rotation_lat=False, cct=False, fusion="none", prior_in_ts=False),
    "D0": dict(encoder="pointnet_baseline", lat_on_points=False, lat_on_features=False,
               separate_rotation_lat=False, cct=False, fusion="none", prior_in_ts=True),
    "E0": dict(cct=False, fusion="none"),
    "E1": dict(lat_on_points=False),
    "E2": dict(lat_on_features=False),
    "E3": dict(separate_rotation_lat=False),
    "F0": dict(cct=False, fusion="global_concat"),
}


def table2_config(row, base: Optional[ModelConfig] = None) -> ModelConfig:
    if row not in TABLE2_ROWS:
        raise ConfigurationError(f"unknown ablation row {row!r}; known: {sorted(TABLE2_ROWS)}")
    base = base if base is not None else ModelConfig()
    return base.replace(**TABLE2_ROWS[row])


@dataclass
class BranchFeatures:
    """Per-cloud rotation and translation/size feature maps, ``(B, C, N)`` each."""
    r_obs: torch.Tensor
    r_pri: torch.Tensor
    ts_obs: torch.Tensor
    ts_pri: torch.Tensor
    fused_r: Optional[torch.Tensor] = None
    fused_t: Optional[torch.Tensor] = None
    fused_s: Optional[torch.Tensor] = None

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


@dataclass
class FeatureLATs:
    """Feature-space LATs of each cloud, ``(B, C, C)``; ``r`` is None when shared."""
    r_obs: Optional[torch.Tensor]
    ts_obs: torch.Tensor
    r_pri: Optional[torch.Tensor]
    ts_pri: torch.Tensor


def gram_schmidt(rx, ry, eps=1e-8):
    """Batched rotation with columns ``[x, y, x*y]`` from two raw axes."""
    x = rx / rx.norm(dim=-1, keepdim=True).clamp_min(eps)
    y = ry - (ry * x).sum(-1, keepdim=True) * x
    y = y / y.norm(dim=-1, keepdim=True).clamp_min(eps)
    z = torch.cross(x, y, dim=-1)
    return torch.stack([x, y, z], dim=-1)


def focalize_batch(observed, prior, R0, t0, s0):
    """Torch twin of :func:`georef.geometry.focalize` on ``(B, N, 3)`` clouds."""
    obs_f = observed - t0.unsqueeze(1)
    pri_f = torch.bmm(prior, R0.transpose(1, 2)) * s0.unsqueeze(1)
    return obs_f, pri_f


def cct_mix(bf: BranchFeatures, M_r_pri, M_ts_pri, cfg: ModelConfig) -> BranchFeatures:
    """Transform the observed features with the prior's feature LATs."""
    if not cfg.cct:
        raise ConfigurationError("cct_mix called with cct disabled")
    for name, M, f in (("M_r", M_r_pri, bf.r_obs), ("M_ts", M_ts_pri, bf.ts_obs)):
        if M.dim() != 3 or M.shape[1] != M.shape[2] or M.shape[2] != f.shape[1] or M.shape[0] != f.shape[0]:
            raise ShapeError(f"{name} of shape {tuple(M.shape)} cannot act on features {tuple(f.shape)}")
    return bf.replace(r_obs=torch.bmm(M_r_pri, bf.r_obs), ts_obs=torch.bmm(M_ts_pri, bf.ts_obs))


def _split(x):
    half = x.shape[0] // 2
    return x[:half], x[half:]


class GeoReF(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        fw, k = cfg.feature_width, cfg.k_neighbors
        if cfg.encoder == "pointnet_baseline":
            self.trunk = SharedPointLayers(3, [fw, fw])
        elif cfg.encoder == "gc3d_plain":
            self.gc1 = GraphConvLayer(3, fw, k)
            self.gc2 = GraphConvLayer(fw, fw, k)
        else:
            self.hs1 = HSLayer(0, fw, k)
            self.hs2 = HSLayer(fw, fw, k)
        if cfg.uses_lats:
            self.point_lat = MatrixNet(9, cfg.matrix_widths, cfg.matrix_dense, use_hs_front=False, k_neighbors=k)
            self.feature_lat = MatrixNet(2 * fw * fw, cfg.matrix_widths, cfg.matrix_dense, use_hs_front=True,
                                         k_neighbors=k)
        if cfg.fusion == "global_concat":
            self.concat_r = SharedPointLayers(2 * fw, [fw])
            self.concat_ts = SharedPointLayers(2 * fw, [fw])
        use_hs = cfg.encoder in ("georef", "hs_plain")
        self.gfe_r = GlobalFeatureExtractor(fw, cfg.gfe_widths, k, use_hs=use_hs)
        self.gfe_ts = GlobalFeatureExtractor(fw, cfg.gfe_widths, k, use_hs=use_hs)
        c = self.gfe_r.out_channels
        self.proj_t = nn.Conv1d(c, cfg.ts_width, 1)
        self.proj_s = nn.Conv1d(c, cfg.ts_width, 1)
        ts_in = (2 if cfg.prior_in_ts else 1) * cfg.ts_width + 3
        self.rot_head = PoseErrorPredictor(2 * c, cfg.head_hidden)
        self.ts_head = PoseErrorPredictor(ts_in, cfg.head_hidden)
        self.register_buffer("e_x", torch.tensor([1.0, 0.0, 0.0]), persistent=False)
        self.register_buffer("e_y", torch.tensor([0.0, 1.0, 0.0]), persistent=False)

    # -- encoder --------------------------------------------------------------

    def _check_cloud(self, x, name):
        if x.dim() != 3 or x.shape[2] != 3 or x.shape[1] != self.cfg.n_points:
            raise ShapeError(f"{name} must be (B, {self.cfg.n_points}, 3), got {tuple(x.shape)}")

    def _encode(self, pts):
        """pts (2B, 3, N) -> (points used downstream, f_r, f_ts, feature LATs or None)."""
        cfg = self.cfg
        if cfg.encoder == "pointnet_baseline":
            f = self.trunk(pts)
            return pts, f, f, None
        if cfg.encoder == "gc3d_plain":
            f = self.gc2(pts, self.gc1(pts))
            return pts, f, f, None
        if cfg.encoder == "hs_plain":
            h = self.hs1(pts)
            return pts, self.hs2.path_b(pts, h), self.hs2.path_a(pts, h), None
        if cfg.lat_on_points:
            pts = torch.bmm(self.point_lat(pts), pts)
        h = self.hs1(pts)
        f_r, f_ts = self.hs2.path_b(pts, h), self.hs2.path_a(pts, h)
        lats = None
        if cfg.lat_on_features or cfg.cct:
            lats = self.feature_lat(pts)
        return pts, f_r, f_ts, lats

    def extract_features(self, obs_f, pri_f):
        """Focalized clouds ``(B, N, 3)`` -> (BranchFeatures, FeatureLATs or None, points)."""
        self._check_cloud(obs_f, "observed")
        self._check_cloud(pri_f, "prior")
        if obs_f.shape[0] != pri_f.shape[0]:
            raise ShapeError("observed and prior batches differ in size")
        cfg = self.cfg
        pts = torch.cat([obs_f, pri_f], dim=0).transpose(1, 2)
        pts, f_r, f_ts, mats = self._encode(pts)
        lats = None
        if mats is not None:
            M_r, M_ts = mats
            M_ts_o, M_ts_p = _split(M_ts)
            M_r_o, M_r_p = _split(M_r) if cfg.separate_rotation_lat else (None, None)
            lats = FeatureLATs(M_r_o, M_ts_o, M_r_p, M_ts_p)
            if cfg.lat_on_features:
                rot = M_r if cfg.separate_rotation_lat else M_ts
                if not cfg.own_cloud_lat:
                    # only the prior applies its own matrices
                    eye = torch.eye(cfg.feature_width, dtype=rot.dtype).expand(obs_f.shape[0], -1, -1)
                    rot = torch.cat([eye, _split(rot)[1]])
                    M_ts = torch.cat([eye, M_ts_p])
                f_r = torch.bmm(rot, f_r)
                f_ts = torch.bmm(M_ts, f_ts)
        r_o, r_p = _split(f_r)
        ts_o, ts_p = _split(f_ts)
        return BranchFeatures(r_o, r_p, ts_o, ts_p), lats, pts

    # -- fusion and heads -----------------------------------------------------

    def mix(self, bf: BranchFeatures, lats: Optional[FeatureLATs]) -> BranchFeatures:
        cfg = self.cfg
        if cfg.fusion == "cct":
            M_r_p = lats.r_pri if cfg.separate_rotation_lat else lats.ts_pri
            return cct_mix(bf, M_r_p, lats.ts_pri, cfg)
        if cfg.fusion == "global_concat":
            def concat(layer, f_own, f_other):
                g = f_other.max(dim=2, keepdim=True).values.expand_as(f_own)
                return layer(torch.cat([f_own, g], dim=1))
            return bf.replace(r_obs=concat(self.concat_r, bf.r_obs, bf.r_pri),
                              ts_obs=concat(self.concat_ts, bf.ts_obs, bf.ts_pri))
        return bf

    def fuse(self, bf: BranchFeatures, pts, s0) -> BranchFeatures:
        cfg = self.cfg
        pts_o, pts_p = _split(pts)
        g_r = self.gfe_r(pts, torch.cat([bf.r_obs, bf.r_pri])).max(dim=2).values
        fused_r = torch.cat(_split(g_r), dim=1)
        if cfg.prior_in_ts:
            g_ts = self.gfe_ts(pts, torch.cat([bf.ts_obs, bf.ts_pri]))
        else:
            g_ts = self.gfe_ts(pts_o, bf.ts_obs)

        def pooled(proj):
            v = proj(g_ts).max(dim=2).values
            v = torch.cat(_split(v), dim=1) if cfg.prior_in_ts else v
            return torch.cat([v, s0], dim=1)

        return bf.replace(fused_r=fused_r, fused_t=pooled(self.proj_t), fused_s=pooled(self.proj_s))

    def raw_axes(self, observed, prior, R0, t0, s0):
        """Batched tensors -> residual-offset axes ``rx, ry`` plus ``dt, ds``."""
        self._check_cloud(observed, "observed")
        self._check_cloud(prior, "prior")
        obs_f, pri_f = focalize_batch(observed, prior, R0, t0, s0)
        bf, lats, pts = self.extract_features(obs_f, pri_f)
        bf = self.fuse(self.mix(bf, lats), pts, s0)
        rx, ry = self.rot_head(bf.fused_r, bf.fused_r)
        dt, ds = self.ts_head(bf.fused_t, bf.fused_s)
        return rx + self.e_x, ry + self.e_y, dt, ds

    def forward(self, observed, prior, R0, t0, s0):
        """Batched tensors -> ``(dR (B,3,3), dt (B,3), ds (B,3))``."""
        rx, ry, dt, ds = self.raw_axes(observed, prior, R0, t0, s0)
        return gram_schmidt(rx, ry), dt, ds

    # -- numpy entry point ----------------------------------------------------

    def _as_batch(self, observed, prior, inits):
        dtype = next(self.parameters()).dtype
        obs = torch.as_tensor(np.stack([geometry.as_points(o, "observed") for o in observed]), dtype=dtype)
        pri = torch.as_tensor(np.stack([geometry.as_points(p, "prior") for p in prior]), dtype=dtype)
        R0 = torch.as_tensor(np.stack([p.R for p in inits]), dtype=dtype)
        t0 = torch.as_tensor(np.stack([p.t for p in inits]), dtype=dtype)
        s0 = torch.as_tensor(np.stack([p.s for p in inits]), dtype=dtype)
        return obs, pri, R0, t0, s0

    @torch.no_grad()
    def predict_errors(self, observed, prior, inits, ids=None):
        """Pose errors for lists of clouds and initial poses, using running statistics.

        Axes are orthonormalized in float64; degenerate predictions raise
        :class:`DegenerateAxesError` naming the offending sample.
        """
        if not len(inits):
            return []
        was_training = self.training
        self.eval()
        try:
            rx, ry, dt, ds = self.raw_axes(*self._as_batch(observed, prior, inits))
        finally:
            self.train(was_training)
        rx, ry, dt, ds = (v.double().numpy() for v in (rx, ry, dt, ds))
        out = []
        for i in range(len(inits)):
            try:
                dR = geometry.rotation_from_axes(rx[i], ry[i])
            except DegenerateAxesError as exc:
                name = ids[i] if ids is not None else i
                raise DegenerateAxesError(f"sample {name}: {exc}; rx={rx[i].tolist()}, ry={ry[i].tolist()}") from exc
            out.append(PoseError(dR, dt[i], ds[i]))
        return out

    def predict_error(self, observed, prior, init: PoseState) -> PoseError:
        return self.predict_errors([observed], [prior], [init])[0]


def build_model(cfg: ModelConfig, seed: int = 0) -> GeoReF:
    torch.manual_seed(seed)
    return GeoReF(cfg)


def extract_features(observed_f, prior_f, cfg: ModelConfig, params: GeoReF):
    if cfg != params.cfg:
        raise ConfigurationError("cfg does not match the model parameters")
    return params.extract_features(observed_f, prior_f)[0]
