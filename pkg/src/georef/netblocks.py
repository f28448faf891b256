"""Learnable point-cloud blocks.

All tensors are laid out ``(batch, channels, points)``. Kernel-size-1
convolutions play the role of shared per-point linear maps.
"""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

LEAKY_SLOPE = 0.01


class ConfigurationError(ValueError):
    pass


class ShapeError(ValueError):
    pass


def leaky(x):
    return F.leaky_relu(x, LEAKY_SLOPE)


def _check_channels(x, expected, where):
    if x.dim() != 3 or x.shape[1] != expected:
        raise ShapeError(f"{where}: expected (B, {expected}, N) input, got {tuple(x.shape)}")


class SharedPointLayers(nn.Module):
    """Stack of per-point linear maps, each followed by normalization and activation."""

    def __init__(self, in_channels, widths, activation="leaky", norm=True):
        super().__init__()
        if not widths:
            raise ConfigurationError("widths must be non-empty")
        if activation not in ("leaky", "linear"):
            raise ConfigurationError(f"unknown activation {activation!r}")
        self.in_channels = in_channels
        self.widths = tuple(widths)
        self.activation = activation
        self.convs = nn.ModuleList()
        self.norms = nn.ModuleList()
        c = in_channels
        for w in self.widths:
            self.convs.append(nn.Conv1d(c, w, 1))
            self.norms.append(nn.BatchNorm1d(w) if norm else nn.Identity())
            c = w

    @property
    def out_channels(self):
        return self.widths[-1]

    def forward(self, x):
        _check_channels(x, self.in_channels, "SharedPointLayers")
        for conv, norm in zip(self.convs, self.norms):
            x = norm(conv(x))
            if self.activation == "leaky":
                x = leaky(x)
        return x


def shared_point_layers(x, widths, params: SharedPointLayers):
    if tuple(widths) != params.widths:
        raise ShapeError(f"widths {widths} do not match block widths {params.widths}")
    return params(x)


def pairwise_sq_dist(x):
    """(B, C, N) -> (B, N, N) squared Euclidean distances between columns."""
    sq = (x * x).sum(dim=1)
    d = sq.unsqueeze(2) + sq.unsqueeze(1) - 2 * torch.bmm(x.transpose(1, 2), x)
    return d.clamp_min_(0)


def knn_indices(space, k):
    """Indices (B, N, k) of the k nearest other columns, nearest first."""
    n = space.shape[2]
    if k >= n:
        raise ConfigurationError(f"k_neighbors={k} must be smaller than the point count {n}")
    with torch.no_grad():
        d = pairwise_sq_dist(space)
        d.diagonal(dim1=1, dim2=2).fill_(float("inf"))
        return d.topk(k, dim=2, largest=False, sorted=True).indices


def gather_neighbors(x, idx):
    """x (B, C, N), idx (B, N, k) -> (B, C, N, k)."""
    b, c, n = x.shape
    k = idx.shape[2]
    flat = idx.reshape(b, 1, n * k).expand(b, c, n * k)
    return torch.gather(x, 2, flat).reshape(b, c, n, k)


class HSLayer(nn.Module):
    """Simplified hybrid-scope layer.

    Path A maps absolute coordinates (plus incoming features) per point, so
    translation and size survive. Path B is an edge convolution whose
    neighborhoods come from the current feature space (Euclidean on the first
    layer, where no features exist yet); its aggregation drops the farthest
    neighbor before averaging. The two paths are concatenated and projected.
    """

    def __init__(self, in_channels, out_channels, k_neighbors=10, aggregate="orl"):
        super().__init__()
        if aggregate not in ("orl", "mean"):
            raise ConfigurationError(f"unknown aggregation {aggregate!r}")
        if aggregate == "orl" and k_neighbors < 2:
            raise ConfigurationError("outlier-robust aggregation needs k_neighbors >= 2")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.k = k_neighbors
        self.aggregate = aggregate
        src = in_channels if in_channels > 0 else 3
        self.path_a_conv = nn.Conv1d(3 + in_channels, out_channels, 1)
        self.path_a_norm = nn.BatchNorm1d(out_channels)
        self.edge_nbr = nn.Conv1d(src, out_channels, 1, bias=False)
        self.edge_ctr = nn.Conv1d(src, out_channels, 1)
        self.path_b_norm = nn.BatchNorm1d(out_channels)
        self.fuse = nn.Conv1d(2 * out_channels, out_channels, 1)
        self.fuse_norm = nn.BatchNorm1d(out_channels)
        # instrumentation: which space the last neighborhoods were computed in
        self.last_knn_space = None
        self.last_knn_idx = None

    def _inputs(self, points, feats):
        _check_channels(points, 3, "HSLayer points")
        if self.in_channels > 0:
            if feats is None:
                raise ShapeError(f"HSLayer expects {self.in_channels}-channel features")
            _check_channels(feats, self.in_channels, "HSLayer feats")
            if feats.shape[2] != points.shape[2]:
                raise ShapeError("points and features disagree on the point count")
        elif feats is not None:
            raise ShapeError("this HSLayer takes coordinates only")

    def neighbors(self, points, feats):
        space = points if feats is None else feats
        idx = knn_indices(space, self.k)
        self.last_knn_space = "euclidean" if feats is None else "feature"
        self.last_knn_idx = idx
        return idx

    def path_a(self, points, feats=None):
        self._inputs(points, feats)
        x = points if feats is None else torch.cat([points, feats], dim=1)
        return leaky(self.path_a_norm(self.path_a_conv(x)))

    def path_b(self, points, feats=None, idx=None):
        self._inputs(points, feats)
        x = points if feats is None else feats
        if idx is None:
            idx = self.neighbors(points, feats)
        edges = leaky(gather_neighbors(self.edge_nbr(x), idx) + self.edge_ctr(x).unsqueeze(3))
        if self.aggregate == "orl":
            edges = edges[..., :-1]  # neighbors arrive nearest-first
        return self.path_b_norm(edges.mean(dim=3))

    def forward(self, points, feats=None):
        a = self.path_a(points, feats)
        b = self.path_b(points, feats)
        return leaky(self.fuse_norm(self.fuse(torch.cat([a, b], dim=1))))


def hs_layer(points, feats, cfg, params: HSLayer):
    if cfg["out_channels"] != params.out_channels or cfg["k_neighbors"] != params.k:
        raise ConfigurationError("cfg does not match the layer parameters")
    return params(points, feats)


class GraphConvLayer(nn.Module):
    """Plain edge convolution over Euclidean neighborhoods with max aggregation."""

    def __init__(self, in_channels, out_channels, k_neighbors=10):
        super().__init__()
        self.in_channels = in_channels
        self.k = k_neighbors
        self.edge_nbr = nn.Conv1d(in_channels, out_channels, 1, bias=False)
        self.edge_ctr = nn.Conv1d(in_channels, out_channels, 1)
        self.norm = nn.BatchNorm1d(out_channels)

    def forward(self, points, feats=None):
        x = points if feats is None else feats
        _check_channels(x, self.in_channels, "GraphConvLayer")
        idx = knn_indices(points, self.k)
        edges = gather_neighbors(self.edge_nbr(x), idx) + self.edge_ctr(x).unsqueeze(3)
        return leaky(self.norm(edges.max(dim=3).values))


def lat_shapes(f_lat):
    if f_lat == 9:
        return [(3, 3)]
    half = f_lat // 2
    d = math.isqrt(half) if half > 0 else 0
    if f_lat % 2 == 0 and d > 0 and d * d == half:
        return [(d, d), (d, d)]
    raise ConfigurationError(f"unsupported f_lat={f_lat}: use 9 (one 3x3) or 2*d*d (two dxd)")


class MatrixNet(nn.Module):
    """Permutation-invariant regressor of learnable affine transformations.

    The last dense layer starts at zero and the identity is added to its
    reshaped output, so every emitted matrix is the identity at initialization.
    """

    def __init__(self, f_lat, widths=(64, 128, 1024), dense=(512, 256), use_hs_front=False,
                 k_neighbors=10):
        super().__init__()
        self.shapes = lat_shapes(f_lat)
        self.f_lat = f_lat
        self.use_hs_front = use_hs_front
        w0, w1, w2 = widths
        if use_hs_front:
            self.hs1 = HSLayer(0, w0, k_neighbors)
            self.hs2 = HSLayer(w0, w1, k_neighbors)
            self.front = SharedPointLayers(w1, [w2])
        else:
            self.front = SharedPointLayers(3, [w0, w1, w2])
        self.dense = nn.ModuleList()
        c = w2
        for d in dense:
            self.dense.append(nn.Linear(c, d))
            c = d
        self.out = nn.Linear(c, f_lat)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)
        eye = torch.cat([torch.eye(r).reshape(-1) for r, _ in self.shapes])
        self.register_buffer("identity", eye, persistent=False)

    def forward(self, points):
        _check_channels(points, 3, "MatrixNet")
        if self.use_hs_front:
            h = self.hs2(points, self.hs1(points))
            h = self.front(h)
        else:
            h = self.front(points)
        v = h.max(dim=2).values
        for layer in self.dense:
            v = leaky(layer(v))
        v = self.out(v) + self.identity
        mats, start = [], 0
        for r, c in self.shapes:
            mats.append(v[:, start:start + r * c].reshape(-1, r, c))
            start += r * c
        return mats[0] if len(mats) == 1 else tuple(mats)


def matrix_net(points, f_lat, cfg, params: MatrixNet):
    if f_lat != params.f_lat or bool(cfg.get("use_hs_front", False)) != params.use_hs_front:
        raise ConfigurationError("cfg does not match the Matrix Net parameters")
    return params(points)


class GlobalFeatureExtractor(nn.Module):
    """Per-point features enriched with a broadcast max-pooled global vector."""

    def __init__(self, in_channels, widths=(128, 512, 1024), k_neighbors=10, use_hs=True):
        super().__init__()
        self.in_channels = in_channels
        w0, w1, w2 = widths
        self.use_hs = use_hs
        if use_hs:
            self.first = HSLayer(in_channels, w0, k_neighbors)
        else:
            self.first = SharedPointLayers(in_channels, [w0])
        self.mlp = SharedPointLayers(w0, [w1, w2])
        self.out_channels = in_channels + w2

    def forward(self, points, feats, return_global=False):
        _check_channels(feats, self.in_channels, "GlobalFeatureExtractor")
        h = self.first(points, feats) if self.use_hs else self.first(feats)
        g = self.mlp(h).max(dim=2).values
        out = torch.cat([feats, g.unsqueeze(2).expand(-1, -1, feats.shape[2])], dim=1)
        return (out, g) if return_global else out


def global_feature_extractor(points, feats, params: GlobalFeatureExtractor):
    return params(points, feats)


class _PredictorPath(nn.Module):
    def __init__(self, in_channels, hidden):
        super().__init__()
        h0, h1 = hidden
        self.conv1 = nn.Conv1d(in_channels, h0, 1)
        self.conv2 = nn.Conv1d(h0, h1, 1)
        self.final = nn.Linear(h1, 3)
        nn.init.zeros_(self.final.weight)
        nn.init.zeros_(self.final.bias)

    def forward(self, x):
        h = leaky(self.conv2(leaky(self.conv1(x))))
        # swap channel and point axes; the last layer then mixes channels per point
        return self.final(h.transpose(1, 2)).mean(dim=1)


class PoseErrorPredictor(nn.Module):
    """Two unshared three-layer paths, each producing a 3-vector."""

    def __init__(self, in_channels, hidden=(512, 256)):
        super().__init__()
        self.in_channels = in_channels
        self.path_a = _PredictorPath(in_channels, hidden)
        self.path_b = _PredictorPath(in_channels, hidden)

    def _prep(self, f):
        if f.dim() == 2:
            f = f.unsqueeze(2)
        _check_channels(f, self.in_channels, "PoseErrorPredictor")
        return f

    def forward(self, f_a, f_b):
        return self.path_a(self._prep(f_a)), self.path_b(self._prep(f_b))


def pose_error_predictor(f_a, f_b, params: PoseErrorPredictor):
    return params(f_a, f_b)
