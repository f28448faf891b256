"""Pose metrics, iteration curves, feature-distance statistics and ablation reports."""
from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .geometry import NO_SYMMETRY, PoseState, SymmetrySpec, axis_angle_matrix, iou3d, rotation_error_deg
from .model import cct_mix, focalize_batch
from .netblocks import ConfigurationError
from .train import refine_batch, train

# name -> (max rotation error in degrees, max translation error in meters, min IoU)
METRICS = {
    "IoU50": (None, None, 0.50),
    "IoU75": (None, None, 0.75),
    "5deg2cm": (5.0, 0.02, None),
    "5deg5cm": (5.0, 0.05, None),
    "10deg2cm": (10.0, 0.02, None),
    "10deg5cm": (10.0, 0.05, None),
    "2cm": (None, 0.02, None),
    "5deg": (5.0, None, None),
}
METRIC_NAMES = tuple(METRICS)

# (looser, stricter): the looser accuracy can never be lower
MONOTONE_PAIRS = (
    ("IoU50", "IoU75"),
    ("5deg5cm", "5deg2cm"),
    ("10deg2cm", "5deg2cm"),
    ("10deg5cm", "10deg2cm"),
    ("10deg5cm", "5deg5cm"),
    ("2cm", "5deg2cm"),
    ("2cm", "10deg2cm"),
    ("5deg", "5deg2cm"),
    ("5deg", "5deg5cm"),
)


class LabelingError(ValueError):
    pass


class ReportInvariantError(AssertionError):
    pass


@dataclass(frozen=True)
class ResultItem:
    pred: PoseState
    gt: PoseState
    category: str
    symmetry: SymmetrySpec = NO_SYMMETRY


@dataclass
class MetricReport:
    per_category: dict
    mean: dict
    n_instances: dict
    fingerprint: str = ""

    def validate(self):
        for name, row in [("mean", self.mean)] + sorted(self.per_category.items()):
            for metric, v in row.items():
                if not 0.0 <= v <= 1.0:
                    raise ReportInvariantError(f"{name}/{metric} = {v} outside [0, 1]")
            for loose, strict in MONOTONE_PAIRS:
                if row[loose] < row[strict]:
                    raise ReportInvariantError(f"{name}: {loose}={row[loose]} below {strict}={row[strict]}")
        return self

    def to_dict(self):
        return {"per_category": self.per_category, "mean": self.mean, "n_instances": self.n_instances,
                "fingerprint": self.fingerprint}

    @classmethod
    def from_dict(cls, d):
        return cls(d["per_category"], d["mean"], d["n_instances"], d.get("fingerprint", ""))


def align_about_axis(pred_R, gt_R, sym: SymmetrySpec):
    """Spin ``pred_R`` about its symmetry axis to the orientation closest to ``gt_R``."""
    if not sym.is_axial:
        return np.asarray(pred_R)
    k = np.asarray(sym.axis, dtype=np.float64)
    k = k / np.linalg.norm(k)
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    M = np.asarray(gt_R).T @ np.asarray(pred_R)
    # trace(M R_k(theta)) = const + B sin(theta) - C cos(theta)
    B, C = np.trace(M @ K), np.trace(M @ K @ K)
    theta = np.arctan2(B, -C)
    return np.asarray(pred_R) @ axis_angle_matrix(k, theta)


def instance_errors(item: ResultItem):
    """(rotation error in degrees, translation error in meters, IoU) of one result."""
    rot = rotation_error_deg(item.pred.R, item.gt.R, item.symmetry)
    trans = float(np.linalg.norm(item.pred.t - item.gt.t))
    pred = item.pred
    if item.symmetry.is_axial:
        pred = PoseState(align_about_axis(pred.R, item.gt.R, item.symmetry), pred.t, pred.s)
    return rot, trans, iou3d(pred, item.gt)


def _hits(rot, trans, iou):
    out = {}
    for name, (max_deg, max_m, min_iou) in METRICS.items():
        ok = np.ones(len(rot), dtype=bool)
        if max_deg is not None:
            ok &= rot <= max_deg
        if max_m is not None:
            ok &= trans <= max_m
        if min_iou is not None:
            ok &= iou >= min_iou
        out[name] = ok
    return out


def compute_metrics(results, categories=None, fingerprint="") -> MetricReport:
    """Per-category accuracies and their uniform mean over categories."""
    results = list(results)
    if not results:
        raise ValueError("compute_metrics needs at least one result")
    known = set(categories) if categories is not None else None
    for i, r in enumerate(results):
        if not r.category or (known is not None and r.category not in known):
            raise LabelingError(f"result {i} has unknown category {r.category!r}")
    errs = np.array([instance_errors(r) for r in results])
    hits = _hits(errs[:, 0], errs[:, 1], errs[:, 2])
    cats = np.array([r.category for r in results])
    per_cat, counts = {}, {}
    for c in sorted(set(cats)):
        mask = cats == c
        counts[c] = int(mask.sum())
        per_cat[c] = {m: float(hits[m][mask].mean()) for m in METRIC_NAMES}
    mean = {m: float(np.mean([per_cat[c][m] for c in per_cat])) for m in METRIC_NAMES}
    counts["total"] = len(results)
    return MetricReport(per_cat, mean, counts, fingerprint).validate()


def results_from_trajectories(records, trajectories, step=-1):
    return [ResultItem(tr[step], r.gt, r.category, r.symmetry) for r, tr in zip(records, trajectories)]


def iteration_curve(model, records, k_max=6, categories=None, fingerprint="", trajectories=None):
    """One report per refinement iteration ``0..k_max``."""
    if k_max < 1:
        raise ValueError("k_max must be at least 1")
    if trajectories is None:
        trajectories = refine_batch(model, records, k_max)
    return [compute_metrics(results_from_trajectories(records, trajectories, i), categories, fingerprint)
            for i in range(k_max + 1)]


def curve_table(reports, metrics=METRIC_NAMES):
    return [{"iteration": i, **{m: rep.mean[m] for m in metrics}} for i, rep in enumerate(reports)]


def chamfer(a, b):
    """Symmetric Chamfer distance between column sets ``a (C, N)`` and ``b (C, M)``."""
    a, b = a.double().T.unsqueeze(0), b.double().T.unsqueeze(0)
    d = torch.cdist(a, b, compute_mode="donot_use_mm_for_euclid_dist")[0]
    return 0.5 * (d.min(dim=1).values.mean() + d.min(dim=0).values.mean())


@torch.no_grad()
def cct_feature_stats(model, records, chunk=32):
    """Observed-to-prior rotation-feature distances just before and after mixing.

    Every record is evaluated at its ground-truth pose.
    """
    cfg = model.cfg
    if not cfg.cct:
        raise ConfigurationError("feature statistics need a model with cross-cloud mixing enabled")
    was_training = model.training
    model.eval()
    before, after = [], []
    try:
        for c0 in range(0, len(records), chunk):
            part = records[c0:c0 + chunk]
            obs, pri, R, t, s = model._as_batch([r.observed for r in part], [r.prior for r in part],
                                                [r.gt for r in part])
            bf, lats, _ = model.extract_features(*focalize_batch(obs, pri, R, t, s))
            M_r = lats.r_pri if cfg.separate_rotation_lat else lats.ts_pri
            mixed = cct_mix(bf, M_r, lats.ts_pri, cfg)
            for i in range(len(part)):
                before.append(float(chamfer(bf.r_obs[i], bf.r_pri[i])))
                after.append(float(chamfer(mixed.r_obs[i], mixed.r_pri[i])))
    finally:
        model.train(was_training)
    before, after = np.array(before), np.array(after)
    q = (0.1, 0.25, 0.5, 0.75, 0.9)
    return {"before": before, "after": after,
            "summary": {"quantiles": list(q), "before": np.quantile(before, q).tolist(),
                        "after": np.quantile(after, q).tolist(), "n": len(before)}}


def config_fingerprint(model_cfg=None, train_cfg=None, data_meta=None):
    payload = {"model": model_cfg.to_dict() if model_cfg is not None else None,
               "train": train_cfg.to_dict() if train_cfg is not None else None,
               "data": data_meta}
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class AblationRow:
    name: str
    fingerprint: str
    report: Optional[MetricReport] = None
    error: Optional[str] = None
    seconds: float = 0.0
    history: list = field(default_factory=list)

    def to_dict(self):
        return {"name": self.name, "fingerprint": self.fingerprint, "seconds": self.seconds, "error": self.error,
                "report": self.report.to_dict() if self.report else None, "history": self.history}


def ablation_suite(train_records, test_records, rows, train_cfg, iters=4, categories=None, data_meta=None,
                   log=None):
    """Train and evaluate each named configuration under the same data and seeds.

    A failing row records its error and the suite moves on.
    """
    table = []
    for name, model_cfg in rows.items():
        fp = config_fingerprint(model_cfg, train_cfg, data_meta)
        t0 = time.time()
        row = AblationRow(name, fp)
        try:
            ckpt = train(train_records, model_cfg, train_cfg)
            model = ckpt.build_model()
            trajs = refine_batch(model, test_records, iters)
            row.report = compute_metrics(results_from_trajectories(test_records, trajs), categories, fp)
            row.history = ckpt.history
        except Exception as exc:  # noqa: BLE001 - one bad row must not sink the suite
            row.error = f"{type(exc).__name__}: {exc}"
        row.seconds = time.time() - t0
        table.append(row)
        if log is not None:
            log(row)
    return table


# --- report emitters -----------------------------------------------------------

def write_json(obj, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable))


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    if hasattr(x, "to_dict"):
        return x.to_dict()
    raise TypeError(f"cannot serialize {type(x).__name__}")


def write_table_csv(table, path, metrics=METRIC_NAMES):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["row", *metrics, "fingerprint", "error"])
        for row in table:
            vals = [f"{row.report.mean[m]:.4f}" for m in metrics] if row.report else [""] * len(metrics)
            w.writerow([row.name, *vals, row.fingerprint, row.error or ""])


def write_curve_csv(reports, path, metrics=METRIC_NAMES):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["iteration", *metrics])
        w.writeheader()
        for r in curve_table(reports, metrics):
            w.writerow(r)


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_iteration_curve(reports, path, metrics=("5deg2cm", "5deg5cm", "10deg2cm", "IoU75")):
    plt = _pyplot()
    rows = curve_table(reports, metrics)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    its = [r["iteration"] for r in rows]
    for m in metrics:
        ax.plot(its, [100 * r[m] for r in rows], marker="o", label=m)
    ax.set_xlabel("iteration")
    ax.set_ylabel("accuracy (%)")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_cct_box(stats, path):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(4, 3.5))
    ax.boxplot([stats["before"], stats["after"]], showfliers=False)
    ax.set_xticks([1, 2], ["before mixing", "after mixing"])
    ax.set_ylabel("Chamfer feature distance")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
