"""Loss, augmentation, the optimization loop, checkpoints and iterative refinement."""
from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .geometry import (
    NO_SYMMETRY,
    PerturbationLimits,
    PoseError,
    PoseState,
    SymmetrySpec,
    compose_update,
    error_between,
    perturb_pose,
    rotation_error_deg,
)
from .model import GeoReF, ModelConfig
from .netblocks import ConfigurationError
from .synthdata import SampleRecord, resample_to

CKPT_FORMAT = "georef-ckpt/1"
CKPT_MAGIC = b"GEOREFCK"


class TrainingDivergedError(RuntimeError):
    pass


class CheckpointFormatError(ValueError):
    pass


class RefinementError(RuntimeError):
    def __init__(self, message, iteration):
        super().__init__(message)
        self.iteration = iteration


@dataclass(frozen=True)
class LossWeights:
    w_r: float = 1.0
    w_t: float = 5.0
    w_s: float = 5.0

    def __post_init__(self):
        if min(self.w_r, self.w_t, self.w_s) < 0:
            raise ConfigurationError("loss weights must be non-negative")


def _strict(cls, d, what):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigurationError(f"unknown {what} keys: {unknown}")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 12
    epochs: int = 60
    base_lr: float = 1e-4
    anneal_start_frac: float = 0.72
    anneal: str = "cosine"
    weight_decay: float = 1e-4
    optimizer: str = "radam_decoupled_wd"
    point_dropout: float = 0.1
    noise_sigma: float = 0.002
    pert_limits: PerturbationLimits = field(default_factory=PerturbationLimits)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    # stop after this many optimizer steps instead of running all epochs
    max_steps: Optional[int] = None
    seed: int = 0
    deterministic: bool = False

    def __post_init__(self):
        if isinstance(self.pert_limits, dict):
            _strict(PerturbationLimits, self.pert_limits, "pert_limits")
            object.__setattr__(self, "pert_limits", PerturbationLimits(**self.pert_limits))
        if isinstance(self.loss_weights, dict):
            _strict(LossWeights, self.loss_weights, "loss_weights")
            object.__setattr__(self, "loss_weights", LossWeights(**self.loss_weights))
        if not 0 < self.anneal_start_frac < 1:
            raise ConfigurationError("anneal_start_frac must lie in (0, 1)")
        if self.anneal != "cosine":
            raise ConfigurationError("only the cosine anneal is supported")
        if self.optimizer != "radam_decoupled_wd":
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        if self.batch_size < 1 or self.epochs < 1 or self.base_lr <= 0:
            raise ConfigurationError("batch_size, epochs and base_lr must be positive")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigurationError("max_steps must be positive")
        if not 0 <= self.point_dropout < 1 or self.noise_sigma < 0:
            raise ConfigurationError("point_dropout must lie in [0, 1) and noise_sigma be >= 0")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        _strict(cls, d, "train config")
        return cls(**d)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    @classmethod
    def desk(cls, **kw):
        base = dict(epochs=60, base_lr=1e-3)
        base.update(kw)
        return cls(**base)


# --- loss ----------------------------------------------------------------------

def compute_loss(pred: PoseError, target: PoseError, weights: LossWeights = LossWeights(),
                 symmetry: SymmetrySpec = NO_SYMMETRY, init_R=None):
    """Weighted L1 loss and its per-term breakdown.

    For axial symmetry only the image of the symmetry axis is compared. With
    ``init_R`` the axis is first carried into the camera frame, which makes the
    loss blind to spins of the object about its own axis.
    """
    if symmetry.is_axial:
        axis = np.asarray(symmetry.axis, dtype=np.float64)
        if init_R is not None:
            axis = np.asarray(init_R) @ axis
        rot = float(np.mean(np.abs(pred.dR @ axis - target.dR @ axis)))
    else:
        rot = float(np.mean(np.abs(pred.dR - target.dR)))
    t = float(np.mean(np.abs(pred.dt - target.dt)))
    s = float(np.mean(np.abs(pred.ds - target.ds)))
    total = weights.w_r * rot + weights.w_t * t + weights.w_s * s
    return total, {"rot": rot, "t": t, "s": s}


def batch_loss(dR, dt, ds, dR_gt, dt_gt, ds_gt, axes, weights: LossWeights):
    """Torch twin of :func:`compute_loss`, averaged over the batch.

    ``axes`` is ``(B, 3)``: the camera-frame symmetry axis of axial samples and
    zeros elsewhere.
    """
    axial = axes.abs().sum(dim=1) > 0
    full = (dR - dR_gt).abs().mean(dim=(1, 2))
    a = axes.unsqueeze(2)
    ax = (torch.bmm(dR, a) - torch.bmm(dR_gt, a)).abs().squeeze(2).mean(dim=1)
    rot = torch.where(axial, ax, full).mean()
    t = (dt - dt_gt).abs().mean()
    s = (ds - ds_gt).abs().mean()
    total = weights.w_r * rot + weights.w_t * t + weights.w_s * s
    return total, {"rot": rot, "t": t, "s": s}


# --- schedule and augmentation -------------------------------------------------

def lr_at(step, total_steps, cfg: TrainConfig):
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    start = cfg.anneal_start_frac * total_steps
    if step < start:
        return cfg.base_lr
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * (step - start) / (total_steps - start)))


def augment(record: SampleRecord, cfg: TrainConfig, rng) -> SampleRecord:
    obs = record.observed
    n = len(obs)
    if cfg.point_dropout > 0:
        frac = rng.uniform(0.0, cfg.point_dropout)
        keep = max(1, n - int(round(frac * n)))
        obs = resample_to(obs[np.sort(rng.choice(n, keep, replace=False))], n, rng)
    if cfg.noise_sigma > 0:
        obs = obs + rng.normal(scale=cfg.noise_sigma, size=obs.shape)
    lim = cfg.pert_limits
    init = record.init
    if lim.rot_deg > 0 or lim.trans_m > 0 or lim.scale_frac > 0:
        init = perturb_pose(record.gt, lim, rng)
    return record.replace(observed=obs, init=init)


# --- batching ------------------------------------------------------------------

def _stack_batch(records, dtype=torch.float32):
    def t(x):
        return torch.as_tensor(np.stack(x), dtype=dtype)

    obs = t([r.observed for r in records])
    pri = t([r.prior for r in records])
    R0 = t([r.init.R for r in records])
    t0 = t([r.init.t for r in records])
    s0 = t([r.init.s for r in records])
    errs = [error_between(r.gt, r.init) for r in records]
    targets = (t([e.dR for e in errs]), t([e.dt for e in errs]), t([e.ds for e in errs]))
    axes = t([r.init.R @ np.asarray(r.symmetry.axis) if r.symmetry.is_axial else np.zeros(3) for r in records])
    return (obs, pri, R0, t0, s0), targets, axes


# --- checkpoints ---------------------------------------------------------------

@dataclass
class Checkpoint:
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    params: dict
    opt_state: dict = field(default_factory=dict)
    opt_groups: list = field(default_factory=list)
    epoch: int = 0
    step: int = 0
    torch_rng: Optional[np.ndarray] = None
    history: list = field(default_factory=list)
    best_epoch: Optional[int] = None
    best_params: Optional[dict] = None

    def build_model(self, best=False) -> GeoReF:
        model = GeoReF(self.model_cfg)
        params = self.best_params if best and self.best_params is not None else self.params
        model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in params.items()})
        model.eval()
        return model


def _state_arrays(module):
    return {k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def _opt_arrays(opt):
    sd = opt.state_dict()
    arrays = {}
    for idx, st in sd["state"].items():
        for key, val in st.items():
            arrays[f"{idx}/{key}"] = val.detach().cpu().numpy().copy() if torch.is_tensor(val) else np.asarray(val)
    return arrays, sd["param_groups"]


def _load_opt(opt, arrays, groups):
    state = {}
    for name, val in arrays.items():
        idx, key = name.split("/", 1)
        state.setdefault(int(idx), {})[key] = torch.from_numpy(val.copy())
    opt.load_state_dict({"state": state, "param_groups": groups})


def save_checkpoint(ckpt: Checkpoint, path):
    """Write the versioned container: magic, header length, JSON header, raw arrays."""
    sections = {"params": ckpt.params, "opt": ckpt.opt_state}
    if ckpt.best_params is not None:
        sections["best"] = ckpt.best_params
    if ckpt.torch_rng is not None:
        sections["rng"] = {"torch": ckpt.torch_rng}
    index, blobs, offset = [], [], 0
    for sec, arrays in sections.items():
        for name in sorted(arrays):
            arr = np.asarray(arrays[name])
            data = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
            index.append({"section": sec, "name": name, "dtype": arr.dtype.newbyteorder("<").str,
                          "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
            blobs.append(data)
            offset += len(data)
    header = {
        "format": CKPT_FORMAT,
        "model_cfg": ckpt.model_cfg.to_dict(),
        "train_cfg": ckpt.train_cfg.to_dict(),
        "opt_groups": ckpt.opt_groups,
        "epoch": ckpt.epoch,
        "step": ckpt.step,
        "history": ckpt.history,
        "best_epoch": ckpt.best_epoch,
        "arrays": index,
    }
    head = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC + struct.pack("<Q", len(head)) + head)
        for b in blobs:
            f.write(b)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC or len(raw) < 16:
        raise CheckpointFormatError(f"{path} is not a checkpoint container")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16:16 + hlen])
    except ValueError as exc:
        raise CheckpointFormatError(f"{path}: unreadable header") from exc
    if header.get("format") != CKPT_FORMAT:
        raise CheckpointFormatError(f"{path}: format {header.get('format')!r}, expected {CKPT_FORMAT!r}")
    body = raw[16 + hlen:]
    sections = {}
    for e in header["arrays"]:
        if e["offset"] + e["nbytes"] > len(body):
            raise CheckpointFormatError(f"{path}: array {e['section']}/{e['name']} is truncated")
        arr = np.frombuffer(body, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=np.int64)),
                            offset=e["offset"]).reshape(e["shape"]).copy()
        sections.setdefault(e["section"], {})[e["name"]] = arr.astype(arr.dtype.newbyteorder("="), copy=False)
    tc = dict(header["train_cfg"])
    return Checkpoint(
        model_cfg=ModelConfig.from_dict(header["model_cfg"]),
        train_cfg=TrainConfig.from_dict(tc),
        params=sections.get("params", {}),
        opt_state=sections.get("opt", {}),
        opt_groups=header["opt_groups"],
        epoch=header["epoch"],
        step=header["step"],
        torch_rng=sections.get("rng", {}).get("torch"),
        history=header["history"],
        best_epoch=header["best_epoch"],
        best_params=sections.get("best"),
    )


# --- training ------------------------------------------------------------------

def validation_stats(model, records, iters=1):
    """Median errors and 5deg/2cm accuracy after ``iters`` refinement steps."""
    trajs = refine_batch(model, records, iters)
    rot = np.array([rotation_error_deg(tr[-1].R, r.gt.R, r.symmetry) for tr, r in zip(trajs, records)])
    trans = np.array([np.linalg.norm(tr[-1].t - r.gt.t) for tr, r in zip(trajs, records)])
    return {"rot_med_deg": float(np.median(rot)), "trans_med_cm": float(np.median(trans) * 100),
            "acc_5deg_2cm": float(np.mean((rot <= 5) & (trans <= 0.02)))}


def _param_norms(model):
    return {k: float(v.detach().norm()) for k, v in model.named_parameters()}


def train(records, model_cfg: ModelConfig, train_cfg: TrainConfig, val_records=None, resume: Checkpoint = None,
          stop_epoch: Optional[int] = None, checkpoint_path=None, log: Optional[Callable] = None) -> Checkpoint:
    """Optimize the single-step error loss; returns the final checkpoint.

    Every sample's augmentation draws from a generator seeded by
    ``(seed, epoch, record index)``, so a run resumed at an epoch boundary
    replays exactly the batches of an uninterrupted run.
    """
    records = list(records)
    if not records:
        raise ConfigurationError("cannot train on an empty dataset")
    cfg = train_cfg
    prev_det = torch.are_deterministic_algorithms_enabled()
    if cfg.deterministic:
        torch.use_deterministic_algorithms(True)
    try:
        return _train(records, model_cfg, cfg, val_records, resume, stop_epoch, checkpoint_path, log)
    finally:
        torch.use_deterministic_algorithms(prev_det)


def _train(records, model_cfg, cfg, val_records, resume, stop_epoch, checkpoint_path, log):
    n = len(records)
    bs = min(cfg.batch_size, n)
    per_epoch = math.ceil(n / bs)
    total = cfg.max_steps if cfg.max_steps is not None else cfg.epochs * per_epoch
    n_epochs = math.ceil(total / per_epoch)

    torch.manual_seed(cfg.seed)
    model = GeoReF(model_cfg)
    opt = torch.optim.RAdam(model.parameters(), lr=cfg.base_lr, weight_decay=cfg.weight_decay,
                            decoupled_weight_decay=True)
    history, step, start_epoch = [], 0, 0
    best_score, best_epoch, best_params = -math.inf, None, None
    if resume is not None:
        if resume.model_cfg != model_cfg or resume.train_cfg != cfg:
            raise ConfigurationError("checkpoint configuration differs from the requested run")
        model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in resume.params.items()})
        _load_opt(opt, resume.opt_state, resume.opt_groups)
        if resume.torch_rng is not None:
            torch.set_rng_state(torch.from_numpy(resume.torch_rng.copy()))
        history = [dict(h) for h in resume.history]
        step, start_epoch = resume.step, resume.epoch
        best_epoch, best_params = resume.best_epoch, resume.best_params
        if best_epoch is not None:
            best_score = history[best_epoch - 1]["score"]

    epoch = start_epoch
    for epoch in range(start_epoch + 1, n_epochs + 1):
        if stop_epoch is not None and epoch > stop_epoch:
            epoch -= 1
            break
        model.train()
        order = np.random.default_rng([cfg.seed, epoch, 0]).permutation(n)
        sums = {"loss": 0.0, "rot": 0.0, "t": 0.0, "s": 0.0}
        count = 0
        for b0 in range(0, n, bs):
            if step >= total:
                break
            ids = order[b0:b0 + bs]
            batch = [augment(records[i], cfg, np.random.default_rng([cfg.seed, epoch, 1, int(i)])) for i in ids]
            inputs, targets, axes = _stack_batch(batch)
            for g in opt.param_groups:
                g["lr"] = lr_at(step, total, cfg)
            dR, dt, ds = model(*inputs)
            loss, terms = batch_loss(dR, dt, ds, *targets, axes, cfg.loss_weights)
            if not torch.isfinite(loss):
                dump = {"epoch": epoch, "step": step, "batch_ids": [int(i) for i in ids],
                        "terms": {k: v.item() for k, v in terms.items()}, "param_norms": _param_norms(model)}
                raise TrainingDivergedError(f"non-finite loss: {json.dumps(dump)}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            step += 1
            count += 1
            sums["loss"] += loss.item()
            for k in ("rot", "t", "s"):
                sums[k] += terms[k].item()
        entry = {"epoch": epoch, "step": step, "lr": lr_at(min(step, total), total, cfg)}
        entry.update({k: v / max(count, 1) for k, v in sums.items()})
        if val_records:
            entry["val"] = validation_stats(model, val_records)
            entry["score"] = entry["val"]["acc_5deg_2cm"] - 1e-3 * entry["val"]["rot_med_deg"]
        else:
            entry["score"] = -entry["loss"]
        history.append(entry)
        if entry["score"] > best_score:
            best_score, best_epoch, best_params = entry["score"], epoch, _state_arrays(model)
        if log is not None:
            log(entry)
        if checkpoint_path is not None:
            save_checkpoint(_snapshot(model, opt, model_cfg, cfg, epoch, step, history, best_epoch, best_params),
                            checkpoint_path)
        if step >= total:
            break
    return _snapshot(model, opt, model_cfg, cfg, epoch, step, history, best_epoch, best_params)


def _snapshot(model, opt, model_cfg, cfg, epoch, step, history, best_epoch, best_params):
    opt_arrays, groups = _opt_arrays(opt)
    return Checkpoint(model_cfg, cfg, _state_arrays(model), opt_arrays, groups, epoch, step,
                      torch.get_rng_state().numpy().copy(), [dict(h) for h in history], best_epoch,
                      best_params)


# --- refinement ----------------------------------------------------------------

class OracleRefiner:
    """Returns the exact error to the ground truth; validates the update loop."""

    def __init__(self, gts):
        self.gts = list(gts)

    def predict_errors(self, observed, prior, inits, ids=None):
        ids = range(len(inits)) if ids is None else ids
        return [error_between(self.gts[i], cur) for i, cur in zip(ids, inits)]


class ZeroRefiner:
    """Always predicts the identity error."""

    def predict_errors(self, observed, prior, inits, ids=None):
        return [PoseError.identity() for _ in inits]


def refine_batch(model, records, k=4, chunk=64):
    """Trajectories of length ``k + 1`` for every record."""
    if k < 0:
        raise ValueError("k must be non-negative")
    trajs = [[r.init] for r in records]
    for it in range(k):
        for c0 in range(0, len(records), chunk):
            idx = list(range(c0, min(c0 + chunk, len(records))))
            cur = [trajs[i][-1] for i in idx]
            try:
                errs = model.predict_errors([records[i].observed for i in idx], [records[i].prior for i in idx],
                                            cur, ids=idx)
                nxt = [compose_update(p, e) for p, e in zip(cur, errs)]
            except (ValueError, ArithmeticError) as exc:
                raise RefinementError(f"iteration {it + 1}: {exc}", it + 1) from exc
            for i, p in zip(idx, nxt):
                trajs[i].append(p)
    return trajs


def refine_iterative(model, observed, prior, init: PoseState, k=4):
    rec = SampleRecord(np.asarray(observed), np.asarray(prior), init, init, "", NO_SYMMETRY, "")
    return refine_batch(model, [rec], k)[0]
