"""Losses, AdamW with clipping, LR schedules, checkpoints, cooldown branching.

Training runs at a constant learning rate after warmup; a run is "cooled
down" by branching from a pre-cooldown checkpoint onto a 1-sqrt decay tail,
optionally swapping the loss (multi-step rollout or spectrally adjusted MSE)
to align the model with a downstream objective. Checkpoints capture weights,
optimizer moments, iterator and RNG state, so any branch resumes the exact
batch stream of an uninterrupted run.
"""

from __future__ import annotations

import copy
import csv
import math
import os
from dataclasses import dataclass, replace

import numpy as np

from . import evaluation as ev
from . import model as mk
from .blob import read_blob, write_blob
from .dataset import Dataset, IteratorState, NormStats, compute_norm_stats, next_batch, standardize
from .grid import GridSpec
from .spectral import psd, sht_forward, sht_forward_adjoint
from .util import config_hash

COSINE = "cosine"
CONSTANT_COOLDOWN = "constant_cooldown"

LOSS_MSE = "mse"
LOSS_AR = "ar"
LOSS_AMSE = "amse"


class TrainingDiverged(RuntimeError):
    """Raised when the training loss goes non-finite."""


# ---------------------------------------------------------------------------
# learning-rate schedules


@dataclass(frozen=True)
class LRScheduleSpec:
    variant: str
    total_iters: int
    peak_lr: float
    warmup_iters: int = 500
    cooldown_frac: float = 0.05

    def __post_init__(self):
        if self.variant not in (COSINE, CONSTANT_COOLDOWN):
            raise ValueError(f"unknown schedule variant {self.variant!r}")
        if not 0 <= self.cooldown_frac < 1:
            raise ValueError("cooldown_frac must lie in [0, 1)")
        if self.warmup_iters >= self.total_iters:
            raise ValueError("warmup must end before total_iters")

    @property
    def cooldown_start(self) -> int:
        return int(round(self.total_iters * (1.0 - self.cooldown_frac)))

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "total_iters": self.total_iters,
            "peak_lr": self.peak_lr,
            "warmup_iters": self.warmup_iters,
            "cooldown_frac": self.cooldown_frac,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LRScheduleSpec":
        return cls(**d)


def lr_at(spec: LRScheduleSpec, i: int) -> float:
    """Learning rate at iteration ``i``; linear warmup, then either a
    half-cosine decay or a constant region ending in a 1-sqrt cooldown."""
    if i < 0 or i > spec.total_iters:
        raise ValueError(f"iteration {i} outside [0, {spec.total_iters}]")
    if i < spec.warmup_iters:
        return spec.peak_lr * i / spec.warmup_iters
    if spec.variant == COSINE:
        progress = (i - spec.warmup_iters) / (spec.total_iters - spec.warmup_iters)
        return spec.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
    t0 = spec.cooldown_start
    if i <= t0 or spec.cooldown_frac == 0.0:
        return spec.peak_lr
    return spec.peak_lr * (1.0 - math.sqrt((i - t0) / (spec.total_iters - t0)))


# ---------------------------------------------------------------------------
# losses


def loss_mse(pred: np.ndarray, target: np.ndarray) -> float:
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    return float(np.mean((pred - target) ** 2))


def _mse_with_grad(pred, target):
    diff = pred - target
    return float(np.mean(diff**2)), 2.0 * diff / diff.size


def _amse_field(a_u, a_v, band_limit):
    """AMSE of one channel from coefficient arrays; returns the per-degree
    pieces needed for the gradient as well."""
    degrees = np.arange(band_limit + 1)
    weights = 2 * degrees + 1
    pu = np.sum(np.abs(a_u) ** 2, axis=1) / weights
    pv = np.sum(np.abs(a_v) ** 2, axis=1) / weights
    cross = np.sum((a_u * np.conj(a_v)).real, axis=1) / weights
    su, sv = np.sqrt(pu), np.sqrt(pv)

    amp = (su - sv) ** 2
    powered = (pu > 0.0) & (pv > 0.0)
    coh = np.zeros_like(pu)
    coh[powered] = cross[powered] / (su[powered] * sv[powered])
    # prediction branch wins ties in the max
    pick_u = pu >= pv
    peak = np.where(pick_u, pu, pv)
    dec = np.where(powered, 2.0 * peak * (1.0 - coh), 0.0)
    value = float(np.sum(amp + dec))
    return value, (pu, pv, cross, su, sv, coh, powered, pick_u, peak, weights)


def _amse_grad_coeffs(a_u, a_v, pieces):
    """d(AMSE)/d(a_u) packed as dL/dRe + i dL/dIm."""
    pu, pv, cross, su, sv, coh, powered, pick_u, peak, weights = pieces
    # amplitude term: d/dpu = 1 - sv/su on powered-u degrees, 0 where pu == 0
    d_pu = np.zeros_like(pu)
    nonzero_u = pu > 0.0
    d_pu[nonzero_u] = 1.0 - sv[nonzero_u] / su[nonzero_u]
    # decorrelation term
    d_cross = np.zeros_like(pu)
    if np.any(powered):
        d_peak = 2.0 * (1.0 - coh)
        d_coh = -2.0 * peak
        d_pu = d_pu + np.where(
            powered & pick_u, d_peak, 0.0
        ) + np.where(powered, d_coh * (-coh / np.maximum(2.0 * pu, 1e-300)), 0.0)
        d_cross = np.where(powered, d_coh / np.maximum(su * sv, 1e-300), 0.0)
    g = (2.0 * d_pu / weights)[:, None] * a_u + (d_cross / weights)[:, None] * a_v
    return g


def loss_amse(pred: np.ndarray, target: np.ndarray, grid: GridSpec, band_limit: int):
    """Adjusted MSE over spherical harmonic degrees, averaged over batch and
    channels; returns (loss, d loss/d pred)."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    squeeze = pred.ndim == 3
    if squeeze:
        pred, target = pred[None], target[None]
    B, C = pred.shape[:2]
    total = 0.0
    dpred = np.zeros_like(pred)
    for b in range(B):
        for c in range(C):
            a_u = sht_forward(pred[b, c], grid, band_limit).coeffs
            a_v = sht_forward(target[b, c], grid, band_limit).coeffs
            value, pieces = _amse_field(a_u, a_v, band_limit)
            total += value
            g = _amse_grad_coeffs(a_u, a_v, pieces) / (B * C)
            dpred[b, c] = sht_forward_adjoint(g, grid, band_limit)
    loss = total / (B * C)
    return loss, (dpred[0] if squeeze else dpred)


def loss_ar(
    params: dict,
    config: mk.ModelConfig,
    grid: GridSpec,
    batch: mk.Batch,
    targets: list,
    period: int,
    masks=None,
):
    """Multi-step rollout MSE, mean over steps, with gradients through the
    whole unrolled chain; returns (loss, param grads)."""
    k = len(targets)
    if k < 1:
        raise ValueError("need at least one rollout target")
    masks = masks or mk.build_masks(config)
    tapes, preds = [], []
    state = batch.values
    tf = np.asarray(batch.time_frac, dtype=np.float64)
    for _ in range(k):
        p, tape = mk.forward(params, config, mk.Batch(state, tf), grid, masks=masks)
        tapes.append(tape)
        preds.append(p)
        state = p
        tf = (tf + 1.0 / period) % 1.0

    loss = 0.0
    step_grads = []
    for i in range(k):
        li, gi = _mse_with_grad(preds[i], targets[i])
        loss += li / k
        step_grads.append(gi / k)

    grads = None
    carry = None
    for i in range(k - 1, -1, -1):
        g = step_grads[i] if carry is None else step_grads[i] + carry
        pgrads, carry = mk.backward(tapes[i], params, config, g)
        if grads is None:
            grads = pgrads
        else:
            for name in grads:
                grads[name] += pgrads[name]
    return loss, grads


# ---------------------------------------------------------------------------
# train configuration and state


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    weight_decay: float = 1e-4
    grad_clip_norm: float = 1.0
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    loss: str = LOSS_MSE
    rollout_steps: int = 1  # k for the ar loss
    amse_band_limit: int | None = None
    seed: int = 0
    val_stride: int = 2
    val_rollout_steps: int = 6
    val_max_ics: int = 16
    record_every: int = 2000

    def __post_init__(self):
        object.__setattr__(self, "adam_betas", tuple(self.adam_betas))
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.loss not in (LOSS_MSE, LOSS_AR, LOSS_AMSE):
            raise ValueError(f"unknown loss variant {self.loss!r}")
        if self.loss == LOSS_AR and self.rollout_steps < 1:
            raise ValueError("rollout_steps must be >= 1")

    def to_dict(self) -> dict:
        d = {
            "batch_size": self.batch_size,
            "weight_decay": self.weight_decay,
            "grad_clip_norm": self.grad_clip_norm,
            "adam_betas": list(self.adam_betas),
            "adam_eps": self.adam_eps,
            "loss": self.loss,
            "rollout_steps": self.rollout_steps,
            "amse_band_limit": self.amse_band_limit,
            "seed": self.seed,
            "val_stride": self.val_stride,
            "val_rollout_steps": self.val_rollout_steps,
            "val_max_ics": self.val_max_ics,
            "record_every": self.record_every,
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class LossRecord:
    iteration: int
    lr: float
    train_loss: float
    val_1step: float
    val_6step: float


@dataclass
class TrainData:
    """Standardized, pole-trimmed arrays plus split ranges and the grid."""

    values: np.ndarray
    time_frac: np.ndarray
    train: range
    val: range
    test: range
    period: int
    grid: GridSpec
    stats: NormStats


def prepare_train_data(dataset: Dataset, config: mk.ModelConfig) -> TrainData:
    values = mk.trim_rows(dataset.values, config)
    train = dataset.split_range("train")
    stats = compute_norm_stats(values[train.start : train.stop])
    standardized = np.stack([standardize(v, stats) for v in values])
    return TrainData(
        values=standardized,
        time_frac=dataset.time_frac(np.arange(values.shape[0])),
        train=train,
        val=dataset.split_range("val"),
        test=dataset.split_range("test"),
        period=dataset.period,
        grid=dataset.grid,
        stats=stats,
    )


@dataclass
class TrainState:
    model_config: mk.ModelConfig
    train_config: TrainConfig
    schedule: LRScheduleSpec
    params: dict
    adam_m: dict
    adam_v: dict
    step: int
    iterator: IteratorState
    rng: np.random.Generator
    config_id: str = ""

    def clone(self) -> "TrainState":
        new = TrainState(
            model_config=self.model_config,
            train_config=self.train_config,
            schedule=self.schedule,
            params={k: v.copy() for k, v in self.params.items()},
            adam_m={k: v.copy() for k, v in self.adam_m.items()},
            adam_v={k: v.copy() for k, v in self.adam_v.items()},
            step=self.step,
            iterator=self.iterator,
            rng=np.random.default_rng(),
            config_id=self.config_id,
        )
        new.rng.bit_generator.state = copy.deepcopy(self.rng.bit_generator.state)
        return new


def make_train_state(
    model_config: mk.ModelConfig,
    train_config: TrainConfig,
    schedule: LRScheduleSpec,
    data: TrainData,
) -> TrainState:
    params = mk.init_params(model_config, train_config.seed)
    return TrainState(
        model_config=model_config,
        train_config=train_config,
        schedule=schedule,
        params=params,
        adam_m={k: np.zeros_like(v) for k, v in params.items()},
        adam_v={k: np.zeros_like(v) for k, v in params.items()},
        step=0,
        iterator=IteratorState(dataset_len=len(data.train), perm_seed=train_config.seed),
        rng=np.random.default_rng(train_config.seed),
        config_id=config_hash(
            {"model": model_config.to_dict(), "train": train_config.to_dict()}
        ),
    )


# ---------------------------------------------------------------------------
# optimizer step


def clip_global_norm(grads: dict, max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


def _decays(name: str) -> bool:
    # decoupled weight decay applies to weight matrices only,
    # not biases or norm/QK gains
    return name.endswith(".w")


def adamw_update(state: TrainState, grads: dict, lr: float) -> None:
    b1, b2 = state.train_config.adam_betas
    eps = state.train_config.adam_eps
    wd = state.train_config.weight_decay
    t = state.step + 1
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in state.params.items():
        g = grads[name]
        m = state.adam_m[name]
        v = state.adam_v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        if _decays(name):
            update = update + wd * p
        p -= lr * update


def _draw_batch_positions(state: TrainState, data: TrainData, horizon: int) -> np.ndarray:
    """Positions within the train split with ``horizon`` targets available;
    boundary positions are skipped and redrawn."""
    want = state.train_config.batch_size
    limit = len(data.train) - horizon
    if limit < want:
        raise ValueError(
            f"train split of {len(data.train)} too short for horizon {horizon} "
            f"with batch size {want}"
        )
    out = []
    it = state.iterator
    while len(out) < want:
        idx, it = next_batch(it, want - len(out))
        out.extend(int(i) for i in idx if i < limit)
    state.iterator = it
    return np.asarray(out, dtype=np.int64)


def train_step(state: TrainState, data: TrainData, masks=None) -> float:
    """One optimization step; returns the training loss."""
    cfg = state.train_config
    mcfg = state.model_config
    masks = masks or mk.build_masks(mcfg)
    horizon = cfg.rollout_steps if cfg.loss == LOSS_AR else 1
    pos = _draw_batch_positions(state, data, horizon)
    base = data.train.start + pos
    batch = mk.Batch(values=data.values[base], time_frac=data.time_frac[base])

    if cfg.loss == LOSS_AR:
        targets = [data.values[base + i] for i in range(1, horizon + 1)]
        loss, grads = loss_ar(
            state.params, mcfg, data.grid, batch, targets, data.period, masks=masks
        )
    else:
        target = data.values[base + 1]
        preds, tape = mk.forward(state.params, mcfg, batch, data.grid, masks=masks)
        if cfg.loss == LOSS_MSE:
            loss, dpred = _mse_with_grad(preds, target)
        else:
            band = cfg.amse_band_limit or data.grid.capacity
            loss, dpred = loss_amse(preds, target, data.grid, band)
        grads, _ = mk.backward(tape, state.params, mcfg, dpred)

    if not math.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss {loss} at step {state.step}")
    clip_global_norm(grads, cfg.grad_clip_norm)
    adamw_update(state, grads, lr_at(state.schedule, state.step))
    state.step += 1
    return loss


def validation_losses(state: TrainState, data: TrainData, masks=None):
    """Mean one-step MSE and mean rollout MSE over the first
    ``val_rollout_steps`` leads, averaged over validation ICs."""
    cfg = state.train_config
    step = ev.model_step_fn(state.params, state.model_config, data.grid, masks=masks)
    report = ev.evaluate_rollouts(
        step,
        data.values,
        data.time_frac,
        data.val,
        n_leads=cfg.val_rollout_steps,
        ic_stride=cfg.val_stride,
        grid=data.grid,
        period=data.period,
        metric="mse",
        max_ics=cfg.val_max_ics,
    )
    return float(np.mean(report.values[:, 0])), float(np.mean(report.values))


def run(
    state: TrainState,
    data: TrainData,
    until_iter: int,
    record_every: int | None = None,
) -> list:
    """Advance training to ``until_iter``, recording losses at the cadence
    and at the final iteration."""
    if until_iter > state.schedule.total_iters:
        raise ValueError("until_iter beyond the schedule horizon")
    cadence = record_every or state.train_config.record_every
    masks = mk.build_masks(state.model_config)
    records = []
    train_loss = math.nan
    while state.step < until_iter:
        train_loss = train_step(state, data, masks=masks)
        if state.step % cadence == 0 or state.step == until_iter:
            v1, v6 = validation_losses(state, data, masks=masks)
            records.append(
                LossRecord(
                    iteration=state.step,
                    lr=lr_at(state.schedule, state.step - 1),
                    train_loss=train_loss,
                    val_1step=v1,
                    val_6step=v6,
                )
            )
    return records


def branch_cooldown(
    checkpoint: TrainState,
    data: TrainData,
    total_iters: int,
    cooldown_frac: float,
    loss_variant: str | None = None,
    rollout_steps: int | None = None,
    record_every: int | None = None,
):
    """Branch a constant-LR run onto a cooldown tail (optionally with a new
    loss); returns (state, records, final (val_1step, val_6step))."""
    state = checkpoint.clone()
    schedule = LRScheduleSpec(
        variant=CONSTANT_COOLDOWN,
        total_iters=total_iters,
        peak_lr=state.schedule.peak_lr,
        warmup_iters=state.schedule.warmup_iters,
        cooldown_frac=cooldown_frac,
    )
    if state.step > schedule.cooldown_start:
        raise ValueError(
            f"checkpoint step {state.step} is beyond the cooldown start "
            f"{schedule.cooldown_start}"
        )
    state.schedule = schedule
    if loss_variant is not None:
        overrides = {"loss": loss_variant}
        if rollout_steps is not None:
            overrides["rollout_steps"] = rollout_steps
        state.train_config = replace(state.train_config, **overrides)
    records = run(state, data, total_iters, record_every=record_every)
    final = validation_losses(state, data)
    return state, records, final


# ---------------------------------------------------------------------------
# checkpoints and loss logs


def save_checkpoint(path: str, state: TrainState, overwrite: bool = False) -> None:
    """Checkpoints are immutable once written; pass ``overwrite`` only for
    scratch locations."""
    if os.path.exists(path) and not overwrite:
        raise FileExistsError(f"checkpoint {path} already exists (immutable)")
    arrays = {}
    for name, arr in state.params.items():
        arrays[f"params.{name}"] = arr
        arrays[f"adam_m.{name}"] = state.adam_m[name]
        arrays[f"adam_v.{name}"] = state.adam_v[name]
    meta = {
        "kind": "checkpoint",
        "step": state.step,
        "model_config": state.model_config.to_dict(),
        "train_config": state.train_config.to_dict(),
        "schedule": state.schedule.to_dict(),
        "iterator": state.iterator.to_dict(),
        "rng_state": state.rng.bit_generator.state,
        "config_id": state.config_id,
    }
    write_blob(path, arrays, meta)


def load_checkpoint(path: str) -> TrainState:
    arrays, meta = read_blob(path)
    if meta.get("kind") != "checkpoint":
        raise ValueError(f"{path}: not a checkpoint blob")
    params, m, v = {}, {}, {}
    for key, arr in arrays.items():
        section, name = key.split(".", 1)
        {"params": params, "adam_m": m, "adam_v": v}[section][name] = arr
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    return TrainState(
        model_config=mk.ModelConfig.from_dict(meta["model_config"]),
        train_config=TrainConfig.from_dict(meta["train_config"]),
        schedule=LRScheduleSpec.from_dict(meta["schedule"]),
        params=params,
        adam_m=m,
        adam_v=v,
        step=meta["step"],
        iterator=IteratorState.from_dict(meta["iterator"]),
        rng=rng,
        config_id=meta["config_id"],
    )


def records_to_csv(records: list, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "lr", "train_loss", "val_1step", "val_6step"])
        for r in records:
            writer.writerow(
                [r.iteration, repr(r.lr), repr(r.train_loss), repr(r.val_1step), repr(r.val_6step)]
            )


def records_from_csv(path) -> list:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(
                LossRecord(
                    iteration=int(row["iteration"]),
                    lr=float(row["lr"]),
                    train_loss=float(row["train_loss"]),
                    val_1step=float(row["val_1step"]),
                    val_6step=float(row["val_6step"]),
                )
            )
    return out
