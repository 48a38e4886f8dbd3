"""Autoregressive rollout inference and forecast verification metrics.

Reports aggregate area-weighted RMSE per (channel, lead step) over many
initial conditions, plus per-degree power spectra of predictions against
truth at a fixed lead. Rollouts operate in standardized space; predictions
feed back without unstandardizing.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import model as mk
from .grid import GridSpec
from .spectral import psd, sht_forward

MEAN_OF_RMSE = "mean_of_rmse"
POOLED_RMSE = "pooled_rmse"


def model_step_fn(params: dict, config: mk.ModelConfig, grid: GridSpec, masks=None):
    """One-step map of the emulator over a batch of states (N, C, H, W)."""
    masks = masks or mk.build_masks(config)

    def step(values: np.ndarray, time_frac: np.ndarray) -> np.ndarray:
        batch = mk.Batch(values=values, time_frac=np.atleast_1d(time_frac))
        preds, _ = mk.forward(params, config, batch, grid, masks=masks)
        return preds

    return step


def rollout(step, u0: np.ndarray, time_frac: float, n_steps: int, period: int):
    """Feed predictions back for ``n_steps``; returns (preds, blowup_step).

    ``preds`` has shape (n_steps, C, H, W). If a state goes non-finite the
    rollout stops there and ``blowup_step`` reports the offending lead (the
    remaining entries stay NaN).
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    preds = np.full((n_steps,) + u0.shape, np.nan)
    state = u0[None]
    tf = np.array([time_frac], dtype=np.float64)
    for i in range(n_steps):
        state = step(state, tf)
        if not np.all(np.isfinite(state)):
            return preds, i + 1
        preds[i] = state[0]
        tf = (tf + 1.0 / period) % 1.0
    return preds, None


def _rollout_batched(step, u0s: np.ndarray, time_frac: np.ndarray, n_steps: int, period: int):
    """(n_ic, C, H, W) initial states -> (n_steps, n_ic, C, H, W)."""
    preds = np.full((n_steps,) + u0s.shape, np.nan)
    state, tf = u0s, np.asarray(time_frac, dtype=np.float64)
    for i in range(n_steps):
        state = step(state, tf)
        if not np.all(np.isfinite(state)):
            return preds, i + 1
        preds[i] = state
        tf = (tf + 1.0 / period) % 1.0
    return preds, None


def area_rmse(pred: np.ndarray, target: np.ndarray, grid: GridSpec) -> float:
    """RMSE over an H x W field with cos-latitude weights of grid mean 1."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    err2 = (pred - target) ** 2
    return float(np.sqrt(np.mean(grid.area_weights[:, None] * err2)))


def _per_channel_metric(pred, target, grid, metric):
    """pred/target (..., C, H, W) -> per-channel scalars (..., C)."""
    err2 = (pred - target) ** 2
    if metric == "area_rmse":
        w = grid.area_weights[: pred.shape[-2], None]
        w = w * (pred.shape[-2] / np.sum(w))  # renormalize if rows were trimmed
        return np.sqrt(np.mean(w * err2, axis=(-2, -1)))
    if metric == "mse":
        return np.mean(err2, axis=(-2, -1))
    raise ValueError(f"unknown metric {metric!r}")


@dataclass
class RolloutReport:
    """Per-channel, per-lead verification scores over many initial conditions."""

    values: np.ndarray  # (C, n_leads)
    n_leads: int
    n_initial_conditions: int
    ic_stride: int
    metric: str
    aggregate: str
    blowup_step: int | None = None


@dataclass
class SpectrumReport:
    lead: int
    band_limit: int
    psd_pred: np.ndarray  # (C, L+1)
    psd_truth: np.ndarray


def initial_condition_positions(split: range, n_leads: int, ic_stride: int, max_ics=None):
    last_start = split.stop - 1 - n_leads
    positions = [n for n in range(split.start, last_start + 1, ic_stride)]
    if max_ics is not None:
        positions = positions[:max_ics]
    return positions


def evaluate_rollouts(
    step,
    values: np.ndarray,
    time_frac: np.ndarray,
    split: range,
    n_leads: int,
    ic_stride: int,
    grid: GridSpec,
    period: int,
    metric: str = "area_rmse",
    aggregate: str = MEAN_OF_RMSE,
    max_ics=None,
) -> RolloutReport:
    """Average rollout scores over initial conditions drawn every
    ``ic_stride`` samples of ``split``.

    ``aggregate`` picks mean-of-per-IC-scores (default) or pooling squared
    errors before the root (area_rmse only).
    """
    positions = initial_condition_positions(split, n_leads, ic_stride, max_ics)
    if not positions:
        raise ValueError("split too short for the requested leads: empty IC set")
    ics = np.asarray(positions)
    preds, blowup = _rollout_batched(
        step, values[ics], time_frac[ics], n_leads, period
    )
    truth = np.stack([values[ics + lead] for lead in range(1, n_leads + 1)])

    if aggregate == MEAN_OF_RMSE:
        per_ic = _per_channel_metric(preds, truth, grid, metric)  # (lead, ic, C)
        scores = np.mean(per_ic, axis=1)
    elif aggregate == POOLED_RMSE:
        if metric != "area_rmse":
            raise ValueError("pooled aggregation applies to area_rmse only")
        # pool squared errors over ICs, then take the root once
        w = grid.area_weights[: preds.shape[-2], None]
        w = w * (preds.shape[-2] / np.sum(w))
        err2 = (preds - truth) ** 2
        scores = np.sqrt(np.mean(w * err2, axis=(1, -2, -1)))
    else:
        raise ValueError(f"unknown aggregate {aggregate!r}")

    return RolloutReport(
        values=np.ascontiguousarray(scores.T),
        n_leads=n_leads,
        n_initial_conditions=len(positions),
        ic_stride=ic_stride,
        metric=metric,
        aggregate=aggregate,
        blowup_step=blowup,
    )


def spectrum_at_lead(
    step,
    values: np.ndarray,
    time_frac: np.ndarray,
    split: range,
    lead: int,
    band_limit: int,
    ic_stride: int,
    grid: GridSpec,
    period: int,
    max_ics=None,
) -> SpectrumReport:
    """PSD of predictions and truth at one lead, averaged over ICs."""
    if lead < 1:
        raise ValueError("lead must be >= 1")
    positions = initial_condition_positions(split, lead, ic_stride, max_ics)
    if not positions:
        raise ValueError("split too short for the requested lead: empty IC set")
    ics = np.asarray(positions)
    preds, _ = _rollout_batched(step, values[ics], time_frac[ics], lead, period)
    at_lead = preds[-1]
    truth = values[ics + lead]

    n_ch = at_lead.shape[1]
    psd_pred = np.zeros((n_ch, band_limit + 1))
    psd_truth = np.zeros((n_ch, band_limit + 1))
    for i in range(len(positions)):
        for c in range(n_ch):
            psd_pred[c] += psd(sht_forward(at_lead[i, c], grid, band_limit))
            psd_truth[c] += psd(sht_forward(truth[i, c], grid, band_limit))
    psd_pred /= len(positions)
    psd_truth /= len(positions)
    return SpectrumReport(
        lead=lead, band_limit=band_limit, psd_pred=psd_pred, psd_truth=psd_truth
    )


def rollout_report_to_csv(report: RolloutReport, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["channel", "lead", report.metric])
        for c in range(report.values.shape[0]):
            for lead in range(report.n_leads):
                writer.writerow([c, lead + 1, repr(report.values[c, lead])])


def spectrum_report_to_csv(report: SpectrumReport, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["channel", "ell", "psd_pred", "psd_truth"])
        for c in range(report.psd_pred.shape[0]):
            for ell in range(report.band_limit + 1):
                writer.writerow(
                    [c, ell, repr(report.psd_pred[c, ell]), repr(report.psd_truth[c, ell])]
                )
