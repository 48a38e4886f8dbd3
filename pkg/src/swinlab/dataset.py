"""Synthetic spherical dynamics, normalization stats, and a resumable iterator.

The generating process is per-channel solid-body rotation plus spectral
diffusion: linear in coefficient space, so every generated sample has an
exact closed-form oracle. Snapshots are produced by inverse spherical
harmonic transform on the grid and are bit-reproducible for a fixed seed.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .grid import GridSpec, make_grid
from .spectral import SHTCoeffs, sht_forward, sht_inverse, zeros_coeffs

STD_FLOOR = 1e-8


@dataclass(frozen=True)
class SyntheticProcessSpec:
    """Parameters of the synthetic weather-like process.

    ``rotation_rates`` are radians of solid-body rotation per step and
    ``diffusivities`` the per-step spectral decay scale, one per channel.
    ``period`` is the length of one synthetic "year" used to normalize the
    time coordinate.
    """

    n_channels: int
    spectral_slope: float
    rotation_rates: tuple
    diffusivities: tuple
    band_limit: int
    seed: int
    step_interval: float = 1.0
    period: int = 64

    def __post_init__(self):
        if self.spectral_slope <= 1.0:
            raise ValueError("spectral_slope must exceed 1 for a summable spectrum")
        if len(self.rotation_rates) != self.n_channels:
            raise ValueError("need one rotation rate per channel")
        if len(self.diffusivities) != self.n_channels:
            raise ValueError("need one diffusivity per channel")
        if any(nu < 0 for nu in self.diffusivities):
            raise ValueError("diffusivities must be nonnegative")
        if self.period < 1:
            raise ValueError("period must be positive")

    def to_dict(self) -> dict:
        return {
            "n_channels": self.n_channels,
            "spectral_slope": self.spectral_slope,
            "rotation_rates": list(self.rotation_rates),
            "diffusivities": list(self.diffusivities),
            "band_limit": self.band_limit,
            "seed": self.seed,
            "step_interval": self.step_interval,
            "period": self.period,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticProcessSpec":
        d = dict(d)
        d["rotation_rates"] = tuple(d["rotation_rates"])
        d["diffusivities"] = tuple(d["diffusivities"])
        return cls(**d)


@dataclass(frozen=True)
class FieldSample:
    """One snapshot: step index, C x H x W values, normalized time in [0, 1)."""

    index: int
    values: np.ndarray
    time_frac: float


def time_fraction(index: int, period: int) -> float:
    return (index % period) / period


def initial_coeffs(process: SyntheticProcessSpec, rng: np.random.Generator) -> list[SHTCoeffs]:
    """Draw conjugate-symmetric coefficients with variance (1+l)^(-slope)."""
    out = []
    L = process.band_limit
    for _ in range(process.n_channels):
        c = zeros_coeffs(L)
        for ell in range(L + 1):
            sigma = (1.0 + ell) ** (-process.spectral_slope / 2.0)
            c.set(ell, 0, sigma * rng.standard_normal())
            for m in range(1, ell + 1):
                re, im = rng.standard_normal(2)
                z = sigma * (re + 1j * im) / np.sqrt(2.0)
                c.set(ell, m, z)
                c.set(ell, -m, (-1) ** m * np.conj(z))
        out.append(c)
    return out


def step_coeffs(coeffs: SHTCoeffs, rotation: float, diffusivity: float) -> SHTCoeffs:
    """Advance one step: decay exp(-nu l(l+1)) and phase exp(-i m omega)."""
    L = coeffs.band_limit
    ells = np.arange(L + 1, dtype=np.float64)
    ms = np.arange(-L, L + 1, dtype=np.float64)
    decay = np.exp(-diffusivity * ells * (ells + 1.0))[:, None]
    phase = np.exp(-1j * ms * rotation)[None, :]
    return SHTCoeffs(L, coeffs.coeffs * decay * phase)


def generate_sequence(
    process: SyntheticProcessSpec, grid: GridSpec, n_steps: int
) -> list[FieldSample]:
    """Generate ``n_steps`` consecutive snapshots of the process on ``grid``."""
    if process.band_limit > grid.capacity:
        raise ValueError(
            f"band limit {process.band_limit} exceeds grid capacity {grid.capacity}"
        )
    rng = np.random.default_rng(process.seed)
    coeffs = initial_coeffs(process, rng)
    samples = []
    for n in range(n_steps):
        values = np.stack([sht_inverse(c, grid) for c in coeffs])
        samples.append(
            FieldSample(index=n, values=values, time_frac=time_fraction(n, process.period))
        )
        coeffs = [
            step_coeffs(c, process.rotation_rates[i], process.diffusivities[i])
            for i, c in enumerate(coeffs)
        ]
    return samples


def oracle_step_fn(process: SyntheticProcessSpec, grid: GridSpec):
    """Exact one-step map of the generating process, usable in place of a model."""

    def step(values: np.ndarray, time_frac: float) -> np.ndarray:
        del time_frac  # dynamics are autonomous
        out = np.empty_like(values)
        for c in range(process.n_channels):
            co = sht_forward(values[c], grid, process.band_limit)
            out[c] = sht_inverse(
                step_coeffs(co, process.rotation_rates[c], process.diffusivities[c]), grid
            )
        return out

    return step


@dataclass(frozen=True)
class NormStats:
    """Per-channel mean and (floored) standard deviation from the train split."""

    mean: np.ndarray
    std: np.ndarray

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def compute_norm_stats(train_values: np.ndarray) -> NormStats:
    """Stats over all train samples and grid points, shape (N, C, H, W) in."""
    if train_values.shape[0] == 0:
        raise ValueError("empty training split")
    mean = train_values.mean(axis=(0, 2, 3))
    std = train_values.std(axis=(0, 2, 3))
    return NormStats(mean=mean, std=np.maximum(std, STD_FLOOR))


def standardize(values: np.ndarray, stats: NormStats) -> np.ndarray:
    return (values - stats.mean[:, None, None]) / stats.std[:, None, None]


def unstandardize(values: np.ndarray, stats: NormStats) -> np.ndarray:
    return values * stats.std[:, None, None] + stats.mean[:, None, None]


# ---------------------------------------------------------------------------
# stateful sample iterator


@dataclass(frozen=True)
class IteratorState:
    """Full iteration context; the permutation is a pure function of
    (perm_seed, epoch), so a saved state resumes the exact index stream."""

    dataset_len: int
    perm_seed: int
    epoch: int = 0
    cursor: int = 0

    def to_dict(self) -> dict:
        return {
            "dataset_len": self.dataset_len,
            "perm_seed": self.perm_seed,
            "epoch": self.epoch,
            "cursor": self.cursor,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "IteratorState":
        return cls(**d)


def epoch_permutation(perm_seed: int, epoch: int, dataset_len: int) -> np.ndarray:
    rng = np.random.default_rng([perm_seed, epoch])
    return rng.permutation(dataset_len)


def next_batch(state: IteratorState, batch_size: int) -> tuple[np.ndarray, IteratorState]:
    """Draw ``batch_size`` indices, spanning epoch boundaries as needed."""
    if batch_size > state.dataset_len:
        raise ValueError("batch_size exceeds dataset length")
    indices = []
    epoch, cursor = state.epoch, state.cursor
    while len(indices) < batch_size:
        perm = epoch_permutation(state.perm_seed, epoch, state.dataset_len)
        take = min(batch_size - len(indices), state.dataset_len - cursor)
        indices.extend(perm[cursor : cursor + take])
        cursor += take
        if cursor == state.dataset_len:
            epoch += 1
            cursor = 0
    new_state = replace(state, epoch=epoch, cursor=cursor)
    return np.asarray(indices, dtype=np.int64), new_state


# ---------------------------------------------------------------------------
# on-disk dataset: JSON manifest + raw float64 blocks with sidecar headers

MANIFEST_NAME = "manifest.json"


@dataclass
class Dataset:
    grid: GridSpec
    process: SyntheticProcessSpec
    values: np.ndarray  # (N, C, H, W) float64, raw units
    splits: dict  # name -> (start, stop) sample indices

    @property
    def period(self) -> int:
        return self.process.period

    def time_frac(self, index) -> np.ndarray:
        return (np.asarray(index) % self.period) / self.period

    def split_range(self, name: str) -> range:
        start, stop = self.splits[name]
        return range(start, stop)


def default_splits(n_steps: int, train_frac=0.8, val_frac=0.1) -> dict:
    """Contiguous time ranges train/val/test, in that order."""
    n_train = int(round(n_steps * train_frac))
    n_val = int(round(n_steps * val_frac))
    n_train = max(1, min(n_train, n_steps - 2))
    n_val = max(1, min(n_val, n_steps - n_train - 1))
    return {
        "train": (0, n_train),
        "val": (n_train, n_train + n_val),
        "test": (n_train + n_val, n_steps),
    }


def build_dataset(
    process: SyntheticProcessSpec, grid: GridSpec, n_steps: int, splits: dict | None = None
) -> Dataset:
    samples = generate_sequence(process, grid, n_steps)
    values = np.stack([s.values for s in samples])
    return Dataset(
        grid=grid,
        process=process,
        values=values,
        splits=splits or default_splits(n_steps),
    )


def _block_paths(out_dir: str, name: str) -> tuple[str, str]:
    return (
        os.path.join(out_dir, f"{name}.f64"),
        os.path.join(out_dir, f"{name}.shape.json"),
    )


def write_dataset(dataset: Dataset, out_dir: str) -> str:
    """Write block files (one per contiguous split) plus the manifest."""
    os.makedirs(out_dir, exist_ok=True)
    blocks = []
    for name in sorted(dataset.splits):
        start, stop = dataset.splits[name]
        block = np.ascontiguousarray(dataset.values[start:stop], dtype="<f8")
        data_path, shape_path = _block_paths(out_dir, name)
        block.tofile(data_path)
        with open(shape_path, "w") as fh:
            json.dump({"shape": list(block.shape), "dtype": "<f8", "order": "C"}, fh)
        blocks.append(
            {
                "name": name,
                "file": os.path.basename(data_path),
                "shape_file": os.path.basename(shape_path),
                "start": start,
                "stop": stop,
            }
        )
    manifest = {
        "version": 1,
        "grid": dataset.grid.to_dict(),
        "process": dataset.process.to_dict(),
        "splits": {k: list(v) for k, v in dataset.splits.items()},
        "seed": dataset.process.seed,
        "n_steps": int(dataset.values.shape[0]),
        "blocks": blocks,
    }
    manifest_path = os.path.join(out_dir, MANIFEST_NAME)
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest_path


def load_dataset(data_dir: str) -> Dataset:
    with open(os.path.join(data_dir, MANIFEST_NAME)) as fh:
        manifest = json.load(fh)
    grid = make_grid(**manifest["grid"])
    process = SyntheticProcessSpec.from_dict(manifest["process"])
    n_steps = manifest["n_steps"]
    shape = (n_steps, process.n_channels, grid.n_lat, grid.n_lon)
    values = np.empty(shape, dtype=np.float64)
    for block in manifest["blocks"]:
        with open(os.path.join(data_dir, block["shape_file"])) as fh:
            header = json.load(fh)
        raw = np.fromfile(os.path.join(data_dir, block["file"]), dtype=header["dtype"])
        values[block["start"] : block["stop"]] = raw.reshape(header["shape"])
    splits = {k: tuple(v) for k, v in manifest["splits"].items()}
    return Dataset(grid=grid, process=process, values=values, splits=splits)
