import numpy as np
import pytest

from swinlab import dataset as ds
from swinlab import model as mk
from swinlab import training as tr
from swinlab.grid import GAUSS, make_grid


@pytest.fixture(scope="session")
def lab():
    """A tiny but complete training setup shared across test modules."""
    grid = make_grid(8, 16, GAUSS)
    process = ds.SyntheticProcessSpec(
        n_channels=2,
        spectral_slope=2.0,
        rotation_rates=(2 * np.pi / 16, -2 * np.pi / 32),
        diffusivities=(0.002, 0.0),
        band_limit=6,
        seed=101,
        period=16,
    )
    data = ds.build_dataset(
        process, grid, 60, splits={"train": (0, 40), "val": (40, 52), "test": (52, 60)}
    )
    config = mk.ModelConfig(
        in_channels=2, out_channels=2, grid_h=8, grid_w=16, patch=4,
        embed=8, depth=2, window=(2, 2), head_dim=8,
    )
    tdata = tr.prepare_train_data(data, config)
    return {"grid": grid, "process": process, "dataset": data, "config": config, "data": tdata}


def small_train_config(**overrides):
    base = dict(
        batch_size=4,
        seed=3,
        val_stride=2,
        val_rollout_steps=6,
        val_max_ics=3,
        record_every=4,
    )
    base.update(overrides)
    return tr.TrainConfig(**base)


def small_schedule(**overrides):
    base = dict(
        variant=tr.CONSTANT_COOLDOWN,
        total_iters=12,
        peak_lr=3e-3,
        warmup_iters=2,
        cooldown_frac=0.25,
    )
    base.update(overrides)
    return tr.LRScheduleSpec(**base)
