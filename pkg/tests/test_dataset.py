import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from swinlab.grid import GAUSS, make_grid
from swinlab import dataset as ds
from swinlab import spectral as sp


def small_process(**overrides):
    base = dict(
        n_channels=2,
        spectral_slope=2.5,
        rotation_rates=(0.0, 0.0),
        diffusivities=(0.0, 0.0),
        band_limit=6,
        seed=42,
        period=8,
    )
    base.update(overrides)
    return ds.SyntheticProcessSpec(**base)


@pytest.fixture(scope="module")
def grid():
    return make_grid(8, 16, GAUSS)


def test_identity_evolution_without_rotation_or_diffusion(grid):
    samples = ds.generate_sequence(small_process(), grid, 3)
    np.testing.assert_array_equal(samples[1].values, samples[0].values)
    np.testing.assert_array_equal(samples[2].values, samples[0].values)


def test_solid_body_rotation_is_longitude_roll(grid):
    # one grid spacing of rotation per step moves the field one column east
    dphi = 2 * np.pi / grid.n_lon
    proc = small_process(rotation_rates=(dphi, 2 * dphi))
    samples = ds.generate_sequence(proc, grid, 2)
    np.testing.assert_allclose(
        samples[1].values[0], np.roll(samples[0].values[0], 1, axis=1), atol=1e-12
    )
    np.testing.assert_allclose(
        samples[1].values[1], np.roll(samples[0].values[1], 2, axis=1), atol=1e-12
    )


def test_diffusion_decays_per_degree_power(grid):
    nu = 0.01
    proc = small_process(diffusivities=(nu, nu))
    samples = ds.generate_sequence(proc, grid, 2)
    p0 = sp.psd(sp.sht_forward(samples[0].values[0], grid, 6))
    p1 = sp.psd(sp.sht_forward(samples[1].values[0], grid, 6))
    ells = np.arange(7)
    np.testing.assert_allclose(p1, p0 * np.exp(-2 * nu * ells * (ells + 1)), rtol=1e-10)


def test_generation_is_bit_reproducible(grid):
    a = ds.generate_sequence(small_process(), grid, 4)
    b = ds.generate_sequence(small_process(), grid, 4)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.values, y.values)
        assert x.time_frac == y.time_frac


def test_total_power_non_increasing_without_rotation(grid):
    proc = small_process(diffusivities=(0.05, 0.0))
    samples = ds.generate_sequence(proc, grid, 6)
    degrees = np.arange(7)
    totals = [
        np.sum((2 * degrees + 1) * sp.psd(sp.sht_forward(s.values[0], grid, 6)))
        for s in samples
    ]
    assert all(t1 <= t0 + 1e-12 for t0, t1 in zip(totals, totals[1:]))


def test_time_frac_wraps_with_period(grid):
    samples = ds.generate_sequence(small_process(period=4), grid, 6)
    assert [s.time_frac for s in samples] == [0.0, 0.25, 0.5, 0.75, 0.0, 0.25]


def test_band_limit_capacity_enforced(grid):
    with pytest.raises(ValueError, match="capacity"):
        ds.generate_sequence(small_process(band_limit=8), grid, 1)


def test_oracle_step_matches_generation(grid):
    proc = small_process(rotation_rates=(0.3, -0.2), diffusivities=(0.01, 0.0))
    samples = ds.generate_sequence(proc, grid, 3)
    step = ds.oracle_step_fn(proc, grid)
    pred1 = step(samples[0].values, samples[0].time_frac)
    np.testing.assert_allclose(pred1, samples[1].values, atol=1e-10)
    pred2 = step(pred1, samples[1].time_frac)
    np.testing.assert_allclose(pred2, samples[2].values, atol=1e-10)


# --- normalization stats


def test_norm_stats_constant_channel():
    values = np.zeros((3, 2, 4, 8))
    values[:, 0] = 5.0
    values[:, 1] = np.arange(3 * 4 * 8).reshape(3, 4, 8)
    stats = ds.compute_norm_stats(values)
    assert stats.mean[0] == 5.0
    assert stats.std[0] == ds.STD_FLOOR


def test_standardization_idempotent():
    rng = np.random.default_rng(0)
    values = rng.standard_normal((10, 3, 4, 8)) * 7 + 2
    stats = ds.compute_norm_stats(values)
    z = np.stack([ds.standardize(v, stats) for v in values])
    stats2 = ds.compute_norm_stats(z)
    np.testing.assert_allclose(stats2.mean, 0.0, atol=1e-10)
    np.testing.assert_allclose(stats2.std, 1.0, atol=1e-10)
    back = np.stack([ds.unstandardize(v, stats) for v in z])
    np.testing.assert_allclose(back, values, atol=1e-12)


def test_norm_stats_depend_only_on_train_split(grid):
    data = ds.build_dataset(small_process(), grid, 10, splits={"train": (0, 6), "val": (6, 8), "test": (8, 10)})
    other = ds.build_dataset(small_process(), grid, 10, splits={"train": (0, 6), "val": (6, 9), "test": (9, 10)})
    s1 = ds.compute_norm_stats(data.values[slice(*data.splits["train"])])
    s2 = ds.compute_norm_stats(other.values[slice(*other.splits["train"])])
    np.testing.assert_array_equal(s1.mean, s2.mean)
    np.testing.assert_array_equal(s1.std, s2.std)


# --- iterator


def drain(state, batch_size, n_batches):
    out = [np.empty(0, dtype=np.int64)]
    for _ in range(n_batches):
        idx, state = ds.next_batch(state, batch_size)
        out.append(idx)
    return np.concatenate(out), state


def test_full_epoch_is_permutation():
    state = ds.IteratorState(dataset_len=12, perm_seed=3)
    idx, _ = drain(state, 4, 3)
    assert sorted(idx.tolist()) == list(range(12))


def test_epoch_permutations_differ():
    p0 = ds.epoch_permutation(7, 0, 16)
    p1 = ds.epoch_permutation(7, 1, 16)
    assert not np.array_equal(p0, p1)
    assert sorted(p1.tolist()) == list(range(16))


@settings(max_examples=25, deadline=None)
@given(
    split=st.integers(min_value=0, max_value=9),
    batch=st.integers(min_value=1, max_value=5),
)
def test_iterator_resume_equivalence(split, batch):
    # an uninterrupted stream equals any save/restore split of the same stream
    state = ds.IteratorState(dataset_len=7, perm_seed=11)
    full, _ = drain(state, batch, 10)

    state = ds.IteratorState(dataset_len=7, perm_seed=11)
    first, state = drain(state, batch, split)
    restored = ds.IteratorState.from_dict(state.to_dict())
    second, _ = drain(restored, batch, 10 - split)
    np.testing.assert_array_equal(np.concatenate([first, second]), full)


def test_batch_size_validated():
    with pytest.raises(ValueError):
        ds.next_batch(ds.IteratorState(dataset_len=3, perm_seed=0), 4)


# --- on-disk round trip


def test_dataset_write_load_round_trip(tmp_path, grid):
    data = ds.build_dataset(small_process(), grid, 10)
    ds.write_dataset(data, str(tmp_path))
    loaded = ds.load_dataset(str(tmp_path))
    np.testing.assert_array_equal(loaded.values, data.values)
    assert loaded.splits == data.splits
    assert loaded.process == data.process
    assert loaded.grid.to_dict() == data.grid.to_dict()
