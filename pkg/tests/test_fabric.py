import json

import numpy as np
import pytest

from swinlab.grid import GAUSS, make_grid
from swinlab import fabric as fb
from swinlab import model as mk


def make_fabric(spec):
    return fb.Fabric(spec)


# --- scatter / gather


def test_scatter_single_rank_is_whole_tensor():
    spec = fb.FabricSpec(1, 1)
    x = np.arange(12).reshape(3, 4)
    st = fb.scatter(x, spec, dims=(0, 1))
    np.testing.assert_array_equal(st.block(0, 0), x)
    np.testing.assert_array_equal(fb.gather(st), x)


def test_scatter_2x2_row_major_blocks():
    spec = fb.FabricSpec(2, 2)
    x = np.arange(16).reshape(4, 4)
    st = fb.scatter(x, spec, dims=(0, 1))
    np.testing.assert_array_equal(st.block(0, 0), [[0, 1], [4, 5]])
    np.testing.assert_array_equal(st.block(0, 1), [[2, 3], [6, 7]])
    np.testing.assert_array_equal(st.block(1, 0), [[8, 9], [12, 13]])
    np.testing.assert_array_equal(st.block(1, 1), [[10, 11], [14, 15]])


def test_scatter_gather_round_trip_bit_exact():
    spec = fb.FabricSpec(2, 3)
    x = np.random.default_rng(0).standard_normal((2, 6, 9, 5))
    st = fb.scatter(x, spec, dims=(1, 2))
    np.testing.assert_array_equal(fb.gather(st), x)


def test_scatter_rejects_non_divisible():
    with pytest.raises(ValueError):
        fb.scatter(np.zeros((5, 4)), fb.FabricSpec(2, 2), dims=(0, 1))


# --- distributed roll


def test_roll_shift_zero_is_identity():
    spec = fb.FabricSpec(2, 1)
    x = np.arange(8.0).reshape(8, 1)
    st = fb.scatter(x, spec, dims=(0, 1))
    rolled = fb.distributed_roll(make_fabric(spec), st, 0, 0)
    np.testing.assert_array_equal(fb.gather(rolled), x)


def test_roll_two_ranks_matches_cyclic_shift():
    spec = fb.FabricSpec(2, 1)
    x = np.arange(8.0).reshape(8, 1)
    st = fb.scatter(x, spec, dims=(0, 1))
    rolled = fb.distributed_roll(make_fabric(spec), st, 2, 0)
    np.testing.assert_array_equal(fb.gather(rolled).ravel(), [6, 7, 0, 1, 2, 3, 4, 5])


@pytest.mark.parametrize("mesh", [(1, 2), (2, 1), (2, 2)])
def test_roll_exhaustive_shift_sweep_matches_oracle(mesh):
    spec = fb.FabricSpec(*mesh)
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 8, 12, 3))
    st = fb.scatter(x, spec, dims=(1, 2))
    for dim, ring in ((1, spec.n1), (2, spec.n2)):
        local = x.shape[dim] // ring
        for s in range(-(local - 1), local):
            rolled = fb.distributed_roll(make_fabric(spec), st, s, dim)
            np.testing.assert_array_equal(fb.gather(rolled), np.roll(x, s, axis=dim))


def test_roll_rejects_shift_at_local_extent():
    spec = fb.FabricSpec(2, 1)
    st = fb.scatter(np.arange(8.0).reshape(8, 1), spec, dims=(0, 1))
    with pytest.raises(ValueError, match="local extent"):
        fb.distributed_roll(make_fabric(spec), st, 4, 0)


def test_roll_preserves_element_multiset():
    spec = fb.FabricSpec(2, 2)
    x = np.random.default_rng(4).standard_normal((4, 8))
    st = fb.scatter(x, spec, dims=(0, 1))
    rolled = fb.distributed_roll(make_fabric(spec), st, 1, 0)
    assert sorted(fb.gather(rolled).ravel()) == sorted(x.ravel())


def test_roll_adjoint_inverts_and_is_adjoint():
    spec = fb.FabricSpec(2, 2)
    rng = np.random.default_rng(5)
    x = rng.standard_normal((4, 8))
    y = rng.standard_normal((4, 8))
    st = fb.scatter(x, spec, dims=(0, 1))
    fabric = make_fabric(spec)

    fwd = fb.distributed_roll(fabric, st, 1, 0)
    back = fb.distributed_roll_adjoint(fabric, fwd, 1, 0)
    np.testing.assert_array_equal(fb.gather(back), x)

    ident = fb.distributed_roll_adjoint(fabric, st, 0, 1)
    np.testing.assert_array_equal(fb.gather(ident), x)

    # <roll(x), y> == <x, adjoint_roll(y)>
    sty = fb.scatter(y, spec, dims=(0, 1))
    lhs = np.sum(fb.gather(fb.distributed_roll(fabric, st, 3, 1)) * y)
    rhs = np.sum(x * fb.gather(fb.distributed_roll_adjoint(fabric, sty, 3, 1)))
    assert abs(lhs - rhs) < 1e-12


def test_roll_composition():
    spec = fb.FabricSpec(2, 1)
    x = np.random.default_rng(6).standard_normal((8, 2))
    st = fb.scatter(x, spec, dims=(0, 1))
    fabric = make_fabric(spec)
    twice = fb.distributed_roll(fabric, fb.distributed_roll(fabric, st, 3, 0), 3, 0)
    np.testing.assert_array_equal(fb.gather(twice), np.roll(x, 6, axis=0))


# --- gradient reduction


def test_allreduce_single_rank_identity():
    spec = fb.FabricSpec(1, 1)
    g = {"w": np.ones((2, 2))}
    out = fb.allreduce_grads(make_fabric(spec), {(0, 0, 0): g})
    np.testing.assert_array_equal(out[(0, 0, 0)]["w"], g["w"])


def test_allreduce_cancellation():
    spec = fb.FabricSpec(2, 1)
    g = np.random.default_rng(7).standard_normal((3, 2))
    out = fb.allreduce_grads(
        make_fabric(spec), {(0, 0, 0): {"w": g}, (0, 1, 0): {"w": -g}}
    )
    for r in out:
        np.testing.assert_array_equal(out[r]["w"], np.zeros_like(g))


def test_allreduce_matches_central_ordered_sum():
    spec = fb.FabricSpec(2, 2, n_d=2)
    rng = np.random.default_rng(8)
    contribs = {r: {"w": rng.standard_normal((4, 3))} for r in spec.all_ranks()}
    out = fb.allreduce_grads(make_fabric(spec), contribs)

    acc = contribs[sorted(contribs)[0]]["w"].copy()
    for r in sorted(contribs)[1:]:
        acc += contribs[r]["w"]
    for r in out:
        np.testing.assert_array_equal(out[r]["w"], acc)


def test_allreduce_rejects_shape_mismatch():
    spec = fb.FabricSpec(2, 1)
    with pytest.raises(ValueError, match="shape mismatch"):
        fb.allreduce_grads(
            make_fabric(spec),
            {(0, 0, 0): {"w": np.zeros((2, 2))}, (0, 1, 0): {"w": np.zeros(3)}},
        )


# --- sharded model execution


def fabric_model():
    config = mk.ModelConfig(
        in_channels=2, out_channels=2, grid_h=24, grid_w=48, patch=4,
        embed=16, depth=3, window=(3, 6), head_dim=8,
    )
    grid = make_grid(24, 48, GAUSS)
    params = mk.init_params(config, 11)
    rng = np.random.default_rng(12)
    batch = mk.Batch(
        values=rng.standard_normal((2, 2, 24, 48)), time_frac=rng.uniform(size=2)
    )
    g = rng.standard_normal((2, 2, 24, 48))
    return config, grid, params, batch, g


def single_rank_reference(config, grid, params, batch, g):
    preds, tape = mk.forward(params, config, batch, grid)
    grads, _ = mk.backward(tape, params, config, g)
    return preds, grads


def test_one_by_one_fabric_is_bitwise_single_rank():
    config, grid, params, batch, g = fabric_model()
    preds, grads = single_rank_reference(config, grid, params, batch, g)
    outputs, dgrads = fb.distributed_forward_backward(
        params, config, fb.FabricSpec(1, 1), batch, grid, grad_output=g
    )
    np.testing.assert_array_equal(outputs[(0, 0, 0)], preds)
    for k in grads:
        np.testing.assert_array_equal(dgrads[k], grads[k])


@pytest.mark.parametrize("mesh", [(1, 2), (2, 1), (2, 2)])
def test_sharded_matches_single_rank(mesh):
    config, grid, params, batch, g = fabric_model()
    preds, grads = single_rank_reference(config, grid, params, batch, g)
    spec = fb.FabricSpec(*mesh)
    outputs, dgrads = fb.distributed_forward_backward(
        params, config, spec, batch, grid, grad_output=g
    )
    st = fb.ShardedTensor(
        preds.shape, (2, 3), mesh, {r: outputs[(0, *r)] for r in spec.spatial_ranks()}
    )
    np.testing.assert_allclose(fb.gather(st), preds, atol=1e-10)
    for k in grads:
        scale = max(1e-30, float(np.max(np.abs(grads[k]))))
        assert np.max(np.abs(dgrads[k] - grads[k])) / scale < 1e-10, k


def test_data_parallel_groups_split_batch():
    config, grid, params, batch, g = fabric_model()
    preds, grads = single_rank_reference(config, grid, params, batch, g)
    spec = fb.FabricSpec(1, 2, n_d=2)
    outputs, dgrads = fb.distributed_forward_backward(
        params, config, spec, batch, grid, grad_output=g
    )
    for d in range(2):
        got = np.concatenate([outputs[(d, 0, 0)], outputs[(d, 0, 1)]], axis=3)
        np.testing.assert_allclose(got, preds[d : d + 1], atol=1e-10)
    for k in grads:
        scale = max(1e-30, float(np.max(np.abs(grads[k]))))
        assert np.max(np.abs(dgrads[k] - grads[k])) / scale < 1e-10, k


def test_distributed_run_is_deterministic():
    config, grid, params, batch, g = fabric_model()
    spec = fb.FabricSpec(2, 2)
    out1, g1 = fb.distributed_forward_backward(params, config, spec, batch, grid, g)
    out2, g2 = fb.distributed_forward_backward(params, config, spec, batch, grid, g)
    for r in out1:
        np.testing.assert_array_equal(out1[r], out2[r])
    for k in g1:
        np.testing.assert_array_equal(g1[k], g2[k])


def test_fabric_rejects_straddling_windows():
    config, grid, params, batch, g = fabric_model()
    with pytest.raises(ValueError, match="straddle|divisible"):
        fb.distributed_forward_backward(
            params, config, fb.FabricSpec(4, 1), batch, grid
        )


def test_trace_dump(tmp_path):
    config, grid, params, batch, g = fabric_model()
    trace = tmp_path / "trace.jsonl"
    fb.distributed_forward_backward(
        params, config, fb.FabricSpec(2, 2), batch, grid, grad_output=g,
        trace_path=str(trace),
    )
    events = [json.loads(line) for line in trace.read_text().splitlines()]
    assert events, "expected collective events"
    kinds = {e["kind"] for e in events}
    assert kinds == {"permute", "allreduce"}
    cids = [e["cid"] for e in events]
    assert cids == sorted(cids)
    assert all(e["bytes"] > 0 for e in events)
