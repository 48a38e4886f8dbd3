"""Simulated 2D spatial parallelism over an in-process mailbox fabric.

Ranks are simulated, not real transport: an n1 x n2 spatial mesh (times n_d
data-parallel groups) exchanges messages through per-collective mailboxes
keyed by (collective id, source, destination). The default executor steps
ranks round-robin in ascending order, so results are bit-deterministic.

The shifting-window roll is the only cross-rank operation inside the model:
each rank sends one boundary slice to its ring neighbor, rolls locally, and
overwrites the stale boundary. Its adjoint is the same roll with the shift
negated. Weight gradients are reduced over the combined data + spatial group
in fixed rank-ascending order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import model as mk
from .grid import GridSpec
from .model import Batch, ModelConfig


@dataclass(frozen=True)
class FabricSpec:
    """Rank-mesh extents: n1 x n2 spatial, n_d data-parallel groups."""

    n1: int
    n2: int
    n_d: int = 1

    def __post_init__(self):
        if self.n1 < 1 or self.n2 < 1 or self.n_d < 1:
            raise ValueError("mesh extents must be positive")

    def spatial_ranks(self):
        return [(i, j) for i in range(self.n1) for j in range(self.n2)]

    def all_ranks(self):
        return [(d, i, j) for d in range(self.n_d) for (i, j) in self.spatial_ranks()]


class Fabric:
    """Mailbox transport with deterministic message matching and delivery."""

    def __init__(self, spec: FabricSpec, trace_path: str | None = None):
        self.spec = spec
        self._next_cid = 0
        self._trace_fh = open(trace_path, "w") if trace_path else None

    def close(self):
        if self._trace_fh:
            self._trace_fh.close()
            self._trace_fh = None

    def _trace(self, cid, kind, participants, nbytes):
        if self._trace_fh:
            self._trace_fh.write(
                json.dumps(
                    {
                        "cid": cid,
                        "kind": kind,
                        "participants": [list(r) for r in sorted(participants)],
                        "bytes": int(nbytes),
                    }
                )
                + "\n"
            )

    def permute(self, sends: dict) -> dict:
        """One collective permute: ``sends[src] = (dst, payload)``.

        Every participating rank sends exactly one message and receives
        exactly one; matching is by (collective id, source, destination).
        """
        cid = self._next_cid
        self._next_cid += 1
        mailbox = {}
        nbytes = 0
        for src in sorted(sends):
            dst, payload = sends[src]
            key = (cid, src, dst)
            if key in mailbox:
                raise RuntimeError(f"duplicate message {key}")
            mailbox[key] = payload
            nbytes += payload.nbytes
        received = {}
        for (mcid, src, dst), payload in sorted(mailbox.items(), key=lambda kv: kv[0]):
            assert mcid == cid
            if dst in received:
                raise RuntimeError(f"rank {dst} received two messages in collective {cid}")
            received[dst] = payload
        if set(received) != set(sends):
            raise RuntimeError("collective permute did not complete: missing contributions")
        self._trace(cid, "permute", list(sends), nbytes)
        return received

    def all_reduce_sum(self, contribs: dict) -> dict:
        """Sum array trees over all contributing ranks, rank-ascending order."""
        cid = self._next_cid
        self._next_cid += 1
        order = sorted(contribs)
        first = contribs[order[0]]
        names = list(first)
        nbytes = 0
        total = {}
        for name in names:
            shape = first[name].shape
            for r in order:
                if contribs[r][name].shape != shape:
                    raise ValueError(
                        f"gradient {name!r} shape mismatch across ranks: "
                        f"{contribs[r][name].shape} vs {shape}"
                    )
            acc = contribs[order[0]][name].copy()
            for r in order[1:]:
                acc += contribs[r][name]
                nbytes += contribs[r][name].nbytes
            total[name] = acc
        self._trace(cid, "allreduce", order, nbytes)
        return {r: {k: v.copy() for k, v in total.items()} for r in order}


# ---------------------------------------------------------------------------
# sharded tensors


@dataclass
class ShardedTensor:
    """A tensor tiled over the spatial mesh along two array dimensions."""

    global_shape: tuple
    dims: tuple  # array axes sharded by mesh axis 0 and 1
    mesh: tuple  # (n1, n2)
    blocks: dict = field(default_factory=dict)  # (i, j) -> local block

    def block(self, i: int, j: int) -> np.ndarray:
        return self.blocks[(i, j)]


def scatter(x: np.ndarray, spec: FabricSpec, dims: tuple) -> ShardedTensor:
    """Tile ``x`` into contiguous blocks over the n1 x n2 mesh."""
    d0, d1 = dims
    if x.shape[d0] % spec.n1 or x.shape[d1] % spec.n2:
        raise ValueError(
            f"shape {x.shape} not divisible by mesh ({spec.n1}, {spec.n2}) on dims {dims}"
        )
    e0, e1 = x.shape[d0] // spec.n1, x.shape[d1] // spec.n2
    blocks = {}
    for i in range(spec.n1):
        for j in range(spec.n2):
            sl = [slice(None)] * x.ndim
            sl[d0] = slice(i * e0, (i + 1) * e0)
            sl[d1] = slice(j * e1, (j + 1) * e1)
            blocks[(i, j)] = np.ascontiguousarray(x[tuple(sl)])
    return ShardedTensor(
        global_shape=x.shape, dims=(d0, d1), mesh=(spec.n1, spec.n2), blocks=blocks
    )


def gather(st: ShardedTensor) -> np.ndarray:
    out = np.empty(st.global_shape, dtype=next(iter(st.blocks.values())).dtype)
    d0, d1 = st.dims
    n1, n2 = st.mesh
    e0, e1 = st.global_shape[d0] // n1, st.global_shape[d1] // n2
    for (i, j), block in st.blocks.items():
        sl = [slice(None)] * out.ndim
        sl[d0] = slice(i * e0, (i + 1) * e0)
        sl[d1] = slice(j * e1, (j + 1) * e1)
        out[tuple(sl)] = block
    return out


def _boundary_slicer(ndim, axis, shift):
    sl = [slice(None)] * ndim
    sl[axis] = slice(-shift, None) if shift > 0 else slice(None, -shift)
    return tuple(sl)


def _overwrite_slicer(ndim, axis, shift):
    sl = [slice(None)] * ndim
    sl[axis] = slice(None, shift) if shift > 0 else slice(shift, None)
    return tuple(sl)


def distributed_roll(fabric: Fabric, st: ShardedTensor, shift: int, dim: int) -> ShardedTensor:
    """Cyclic roll of the global tensor along a sharded dimension.

    Boundary slices travel to the ring neighbor via a collective permute,
    each rank rolls locally, and the stale boundary is overwritten. Requires
    |shift| below the local extent (one neighbor slice each way).
    """
    if dim not in st.dims:
        raise ValueError(f"dim {dim} is not sharded (sharded dims: {st.dims})")
    mesh_axis = st.dims.index(dim)
    ring = st.mesh[mesh_axis]

    if shift == 0 or ring == 1:
        blocks = {r: np.roll(b, shift, axis=dim) for r, b in st.blocks.items()}
        return ShardedTensor(st.global_shape, st.dims, st.mesh, blocks)

    local_extent = st.global_shape[dim] // ring
    if abs(shift) >= local_extent:
        raise ValueError(
            f"|shift|={abs(shift)} must be below the local extent {local_extent}; "
            "larger shifts would span multiple neighbors"
        )

    ndim = len(st.global_shape)
    take = _boundary_slicer(ndim, dim, shift)
    sends = {}
    for (i, j), block in st.blocks.items():
        pos = (i, j)[mesh_axis]
        step = 1 if shift > 0 else -1
        npos = (pos + step) % ring
        dst = (npos, j) if mesh_axis == 0 else (i, npos)
        sends[(i, j)] = (dst, np.ascontiguousarray(block[take]))
    received = fabric.permute(sends)

    put = _overwrite_slicer(ndim, dim, shift)
    blocks = {}
    for r, block in st.blocks.items():
        rolled = np.roll(block, shift, axis=dim)
        rolled[put] = received[r]
        blocks[r] = rolled
    return ShardedTensor(st.global_shape, st.dims, st.mesh, blocks)


def distributed_roll_adjoint(fabric: Fabric, st: ShardedTensor, shift: int, dim: int) -> ShardedTensor:
    """Adjoint (= inverse) of :func:`distributed_roll`: the reverse roll."""
    return distributed_roll(fabric, st, -shift, dim)


def allreduce_grads(fabric: Fabric, contribs: dict) -> dict:
    """Reduce per-rank gradient dicts over the combined group; every rank
    ends up holding the rank-ascending ordered sum."""
    if len(contribs) == 1:
        return {r: g for r, g in contribs.items()}
    return fabric.all_reduce_sum(contribs)


# ---------------------------------------------------------------------------
# sharded model execution


def validate_fabric(config: ModelConfig, spec: FabricSpec) -> None:
    th, tw = config.tokens_h, config.tokens_w
    if th % spec.n1 or tw % spec.n2:
        raise ValueError(f"token grid {(th, tw)} not divisible by mesh {(spec.n1, spec.n2)}")
    if (th // spec.n1) % config.window[0] or (tw // spec.n2) % config.window[1]:
        raise ValueError("attention windows would straddle shard boundaries")


def _bias_slices(config: ModelConfig, spec: FabricSpec, bias):
    """Per-rank window-bias blocks for one partition (None if unmasked)."""
    if bias is None:
        return {r: None for r in spec.spatial_ranks()}
    nwh_loc = config.tokens_h // spec.n1 // config.window[0]
    nww_loc = config.tokens_w // spec.n2 // config.window[1]
    out = {}
    for (i, j) in spec.spatial_ranks():
        block = bias[i * nwh_loc : (i + 1) * nwh_loc, j * nww_loc : (j + 1) * nww_loc]
        out[(i, j)] = None if not block.any() else block
    return out


def _wrap_tokens(blocks: dict, spec: FabricSpec, config: ModelConfig, batch_size: int):
    global_shape = (batch_size, config.tokens_h, config.tokens_w, config.embed)
    return ShardedTensor(global_shape, (1, 2), (spec.n1, spec.n2), dict(blocks))


def _roll_tokens(fabric, blocks, spec, config, batch_size, s_h, s_w):
    st = _wrap_tokens(blocks, spec, config, batch_size)
    if s_h:
        st = distributed_roll(fabric, st, s_h, 1)
    if s_w:
        st = distributed_roll(fabric, st, s_w, 2)
    return st.blocks


def _group_forward(params, config, spec, fabric, values, time_frac, grid, bias_by_partition):
    ranks = spec.spatial_ranks()
    s_h, s_w = config.shift
    B = values.shape[0]

    val_st = scatter(values, spec, dims=(2, 3))
    patches = {r: mk.patchify(val_st.block(*r), config.patch) for r in ranks}
    x = {}
    for r in ranks:
        x[r], _ = mk.linear_fwd(patches[r], params["patch_embed.w"], params["patch_embed.b"])
    pos_patches = None
    if config.pos_enc_enabled:
        pos = mk._positional_batch(grid, config, time_frac)
        pos_st = scatter(pos, spec, dims=(2, 3))
        pos_patches = {r: mk.patchify(pos_st.block(*r), config.patch) for r in ranks}
        for r in ranks:
            pe, _ = mk.linear_fwd(pos_patches[r], params["pos_embed.w"], params["pos_embed.b"])
            x[r] = x[r] + pe

    block_caches = {r: [] for r in ranks}
    for iblk in range(config.depth):
        shifted = iblk % 2 == 1
        bp = mk.block_params(params, iblk)
        attn_p = {k[len("attn.") :]: v for k, v in bp.items() if k.startswith("attn.")}
        mlp_p = {k[len("mlp.") :]: v for k, v in bp.items() if k.startswith("mlp.")}

        xn, n1_caches = {}, {}
        for r in ranks:
            xn[r], n1_caches[r] = mk.rmsnorm_fwd(x[r], bp["norm1.g"])
        if shifted:
            xn = _roll_tokens(fabric, xn, spec, config, B, -s_h, -s_w)
        att, att_caches = {}, {}
        for r in ranks:
            att[r], att_caches[r] = mk.window_attention_fwd(
                xn[r], attn_p, config, bias_by_partition[shifted][r]
            )
        if shifted:
            att = _roll_tokens(fabric, att, spec, config, B, s_h, s_w)
        for r in ranks:
            y = x[r] + att[r]
            yn, n2_cache = mk.rmsnorm_fwd(y, bp["norm2.g"])
            m, mlp_cache = mk.mlp_fwd(yn, mlp_p)
            block_caches[r].append((n1_caches[r], att_caches[r], n2_cache, mlp_cache))
            x[r] = y + m

    outputs = {}
    for r in ranks:
        out, _ = mk.linear_fwd(x[r], params["rev_embed.w"], params["rev_embed.b"])
        outputs[r] = mk.unpatchify(out, config.patch, config.out_channels)
    tape = {"patches": patches, "pos_patches": pos_patches, "blocks": block_caches, "tokens_out": x}
    return outputs, tape


def _group_backward(params, config, spec, fabric, tape, grad_output):
    ranks = spec.spatial_ranks()
    s_h, s_w = config.shift
    go_st = scatter(np.asarray(grad_output, dtype=np.float64), spec, dims=(2, 3))
    B = grad_output.shape[0]

    grads = {r: {} for r in ranks}
    dx = {}
    for r in ranks:
        dout = mk.patchify(go_st.block(*r), config.patch)
        dx[r], grads[r]["rev_embed.w"], grads[r]["rev_embed.b"] = mk.linear_bwd(
            dout, tape["tokens_out"][r], params["rev_embed.w"]
        )

    for iblk in range(config.depth - 1, -1, -1):
        shifted = iblk % 2 == 1
        bp = mk.block_params(params, iblk)
        attn_p = {k[len("attn.") :]: v for k, v in bp.items() if k.startswith("attn.")}
        mlp_p = {k[len("mlp.") :]: v for k, v in bp.items() if k.startswith("mlp.")}

        dy, dxn = {}, {}
        for r in ranks:
            n1_cache, att_cache, n2_cache, mlp_cache = tape["blocks"][r][iblk]
            dyn, mlp_grads = mk.mlp_bwd(dx[r], mlp_cache, mlp_p)
            for k, v in mlp_grads.items():
                grads[r][f"blocks.{iblk}.mlp.{k}"] = v
            dy_norm, dg2 = mk.rmsnorm_bwd(dyn, n2_cache, bp["norm2.g"])
            grads[r][f"blocks.{iblk}.norm2.g"] = dg2
            dy[r] = dx[r] + dy_norm
        datt = dy
        if shifted:
            datt = _roll_tokens(fabric, dict(datt), spec, config, B, -s_h, -s_w)
        for r in ranks:
            _, att_cache, _, _ = tape["blocks"][r][iblk]
            dxn[r], att_grads = mk.window_attention_bwd(datt[r], att_cache, attn_p, config)
            for k, v in att_grads.items():
                grads[r][f"blocks.{iblk}.attn.{k}"] = v
        if shifted:
            dxn = _roll_tokens(fabric, dxn, spec, config, B, s_h, s_w)
        for r in ranks:
            n1_cache = tape["blocks"][r][iblk][0]
            dx_norm, dg1 = mk.rmsnorm_bwd(dxn[r], n1_cache, bp["norm1.g"])
            grads[r][f"blocks.{iblk}.norm1.g"] = dg1
            dx[r] = dy[r] + dx_norm

    for r in ranks:
        if config.pos_enc_enabled:
            _, gw, gb = mk.linear_bwd(dx[r], tape["pos_patches"][r], params["pos_embed.w"])
        else:
            gw = np.zeros_like(params["pos_embed.w"])
            gb = np.zeros_like(params["pos_embed.b"])
        grads[r]["pos_embed.w"], grads[r]["pos_embed.b"] = gw, gb
        _, grads[r]["patch_embed.w"], grads[r]["patch_embed.b"] = mk.linear_bwd(
            dx[r], tape["patches"][r], params["patch_embed.w"]
        )
    return grads


def distributed_forward_backward(
    params: dict,
    config: ModelConfig,
    spec: FabricSpec,
    batch: Batch,
    grid: GridSpec,
    grad_output: np.ndarray | None = None,
    trace_path: str | None = None,
):
    """Run the emulator over the rank mesh.

    Returns (output shards keyed by (d, i, j), reduced parameter gradients).
    Gradients are None when no ``grad_output`` is given; otherwise every rank
    of the combined data + spatial group holds the same ordered sum, and the
    shared copy is returned.
    """
    validate_fabric(config, spec)
    B = batch.values.shape[0]
    if B % spec.n_d:
        raise ValueError(f"batch size {B} not divisible by n_d={spec.n_d}")
    b_loc = B // spec.n_d

    fabric = Fabric(spec, trace_path)
    try:
        masks = mk.build_masks(config)
        bias_by_partition = {
            False: _bias_slices(config, spec, masks.bias(False)),
            True: _bias_slices(config, spec, masks.bias(True)),
        }

        outputs = {}
        contribs = {}
        for d in range(spec.n_d):
            sl = slice(d * b_loc, (d + 1) * b_loc)
            values = np.asarray(batch.values[sl], dtype=np.float64)
            tf = np.asarray(batch.time_frac[sl], dtype=np.float64)
            out_shards, tape = _group_forward(
                params, config, spec, fabric, values, tf, grid, bias_by_partition
            )
            for r, block in out_shards.items():
                outputs[(d, *r)] = block
            if grad_output is not None:
                group_grads = _group_backward(
                    params, config, spec, fabric, tape, grad_output[sl]
                )
                for r, g in group_grads.items():
                    contribs[(d, *r)] = g

        if grad_output is None:
            return outputs, None
        reduced = allreduce_grads(fabric, contribs)
        return outputs, reduced[min(reduced)]
    finally:
        fabric.close()
