"""Minimalist shifted-window transformer emulator with a hand-written backward.

The network maps a standardized C x H x W snapshot to the next snapshot:
patch embedding plus coordinate positional encoding, a stack of windowed
attention blocks with pre-RMSNorm, QK-normalization and residuals, and a
reverse patch embedding. Alternate blocks cyclically roll the token grid by
half a window before windowing; longitude wraps periodically, so only token
pairs straddling the latitude seam are masked out.

Everything is float64 numpy. ``forward`` records an activation tape and
``backward`` replays it in reverse, which keeps gradients exact and lets the
spatially-sharded executor in :mod:`swinlab.fabric` reuse the same layer
primitives.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
from scipy.special import erf
from scipy.stats import truncnorm

from .blob import read_blob, write_blob
from .grid import GridSpec
from .util import config_hash

RMS_EPS = 1e-12
MASK_FILL = -1e9
INIT_STD = 0.02

_mac_counter = None


@contextmanager
def count_macs():
    """Count multiply-accumulates of every matmul inside the context."""
    global _mac_counter
    prev, holder = _mac_counter, [0]
    _mac_counter = holder
    try:
        yield holder
    finally:
        _mac_counter = prev


def _matmul(a, b):
    if _mac_counter is not None:
        lead = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        _mac_counter[0] += int(np.prod(lead, dtype=np.int64)) * (
            a.shape[-2] * a.shape[-1] * b.shape[-1]
        )
    return a @ b


# ---------------------------------------------------------------------------
# configuration and parameters


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int
    out_channels: int
    grid_h: int
    grid_w: int
    patch: int
    embed: int
    depth: int
    window: tuple
    head_dim: int = 16
    mlp_ratio: int = 4
    pos_enc_enabled: bool = True

    def __post_init__(self):
        object.__setattr__(self, "window", tuple(self.window))
        w_h, w_w = self.window
        if self.grid_h % self.patch or self.grid_w % self.patch:
            raise ValueError("grid extent must be divisible by the patch size")
        if self.tokens_h % w_h or self.tokens_w % w_w:
            raise ValueError("token grid must tile into whole windows")
        if self.embed % self.head_dim:
            raise ValueError("embed dimension must be a multiple of head_dim")
        if self.depth < 0:
            raise ValueError("depth must be nonnegative")

    @property
    def tokens_h(self) -> int:
        return self.grid_h // self.patch

    @property
    def tokens_w(self) -> int:
        return self.grid_w // self.patch

    @property
    def shift(self) -> tuple:
        return (self.window[0] // 2, self.window[1] // 2)

    @property
    def n_heads(self) -> int:
        return self.embed // self.head_dim

    @property
    def window_tokens(self) -> int:
        return self.window[0] * self.window[1]

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "grid_h": self.grid_h,
            "grid_w": self.grid_w,
            "patch": self.patch,
            "embed": self.embed,
            "depth": self.depth,
            "window": list(self.window),
            "head_dim": self.head_dim,
            "mlp_ratio": self.mlp_ratio,
            "pos_enc_enabled": self.pos_enc_enabled,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["window"] = tuple(d["window"])
        return cls(**d)


def _param_shapes(config: ModelConfig) -> dict:
    p2 = config.patch * config.patch
    E = config.embed
    hidden = config.mlp_ratio * E
    shapes = {
        "patch_embed.w": (p2 * config.in_channels, E),
        "patch_embed.b": (E,),
        "pos_embed.w": (p2 * 4, E),
        "pos_embed.b": (E,),
    }
    for i in range(config.depth):
        pre = f"blocks.{i}"
        shapes[f"{pre}.norm1.g"] = (E,)
        shapes[f"{pre}.attn.qkv.w"] = (E, 3 * E)
        shapes[f"{pre}.attn.qkv.b"] = (3 * E,)
        shapes[f"{pre}.attn.q_gain"] = (config.n_heads,)
        shapes[f"{pre}.attn.k_gain"] = (config.n_heads,)
        shapes[f"{pre}.attn.proj.w"] = (E, E)
        shapes[f"{pre}.attn.proj.b"] = (E,)
        shapes[f"{pre}.norm2.g"] = (E,)
        shapes[f"{pre}.mlp.fc1.w"] = (E, hidden)
        shapes[f"{pre}.mlp.fc1.b"] = (hidden,)
        shapes[f"{pre}.mlp.fc2.w"] = (hidden, E)
        shapes[f"{pre}.mlp.fc2.b"] = (E,)
    shapes["rev_embed.w"] = (E, p2 * config.out_channels)
    shapes["rev_embed.b"] = (p2 * config.out_channels,)
    return shapes


def init_params(config: ModelConfig, seed: int) -> dict:
    """Truncated-normal weights (std 0.02, clipped at 2 sigma), zero biases,
    unit norm/QK gains; deterministic for a fixed seed."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in _param_shapes(config).items():
        if name.endswith(".w"):
            params[name] = truncnorm.rvs(
                -2.0, 2.0, scale=INIT_STD, size=shape, random_state=rng
            ).astype(np.float64)
        elif name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=np.float64)
        else:
            params[name] = np.ones(shape, dtype=np.float64)
    return params


def param_count(config: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in _param_shapes(config).values())


def zero_grads(config: ModelConfig) -> dict:
    return {k: np.zeros(s, dtype=np.float64) for k, s in _param_shapes(config).items()}


# ---------------------------------------------------------------------------
# layer primitives (forward/backward pairs)


def linear_fwd(x, w, b):
    return _matmul(x, w) + b, x


def linear_bwd(dy, x, w):
    k, n = w.shape
    dw = x.reshape(-1, k).T @ dy.reshape(-1, n)
    db = dy.reshape(-1, n).sum(axis=0)
    return dy @ w.T, dw, db


def _rms_fwd(x):
    r = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
    return x / r, r


def _rms_bwd(dxn, x, r):
    n = x.shape[-1]
    return dxn / r - x * np.sum(dxn * x, axis=-1, keepdims=True) / (n * r**3)


def rmsnorm_fwd(x, gain):
    xn, r = _rms_fwd(x)
    return xn * gain, (x, xn, r)


def rmsnorm_bwd(dy, cache, gain):
    x, xn, r = cache
    dgain = np.sum(dy * xn, axis=tuple(range(dy.ndim - 1)))
    return _rms_bwd(dy * gain, x, r), dgain


def gelu_fwd(x):
    c = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    return x * c, (x, c)


def gelu_bwd(dy, cache):
    x, c = cache
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return dy * (c + x * pdf)


def softmax_fwd(z):
    e = np.exp(z - np.max(z, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax_bwd(dp, p):
    return p * (dp - np.sum(dp * p, axis=-1, keepdims=True))


def patchify(x, p):
    """(B, C, H, W) -> (B, H/p, W/p, p*p*C); inner order (ph, pw, C)."""
    B, C, H, W = x.shape
    t = x.reshape(B, C, H // p, p, W // p, p).transpose(0, 2, 4, 3, 5, 1)
    return np.ascontiguousarray(t.reshape(B, H // p, W // p, p * p * C))


def unpatchify(t, p, channels):
    B, Th, Tw, _ = t.shape
    x = t.reshape(B, Th, Tw, p, p, channels).transpose(0, 5, 1, 3, 2, 4)
    return np.ascontiguousarray(x.reshape(B, channels, Th * p, Tw * p))


def window_split(x, w_h, w_w):
    B, Th, Tw, E = x.shape
    t = x.reshape(B, Th // w_h, w_h, Tw // w_w, w_w, E).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(t.reshape(B, Th // w_h, Tw // w_w, w_h * w_w, E))


def window_merge(wins, w_h, w_w):
    B, nh, nw, _, E = wins.shape
    t = wins.reshape(B, nh, nw, w_h, w_w, E).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(t.reshape(B, nh * w_h, nw * w_w, E))


def _to_heads(x, n_heads, head_dim):
    # (..., M, E) -> (..., heads, M, hd)
    shape = x.shape[:-1] + (n_heads, head_dim)
    return np.ascontiguousarray(np.moveaxis(x.reshape(shape), -2, -3))


def _from_heads(x):
    # (..., heads, M, hd) -> (..., M, heads*hd)
    moved = np.moveaxis(x, -3, -2)
    return np.ascontiguousarray(moved.reshape(moved.shape[:-2] + (-1,)))


def window_attention_fwd(x, bp, config: ModelConfig, bias):
    """Windowed multi-head self-attention with QK-normalization.

    ``x`` is the (possibly rolled) token tensor (B, Th, Tw, E); ``bias`` is
    the additive attention bias per window or None. Residual is the caller's
    job.
    """
    w_h, w_w = config.window
    nh, hd = config.n_heads, config.head_dim
    scale = 1.0 / np.sqrt(hd)

    xw = window_split(x, w_h, w_w)
    qkv, _ = linear_fwd(xw, bp["qkv.w"], bp["qkv.b"])
    q, k, v = np.split(qkv, 3, axis=-1)
    qh, kh, vh = (_to_heads(t, nh, hd) for t in (q, k, v))

    qn_raw, rq = _rms_fwd(qh)
    kn_raw, rk = _rms_fwd(kh)
    qg = bp["q_gain"][:, None, None]
    kg = bp["k_gain"][:, None, None]
    qn = qn_raw * qg
    kn = kn_raw * kg

    logits = _matmul(qn, kn.swapaxes(-1, -2)) * scale
    if bias is not None:
        logits = logits + bias[None, :, :, None, :, :]
    probs = softmax_fwd(logits)
    ctx = _matmul(probs, vh)
    merged = _from_heads(ctx)
    out, _ = linear_fwd(merged, bp["proj.w"], bp["proj.b"])
    y = window_merge(out, w_h, w_w)
    cache = (xw, qh, kh, vh, qn_raw, kn_raw, rq, rk, qn, kn, probs, merged)
    return y, cache


def window_attention_bwd(dy, cache, bp, config: ModelConfig):
    w_h, w_w = config.window
    nh, hd = config.n_heads, config.head_dim
    scale = 1.0 / np.sqrt(hd)
    xw, qh, kh, vh, qn_raw, kn_raw, rq, rk, qn, kn, probs, merged = cache
    qg = bp["q_gain"][:, None, None]
    kg = bp["k_gain"][:, None, None]

    dout = window_split(dy, w_h, w_w)
    dmerged, dw_proj, db_proj = linear_bwd(dout, merged, bp["proj.w"])
    dctx = _to_heads(dmerged, nh, hd)

    dprobs = dctx @ vh.swapaxes(-1, -2)
    dvh = probs.swapaxes(-1, -2) @ dctx
    dlogits = softmax_bwd(dprobs, probs)
    dqn = (dlogits @ kn) * scale
    dkn = (dlogits.swapaxes(-1, -2) @ qn) * scale

    head_axes = tuple(i for i in range(dqn.ndim) if i != dqn.ndim - 3)
    dq_gain = np.sum(dqn * qn_raw, axis=head_axes)
    dk_gain = np.sum(dkn * kn_raw, axis=head_axes)
    dqh = _rms_bwd(dqn * qg, qh, rq)
    dkh = _rms_bwd(dkn * kg, kh, rk)

    dqkv = np.concatenate([_from_heads(g) for g in (dqh, dkh, dvh)], axis=-1)
    dxw, dw_qkv, db_qkv = linear_bwd(dqkv, xw, bp["qkv.w"])
    dx = window_merge(dxw, w_h, w_w)
    grads = {
        "qkv.w": dw_qkv,
        "qkv.b": db_qkv,
        "q_gain": dq_gain,
        "k_gain": dk_gain,
        "proj.w": dw_proj,
        "proj.b": db_proj,
    }
    return dx, grads


def mlp_fwd(x, bp):
    h, _ = linear_fwd(x, bp["fc1.w"], bp["fc1.b"])
    a, gcache = gelu_fwd(h)
    y, _ = linear_fwd(a, bp["fc2.w"], bp["fc2.b"])
    return y, (x, a, gcache)


def mlp_bwd(dy, cache, bp):
    x, a, gcache = cache
    da, dw2, db2 = linear_bwd(dy, a, bp["fc2.w"])
    dh = gelu_bwd(da, gcache)
    dx, dw1, db1 = linear_bwd(dh, x, bp["fc1.w"])
    return dx, {"fc1.w": dw1, "fc1.b": db1, "fc2.w": dw2, "fc2.b": db2}


def block_params(params: dict, i: int) -> dict:
    pre = f"blocks.{i}."
    return {k[len(pre) :]: v for k, v in params.items() if k.startswith(pre)}


def block_fwd(x, bp, config: ModelConfig, bias, shifted, roll2d):
    s_h, s_w = config.shift
    xn, n1_cache = rmsnorm_fwd(x, bp["norm1.g"])
    if shifted:
        xn = roll2d(xn, -s_h, -s_w)
    att, att_cache = window_attention_fwd(
        xn, {k[len("attn.") :]: v for k, v in bp.items() if k.startswith("attn.")},
        config, bias,
    )
    if shifted:
        att = roll2d(att, s_h, s_w)
    y = x + att
    yn, n2_cache = rmsnorm_fwd(y, bp["norm2.g"])
    m, mlp_cache = mlp_fwd(yn, {k[len("mlp.") :]: v for k, v in bp.items() if k.startswith("mlp.")})
    return y + m, (n1_cache, att_cache, n2_cache, mlp_cache)


def block_bwd(dout, caches, bp, config: ModelConfig, shifted, roll2d):
    s_h, s_w = config.shift
    n1_cache, att_cache, n2_cache, mlp_cache = caches
    grads = {}

    dm = dout
    dyn, mlp_grads = mlp_bwd(
        dm, mlp_cache, {k[len("mlp.") :]: v for k, v in bp.items() if k.startswith("mlp.")}
    )
    for k, v in mlp_grads.items():
        grads[f"mlp.{k}"] = v
    dy_norm, dg2 = rmsnorm_bwd(dyn, n2_cache, bp["norm2.g"])
    grads["norm2.g"] = dg2
    dy = dout + dy_norm

    datt = dy
    if shifted:
        datt = roll2d(datt, -s_h, -s_w)
    dxn, att_grads = window_attention_bwd(
        datt, att_cache,
        {k[len("attn.") :]: v for k, v in bp.items() if k.startswith("attn.")}, config,
    )
    if shifted:
        dxn = roll2d(dxn, s_h, s_w)
    for k, v in att_grads.items():
        grads[f"attn.{k}"] = v
    dx_norm, dg1 = rmsnorm_bwd(dxn, n1_cache, bp["norm1.g"])
    grads["norm1.g"] = dg1
    return dy + dx_norm, grads


def local_roll2d(x, s_h, s_w):
    return np.roll(x, (s_h, s_w), axis=(1, 2))


# ---------------------------------------------------------------------------
# attention masks


@dataclass(frozen=True)
class AttentionMaskSet:
    """Boolean token-pair admissibility per window for both partitions."""

    regular: np.ndarray  # (nWh, nWw, M, M), all True
    shifted: np.ndarray  # False only across the latitude seam

    def bias(self, shifted: bool):
        mask = self.shifted if shifted else self.regular
        if mask.all():
            return None
        return np.where(mask, 0.0, MASK_FILL)


def build_masks(config: ModelConfig) -> AttentionMaskSet:
    """Mask out pairs whose pre-roll latitude rows sit on opposite sides of
    the seam introduced by the vertical roll; longitude wraps, so purely
    longitudinal shifts need no mask."""
    w_h, w_w = config.window
    Th, Tw = config.tokens_h, config.tokens_w
    n_wh, n_ww = Th // w_h, Tw // w_w
    M = config.window_tokens
    s_h = config.shift[0]

    regular = np.ones((n_wh, n_ww, M, M), dtype=bool)
    shifted = np.ones((n_wh, n_ww, M, M), dtype=bool)
    if s_h > 0:
        row_region = np.zeros(Th, dtype=np.int64)
        row_region[Th - w_h : Th - s_h] = 1
        row_region[Th - s_h :] = 2
        for r in range(n_wh):
            rows = row_region[r * w_h : (r + 1) * w_h]
            token_region = np.repeat(rows, w_w)
            shifted[r] = (token_region[:, None] == token_region[None, :])[None]
    return AttentionMaskSet(regular=regular, shifted=shifted)


# ---------------------------------------------------------------------------
# positional inputs and batches


def positional_inputs(grid: GridSpec, time_frac: float) -> np.ndarray:
    """Per-pixel (x, y, z, t) planes: unit-sphere coordinates plus time."""
    lat = grid.latitudes[:, None]
    lon = grid.longitudes[None, :]
    cos_lat = np.cos(lat)
    planes = np.empty((4, grid.n_lat, grid.n_lon), dtype=np.float64)
    planes[0] = cos_lat * np.cos(lon)
    planes[1] = cos_lat * np.sin(lon)
    planes[2] = np.broadcast_to(np.sin(lat), planes[0].shape)
    planes[3] = time_frac
    return planes


@dataclass
class Batch:
    values: np.ndarray  # (B, C, H, W), standardized
    time_frac: np.ndarray  # (B,)


def batch_from_samples(samples) -> Batch:
    return Batch(
        values=np.stack([s.values for s in samples]).astype(np.float64),
        time_frac=np.array([s.time_frac for s in samples], dtype=np.float64),
    )


def trim_rows(values: np.ndarray, config: ModelConfig) -> np.ndarray:
    """Drop trailing latitude rows so the height matches the model grid."""
    extra = values.shape[-2] - config.grid_h
    if extra < 0:
        raise ValueError("input has fewer rows than the model grid")
    return values[..., : config.grid_h, :] if extra else values


def restore_rows(pred: np.ndarray, n_lat: int) -> np.ndarray:
    """Undo :func:`trim_rows` by copying the last predicted row."""
    extra = n_lat - pred.shape[-2]
    if extra == 0:
        return pred
    pad = np.repeat(pred[..., -1:, :], extra, axis=-2)
    return np.concatenate([pred, pad], axis=-2)


# ---------------------------------------------------------------------------
# full forward / backward


@dataclass
class ActivationTape:
    """Everything backward needs; replaying forward from the stored inputs
    reproduces the tape contents."""

    values: np.ndarray
    time_frac: np.ndarray
    patches: np.ndarray
    pos_patches: np.ndarray | None
    block_caches: list
    tokens_out: np.ndarray


def _positional_batch(grid: GridSpec, config: ModelConfig, time_frac) -> np.ndarray:
    pos = np.stack([positional_inputs(grid, t) for t in np.asarray(time_frac)])
    return trim_rows(pos, config)


def forward(params: dict, config: ModelConfig, batch: Batch, grid: GridSpec,
            masks: AttentionMaskSet | None = None):
    """Run the emulator; returns (predictions, ActivationTape)."""
    values = np.asarray(batch.values, dtype=np.float64)
    if values.ndim != 4 or values.shape[1] != config.in_channels:
        raise ValueError(f"expected (B, {config.in_channels}, H, W), got {values.shape}")
    if values.shape[-2:] != (config.grid_h, config.grid_w):
        raise ValueError(
            f"spatial extent {values.shape[-2:]} does not match model grid "
            f"{(config.grid_h, config.grid_w)}; trim first"
        )
    masks = masks or build_masks(config)

    patches = patchify(values, config.patch)
    x, _ = linear_fwd(patches, params["patch_embed.w"], params["patch_embed.b"])
    pos_patches = None
    if config.pos_enc_enabled:
        pos = _positional_batch(grid, config, batch.time_frac)
        pos_patches = patchify(pos, config.patch)
        pe, _ = linear_fwd(pos_patches, params["pos_embed.w"], params["pos_embed.b"])
        x = x + pe

    block_caches = []
    for i in range(config.depth):
        shifted = i % 2 == 1
        x, cache = block_fwd(
            x, block_params(params, i), config, masks.bias(shifted), shifted, local_roll2d
        )
        block_caches.append(cache)

    tokens_out = x
    out, _ = linear_fwd(x, params["rev_embed.w"], params["rev_embed.b"])
    preds = unpatchify(out, config.patch, config.out_channels)
    tape = ActivationTape(
        values=values,
        time_frac=np.asarray(batch.time_frac, dtype=np.float64),
        patches=patches,
        pos_patches=pos_patches,
        block_caches=block_caches,
        tokens_out=tokens_out,
    )
    return preds, tape


def backward(tape: ActivationTape, params: dict, config: ModelConfig, grad_output: np.ndarray):
    """Exact gradients of <grad_output, forward> w.r.t. parameters and input."""
    if len(tape.block_caches) != config.depth:
        raise ValueError("tape does not match the configured depth")
    grads = {}
    dout = patchify(np.asarray(grad_output, dtype=np.float64), config.patch)
    dx, grads["rev_embed.w"], grads["rev_embed.b"] = linear_bwd(
        dout, tape.tokens_out, params["rev_embed.w"]
    )
    for i in range(config.depth - 1, -1, -1):
        shifted = i % 2 == 1
        dx, bgrads = block_bwd(
            dx, tape.block_caches[i], block_params(params, i), config, shifted, local_roll2d
        )
        for k, v in bgrads.items():
            grads[f"blocks.{i}.{k}"] = v
    if config.pos_enc_enabled:
        _, grads["pos_embed.w"], grads["pos_embed.b"] = linear_bwd(
            dx, tape.pos_patches, params["pos_embed.w"]
        )
    else:
        grads["pos_embed.w"] = np.zeros_like(params["pos_embed.w"])
        grads["pos_embed.b"] = np.zeros_like(params["pos_embed.b"])
    dpatches, grads["patch_embed.w"], grads["patch_embed.b"] = linear_bwd(
        dx, tape.patches, params["patch_embed.w"]
    )
    dinput = unpatchify(dpatches, config.patch, config.in_channels)
    return grads, dinput


# ---------------------------------------------------------------------------
# parameter serialization


def save_params(path: str, params: dict, config: ModelConfig) -> None:
    meta = {
        "kind": "params",
        "config": config.to_dict(),
        "config_hash": config_hash(config.to_dict()),
    }
    write_blob(path, params, meta)


def load_params(path: str):
    arrays, meta = read_blob(path)
    if meta.get("kind") != "params":
        raise ValueError(f"{path}: not a parameter blob")
    config = ModelConfig.from_dict(meta["config"])
    expected = _param_shapes(config)
    for name, shape in expected.items():
        if name not in arrays or tuple(arrays[name].shape) != shape:
            raise ValueError(f"{path}: parameter {name!r} missing or misshaped")
    return arrays, config
