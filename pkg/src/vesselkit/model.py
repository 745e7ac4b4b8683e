"""Lightweight Hessian-feature segmentation network.

Architecture: the input volume passes through a skip connection and through
n_blocks parallel feature blocks. Each block is a learned 3D projection
convolution (1 -> proj_channels), a fixed second-derivative stencil operator
producing the six Hessian components per channel, and a small per-voxel MLP
(6 -> hidden -> 1, weights shared across voxels but separate per channel);
the channel maps are averaged into one map per block. The skip plus block
maps feed a two-convolution fusion head with a sigmoid output.

All learnable state lives in a flat float64 vector (ParamStore) addressed by
a layout table; forward, backward, and the optimizer all share it. The
backward pass here is exact reverse-mode differentiation written by hand --
no autograd -- and is validated against finite differences in the tests.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._kernels import hess6_adjoint, hess6_forward, tanh_backward
from .errors import (
    FileFormatError,
    NumericError,
    ParameterError,
    ShapeError,
    TruncatedFileError,
)
from .hessian import fold_edge_padding
from .volume import Volume

CHECKPOINT_MAGIC = b"HSSN"
CHECKPOINT_VERSION = 1

# Probabilities are kept strictly inside (0, 1).
_PROB_EPS = 1e-15


@dataclass(frozen=True)
class HessNetConfig:
    """Shape of the network. The defaults give 6579 trainable parameters."""

    n_blocks: int = 4
    proj_channels: int = 8
    proj_kernel: int = 5
    mlp_hidden: tuple[int, ...] = (6,)
    head_channels: int = 6
    head_kernel: int = 3

    def __post_init__(self):
        if self.n_blocks < 1:
            raise ParameterError("n_blocks must be >= 1")
        for k, name in ((self.proj_kernel, "proj_kernel"), (self.head_kernel, "head_kernel")):
            if k < 1 or k % 2 == 0:
                raise ParameterError(f"{name} must be odd and >= 1, got {k}")
        widths = (self.proj_channels, self.head_channels, *self.mlp_hidden)
        if any(w < 1 for w in widths):
            raise ParameterError("all channel/hidden widths must be >= 1")
        object.__setattr__(self, "mlp_hidden", tuple(int(h) for h in self.mlp_hidden))

    @property
    def mlp_sizes(self) -> tuple[int, ...]:
        return (6, *self.mlp_hidden, 1)

    def to_dict(self) -> dict:
        return {
            "n_blocks": self.n_blocks,
            "proj_channels": self.proj_channels,
            "proj_kernel": self.proj_kernel,
            "mlp_hidden": list(self.mlp_hidden),
            "head_channels": self.head_channels,
            "head_kernel": self.head_kernel,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "HessNetConfig":
        allowed = {"n_blocks", "proj_channels", "proj_kernel", "mlp_hidden", "head_channels", "head_kernel"}
        unknown = set(doc) - allowed
        if unknown:
            raise ParameterError(f"unknown model config keys: {sorted(unknown)}")
        kwargs = dict(doc)
        if "mlp_hidden" in kwargs:
            kwargs["mlp_hidden"] = tuple(kwargs["mlp_hidden"])
        return cls(**kwargs)


@dataclass(frozen=True)
class LayoutEntry:
    name: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


def layout(config: HessNetConfig) -> tuple[LayoutEntry, ...]:
    """Ordered (name, shape, offset) descriptors covering the flat vector."""
    entries: list[LayoutEntry] = []
    offset = 0

    def add(name, shape):
        nonlocal offset
        e = LayoutEntry(name, tuple(int(s) for s in shape), offset)
        entries.append(e)
        offset += e.size

    c, k = config.proj_channels, config.proj_kernel
    sizes = config.mlp_sizes
    for b in range(config.n_blocks):
        add(f"block{b}.proj.weight", (c, k, k, k))
        add(f"block{b}.proj.bias", (c,))
        for li, (din, dout) in enumerate(zip(sizes, sizes[1:])):
            add(f"block{b}.mlp{li}.weight", (c, dout, din))
            add(f"block{b}.mlp{li}.bias", (c, dout))
    hk, hc = config.head_kernel, config.head_channels
    add("head.conv0.weight", (hc, config.n_blocks + 1, hk, hk, hk))
    add("head.conv0.bias", (hc,))
    add("head.conv1.weight", (1, hc, hk, hk, hk))
    add("head.conv1.bias", (1,))
    return tuple(entries)


def param_count(config: HessNetConfig) -> int:
    """Exact trainable-parameter count, in closed form."""
    sizes = config.mlp_sizes
    mlp_per_channel = sum(din * dout + dout for din, dout in zip(sizes, sizes[1:]))
    k3 = config.proj_kernel**3
    per_block = config.proj_channels * (k3 + 1 + mlp_per_channel)
    hk3 = config.head_kernel**3
    head = config.head_channels * (hk3 * (config.n_blocks + 1) + 1) + hk3 * config.head_channels + 1
    return config.n_blocks * per_block + head


@dataclass
class ParamStore:
    """Flat float64 parameter vector plus its layout descriptor."""

    values: np.ndarray
    layout: tuple[LayoutEntry, ...] = field(repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).ravel()
        total = sum(e.size for e in self.layout)
        if total != self.values.size:
            raise ShapeError(f"layout extent {total} != values length {self.values.size}")
        pos = 0
        for e in self.layout:
            if e.offset != pos:
                raise ShapeError(f"layout offsets not contiguous at {e.name}")
            pos += e.size
        if not np.all(np.isfinite(self.values)):
            raise NumericError("parameter vector contains NaN or Inf")

    def view(self, name: str) -> np.ndarray:
        """Writable view of one named tensor inside the flat vector."""
        for e in self.layout:
            if e.name == name:
                return self.values[e.offset : e.offset + e.size].reshape(e.shape)
        raise KeyError(name)

    def copy(self) -> "ParamStore":
        return ParamStore(values=self.values.copy(), layout=self.layout)


def init_params(config: HessNetConfig, seed: int = 0) -> ParamStore:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights, zero biases."""
    lay = layout(config)
    values = np.zeros(sum(e.size for e in lay), dtype=np.float64)
    rng = np.random.default_rng(seed)
    store = ParamStore(values=values, layout=lay)
    fan_ins = _fan_ins(config)
    for e in lay:
        if e.name.endswith(".bias"):
            continue
        bound = 1.0 / math.sqrt(fan_ins[e.name])
        store.values[e.offset : e.offset + e.size] = rng.uniform(-bound, bound, size=e.size)
    return store


def _fan_ins(config: HessNetConfig) -> dict[str, int]:
    out: dict[str, int] = {}
    sizes = config.mlp_sizes
    for b in range(config.n_blocks):
        out[f"block{b}.proj.weight"] = config.proj_kernel**3
        for li, din in enumerate(sizes[:-1]):
            out[f"block{b}.mlp{li}.weight"] = din
    out["head.conv0.weight"] = config.head_kernel**3 * (config.n_blocks + 1)
    out["head.conv1.weight"] = config.head_kernel**3 * config.head_channels
    return out


# ---------------------------------------------------------------------------
# Convolution plumbing: im2col with clamp padding and its adjoint.

def _pad_channels(channels: np.ndarray, r: int) -> np.ndarray:
    return np.pad(channels, [(0, 0)] + [(r, r)] * 3, mode="edge")


def _im2col(channels: np.ndarray, k: int) -> np.ndarray:
    """(C, nx, ny, nz) -> (C*k^3, V) patch matrix, channel-major rows."""
    dims = channels.shape[1:]
    p = _pad_channels(np.ascontiguousarray(channels, dtype=np.float64), k // 2)
    windows = sliding_window_view(p, dims, axis=(1, 2, 3))   # (C, k, k, k, *dims)
    return windows.reshape(channels.shape[0] * k**3, -1)


def _col2im(rows: np.ndarray, c_in: int, k: int, dims) -> np.ndarray:
    """Adjoint of _im2col: scatter patch-matrix cotangents back to (C, *dims)."""
    r = k // 2
    padded = np.zeros((c_in,) + tuple(n + 2 * r for n in dims), dtype=np.float64)
    row = 0
    for c in range(c_in):
        pc = padded[c]
        for dx in range(k):
            for dy in range(k):
                for dz in range(k):
                    pc[dx : dx + dims[0], dy : dy + dims[1], dz : dz + dims[2]] += rows[row].reshape(dims)
                    row += 1
    if r == 0:
        return padded
    return fold_edge_padding(padded, r)


def _conv3d_nocache(channels: np.ndarray, w2d: np.ndarray, bias: np.ndarray, k: int) -> np.ndarray:
    """Same convolution as the im2col path but with bounded memory: the patch
    matrix is materialized one (channel, x-offset) slab at a time."""
    c_in = channels.shape[0]
    dims = channels.shape[1:]
    v = dims[0] * dims[1] * dims[2]
    p = _pad_channels(np.ascontiguousarray(channels, dtype=np.float64), k // 2)
    windows = sliding_window_view(p, dims, axis=(1, 2, 3))
    out = np.empty((w2d.shape[0], v), dtype=np.float64)
    out[:] = bias[:, None]
    k2 = k * k
    for c in range(c_in):
        for dx in range(k):
            chunk = windows[c, dx].reshape(k2, v)
            out += w2d[:, c * k**3 + dx * k2 : c * k**3 + (dx + 1) * k2] @ chunk
    return out


# ---------------------------------------------------------------------------
# Forward / backward

@dataclass
class _Cache:
    dims: tuple[int, int, int]
    x_flat: np.ndarray
    p_proj: np.ndarray            # shared projection patch matrix (k^3, V)
    block_acts: list              # per block: [A0, A1, ...] each (C, width, V)
    head_p0: np.ndarray
    head_a: np.ndarray            # tanh output of head conv0 (Hc, V)
    head_p1: np.ndarray
    probs: np.ndarray


def _check_input_dims(config: HessNetConfig, dims) -> None:
    need = max(config.proj_kernel, config.head_kernel)
    if min(dims) < need:
        raise ShapeError(f"input dims {dims} smaller than kernel size {need}")


def _block_features(y_block: np.ndarray, dims) -> np.ndarray:
    """Fixed Hessian stencil per channel: (C, V) -> (C, 6, V)."""
    c = y_block.shape[0]
    padded = _pad_channels(y_block.reshape(c, *dims), 1)
    feats = np.empty((c, 6) + tuple(dims), dtype=np.float64)
    hess6_forward(padded, feats)
    return feats.reshape(c, 6, -1)


def _block_features_adjoint(g6: np.ndarray, dims) -> np.ndarray:
    """Adjoint of _block_features: (C, 6, V) -> (C, V)."""
    c = g6.shape[0]
    buf = np.zeros((c,) + tuple(n + 2 for n in dims), dtype=np.float64)
    hess6_adjoint(np.ascontiguousarray(g6).reshape(c, 6, *dims), buf)
    return fold_edge_padding(buf, 1).reshape(c, -1)


def _forward_arr(params: ParamStore, config: HessNetConfig, x: np.ndarray, keep_cache: bool):
    """Forward pass on a float64 (nx, ny, nz) array. Returns (probs, cache)."""
    if not np.all(np.isfinite(params.values)):
        raise NumericError("non-finite parameter vector")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeError(f"expected 3D input, got shape {x.shape}")
    dims = x.shape
    _check_input_dims(config, dims)
    v = x.size
    b_n, c, k = config.n_blocks, config.proj_channels, config.proj_kernel
    x_flat = x.ravel()

    w_proj = np.concatenate([params.view(f"block{b}.proj.weight").reshape(c, -1) for b in range(b_n)])
    b_proj = np.concatenate([params.view(f"block{b}.proj.bias") for b in range(b_n)])
    if keep_cache:
        # All blocks share one projection patch matrix (single input channel).
        p_proj = _im2col(x[None], k)
        y_all = w_proj @ p_proj + b_proj[:, None]
    else:
        p_proj = None
        y_all = _conv3d_nocache(x[None], w_proj, b_proj, k)

    sizes = config.mlp_sizes
    n_layers = len(sizes) - 1
    block_maps = np.empty((b_n, v), dtype=np.float64)
    block_acts: list = []
    for b in range(b_n):
        a = _block_features(y_all[b * c : (b + 1) * c], dims)
        acts = [a]
        for li in range(n_layers):
            w = params.view(f"block{b}.mlp{li}.weight")
            bias = params.view(f"block{b}.mlp{li}.bias")
            z = w @ a
            z += bias[:, :, None]
            a = np.tanh(z) if li < n_layers - 1 else z
            acts.append(a)
        block_maps[b] = a[:, 0, :].mean(axis=0)
        block_acts.append(acts if keep_cache else None)

    fusion_in = np.concatenate([x_flat[None], block_maps]).reshape(b_n + 1, *dims)
    hk, hc = config.head_kernel, config.head_channels
    w0 = params.view("head.conv0.weight").reshape(hc, -1)
    b0 = params.view("head.conv0.bias")
    w1 = params.view("head.conv1.weight").reshape(1, -1)
    b1 = params.view("head.conv1.bias")

    if keep_cache:
        p0 = _im2col(fusion_in, hk)
        a_head = np.tanh(w0 @ p0 + b0[:, None])
        p1 = _im2col(a_head.reshape(hc, *dims), hk)
        logits = (w1 @ p1)[0] + b1[0]
    else:
        a_head = np.tanh(_conv3d_nocache(fusion_in, w0, b0, hk))
        logits = _conv3d_nocache(a_head.reshape(hc, *dims), w1, b1, hk)[0]
        p0 = p1 = None

    if not math.isfinite(float(logits.sum())):
        raise NumericError(_locate_nonfinite(y_all, block_maps, a_head, logits))
    probs = np.clip(_sigmoid(logits), _PROB_EPS, 1.0 - _PROB_EPS)

    cache = None
    if keep_cache:
        cache = _Cache(dims, x_flat, p_proj, block_acts, p0, a_head, p1, probs)
    return probs, cache


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _locate_nonfinite(y_all, block_maps, a_head, logits) -> str:
    for name, arr in (
        ("projection convolution output", y_all),
        ("feature block output maps", block_maps),
        ("fusion head activation", a_head),
        ("output logits", logits),
    ):
        if not math.isfinite(float(np.asarray(arr).sum())):
            return f"non-finite values first appeared in: {name}"
    return "non-finite values in forward pass"


def forward(params: ParamStore, config: HessNetConfig, volume: Volume) -> Volume:
    """Segmentation probabilities for a volume (expected z-normalized).

    Output voxels are strictly inside (0, 1); dims and spacing are preserved.
    """
    probs, _ = _forward_arr(params, config, volume.as3d(), keep_cache=False)
    return Volume(dims=volume.dims, spacing=volume.spacing, data=probs.reshape(volume.dims).ravel(order="F"))


def backward_from_cache(
    params: ParamStore, config: HessNetConfig, cache: _Cache, g_probs: np.ndarray
) -> np.ndarray:
    """Exact gradient of (loss o forward) given dLoss/dprobs; same length as
    the parameter vector."""
    dims = cache.dims
    v = cache.probs.size
    b_n, c, k = config.n_blocks, config.proj_channels, config.proj_kernel
    hk, hc = config.head_kernel, config.head_channels
    grad = np.zeros_like(params.values)
    store = ParamStore(values=grad, layout=params.layout)  # reuse view logic

    g_logits = g_probs * cache.probs * (1.0 - cache.probs)

    # head conv1
    w1 = params.view("head.conv1.weight").reshape(-1)
    store.view("head.conv1.weight")[...] = (cache.head_p1 @ g_logits).reshape(1, hc, hk, hk, hk)
    store.view("head.conv1.bias")[0] = g_logits.sum()
    g_p1 = w1[:, None] * g_logits[None, :]
    g_a = _col2im(g_p1, hc, hk, dims).reshape(hc, v)

    # head conv0 (through tanh)
    g_z0 = g_a * (1.0 - cache.head_a**2)
    store.view("head.conv0.weight")[...] = (g_z0 @ cache.head_p0.T).reshape(hc, b_n + 1, hk, hk, hk)
    store.view("head.conv0.bias")[...] = g_z0.sum(axis=1)
    w0 = params.view("head.conv0.weight").reshape(hc, -1)
    g_fusion = _col2im(w0.T @ g_z0, b_n + 1, hk, dims).reshape(b_n + 1, v)
    # g_fusion[0] is the skip-connection gradient (input, not trainable).

    sizes = config.mlp_sizes
    n_layers = len(sizes) - 1
    g_y_all = np.empty((b_n * c, v), dtype=np.float64)
    for b in range(b_n):
        acts = cache.block_acts[b]
        g = np.empty((c, 1, v), dtype=np.float64)
        g[:, 0, :] = g_fusion[1 + b] / c                   # mean over channels
        for li in range(n_layers - 1, -1, -1):
            w = params.view(f"block{b}.mlp{li}.weight")
            if li < n_layers - 1:
                tanh_backward(g, acts[li + 1])             # through hidden tanh
            a_prev = acts[li]
            store.view(f"block{b}.mlp{li}.weight")[...] = g @ a_prev.transpose(0, 2, 1)
            store.view(f"block{b}.mlp{li}.bias")[...] = g.sum(axis=2)
            g = w.transpose(0, 2, 1) @ g
        # g is now the cotangent of the six Hessian components: (C, 6, V)
        g_y_all[b * c : (b + 1) * c] = _block_features_adjoint(g, dims)

    g_w_proj = g_y_all @ cache.p_proj.T                    # (B*C, k^3)
    for b in range(b_n):
        store.view(f"block{b}.proj.weight")[...] = g_w_proj[b * c : (b + 1) * c].reshape(c, k, k, k)
        store.view(f"block{b}.proj.bias")[...] = g_y_all[b * c : (b + 1) * c].sum(axis=1)

    if not math.isfinite(float(grad.sum())):
        raise NumericError("non-finite gradient in backward pass")
    return grad


# ---------------------------------------------------------------------------
# Checkpoints

@dataclass
class Checkpoint:
    """Everything needed to resume or reproduce: config, parameters,
    optional optimizer moments, RNG seed, epoch counter."""

    config: HessNetConfig
    values: np.ndarray
    seed: int = 0
    epoch: int = 0
    opt_m: np.ndarray | None = None
    opt_v: np.ndarray | None = None
    opt_t: int = 0


def save_checkpoint(cp: Checkpoint, path) -> None:
    """Binary format: magic, u32 version, u32 header length, JSON header,
    then raw little-endian float64 arrays. Round-trips bit-exactly."""
    values = np.ascontiguousarray(cp.values, dtype="<f8")
    has_opt = cp.opt_m is not None and cp.opt_v is not None
    header = json.dumps(
        {
            "config": cp.config.to_dict(),
            "seed": int(cp.seed),
            "epoch": int(cp.epoch),
            "n_params": int(values.size),
            "has_opt": bool(has_opt),
            "opt_t": int(cp.opt_t),
        }
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        fh.write(values.tobytes())
        if has_opt:
            fh.write(np.ascontiguousarray(cp.opt_m, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(cp.opt_v, dtype="<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise FileFormatError(f"{path}: bad checkpoint magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
        raw = fh.read(8)
        if len(raw) < 8:
            raise TruncatedFileError(f"{path}: truncated checkpoint header")
        version, header_len = struct.unpack("<II", raw)
        if version != CHECKPOINT_VERSION:
            raise FileFormatError(f"{path}: unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}")
        header_raw = fh.read(header_len)
        if len(header_raw) < header_len:
            raise TruncatedFileError(f"{path}: truncated checkpoint header")
        try:
            header = json.loads(header_raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FileFormatError(f"{path}: corrupt checkpoint header: {exc}") from exc
        config = HessNetConfig.from_dict(header["config"])
        n = int(header["n_params"])
        if n != param_count(config):
            raise FileFormatError(f"{path}: header claims {n} parameters, config implies {param_count(config)}")

        def read_array() -> np.ndarray:
            buf = fh.read(n * 8)
            if len(buf) < n * 8:
                raise TruncatedFileError(f"{path}: truncated parameter payload")
            return np.frombuffer(buf, dtype="<f8").copy()

        values = read_array()
        opt_m = opt_v = None
        if header.get("has_opt"):
            opt_m = read_array()
            opt_v = read_array()
    return Checkpoint(
        config=config,
        values=values,
        seed=int(header.get("seed", 0)),
        epoch=int(header.get("epoch", 0)),
        opt_m=opt_m,
        opt_v=opt_v,
        opt_t=int(header.get("opt_t", 0)),
    )


def params_from_checkpoint(cp: Checkpoint) -> ParamStore:
    return ParamStore(values=cp.values.copy(), layout=layout(cp.config))
