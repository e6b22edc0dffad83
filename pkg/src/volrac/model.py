"""Windowed multi-head self-attention model over volumetric patch tokens.

The network embeds P³ patches to E-dimensional feature vectors, runs them
through a depth-L residual chain whose sub-blocks alternate between
contiguous-window attention (odd sub-blocks) and global-to-local window
attention (even sub-blocks), and projects back to patches. Global-to-local
layers can be evaluated two ways: gathering each window's scattered cells
directly, or permuting features once so windows become memory-contiguous
blocks ("compact" route); both produce the same output.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .volume import PatchGrid, Volume, patchify, unpatchify
from .windows import WindowIdMap, g2l_ids, gather_order, invert_g2l, w_msa_ids

CKPT_MAGIC = b"G2LC"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    """A checkpoint file failed structural validation."""


def config_violations(side, patch, window, embed, heads, layers) -> list[str]:
    """Named divisibility/parity constraints; empty list means valid."""
    out = []
    if min(side, patch, window, embed, heads, layers) <= 0:
        out.append("all config values must be positive")
        return out
    if side % patch != 0:
        out.append(f"patch length P={patch} must divide volume side S={side}")
    elif (side // patch) % window != 0:
        out.append(f"window length W={window} must divide grid side S/P={side // patch}")
    if embed % heads != 0:
        out.append(f"head count H={heads} must divide embed dim E={embed}")
    if layers % 2 != 0:
        out.append(f"layer count L={layers} must be even")
    return out


@dataclass(frozen=True)
class ModelConfig:
    side: int = 32
    patch: int = 4
    window: int = 2
    embed: int = 32
    heads: int = 4
    layers: int = 4
    dims: int = 3

    def __post_init__(self):
        if self.dims != 3:
            raise ValueError("the end-to-end model is volumetric (dims=3)")
        bad = config_violations(self.side, self.patch, self.window, self.embed, self.heads, self.layers)
        if bad:
            raise ValueError("; ".join(bad))

    @property
    def grid_side(self) -> int:
        return self.side // self.patch

    @property
    def head_dim(self) -> int:
        return self.embed // self.heads

    @property
    def n_cells(self) -> int:
        return self.grid_side**self.dims

    @property
    def bias_entries(self) -> int:
        return (2 * self.window - 1) ** self.dims


@dataclass(frozen=True)
class FeatureGrid:
    """Lattice of E-dimensional feature vectors, one per patch cell."""

    dims: int
    grid_side: int
    embed_dim: int
    data: np.ndarray  # (M,)*D + (E,)

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.shape != (self.grid_side,) * self.dims + (self.embed_dim,):
            raise ValueError(f"feature grid shape {arr.shape} inconsistent with metadata")
        if not np.all(np.isfinite(arr)):
            raise ValueError("feature grid contains non-finite values")
        object.__setattr__(self, "data", arr)

    def cells(self) -> np.ndarray:
        return self.data.reshape(-1, self.embed_dim)


@dataclass
class LayerParams:
    """One residual sub-block: attention weights plus the feature block."""

    ln_attn_g: Tensor
    ln_attn_b: Tensor
    wq: Tensor  # (H, E, dh)
    bq: Tensor  # (H, dh)
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    bias_table: Tensor  # ((2W-1)**D, H)
    ln_head_g: Tensor
    ln_head_b: Tensor
    w_out: Tensor  # (E, E)
    b_out: Tensor
    ln_f1_g: Tensor
    ln_f1_b: Tensor
    w_fc1: Tensor  # (E, 4E)
    b_fc1: Tensor
    ln_f2_g: Tensor
    ln_f2_b: Tensor
    w_fc2: Tensor  # (4E, E)
    b_fc2: Tensor

    @property
    def heads(self) -> int:
        return self.bq.shape[0]

    def named(self, prefix: str):
        for name in _LAYER_FIELDS:
            yield f"{prefix}.{name}", getattr(self, name)


_LAYER_FIELDS = [
    "ln_attn_g", "ln_attn_b",
    "wq", "bq", "wk", "bk", "wv", "bv",
    "bias_table",
    "ln_head_g", "ln_head_b", "w_out", "b_out",
    "ln_f1_g", "ln_f1_b", "w_fc1", "b_fc1",
    "ln_f2_g", "ln_f2_b", "w_fc2", "b_fc2",
]


@dataclass
class ModelParams:
    config: ModelConfig
    h1_w: Tensor  # (P**3, E)
    h1_b: Tensor
    layers: list[LayerParams]
    final_ln_g: Tensor
    final_ln_b: Tensor
    h2_w: Tensor  # (E, P**3)
    h2_b: Tensor

    def named_tensors(self):
        """(name, tensor) pairs in fixed declaration order (the checkpoint order)."""
        yield "h1_w", self.h1_w
        yield "h1_b", self.h1_b
        for i, layer in enumerate(self.layers):
            yield from layer.named(f"layer{i}")
        yield "final_ln_g", self.final_ln_g
        yield "final_ln_b", self.final_ln_b
        yield "h2_w", self.h2_w
        yield "h2_b", self.h2_b

    def zero_grad(self):
        for _, t in self.named_tensors():
            t.zero_grad()

    def astype(self, dtype) -> "ModelParams":
        return _map_params(self, lambda arr: arr.astype(dtype))


def _map_params(params: ModelParams, fn) -> ModelParams:
    def remap(t: Tensor) -> Tensor:
        return Tensor.param(fn(t.data))

    layers = [
        LayerParams(**{name: remap(getattr(lp, name)) for name in _LAYER_FIELDS})
        for lp in params.layers
    ]
    return ModelParams(
        config=params.config,
        h1_w=remap(params.h1_w),
        h1_b=remap(params.h1_b),
        layers=layers,
        final_ln_g=remap(params.final_ln_g),
        final_ln_b=remap(params.final_ln_b),
        h2_w=remap(params.h2_w),
        h2_b=remap(params.h2_b),
    )


def init_params(config: ModelConfig, seed: int, dtype=np.float32) -> ModelParams:
    """Seeded initialization: affine weights ~ N(0, 1/fan_in), biases and
    relative-bias tables zero, layer-norm affines at (1, 0)."""
    rng = np.random.default_rng(seed)
    e, dh, h = config.embed, config.head_dim, config.heads
    p3 = config.patch**3

    def w(shape, fan_in):
        return Tensor.param(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape).astype(dtype))

    def zeros(shape):
        return Tensor.param(np.zeros(shape, dtype=dtype))

    def ones(shape):
        return Tensor.param(np.ones(shape, dtype=dtype))

    def make_layer() -> LayerParams:
        return LayerParams(
            ln_attn_g=ones(e), ln_attn_b=zeros(e),
            wq=w((h, e, dh), e), bq=zeros((h, dh)),
            wk=w((h, e, dh), e), bk=zeros((h, dh)),
            wv=w((h, e, dh), e), bv=zeros((h, dh)),
            bias_table=zeros((config.bias_entries, h)),
            ln_head_g=ones(e), ln_head_b=zeros(e),
            w_out=w((e, e), e), b_out=zeros(e),
            ln_f1_g=ones(e), ln_f1_b=zeros(e),
            w_fc1=w((e, 4 * e), e), b_fc1=zeros(4 * e),
            ln_f2_g=ones(4 * e), ln_f2_b=zeros(4 * e),
            w_fc2=w((4 * e, e), 4 * e), b_fc2=zeros(e),
        )

    return ModelParams(
        config=config,
        h1_w=w((p3, e), p3),
        h1_b=zeros(e),
        layers=[make_layer() for _ in range(config.layers)],
        final_ln_g=ones(e),
        final_ln_b=zeros(e),
        h2_w=w((e, p3), e),
        h2_b=zeros(p3),
    )


# -- window bookkeeping -------------------------------------------------------------


@lru_cache(maxsize=64)
def relative_bias_index(window: int, dims: int) -> np.ndarray:
    """(T, T) lookup into the flat (2W-1)**D bias table, T = W**D.

    Cell j of a window carries the lattice coordinate unravel(j, (W,)*D); the
    entry for (i, j) encodes the clamped per-axis offset coord_i - coord_j.
    """
    t = window**dims
    coords = np.stack(np.unravel_index(np.arange(t), (window,) * dims), axis=1)
    delta = coords[:, None, :] - coords[None, :, :]
    delta = np.clip(delta, -(window - 1), window - 1) + (window - 1)
    idx = np.zeros((t, t), dtype=np.int64)
    for axis in range(dims):
        idx = idx * (2 * window - 1) + delta[:, :, axis]
    return idx


# -- core blocks (autodiff tensors, flat (N, E) cells) --------------------------------


def _project(flat: Tensor, weight: Tensor, bias: Tensor, heads: int, n_win: int, wlen: int) -> Tensor:
    """(G*T, E) -> (G, H, T, dh) through per-head projections."""
    e = weight.shape[1]
    dh = weight.shape[2]
    w_mat = ad.reshape(ad.transpose(weight, (1, 0, 2)), (e, heads * dh))
    out = ad.add(ad.matmul(flat, w_mat), ad.reshape(bias, (heads * dh,)))
    return ad.transpose(ad.reshape(out, (n_win, wlen, heads, dh)), (0, 2, 1, 3))


def _attention_core(windows: Tensor, layer: LayerParams, window_len: int, dims: int) -> Tensor:
    """Self-attention within each (already gathered) window: (G, T, E) -> (G, T, E)."""
    n_win, wlen, e = windows.shape
    heads = layer.heads
    dh = e // heads
    scale = 1.0 / float(np.sqrt(dh))

    xn = ad.layer_norm(windows, layer.ln_attn_g, layer.ln_attn_b)
    flat = ad.reshape(xn, (n_win * wlen, e))
    q = _project(flat, layer.wq, layer.bq, heads, n_win, wlen)
    k = _project(flat, layer.wk, layer.bk, heads, n_win, wlen)
    v = _project(flat, layer.wv, layer.bv, heads, n_win, wlen)

    scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), scale)
    idx = relative_bias_index(window_len, dims)
    bias = ad.take0(layer.bias_table, idx.reshape(-1))  # (T*T, H)
    bias = ad.transpose(ad.reshape(bias, (wlen, wlen, heads)), (2, 0, 1))
    scores = ad.add(scores, ad.reshape(bias, (1, heads, wlen, wlen)))

    attn = ad.softmax(scores, axis=-1)
    ctx = ad.matmul(attn, v)  # (G, H, T, dh)
    merged = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (n_win * wlen, e))
    head_in = ad.layer_norm(merged, layer.ln_head_g, layer.ln_head_b)
    out = ad.add(ad.matmul(head_in, layer.w_out), layer.b_out)
    return ad.reshape(out, (n_win, wlen, e))


def _attention_gather(cells: Tensor, layer: LayerParams, ids: WindowIdMap) -> Tensor:
    order, inverse = gather_order(ids)
    n_win, wlen = ids.n_windows, ids.cells_per_window
    e = cells.shape[1]
    windows = ad.reshape(ad.take0(cells, order), (n_win, wlen, e))
    out = _attention_core(windows, layer, ids.window_len, ids.dims)
    return ad.take0(ad.reshape(out, (n_win * wlen, e)), inverse)


def _attention_compact(cells: Tensor, layer: LayerParams, m: int, w: int, d: int) -> Tensor:
    """Global-to-local attention via the permute-once route: relocate features
    with the inverse global-to-local table, attend over now-contiguous
    W-blocks, relocate back."""
    table = invert_g2l(m, w, d)
    e = cells.shape[1]
    blocks = m // w
    n_win, wlen = blocks**d, w**d
    split = (blocks, w) * d
    to_blocks = tuple(2 * i for i in range(d)) + tuple(2 * i + 1 for i in range(d)) + (2 * d,)
    from_blocks = tuple(int(a) for a in np.argsort(to_blocks))

    y = ad.take0(cells, table.inverse)  # compactify
    y = ad.transpose(ad.reshape(y, split + (e,)), to_blocks)
    y = ad.reshape(y, (n_win, wlen, e))
    out = _attention_core(y, layer, w, d)
    out = ad.reshape(out, (blocks,) * d + (w,) * d + (e,))
    out = ad.reshape(ad.transpose(out, from_blocks), (m**d, e))
    return ad.take0(out, table.forward)  # decompactify


def _feature_block(cells: Tensor, layer: LayerParams) -> Tensor:
    h = ad.layer_norm(cells, layer.ln_f1_g, layer.ln_f1_b)
    h = ad.add(ad.matmul(h, layer.w_fc1), layer.b_fc1)
    h = ad.gelu(h)
    h = ad.layer_norm(h, layer.ln_f2_g, layer.ln_f2_b)
    return ad.add(ad.matmul(h, layer.w_fc2), layer.b_fc2)


@lru_cache(maxsize=16)
def _id_maps(m: int, w: int, d: int) -> tuple[WindowIdMap, WindowIdMap]:
    return w_msa_ids(m, w, d), g2l_ids(m, w, d)


def _chain(cells: Tensor, params: ModelParams, g2l_route: str) -> Tensor:
    cfg = params.config
    wmap, gmap = _id_maps(cfg.grid_side, cfg.window, cfg.dims)
    z = cells
    for index, layer in enumerate(params.layers):
        odd = index % 2 == 0  # 1-based sub-block numbering: first sub-block is odd
        if odd:
            a = _attention_gather(z, layer, wmap)
        elif g2l_route == "compact":
            a = _attention_compact(z, layer, cfg.grid_side, cfg.window, cfg.dims)
        else:
            a = _attention_gather(z, layer, gmap)
        z = ad.add(z, _feature_block(a, layer))
    return z


def _forward_cells(patch_vectors: Tensor, params: ModelParams, g2l_route: str = "compact") -> Tensor:
    """(N, P**3) patch vectors -> (N, P**3) reconstructed patch vectors."""
    z = ad.add(ad.matmul(patch_vectors, params.h1_w), params.h1_b)
    z = _chain(z, params, g2l_route)
    z = ad.layer_norm(z, params.final_ln_g, params.final_ln_b)
    return ad.add(ad.matmul(z, params.h2_w), params.h2_b)


# -- public operations on domain types ------------------------------------------------


def embed(grid: PatchGrid, params: ModelParams) -> FeatureGrid:
    """Shared affine projection of every flattened patch to E dimensions."""
    cfg = params.config
    if grid.patch_len != cfg.patch or grid.grid_side != cfg.grid_side:
        raise ValueError(
            f"patch grid (M={grid.grid_side}, P={grid.patch_len}) does not match "
            f"model config (M={cfg.grid_side}, P={cfg.patch})"
        )
    with ad.no_grad():
        out = ad.add(ad.matmul(Tensor(grid.data.reshape(-1, cfg.patch**3)), params.h1_w), params.h1_b)
    return FeatureGrid(cfg.dims, cfg.grid_side, cfg.embed, out.data.reshape((cfg.grid_side,) * cfg.dims + (cfg.embed,)))


def window_attention(x: FeatureGrid, ids: WindowIdMap, layer: LayerParams) -> FeatureGrid:
    """Windowed multi-head self-attention with relative positional bias."""
    if ids.grid_side != x.grid_side or ids.dims != x.dims:
        raise ValueError("window id map does not match the feature grid")
    if x.embed_dim % layer.heads != 0:
        raise ValueError(f"head count {layer.heads} must divide embed dim {x.embed_dim}")
    with ad.no_grad():
        out = _attention_gather(Tensor(x.cells()), layer, ids)
    return FeatureGrid(x.dims, x.grid_side, x.embed_dim, out.data.reshape(x.data.shape))


def feature_block(x: FeatureGrid, layer: LayerParams) -> FeatureGrid:
    """Per-cell norm - dense(E->4E) - GeLU - norm - dense(4E->E) sequence."""
    with ad.no_grad():
        out = _feature_block(Tensor(x.cells()), layer)
    return FeatureGrid(x.dims, x.grid_side, x.embed_dim, out.data.reshape(x.data.shape))


def residual_chain(z0: FeatureGrid, params: ModelParams, g2l_route: str = "compact") -> FeatureGrid:
    """Depth-L chain z <- z + F(A(z)), alternating window schemes."""
    cfg = params.config
    if z0.grid_side != cfg.grid_side or z0.embed_dim != cfg.embed:
        raise ValueError("feature grid does not match model config")
    with ad.no_grad():
        out = _chain(Tensor(z0.cells()), params, g2l_route)
    return FeatureGrid(z0.dims, z0.grid_side, z0.embed_dim, out.data.reshape(z0.data.shape))


def forward(v: Volume, params: ModelParams, g2l_route: str = "compact") -> Volume:
    """Full dense prediction: patchify, embed, residual chain, unembed, reassemble."""
    cfg = params.config
    if v.side != cfg.side:
        raise ValueError(f"volume side {v.side} does not match model side {cfg.side}")
    if g2l_route not in ("compact", "gather"):
        raise ValueError(f"unknown g2l route {g2l_route!r}")
    grid = patchify(v, cfg.patch)
    dtype = params.h1_w.dtype
    with ad.no_grad():
        cells = Tensor(grid.data.reshape(-1, cfg.patch**3).astype(dtype))
        out = _forward_cells(cells, params, g2l_route)
    data = out.data.astype(np.float32).reshape(grid.data.shape)
    return unpatchify(PatchGrid(cfg.grid_side, cfg.patch, data))


# -- checkpoint I/O -------------------------------------------------------------------


def save_checkpoint(params: ModelParams, path) -> None:
    """Binary checkpoint: magic, format version, config record, then every
    parameter tensor in declaration order as length-prefixed float32."""
    cfg = params.config
    buf = bytearray()
    buf += CKPT_MAGIC
    buf += struct.pack("<I", CKPT_VERSION)
    buf += struct.pack(
        "<7I", cfg.side, cfg.patch, cfg.window, cfg.embed, cfg.heads, cfg.layers, cfg.dims
    )
    for _, tensor in params.named_tensors():
        flat = np.ascontiguousarray(tensor.data, dtype="<f4").reshape(-1)
        buf += struct.pack("<I", flat.size)
        buf += flat.tobytes()
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path) -> ModelParams:
    raw = Path(path).read_bytes()
    if len(raw) < 40 or raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"bad magic in checkpoint {path!s}")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != CKPT_VERSION:
        raise CheckpointError(
            f"checkpoint-version mismatch in {path!s}: file has {version}, expected {CKPT_VERSION}"
        )
    vals = struct.unpack("<7I", raw[8:36])
    cfg = ModelConfig(*vals)
    params = init_params(cfg, seed=0)
    offset = 36
    for name, tensor in params.named_tensors():
        if offset + 4 > len(raw):
            raise CheckpointError(f"truncated checkpoint {path!s} at tensor {name}")
        (count,) = struct.unpack("<I", raw[offset : offset + 4])
        offset += 4
        if count != tensor.data.size:
            raise CheckpointError(
                f"tensor {name} length mismatch in {path!s}: file has {count}, expected {tensor.data.size}"
            )
        end = offset + 4 * count
        if end > len(raw):
            raise CheckpointError(f"truncated checkpoint {path!s} at tensor {name}")
        tensor.data = np.frombuffer(raw[offset:end], dtype="<f4").reshape(tensor.data.shape).copy()
        offset = end
    if offset != len(raw):
        raise CheckpointError(f"trailing bytes in checkpoint {path!s}")
    return params
