"""Micro-benchmarks for window assembly and attention-layer evaluation.

Every comparison verifies that the paths produce equal outputs before any
timing is reported: bit-exact for the two window-assembly strategies,
1e-6 relative for attention. Timings are the median of warm repetitions
(at least five) after one discarded warm-up run.
"""
from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import LayerParams, ModelConfig, _attention_gather, init_params, relative_bias_index
from .windows import WindowIdMap, g2l_ids, gather_order, invert_g2l, window_ids

MIN_REPS = 5


@dataclass(frozen=True)
class BenchResult:
    label: str
    reps: int
    median_s: float
    cells_per_s: float

    def format(self) -> str:
        return f"{self.label:<28} {self.median_s * 1e6:>12.1f} us {self.cells_per_s:>14.0f} cells/s"


def _time_median(fn, reps: int) -> float:
    if reps < MIN_REPS:
        raise ValueError(f"repetitions must be >= {MIN_REPS}, got {reps}")
    fn()  # warm-up, discarded
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def _block_assembly_plan(m: int, w: int, d: int):
    blocks = m // w
    split = (blocks, w) * d
    to_blocks = tuple(2 * i for i in range(d)) + tuple(2 * i + 1 for i in range(d)) + (2 * d,)
    return split, to_blocks


def bench_permute(m: int, w: int, d: int, e: int, reps: int = 9) -> tuple[BenchResult, BenchResult]:
    """Time gather-based vs permute-once (compactified) window assembly for
    global-to-local windows on the same random feature grid."""
    ids = g2l_ids(m, w, d)
    order, _ = gather_order(ids)
    table = invert_g2l(m, w, d)
    split, to_blocks = _block_assembly_plan(m, w, d)
    n_win, wlen = ids.n_windows, ids.cells_per_window
    x = np.random.default_rng(0).random((m**d, e), dtype=np.float32)

    def gather_path():
        return x[order].reshape(n_win, wlen, e)

    def compact_path():
        y = x[table.inverse]
        return y.reshape(split + (e,)).transpose(to_blocks).reshape(n_win, wlen, e)

    if not np.array_equal(gather_path(), compact_path()):
        raise AssertionError("window assembly paths disagree; refusing to time")

    cells = m**d
    out = []
    for label, fn in (("g2l-assembly/gather", gather_path), ("g2l-assembly/compact", compact_path)):
        med = _time_median(fn, reps)
        out.append(BenchResult(label, reps, med, cells / med))
    return out[0], out[1]


def _layer_norm_np(x, gamma, beta):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-5) * gamma + beta


def attention_windows_np(windows: np.ndarray, layer: LayerParams, window_len: int, dims: int) -> np.ndarray:
    """Plain-numpy twin of the engine attention core for (G, T, E) windows."""
    g, t, e = windows.shape
    h = layer.heads
    dh = e // h
    scale = 1.0 / float(np.sqrt(dh))

    xn = _layer_norm_np(windows, layer.ln_attn_g.data, layer.ln_attn_b.data)
    flat = xn.reshape(-1, e)

    def proj(wt, bt):
        mat = wt.data.transpose(1, 0, 2).reshape(e, h * dh)
        return (flat @ mat + bt.data.reshape(-1)).reshape(g, t, h, dh).transpose(0, 2, 1, 3)

    q = proj(layer.wq, layer.bq)
    k = proj(layer.wk, layer.bk)
    v = proj(layer.wv, layer.bv)
    scores = np.matmul(q, k.transpose(0, 1, 3, 2)) * scale
    idx = relative_bias_index(window_len, dims)
    bias = layer.bias_table.data[idx.reshape(-1)].reshape(t, t, h).transpose(2, 0, 1)
    scores = scores + bias[None]
    scores = scores - scores.max(axis=-1, keepdims=True)
    p = np.exp(scores)
    p = p / p.sum(axis=-1, keepdims=True)
    ctx = np.matmul(p, v).transpose(0, 2, 1, 3).reshape(-1, e)
    cn = _layer_norm_np(ctx, layer.ln_head_g.data, layer.ln_head_b.data)
    return (cn @ layer.w_out.data + layer.b_out.data).reshape(g, t, e)


def _attention_np_full(x: np.ndarray, layer: LayerParams, ids: WindowIdMap, threads: int = 1) -> np.ndarray:
    order, inverse = gather_order(ids)
    n_win, wlen = ids.n_windows, ids.cells_per_window
    e = x.shape[1]
    windows = x[order].reshape(n_win, wlen, e)
    if threads <= 1 or n_win < 2 * threads:
        out = attention_windows_np(windows, layer, ids.window_len, ids.dims)
    else:
        chunks = np.array_split(np.arange(n_win), threads)
        out = np.empty_like(windows)
        with ThreadPoolExecutor(max_workers=threads) as pool:
            def work(sel):
                out[sel] = attention_windows_np(windows[sel], layer, ids.window_len, ids.dims)
            list(pool.map(work, chunks))
    return out.reshape(-1, e)[inverse]


def bench_attention_layer(
    config: ModelConfig, reps: int = 9, parallel: bool = False, threads: int = 1
) -> tuple[BenchResult, BenchResult, BenchResult]:
    """Time one attention sub-block under each window scheme on one input."""
    m, w, d = config.grid_side, config.window, config.dims
    params = init_params(config, seed=7)
    layer = params.layers[0]
    rng = np.random.default_rng(1)
    x = rng.normal(0.0, 1.0, size=(m**d, config.embed)).astype(np.float32)
    n_threads = max(1, threads)

    results = []
    for kind in ("w", "sw", "g2l"):
        ids = window_ids(kind, m, w, d)
        with ad.no_grad():
            engine_out = _attention_gather(Tensor(x), layer, ids).data
        np_out = _attention_np_full(x, layer, ids, threads=1)
        scale = max(1.0, float(np.abs(engine_out).max()))
        if np.abs(engine_out - np_out).max() > 1e-6 * scale:
            raise AssertionError(f"attention paths disagree for scheme {kind}; refusing to time")
        if parallel:
            par_out = _attention_np_full(x, layer, ids, threads=n_threads)
            if np.abs(np_out - par_out).max() > 1e-6 * scale:
                raise AssertionError(f"parallel path disagrees for scheme {kind}; refusing to time")
            fn = lambda ids=ids: _attention_np_full(x, layer, ids, threads=n_threads)
        else:
            def fn(ids=ids):
                with ad.no_grad():
                    _attention_gather(Tensor(x), layer, ids)
        med = _time_median(fn, reps)
        results.append(BenchResult(f"attention/{kind}-msa", reps, med, (m**d) / med))
    return tuple(results)


def format_bench_table(results) -> list[str]:
    header = f"{'scenario':<28} {'median':>15} {'throughput':>21}"
    return [header] + [r.format() for r in results]
