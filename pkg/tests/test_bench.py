import numpy as np
import pytest

from volrac.bench import (
    BenchResult,
    attention_windows_np,
    bench_attention_layer,
    bench_permute,
    format_bench_table,
)
from volrac.model import ModelConfig


def test_bench_permute_smoke_and_equality():
    # Full-size smoke: M=16, D=3, E=32 completes with positive throughput.
    gather, compact = bench_permute(16, 4, 3, 32, reps=5)
    for r in (gather, compact):
        assert r.reps == 5
        assert r.median_s > 0.0
        assert r.cells_per_s > 0.0
    assert gather.label != compact.label


def test_bench_minimum_reps_enforced():
    with pytest.raises(ValueError, match=">= 5"):
        bench_permute(8, 2, 2, 8, reps=3)


def test_bench_attention_all_schemes_positive_throughput():
    cfg = ModelConfig(side=16, patch=4, window=2, embed=8, heads=2, layers=2)
    results = bench_attention_layer(cfg, reps=5)
    assert len(results) == 3
    labels = {r.label for r in results}
    assert labels == {"attention/w-msa", "attention/sw-msa", "attention/g2l-msa"}
    for r in results:
        assert r.median_s > 0.0 and r.cells_per_s > 0.0


def test_bench_attention_parallel_path_agrees():
    cfg = ModelConfig(side=16, patch=4, window=2, embed=8, heads=2, layers=2)
    # equality against the engine path is asserted inside; a disagreement raises
    results = bench_attention_layer(cfg, reps=5, parallel=True, threads=2)
    assert len(results) == 3


def test_w_and_g2l_process_identical_cell_counts():
    cfg = ModelConfig(side=32, patch=4, window=2, embed=8, heads=2, layers=2)
    from volrac.windows import g2l_ids, w_msa_ids

    w = w_msa_ids(cfg.grid_side, cfg.window, 3)
    g = g2l_ids(cfg.grid_side, cfg.window, 3)
    assert w.n_windows == g.n_windows
    assert w.cells_per_window == g.cells_per_window


def test_format_table():
    rows = [BenchResult("x", 5, 1e-4, 1e6)]
    lines = format_bench_table(rows)
    assert "scenario" in lines[0]
    assert "x" in lines[1] and "cells/s" in lines[1]


def test_g2l_layer_cost_within_factor_two_of_w_msa():
    # Identical window populations; the permutation is the only extra work.
    cfg = ModelConfig(side=64, patch=4, window=4, embed=32, heads=4, layers=2)
    w_res, _, g_res = bench_attention_layer(cfg, reps=7)
    assert g_res.median_s <= 2.0 * w_res.median_s
