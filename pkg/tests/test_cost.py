import csv
import io

import numpy as np
import pytest

from tntprune.allocator import init_allocator
from tntprune.cost import (
    REFERENCE_GFLOPS, PRESETS, dense_profile, flops_estimate, layer_macs, throughput_measure, time_callable,
)
from tntprune.errors import ConfigError
from tntprune.pruning import PruneSchedule, apply_schedule
from tntprune.rng import RngStream
from tntprune.vit import ModelConfig, init_params


@pytest.mark.parametrize("name,tol", [("deit-b-distil", 0.01), ("deit-s-distil", 0.01), ("vit16-768", 0.015)])
def test_published_anchors(name, tol):
    cfg = PRESETS[name]
    got = flops_estimate(cfg, dense_profile(cfg)).total_gflops
    assert abs(got - REFERENCE_GFLOPS[name]) / REFERENCE_GFLOPS[name] < tol


def test_preset_shapes():
    b = PRESETS["deit-b-distil"]
    assert (b.dim, b.depth, b.mlp_dim, b.seq_len, b.num_classes) == (768, 12, 3072, 198, 1000)
    assert PRESETS["deit-s-distil"].seq_len == 198 and PRESETS["deit-s-distil"].dim == 384
    v = PRESETS["vit16-768"]
    assert v.mlp_dim == v.dim == 768 and v.seq_len == 197


def test_layer_formula_by_hand():
    l = layer_macs(3, 4, 5)
    assert (l.qkv, l.scores, l.values, l.proj, l.mlp) == (144, 36, 36, 48, 120)
    assert l.total == 384


def test_fixed_costs():
    cfg = ModelConfig(image_size=8, patch_size=4, channels=3, dim=4, depth=1, heads=1, mlp_dim=5, num_classes=7)
    rep = flops_estimate(cfg, [5])
    assert rep.patch_embed == 4 * 4 * 48
    assert rep.head == 28
    assert rep.total_macs == layer_macs(5, 4, 5).total + 768 + 28


def test_additivity():
    cfg = PRESETS["deit-s-distil"]
    prof = [198, 198, 198, 150, 120, 100, 99, 99, 80, 80, 60, 50]
    rep = flops_estimate(cfg, prof)
    fixed = rep.patch_embed + rep.head
    assert rep.total_macs == sum(layer_macs(n, cfg.dim, cfg.mlp_dim).total for n in prof) + fixed
    assert rep.total_macs == sum(flops_estimate(cfg, [n if i == j else 0 for i in range(12)]).total_macs - fixed
                                 for j, n in enumerate(prof)) + fixed


def test_monotonicity():
    cfg = PRESETS["deit-s-distil"]
    base = [120] * 12
    ref = flops_estimate(cfg, base).total_macs
    for i in range(12):
        bumped = list(base)
        bumped[i] += 1
        assert flops_estimate(cfg, bumped).total_macs > ref
    small = ModelConfig(image_size=32, patch_size=4, dim=32, depth=4, heads=4, mlp_dim=64)
    tot = lambda c: flops_estimate(c, dense_profile(c)).total_macs
    assert tot(small) < tot(ModelConfig(image_size=32, patch_size=4, dim=36, depth=4, heads=4, mlp_dim=64))
    assert tot(small) < tot(ModelConfig(image_size=32, patch_size=4, dim=32, depth=4, heads=4, mlp_dim=65))
    assert tot(small) < tot(ModelConfig(image_size=32, patch_size=4, dim=32, depth=5, heads=4, mlp_dim=64))


def test_length_mismatch():
    with pytest.raises(ConfigError):
        flops_estimate(PRESETS["vit16-768"], [197] * 11)


def test_allocator_cost_reported_separately():
    cfg = PRESETS["deit-b-distil"]
    dense = flops_estimate(cfg, dense_profile(cfg))
    rep = flops_estimate(cfg, dense_profile(cfg), allocator_tokens=[196])
    assert rep.allocator == 196 * 768
    assert rep.total_macs - dense.total_macs == 196 * 768
    assert rep.allocator / rep.total_macs < 1e-4


def test_csv_layout():
    cfg = ModelConfig(image_size=8, patch_size=4, dim=4, depth=2, heads=1, mlp_dim=4)
    rep = flops_estimate(cfg, [5, 3], allocator_tokens=[4])
    rows = list(csv.reader(io.StringIO(rep.to_csv())))
    assert rows[0] == ["layer", "tokens", "qkv", "scores", "values", "proj", "mlp", "total_macs"]
    assert rows[1][:2] == ["0", "5"] and rows[2][:2] == ["1", "3"]
    assert [r[0] for r in rows[3:]] == ["patch_embed", "head", "allocator", "total"]
    assert int(rows[-1][-1]) == rep.total_macs


def test_pruned_profile_orders_gflops():
    cfg = ModelConfig(image_size=56, patch_size=4, channels=1, dim=8, depth=4, heads=2, mlp_dim=8)
    params = init_params(cfg, RngStream(0))
    alloc = init_allocator(cfg, range(4), RngStream(1))
    images = np.random.default_rng(0).normal(size=(1, 1, 56, 56))
    prev = None
    for keep in (196, 150, 98, 40):
        res = apply_schedule(params, alloc, images, PruneSchedule(locations=(2,), keep_counts=(keep,)))
        g = flops_estimate(cfg, res.tokens_per_layer).total_macs
        if prev is not None:
            assert g < prev
        prev = g


def test_time_callable_needs_five_windows():
    with pytest.raises(ConfigError):
        time_callable(lambda: None, 1, 1, iters=4)
    rep = time_callable(lambda: sum(range(1000)), 10, 10, warmup=0, iters=5)
    assert len(rep.windows) == 5 and rep.images_per_second == sorted(rep.windows)[2]


@pytest.fixture(scope="module")
def toy():
    cfg = ModelConfig(image_size=32, patch_size=4, dim=64, depth=4, heads=4, mlp_dim=128)
    params = init_params(cfg, RngStream(0))
    alloc = init_allocator(cfg, range(4), RngStream(1))
    images = np.random.default_rng(0).normal(size=(64, 3, 32, 32))
    return params, alloc, images


def test_throughput_halving_tokens_is_faster(toy):
    params, alloc, images = toy
    dense = throughput_measure(params, None, None, images, batch=64, iters=5)
    half = throughput_measure(params, alloc, PruneSchedule(locations=(1,), keep_counts=(32,)), images, batch=64, iters=5)
    assert half.images_per_second > dense.images_per_second


def test_throughput_keep_all_overhead_bounded(toy):
    params, alloc, images = toy
    sched = PruneSchedule(locations=(1,), rates=(1.0,))
    ratios = []
    for _ in range(3):
        dense = throughput_measure(params, None, None, images, batch=64, iters=7)
        keep = throughput_measure(params, alloc, sched, images, batch=64, iters=7)
        ratios.append(keep.images_per_second / dense.images_per_second)
        if 0.9 <= ratios[-1] <= 1.1:
            break
    assert 0.9 <= ratios[-1] <= 1.1, ratios
