import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vfmsim.diffusion import heun_sample
from vfmsim.dit import DiTConfig, dit_forward, gelu, init_params, multihead_attention
from vfmsim.numerics import ContractError, SeededRng
from vfmsim.parallel import (
    CollectiveTrace, DeviceGrid, GuidedDiT, PPSchedule, ShardedTensor, StditLayout, Variant, all_gather, all_reduce,
    all_to_all, cp_parallel_denoise, init_stdit_params, pp_execute, reduce_scatter, ring_attention_cp,
    stdit_layer_forward, stdit_layer_reference, stdit_transition, tp_linear_forward,
)
from vfmsim.planner.model import cp_inference_kv_bytes, sampler_evals

CFG = DiTConfig(layers=4, hidden=16, heads=4, cross_dim=8, patch_dim=4)


# --- mesh and collectives ---------------------------------------------------------------------

def test_grid_parse_and_validation():
    assert DeviceGrid.parse("2,1,4,8") == DeviceGrid(2, 1, 4, 8)
    assert DeviceGrid.parse("2,1,4,8").size == 64
    with pytest.raises(ContractError):
        DeviceGrid.parse("2,2")
    with pytest.raises(ContractError):
        DeviceGrid(0, 1, 1, 1)


def test_all_gather_and_reduce_scatter(rng):
    x = rng.normal((8, 3))
    t = CollectiveTrace()
    g = all_gather(ShardedTensor.shard(x, 4), t, tag="g")
    assert all(np.array_equal(s, x) for s in g.shards)
    assert t.select("all_gather")[0].bytes == x.size * 8
    parts = [rng.split(i).normal((8, 3)) for i in range(4)]
    rs = reduce_scatter(parts, trace=t)
    assert np.allclose(rs.to_global(), sum(parts))
    assert rs.shards[0].shape == (2, 3)


def test_all_reduce_fixed_order_and_single_participant(rng):
    xs = [rng.split(i).normal((5,)) for i in range(3)]
    t = CollectiveTrace()
    out = all_reduce(xs, "tp", t)
    assert np.array_equal(out[0], (xs[0] + xs[1]) + xs[2])
    assert t.count("all_reduce") == 1
    t2 = CollectiveTrace()
    all_reduce(xs[:1], "tp", t2)
    assert t2.records == []


@settings(max_examples=20, deadline=None)
@given(st.sampled_from([1, 2, 4]), st.integers(0, 1000))
def test_all_to_all_round_trip(n, seed):
    x = SeededRng(seed).normal((4, 8, 3))
    a = ShardedTensor.shard(x, n, dim=1)
    b = all_to_all(a, split_dim=0, concat_dim=1)
    assert np.array_equal(b.to_global(), x)
    c = all_to_all(b, split_dim=1, concat_dim=0)
    assert all(np.array_equal(p, q) for p, q in zip(a.shards, c.shards))


def test_trace_jsonl(rng):
    t = CollectiveTrace()
    t.step = 3
    all_reduce([np.ones(2), np.ones(2)], "dp", t, tag="x")
    line = t.to_jsonl().strip()
    assert '"step": 3' in line and '"bytes": 16' in line


# --- ring attention ----------------------------------------------------------------------------

@pytest.mark.parametrize("cp", [1, 2, 4, 8])
def test_ring_attention_matches_serial(cp, rng):
    q, k, v = (rng.split(i).normal((2, 16, 2, 4)) for i in range(3))
    t = CollectiveTrace()
    outs = ring_attention_cp([p for p in np.split(q, cp, 1)], np.split(k, cp, 1), np.split(v, cp, 1), trace=t)
    ref = multihead_attention(q, k, v)
    assert np.max(np.abs(np.concatenate(outs, 1) - ref)) < 1e-12
    assert t.count("p2p") == cp - 1
    if cp > 1:
        assert t.total_bytes("p2p") == (cp - 1) * 2 * q.size * 8


def test_ring_attention_with_mask(rng):
    q, k, v = (rng.split(i).normal((1, 12, 1, 4)) for i in range(3))
    mask = rng.split(4).uniform((12, 12)) > 0.5
    mask[:, 0] = False
    mask[3] = False
    outs = ring_attention_cp(np.split(q, 3, 1), np.split(k, 3, 1), np.split(v, 3, 1), mask)
    ref = multihead_attention(q, k, v, mask)
    assert np.max(np.abs(np.concatenate(outs, 1) - ref)) < 1e-12


def test_ring_attention_bad_mask(rng):
    q = rng.normal((1, 8, 1, 2))
    with pytest.raises(ContractError):
        ring_attention_cp(np.split(q, 2, 1), np.split(q, 2, 1), np.split(q, 2, 1), np.ones((6, 6), bool))


# --- tensor parallel ----------------------------------------------------------------------------

@pytest.mark.parametrize("tp", [1, 2, 4])
def test_tp_linear(tp, rng):
    x, w1, w2 = rng.normal((3, 8)), rng.split(1).normal((8, 16)), rng.split(2).normal((16, 8))
    b1, b2 = rng.split(3).normal((16,)), rng.split(4).normal((8,))
    t = CollectiveTrace()
    out = tp_linear_forward(x, w1, w2, tp, t, b1, b2, gelu)
    assert np.max(np.abs(out - (gelu(x @ w1 + b1) @ w2 + b2))) < 1e-12
    assert t.count("all_reduce") == (tp > 1)
    with pytest.raises(ContractError):
        tp_linear_forward(x, w1, w2, 3)


# --- ST-DiT layouts -----------------------------------------------------------------------------

LAYOUT = StditLayout("FullSeq", b=2, h=2, w=2, t=4, d=4, cp=2)


def test_layout_local_shapes():
    assert LAYOUT.local_shape == (2, 8, 4)
    assert LAYOUT.to("Spatial").local_shape == (4, 4, 4)
    assert LAYOUT.to("Temporal").local_shape == (4, 4, 4)
    with pytest.raises(ContractError):
        StditLayout("Spatial", b=1, h=2, w=2, t=3, d=4, cp=2)


def test_layout_cycle_round_trip(rng):
    x = rng.normal((2, 16, 4))
    s, tm = LAYOUT.to(Variant.SPATIAL), LAYOUT.to(Variant.TEMPORAL)
    t = CollectiveTrace()
    a = stdit_transition(LAYOUT.shard(x), LAYOUT, s, t)
    assert np.array_equal(s.gather(a), x)
    b = stdit_transition(a, s, tm, t)
    assert np.array_equal(tm.gather(b), x)
    c = stdit_transition(b, tm, LAYOUT, t)
    assert all(np.array_equal(p, q) for p, q in zip(c.shards, LAYOUT.shard(x).shards))
    assert t.count("all_to_all") == 3
    with pytest.raises(ContractError):
        stdit_transition(LAYOUT.shard(x), LAYOUT, tm)


@pytest.mark.parametrize("mode,n_a2a", [("a2a", 3), ("ulysses", 12)])
def test_stdit_layer_modes(mode, n_a2a, rng):
    params = init_stdit_params(4, seed=1)
    x = rng.normal((2, 16, 4))
    ref = stdit_layer_reference(x, params, 2, t=4, hw=4)
    t = CollectiveTrace()
    out = stdit_layer_forward(LAYOUT.shard(x), params, 2, LAYOUT, t, mode)
    assert np.max(np.abs(LAYOUT.gather(out) - ref)) < 1e-12
    assert t.count("all_to_all") == n_a2a


# --- pipeline ---------------------------------------------------------------------------------

def test_gpipe_schedule():
    s = PPSchedule.gpipe(4, 8)
    assert s.ticks == 11
    assert s.bubble_fraction == pytest.approx(3 / 11)
    for stage in range(4):
        assert sorted(x for x in s.forward[stage] if x is not None) == list(range(8))
        assert s.idle_slots(stage) == 6


def _inputs(B=4, s=8):
    r = SeededRng(9)
    return r.normal((B, s, 4)), r.split(1).normal((B,)) * 0.3, r.split(2).normal((B, 3, 8))


@pytest.mark.parametrize("grid", ["1,1,1,1", "2,1,1,1", "1,2,1,1", "1,1,2,1", "1,1,1,2", "2,2,2,2", "4,4,4,1"])
def test_pp_execute_matches_serial(grid):
    params = init_params(CFG, 0)
    tok, c, text = _inputs()
    ref = dit_forward(params, CFG, tok, c, text)
    g = DeviceGrid.parse(grid)
    m = 2 if 4 % (2 * g.dp) == 0 else 1
    res = pp_execute(params, CFG, tok, c, text, g, microbatches=m)
    assert np.max(np.abs(res.output - ref)) < 1e-10


def test_pp_strategies_equal_outputs_and_byte_gap():
    params = init_params(CFG, 0)
    tok, c, text = _inputs()
    grid, m = DeviceGrid(1, 1, 4, 1), 2
    runs = {s: pp_execute(params, CFG, tok, c, text, grid, m, strategy=s) for s in ("communicate", "recompute")}
    assert np.array_equal(runs["communicate"].output, runs["recompute"].output)
    bm = 4 // m
    cond = bm * CFG.hidden + bm * 3 * CFG.cross_dim
    gap = runs["communicate"].trace.total_bytes("p2p") - runs["recompute"].trace.total_bytes("p2p")
    assert gap == (grid.pp - 1) * m * cond * 8
    assert runs["communicate"].cond_flops[1:] == [0, 0, 0]
    assert all(f > 0 for f in runs["recompute"].cond_flops)


def test_pp_execute_rejects_bad_grid():
    params = init_params(CFG, 0)
    tok, c, text = _inputs()
    with pytest.raises(ContractError):
        pp_execute(params, CFG, tok, c, text, DeviceGrid(1, 1, 3, 1))
    with pytest.raises(ContractError):
        pp_execute(params, CFG, tok, c, text, DeviceGrid(1, 3, 1, 1))


# --- context-parallel inference --------------------------------------------------------------------

def test_cp_denoise_matches_serial_and_kv_accounting():
    cfg = DiTConfig(layers=2, hidden=16, heads=2, cross_dim=8, patch_dim=4)
    params = init_params(cfg, 4)
    r = SeededRng(2)
    model = GuidedDiT(params, cfg, r.normal((3, 8)), cfg_scale=3.0)
    noise = r.split(1).normal((8, 4)) * 80
    steps = 4
    ref = heun_sample(model.denoise, noise, steps)
    t = CollectiveTrace()
    out = cp_parallel_denoise(model, noise, steps, DeviceGrid(cp=4), t)
    assert np.max(np.abs(out - ref)) < 1e-9
    # model and measurement of ring traffic agree
    assert t.total_bytes("p2p") == cp_inference_kv_bytes(cfg, 8, 4, evals=sampler_evals(steps))
    assert {rec.step for rec in t.select("p2p")} == set(range(steps))
