"""One test per acceptance criterion; each records a PASS/FAIL line shown at the end of the run."""

import itertools
import math
import time

import numpy as np
import pytest

from vfmsim.curation import Allocation, PipelineSpec, StageSpec, analytic_throughput, optimize_allocation, simulate
from vfmsim.data import (
    PackedSequence, Sample, build_packed_mask, dedup_assign_and_distribute, pack_sequences, pack_tokens, read_shards,
    write_shards,
)
from vfmsim.diffusion import EDMParams, heun_sample
from vfmsim.dit import DiTConfig, count_params, dit_forward, gelu, init_params, multihead_attention
from vfmsim.dit_backward import loss_and_grads, reference_loss
from vfmsim.numerics import SeededRng, reference_attention
from vfmsim.parallel import (
    CollectiveTrace, DeviceGrid, GuidedDiT, StditLayout, cp_parallel_denoise, init_stdit_params, pp_execute,
    ring_attention_cp, stdit_layer_forward, stdit_layer_reference, tp_linear_forward,
)
from vfmsim.planner.model import bubble_fraction, memory_model, strong_scaling
from vfmsim.planner.recommend import plan_family, recommend, stdit_strategy_compare
from vfmsim.planner.workloads import REFERENCE_WORKLOADS, HardwareProfile, ParallelPlan, stdit_strategy_cases

HW = HardwareProfile()
AXIS = (1, 2, 4)


def _toy_configs(n=3, seed=0):
    r = SeededRng(seed)
    out = []
    for i in range(n):
        q = r.split(i)
        hidden = int([16, 32, 64][int(q.integers(0, 3))])
        seq = int([16, 32, 64, 128][int(q.integers(0, 4))])
        out.append((DiTConfig(layers=4, hidden=hidden, heads=4, cross_dim=8, patch_dim=4), seq))
    return out


# 1 -----------------------------------------------------------------------------------------------

def test_c01_parallel_equivalence(criterion):
    t0 = time.perf_counter()
    worst = {}

    def note(kind, err):
        worst[kind] = max(worst.get(kind, 0.0), float(err))

    r = SeededRng(100)
    for ci, (cfg, seq) in enumerate(_toy_configs()):
        params = init_params(cfg, ci)
        B = 2
        tok, c, text = r.split(ci).normal((B, seq, 4)), r.split(ci + 10).normal((B,)), r.split(ci + 20).normal((B, 3, 8))
        ref = dit_forward(params, cfg, tok, c, text)
        q, k, v = (r.split(ci * 3 + j + 30).normal((B, seq, 4, cfg.head_dim)) for j in range(3))
        attn_ref = multihead_attention(q, k, v)
        x, w1, w2 = r.split(ci + 40).normal((seq, cfg.hidden)), r.split(ci + 41).normal((cfg.hidden, 4 * cfg.hidden)), \
            r.split(ci + 42).normal((4 * cfg.hidden, cfg.hidden))
        lin_ref = gelu(x @ w1) @ w2
        for tp, cp, pp in itertools.product(AXIS, AXIS, AXIS):
            grid = DeviceGrid(tp, cp, pp, 1)
            out = pp_execute(params, cfg, tok, c, text, grid, microbatches=2).output
            note("pp_execute", np.max(np.abs(out - ref)))
        for cp in AXIS:
            outs = ring_attention_cp(np.split(q, cp, 1), np.split(k, cp, 1), np.split(v, cp, 1))
            note("ring_attention", np.max(np.abs(np.concatenate(outs, 1) - attn_ref)))
        for tp in AXIS:
            note("tp_linear", np.max(np.abs(tp_linear_forward(x, w1, w2, tp, activation=gelu) - lin_ref)))

    sparams = init_stdit_params(16, seed=3)
    for cp in AXIS:
        layout = StditLayout("FullSeq", b=2, h=4, w=4, t=4, d=16, cp=cp)
        xs = r.split(50).normal((2, 64, 16))
        sref = stdit_layer_reference(xs, sparams, 4, t=4, hw=16)
        for mode in ("a2a", "ulysses"):
            got = layout.gather(stdit_layer_forward(layout.shard(xs), sparams, 4, layout, mode=mode))
            note("stdit_layer", np.max(np.abs(got - sref)))

    cfg = DiTConfig(layers=2, hidden=16, heads=4, cross_dim=8, patch_dim=4)
    model = GuidedDiT(init_params(cfg, 7), cfg, r.split(60).normal((3, 8)), cfg_scale=2.5)
    noise = r.split(61).normal((16, 4)) * model.edm.sigma_max
    dref = heun_sample(model.denoise, noise, 3)
    for tp, cp in itertools.product(AXIS, AXIS):
        got = cp_parallel_denoise(model, noise, 3, DeviceGrid(tp=tp, cp=cp))
        note("cp_parallel_denoise", np.max(np.abs(got - dref)) / max(1.0, np.max(np.abs(dref))))

    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) <= 1e-6 and elapsed < 120
    detail = ", ".join(f"{k} {v:.1e}" for k, v in sorted(worst.items())) + f"; {elapsed:.1f} s"
    criterion(1, ok, f"parallel == serial within 1e-6 ({detail})")
    assert ok, detail


# 2 -----------------------------------------------------------------------------------------------

def test_c02_stdit_accounting(criterion):
    layout = StditLayout("FullSeq", b=2, h=2, w=2, t=4, d=8, cp=2)
    x = SeededRng(2).normal((2, 16, 8))
    counts = {}
    for mode in ("a2a", "ulysses"):
        t = CollectiveTrace()
        stdit_layer_forward(layout.shard(x), init_stdit_params(8, 0), 2, layout, t, mode)
        counts[mode] = t.count("all_to_all")
    speed = {}
    for wl, plan in stdit_strategy_cases():
        speed.setdefault(wl.seq_len, []).append(stdit_strategy_compare(wl, plan, HW)["speedup"]["a2a"])
    long_ok = all(s > 1.5 for L, ss in speed.items() if L > 70000 for s in ss)
    short_ok = all(1.0 < s < 1.5 for L, ss in speed.items() if L < 70000 for s in ss)
    ok = counts == {"a2a": 3, "ulysses": 12} and long_ok and short_ok
    sp = "; ".join(f"{L}: " + ", ".join(f"{s:.2f}" for s in ss) for L, ss in sorted(speed.items()))
    criterion(2, ok, f"all-to-alls per layer a2a={counts['a2a']} ulysses={counts['ulysses']}; a2a speedup {sp}")
    assert ok


# 3 -----------------------------------------------------------------------------------------------

S_DATA = 0.5
EDM = EDMParams()


def _gauss_denoiser(x, sigma, cond):
    return x * S_DATA**2 / (S_DATA**2 + sigma * sigma)


def test_c03_heun_gaussian(criterion):
    t0 = time.perf_counter()
    z = SeededRng(0).normal((256,)) * EDM.sigma_max
    exact = z * S_DATA / math.sqrt(S_DATA**2 + EDM.sigma_max**2)
    steps = [8, 16, 32, 64]
    errs = [float(np.max(np.abs(heun_sample(_gauss_denoiser, z, n) - exact))) for n in steps]
    slope = float(np.polyfit(np.log(steps), np.log(errs), 1)[0])
    trials = SeededRng(0).normal((10_000,)) * EDM.sigma_max
    samples = heun_sample(_gauss_denoiser, trials, 64)
    var_err = abs(float(np.var(samples)) / S_DATA**2 - 1)
    gain = float(heun_sample(_gauss_denoiser, np.array([1.0]), 64)[0])
    gain_err = abs((gain * EDM.sigma_max) ** 2 / S_DATA**2 - 1)
    elapsed = time.perf_counter() - t0
    ok = abs(slope + 2) <= 0.3 and var_err <= 0.02 and gain_err <= 0.02 and elapsed < 60
    criterion(3, ok, f"slope {slope:.3f}; sample variance off by {100 * var_err:.2f}% "
                     f"(deterministic gain route {100 * gain_err:.2f}%); {elapsed:.1f} s")
    assert ok


# 4 -----------------------------------------------------------------------------------------------

def test_c04_gradient_check(criterion):
    cfg = DiTConfig(layers=1, hidden=8, heads=2, cross_dim=8, patch_dim=4)
    p = init_params(cfg, 0)
    r = SeededRng(42)
    x0, eps, text = r.normal((2, 6, 4)), r.split(1).normal((2, 6, 4)), r.split(2).normal((2, 3, 8))
    sigma = np.array([0.5, 1.5])
    _, grads = loss_and_grads(p, cfg, x0, eps, sigma, text)
    names = sorted(p)
    offsets = np.cumsum([0] + [p[n].size for n in names])
    picks = r.split(3).permutation(int(offsets[-1]))[:100]
    h = 1e-3
    floor = 1e-6  # gradients below this are compared absolutely (1e-11), well above stencil roundoff
    worst, tiny = 0.0, 0
    for flat_idx in picks:
        j = int(np.searchsorted(offsets, flat_idx, side="right") - 1)
        name, i = names[j], int(flat_idx - offsets[j])
        flat = p[name].reshape(-1)
        old = flat[i]

        def f(delta):
            flat[i] = old + delta
            val = reference_loss(p, cfg, x0, eps, sigma, text)
            flat[i] = old
            return val

        fd = (-f(2 * h) + 8 * f(h) - 8 * f(-h) + f(-2 * h)) / (12 * h)
        a = grads[name].reshape(-1)[i]
        tiny += max(abs(a), abs(fd)) < floor
        worst = max(worst, abs(a - fd) / max(abs(a), abs(fd), floor))
    ok = worst <= 1e-5
    criterion(4, ok, f"100 parameters, worst relative error {worst:.2e} ({tiny} below the {floor:g} floor)")
    assert ok


# 5 -----------------------------------------------------------------------------------------------

def _ffd_oracle(items, cap):
    order = sorted(range(len(items)), key=lambda i: (-items[i][1], i))
    bins, room = [], []
    for i in order:
        sid, n = items[i]
        for b in range(len(bins)):
            if room[b] >= n:
                bins[b].append(sid)
                room[b] -= n
                break
        else:
            bins.append([sid])
            room.append(cap - n)
    return bins


def test_c05_packing(criterion):
    r = SeededRng(5)
    lengths = r.integers(1, 513, shape=10_000).tolist()
    items = [(f"s{i}", n) for i, n in enumerate(lengths)]
    packs = list(pack_sequences(items, 1024, buffer_size=64))
    conserved = sum(p.total_len for p in packs) == sum(lengths)
    expect = []
    for w in range(0, len(items), 64):
        expect += _ffd_oracle(items[w:w + 64], 1024)
    ffd_ok = [[s.sample_id for s in p.segments] for p in packs] == expect
    worst = 0.0
    for trial in range(20):
        q = r.split(trial)
        lens = q.integers(1, 12, shape=4).tolist()
        pack = PackedSequence(48)
        toks = {}
        for k, n in enumerate(lens):
            pack.append(f"x{k}", n)
            toks[f"x{k}"] = q.split(k).normal((n, 8))
        xp = pack_tokens(pack, toks)
        out = reference_attention(xp, xp, xp, build_packed_mask(pack))
        for seg in pack.segments:
            t = toks[seg.sample_id]
            worst = max(worst, float(np.max(np.abs(out[seg.start:seg.start + seg.length] - reference_attention(t, t, t)))))
    ok = conserved and ffd_ok and worst <= 1e-12
    criterion(5, ok, f"tokens conserved={conserved}, FFD == oracle={ffd_ok}, packed attention max err {worst:.1e}")
    assert ok


# 6 -----------------------------------------------------------------------------------------------

def test_c06_dedup(criterion, tmp_path):
    r = SeededRng(6)
    samples = [Sample(f"d{i:03d}", "video", 2, 4, 4, r.split(i).integers(0, 256, shape=300 + 7 * i).astype(np.uint8).tobytes(),
                      r.split(i + 500).normal((4,))) for i in range(40)]
    paths = write_shards(samples, tmp_path, 6000)
    base = list(read_shards(paths))
    total = sum(p.stat().st_size for p in paths)
    ok = True
    notes = []
    for n in (1, 2, 4, 8):
        res = dedup_assign_and_distribute(paths, n)
        naive = dedup_assign_and_distribute(paths, n, naive=True)
        same = all(len(s) == len(base) and all(a.same_content(b) for a, b in zip(s, base)) for s in res.streams)
        same_naive = all(all(a.same_content(b) for a, b in zip(s, t)) for s, t in zip(res.streams, naive.streams))
        ok &= same and same_naive and res.origin_total == total and naive.origin_total == n * total
        notes.append(f"n={n}: origin {res.origin_total} vs naive {naive.origin_total}")
    criterion(6, ok, f"{len(paths)} shards, {total} bytes; " + "; ".join(notes))
    assert ok


# 7 -----------------------------------------------------------------------------------------------

RATES = (1, 2, 5, 10)


def _grid(n_stages, top):
    axes = np.meshgrid(*[np.arange(1, top + 1)] * n_stages, indexing="ij")
    return np.stack([a.ravel() for a in axes], axis=1)  # lexicographic order


def test_c07_balancer(criterion):
    mismatches = checked = 0
    for n in range(1, 5):
        grid = _grid(n, 21 - n)
        cost = grid.sum(1)
        for rates in itertools.product(RATES, repeat=n):
            thr = (grid * np.array(rates)).min(1)
            for budget in range(n, 21):
                ok_rows = cost <= budget
                best = thr[ok_rows].max()
                first = int(np.flatnonzero(ok_rows & (thr == best))[0])
                p = PipelineSpec(tuple(StageSpec(f"s{i}", float(rt)) for i, rt in enumerate(rates)), budget)
                got = optimize_allocation(p)
                checked += 1
                if got.workers != tuple(int(v) for v in grid[first]):
                    mismatches += 1
    worked = PipelineSpec((StageSpec("a", 10), StageSpec("b", 1), StageSpec("c", 5)), 16)
    alloc = optimize_allocation(worked)
    thr = analytic_throughput(worked, alloc)
    sim = simulate(worked, alloc, 4000).throughput
    ok = mismatches == 0 and thr == 11 and abs(sim / thr - 1) <= 0.05
    criterion(7, ok, f"{checked} pipelines vs brute force, {mismatches} mismatches; worked instance "
                     f"{alloc.workers} -> {thr:g}; DES {sim:.3f} ({100 * abs(sim / thr - 1):.2f}% off)")
    assert ok


# 8 -----------------------------------------------------------------------------------------------

def test_c08_parameter_accounting(criterion):
    ok = True
    for d in (8, 64, 1152, 4096, 6144):
        full = DiTConfig(layers=1, hidden=d, heads=8)
        ok &= count_params(full)["adaln"] == d * 9 * d + 9 * d
        for rnk in (4, 64, 256):
            lora = DiTConfig(layers=1, hidden=d, heads=8, adaln_mode="lora", rank=min(rnk, 9 * d - 1))
            ok &= count_params(lora)["adaln"] == 10 * d * lora.rank + 9 * d
    toy = DiTConfig(layers=2, hidden=16, heads=2, adaln_mode="lora", rank=3, cross_dim=8, patch_dim=4)
    p = init_params(toy, 0)
    ok &= sum(v.size for k, v in p.items() if ".adaln." in k) == count_params(toy)["adaln"]
    wl = REFERENCE_WORKLOADS["28B-stage3"]
    n = wl.devices(HW)
    mem = memory_model(wl, ParallelPlan(DeviceGrid(1, 1, 1, n), microbatches=wl.global_batch // n), HW)
    ok &= not mem["feasible"]
    criterion(8, ok, f"AdaLN 9d^2+9d and LoRA 10dr+9d exact; 28B pure DP needs {mem['total'] / 1e9:.0f} GB > 80 GB")
    assert ok


# 9 -----------------------------------------------------------------------------------------------

def test_c09_planner_rules(criterion):
    fsdp_7b = any(plan_family(rp.plan) == "FSDP" for rp in recommend(REFERENCE_WORKLOADS["7B-stage2"], HW).plans)
    top_7b_long = recommend(REFERENCE_WORKLOADS["7B-stage3"], HW).top.plan
    top_28b = recommend(REFERENCE_WORKLOADS["28B-stage3"], HW).top.plan
    bubble = bubble_fraction(4, 8, 1)
    ok = fsdp_7b and top_7b_long.grid.cp > 1 and top_28b.grid.tp > 1 and top_28b.grid.pp > 1 and bubble == 3 / 11
    criterion(9, ok, f"7B/8K FSDP feasible={fsdp_7b}; 7B/73728 top [{top_7b_long.label()}]; "
                     f"28B/73728 top [{top_28b.label()}]; bubble(4,8,1)={bubble:.4f}")
    assert ok


# 10 ----------------------------------------------------------------------------------------------

def test_c10_strong_scaling(criterion):
    effs = {}
    for name, wl in sorted(REFERENCE_WORKLOADS.items()):
        wl8 = wl.with_nodes(8)
        for rp in recommend(wl8, HW).plans:
            try:
                effs[name] = strong_scaling(wl8, rp.plan, [8, 16, 32], HW)[32]
                break
            except ValueError:
                continue
    ok = len(effs) == len(REFERENCE_WORKLOADS) and min(effs.values()) >= 0.90
    criterion(10, ok, "8 -> 32 nodes efficiency " + ", ".join(f"{k} {v:.3f}" for k, v in effs.items()))
    assert ok
