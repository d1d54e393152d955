"""Analytic memory / communication / step-time model for a training step on a device grid.

Conventions:

* Logical collective volumes (``comm_volumes``) follow the simulator trace:
  one collective contributes the global element count of the tensor it moves,
  times the element size. In forward-only mode with 8-byte elements they equal
  the parallel-exec trace totals exactly.
* Time is per device. Each collective's per-device traffic uses ring factors
  (``2(n-1)/n`` all-reduce, ``(n-1)/n`` gather/scatter, ``(n-1)/n^2`` all-to-all,
  one block per ring round), at intra-node bandwidth iff the group fits in a node.
* Mesh ranks are laid out tp fastest, then cp, dp, pp.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

from ..dit import DiTConfig, count_params, forward_flops
from ..numerics import ContractError
from ..parallel.mesh import DeviceGrid
from .workloads import HardwareProfile, ParallelPlan, WorkloadSpec


@dataclass(frozen=True)
class ModelConstants:
    """Calibration knobs of the time model."""

    ideal_fraction: float = 0.55  # achievable fraction of peak for large, well-shaped GEMMs
    overlap: float = 0.9  # share of CP / FSDP / DP traffic that can hide under its compute window
    gemm_knee: int = 256  # per-rank GEMM width at which efficiency is halved (relative to its limit)
    act_coeff_dit: float = 46.0  # activation bytes per token per hidden unit per layer at 2-byte elements
    act_coeff_stdit: float = 70.0
    act_unsharded_coeff: float = 10.0  # part of the activation footprint TP does not shard without SP
    optimizer_bytes: int = 4  # per Adam moment


DEFAULTS = ModelConstants()


# --- model arithmetic -------------------------------------------------------------------

def stdit_param_count(config: DiTConfig) -> int:
    d, dh = config.hidden, config.head_dim
    base = count_params(config)
    extra_attn = 2 * (4 * d * d + 4 * d + 2 * dh) * config.layers
    return base["total"] + extra_attn


def param_count(workload: WorkloadSpec) -> int:
    if workload.arch == "stdit":
        return stdit_param_count(workload.config)
    return count_params(workload.config)["total"]


def attention_flops(workload: WorkloadSpec, batch: int = 1) -> dict[str, int]:
    """Forward core self-attention FLOPs (scores + weighted sum) per attention kind."""
    cfg, s = workload.config, workload.seq_len
    out = {"full": 4 * s * s * cfg.hidden * cfg.layers * batch}
    if workload.arch == "stdit":
        hw = workload.h * workload.w
        out["spatial"] = 4 * s * hw * cfg.hidden * cfg.layers * batch
        out["temporal"] = 4 * s * workload.t * cfg.hidden * cfg.layers * batch
    return out


def model_forward_flops(workload: WorkloadSpec, batch: int = 1) -> int:
    cfg = workload.config
    f = forward_flops(cfg, workload.seq_len, workload.text_len, batch)
    if workload.arch == "stdit":
        d, s = cfg.hidden, workload.seq_len
        att = attention_flops(workload, batch)
        f += (2 * 2 * s * 4 * d * d * cfg.layers) * batch + att["spatial"] + att["temporal"]
    return f


def training_flops(workload: WorkloadSpec) -> int:
    return 3 * model_forward_flops(workload, workload.global_batch)


def gemm_efficiency(hidden: int, tp: int, knee: int = DEFAULTS.gemm_knee) -> float:
    """Relative GEMM efficiency of splitting ``hidden`` over ``tp`` ranks (1 at tp=1)."""
    x = hidden / tp
    return (x / (x + knee)) / (hidden / (hidden + knee))


def bubble_fraction(pp: int, microbatches: int, interleave: int = 1) -> float:
    if min(pp, microbatches, interleave) < 1:
        raise ContractError("pp, microbatches and interleave must be >= 1")
    return (pp - 1) / (interleave * microbatches + pp - 1)


# --- validation --------------------------------------------------------------------------

def check_plan(workload: WorkloadSpec, plan: ParallelPlan, hw: HardwareProfile | None = None) -> None:
    g, cfg = plan.grid, workload.config
    if hw is not None and g.size > workload.devices(hw):
        raise ContractError(f"plan uses {g.size} devices but the workload has {workload.devices(hw)}")
    if cfg.layers % (g.pp * plan.interleave):
        raise ContractError(f"pp*interleave={g.pp * plan.interleave} does not divide {cfg.layers} layers")
    if cfg.heads % g.tp:
        raise ContractError(f"tp={g.tp} does not divide {cfg.heads} heads")
    if workload.seq_len % g.cp:
        raise ContractError(f"cp={g.cp} does not divide sequence length {workload.seq_len}")
    if workload.global_batch % (g.dp * plan.microbatches):
        raise ContractError(f"dp*microbatches={g.dp * plan.microbatches} does not divide global batch {workload.global_batch}")
    if plan.interleave > 1 and g.pp == 1:
        raise ContractError("interleaving needs pp > 1")
    if plan.sp and g.tp == 1:
        raise ContractError("sequence parallelism needs tp > 1")
    if workload.arch == "dit" and plan.stdit_mode != "none":
        raise ContractError("stdit_mode applies to stdit workloads only")
    if workload.arch == "stdit":
        if plan.stdit_mode == "none":
            raise ContractError("stdit workloads need a stdit_mode")
        if plan.stdit_mode == "ulysses" and (cfg.heads // g.tp) % g.cp:
            raise ContractError("head-scatter mode needs cp to divide the per-rank head count")
        if plan.stdit_mode == "cp" and (workload.h * workload.w % g.cp or workload.t % g.cp):
            raise ContractError("ring mode for spatial/temporal attention needs cp to divide h*w and t")


def microbatch_size(workload: WorkloadSpec, plan: ParallelPlan) -> int:
    return workload.global_batch // (plan.grid.dp * plan.microbatches)


# --- memory ------------------------------------------------------------------------------

def memory_model(workload: WorkloadSpec, plan: ParallelPlan, hw: HardwareProfile = HardwareProfile(),
                 k: ModelConstants = DEFAULTS) -> dict:
    """Per-device bytes: params and grads at the workload element size, two fp32 Adam moments.

    Model state is split by tp*pp, and additionally over the dp*cp replicas under
    FSDP. Activations follow a per-layer ``coeff * tokens * hidden`` footprint,
    divided by cp and (with SP) by tp; with 1F1B a stage keeps ``min(m, pp)``
    microbatches of its ``L/pp`` layers alive.
    """
    check_plan(workload, plan)
    g, cfg = plan.grid, workload.config
    n = param_count(workload)
    shard = g.tp * g.pp * (g.dp * g.cp if plan.fsdp else 1)
    params = n * workload.dtype_bytes / shard
    grads = n * workload.dtype_bytes / shard
    optimizer = 2 * n * k.optimizer_bytes / shard
    coeff = k.act_coeff_stdit if workload.arch == "stdit" else k.act_coeff_dit
    if plan.sp:
        per_token = coeff / g.tp
    else:
        per_token = k.act_unsharded_coeff + (coeff - k.act_unsharded_coeff) / g.tp
    layers_alive = cfg.layers if g.pp == 1 else cfg.layers // g.pp * min(plan.microbatches, g.pp)
    tokens = microbatch_size(workload, plan) * workload.seq_len / g.cp
    activations = per_token * tokens * cfg.hidden * layers_alive * workload.dtype_bytes / 2
    total = params + grads + optimizer + activations
    return {
        "params": params,
        "grads": grads,
        "optimizer": optimizer,
        "activations": activations,
        "total": total,
        "feasible": total <= hw.hbm_capacity,
    }


# --- communication volumes ------------------------------------------------------------------

def comm_volumes(workload: WorkloadSpec, plan: ParallelPlan, training: bool = True,
                 strategy: str = "recompute", bytes_per_element: int | None = None) -> dict[str, int]:
    """Logical bytes per step by collective kind (trace convention).

    ``training=False`` gives the forward pass as executed by the simulator,
    including the final gather of the output across cp ranks.
    """
    check_plan(workload, plan)
    g, cfg = plan.grid, workload.config
    e = workload.dtype_bytes if bytes_per_element is None else bytes_per_element
    B, s, d, L = workload.global_batch, workload.seq_len, cfg.hidden, cfg.layers
    act = B * s * d
    stdit = workload.arch == "stdit"
    out = {"all_gather": 0, "reduce_scatter": 0, "all_to_all": 0, "p2p": 0, "all_reduce": 0}

    if g.tp > 1:
        per_layer = 5 if stdit else 3
        out["all_reduce"] += per_layer * L * act * (2 if training else 1)
    if g.cp > 1:
        rings = 1
        if stdit:
            rings = {"cp": 3, "a2a": 1, "ulysses": 0}[plan.stdit_mode]
            a2a = {"cp": 0, "a2a": 3, "ulysses": 12}[plan.stdit_mode]
            out["all_to_all"] += a2a * L * act * (2 if training else 1)
        out["p2p"] += rings * L * (g.cp - 1) * 2 * act * (3 if training else 1)
    if g.pp > 1:
        hops = g.pp * plan.interleave - 1
        per = act
        if strategy == "communicate":
            per += B * (d + workload.text_len * cfg.cross_dim)
        out["p2p"] += hops * per * (2 if training else 1)
    if not training:
        if g.cp > 1:
            out["all_gather"] += B * s * cfg.patch_dim
    else:
        n = param_count(workload)
        if g.dp * g.cp > 1:
            if plan.fsdp:
                out["all_gather"] += 2 * plan.microbatches * n
                out["reduce_scatter"] += plan.microbatches * n
            else:
                out["all_reduce"] += n
    return {kname: int(v * e) for kname, v in out.items()}


def cp_inference_kv_bytes(config: DiTConfig, seq_len: int, cp: int, batch: int = 2, evals: int = 1,
                          bytes_per_element: int = 8) -> int:
    """Ring KV traffic of ``evals`` network evaluations in context-parallel sampling."""
    if cp < 1 or seq_len % cp:
        raise ContractError(f"cp={cp} must divide sequence length {seq_len}")
    return config.layers * (cp - 1) * 2 * batch * seq_len * config.hidden * bytes_per_element * evals


def sampler_evals(n_steps: int) -> int:
    """Network evaluations of the Heun sampler: two per step except the final Euler step."""
    return 2 * n_steps - 1


# --- time model ---------------------------------------------------------------------------------

def _bandwidth(span: int, hw: HardwareProfile) -> float:
    return hw.intra_node_bw if span <= hw.devices_per_node else hw.inter_node_bw


def _spans(g: DeviceGrid) -> dict[str, int]:
    return {
        "tp": g.tp,
        "cp": g.tp * g.cp,
        "dp": g.tp * g.cp * g.dp,  # the data-parallel group including cp replicas
        "pp": g.size,
    }


@dataclass
class CostReport:
    memory: dict
    comm_bytes: dict
    comm_time: dict
    exposed_time: dict
    compute_time: float
    bubble_fraction: float
    est_step_time: float
    est_mfu: float
    feasible: bool
    peak_convention: str = "dense bf16 peak per device"
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _comm_times(workload: WorkloadSpec, plan: ParallelPlan, hw: HardwareProfile, k: ModelConstants):
    """Per-device communication time by component (training step)."""
    g, cfg = plan.grid, workload.config
    e = workload.dtype_bytes
    s, d = workload.seq_len, cfg.hidden
    m = plan.microbatches
    samples = workload.global_batch / g.dp
    layers = cfg.layers / g.pp
    spans = _spans(g)
    lat = hw.link_latency
    stdit = workload.arch == "stdit"
    sp_div = g.tp if plan.sp else 1
    t = {}

    if g.tp > 1:
        per_layer = 5 if stdit else 3
        events = 2 * per_layer * layers
        traffic = events * samples * 2 * (g.tp - 1) / g.tp * (s / g.cp) * d * e
        t["tp"] = traffic / _bandwidth(spans["tp"], hw) + lat * events * m * 2 * (g.tp - 1)
    if g.cp > 1:
        bw = _bandwidth(spans["cp"], hw)
        kinds = ["full"]
        if stdit and plan.stdit_mode == "cp":
            kinds += ["spatial", "temporal"]
        if stdit and plan.stdit_mode == "ulysses":
            kinds = []
        for kind in kinds:
            traffic = 3 * layers * samples * (g.cp - 1) * 2 * (s / g.cp) * (d / g.tp) * e
            t[f"cp.{kind}"] = traffic / bw + lat * 3 * layers * m * (g.cp - 1)
        if stdit and plan.stdit_mode in ("a2a", "ulysses"):
            count = 3 if plan.stdit_mode == "a2a" else 12
            div = sp_div if plan.stdit_mode == "a2a" else g.tp
            events = 2 * count * layers
            traffic = events * samples * (g.cp - 1) / g.cp * (s / g.cp) * d / div * e
            t["a2a"] = traffic / bw + lat * events * m * (g.cp - 1)
    if g.dp * g.cp > 1:
        n = param_count(workload)
        nf = g.dp * g.cp
        shard_bytes = n / (g.tp * g.pp) * e
        bw = _bandwidth(spans["dp"], hw)
        if plan.fsdp:
            traffic = 3 * m * (nf - 1) / nf * shard_bytes
            t["fsdp"] = traffic / bw + lat * 3 * m * layers * (nf - 1)
        else:
            traffic = 2 * (nf - 1) / nf * shard_bytes
            t["dp"] = traffic / bw + lat * layers * 2 * (nf - 1)
    if g.pp > 1:
        mb = microbatch_size(workload, plan)
        tensor = mb * (s / g.cp) * d / sp_div * e
        sends = 2 * m * plan.interleave
        t["pp"] = sends * tensor / _bandwidth(spans["pp"], hw) + lat * sends
    return t


def step_time_and_mfu(workload: WorkloadSpec, plan: ParallelPlan, hw: HardwareProfile = HardwareProfile(),
                      k: ModelConstants = DEFAULTS) -> CostReport:
    """Estimated step time and MFU.

    ``compute = FLOPs / (devices * peak * ideal * gemm_efficiency(tp))``, stretched
    by ``1 / (1 - bubble)``. CP ring traffic hides under the matching attention
    compute and FSDP/DP traffic under the whole step, each up to the overlap
    fraction; TP, all-to-all and pipeline sends are fully exposed.
    """
    check_plan(workload, plan, hw)
    mem = memory_model(workload, plan, hw, k)
    if not mem["feasible"]:
        raise ContractError(f"plan {plan.label()} needs {mem['total'] / 1e9:.1f} GB per device, over capacity")
    g = plan.grid
    rate = g.size * hw.peak_flops_per_device * k.ideal_fraction * gemm_efficiency(workload.config.hidden, g.tp, k.gemm_knee)
    flops = training_flops(workload)
    compute = flops / rate
    attn = {kind: 3 * f / rate for kind, f in attention_flops(workload, workload.global_batch).items()}
    comm = _comm_times(workload, plan, hw, k)
    exposed = {}
    for name, tm in comm.items():
        if name.startswith("cp."):
            window = attn[name.split(".", 1)[1]]
        elif name in ("fsdp", "dp"):
            window = compute
        else:
            window = 0.0
        exposed[name] = tm - min(k.overlap * tm, window)
    bubble = bubble_fraction(g.pp, plan.microbatches, plan.interleave)
    total = compute / (1.0 - bubble) + sum(exposed.values())
    mfu = flops / (g.size * hw.peak_flops_per_device * total)
    return CostReport(
        memory=mem,
        comm_bytes=comm_volumes(workload, plan),
        comm_time=comm,
        exposed_time=exposed,
        compute_time=compute,
        bubble_fraction=bubble,
        est_step_time=total,
        est_mfu=mfu,
        feasible=True,
    )


def scale_plan(plan: ParallelPlan, factor: int) -> ParallelPlan:
    """Grow the data-parallel axis by ``factor``, keeping the microbatch size."""
    g = plan.grid
    if plan.microbatches % factor:
        raise ContractError(f"cannot spread {plan.microbatches} microbatches over {factor}x more replicas")
    return replace(plan, grid=DeviceGrid(g.tp, g.cp, g.pp, g.dp * factor), microbatches=plan.microbatches // factor)


def strong_scaling(workload: WorkloadSpec, plan: ParallelPlan, node_counts, hw: HardwareProfile = HardwareProfile(),
                   k: ModelConstants = DEFAULTS) -> dict[int, float]:
    """Fixed global batch; extra nodes become extra data-parallel replicas.

    ``efficiency(n) = throughput(n) / (n/n0 * throughput(n0))`` with ``n0`` the
    first entry; ``plan`` must match ``workload.nodes == n0``.
    """
    counts = list(node_counts)
    if not counts or any(b <= a for a, b in zip(counts, counts[1:])):
        raise ContractError("node counts must be non-empty and ascending")
    n0 = counts[0]
    if plan.grid.size != n0 * hw.devices_per_node:
        raise ContractError("plan must use every device at the first node count")
    base = None
    out = {}
    for n in counts:
        if n % n0:
            raise ContractError(f"{n} nodes is not a multiple of {n0}")
        p = scale_plan(plan, n // n0)
        rep = step_time_and_mfu(workload.with_nodes(n), p, hw, k)
        thr = workload.global_batch / rep.est_step_time
        if base is None:
            base = thr
        out[n] = thr / (n / n0 * base)
    return out


def cp_inference_scaling(config: DiTConfig, seq_len: int, n_steps: int, gpu_counts=(1, 2, 4, 8, 16, 32),
                         text_len: int = 512, dtype_bytes: int = 2, hw: HardwareProfile = HardwareProfile(),
                         k: ModelConstants = DEFAULTS) -> list[dict]:
    """Estimated sampling latency when the latent is split over ``n`` devices.

    Every evaluation runs the guided pair (batch 2). Compute divides by ``n``;
    ring KV traffic hides under the attention compute up to the overlap fraction.
    """
    evals = sampler_evals(n_steps)
    rows = []
    base = None
    for n in gpu_counts:
        if seq_len % n:
            raise ContractError(f"{n} devices do not divide {seq_len} tokens")
        rate = n * hw.peak_flops_per_device * k.ideal_fraction
        compute = evals * forward_flops(config, seq_len, text_len, 2) / rate
        attn = evals * 4 * seq_len * seq_len * config.hidden * config.layers * 2 / rate
        kv = cp_inference_kv_bytes(config, seq_len, n, evals=evals, bytes_per_element=dtype_bytes) / n
        comm = kv / _bandwidth(n, hw) + hw.link_latency * evals * config.layers * (n - 1)
        total = compute + comm - min(k.overlap * comm, attn)
        base = total if base is None else base
        rows.append({
            "gpus": n,
            "latency_s": total,
            "speedup": base / total,
            "efficiency": base / total / (n / gpu_counts[0]),
        })
    return rows
