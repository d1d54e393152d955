"""Exhaustive plan search over power-of-two grids, with rule annotations and report export."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, replace
from itertools import product

from ..numerics import ContractError
from ..parallel.mesh import DeviceGrid
from .model import DEFAULTS, CostReport, ModelConstants, check_plan, memory_model, step_time_and_mfu
from .workloads import HardwareProfile, ParallelPlan, WorkloadSpec

RULES = {
    1: "small model and short context: FSDP alone is sufficient",
    2: "small model, long sequences: prioritize CP",
    3: "CP for context length, TP/FSDP for model sharding",
    4: "large model: TP inside a node, then PP",
    5: "very large model and context: TP + PP + CP, TP intra-node, CP/PP may cross nodes",
}


def _powers_of_two(limit: int) -> list[int]:
    out, v = [], 1
    while v <= limit:
        out.append(v)
        v *= 2
    return out


def rules_for(plan: ParallelPlan, hw: HardwareProfile) -> list[int]:
    g = plan.grid
    out = []
    if plan.fsdp and g.tp == g.cp == g.pp == 1:
        out.append(1)
    if g.cp > 1 and g.tp == 1:
        out.append(2)
    if g.cp > 1 and (g.tp > 1 or plan.fsdp):
        out.append(3)
    if g.tp > 1 and g.pp > 1 and g.tp <= hw.devices_per_node:
        out.append(4)
    if g.tp > 1 and g.pp > 1 and g.cp > 1 and g.tp <= hw.devices_per_node:
        out.append(5)
    return out


def enumerate_plans(workload: WorkloadSpec, hw: HardwareProfile = HardwareProfile(), max_interleave: int = 4) -> list[ParallelPlan]:
    """Every valid plan using all devices, with TP confined to one node.

    Microbatch sizes range over powers of two dividing the per-replica batch;
    interleave depths over divisors of the per-stage layer count up to ``max_interleave``.
    """
    n = workload.devices(hw)
    modes = ("cp", "a2a", "ulysses") if workload.arch == "stdit" else ("none",)
    plans = []
    for tp in _powers_of_two(hw.devices_per_node):
        for cp in _powers_of_two(n // tp):
            for pp in _powers_of_two(n // (tp * cp)):
                dp = n // (tp * cp * pp)
                if tp * cp * pp * dp != n or workload.global_batch % dp:
                    continue
                per_replica = workload.global_batch // dp
                sizes = [b for b in _powers_of_two(per_replica) if per_replica % b == 0]
                depths = [v for v in range(1, max_interleave + 1) if pp > 1 and workload.config.layers % (pp * v) == 0] or [1]
                for mb, v, fsdp, mode in product(sizes, depths, (False, True) if dp * cp > 1 else (False,), modes):
                    plan = ParallelPlan(DeviceGrid(tp, cp, pp, dp), fsdp=fsdp, sp=tp > 1,
                                        microbatches=per_replica // mb, interleave=v, stdit_mode=mode)
                    try:
                        check_plan(workload, plan, hw)
                    except ContractError:
                        continue
                    plans.append(plan)
    return plans


@dataclass
class RankedPlan:
    plan: ParallelPlan
    report: CostReport
    rules: list[int]

    def row(self) -> dict:
        g = self.plan.grid
        return {
            "plan": self.plan.label(),
            "tp": g.tp, "cp": g.cp, "pp": g.pp, "dp": g.dp,
            "fsdp": self.plan.fsdp, "interleave": self.plan.interleave, "stdit_mode": self.plan.stdit_mode,
            "step_time_s": round(self.report.est_step_time, 6),
            "mfu": round(self.report.est_mfu, 6),
            "memory_gb": round(self.report.memory["total"] / 1e9, 3),
            "rules": ",".join(str(r) for r in self.rules),
        }


@dataclass
class Recommendation:
    workload: str
    plans: list[RankedPlan] = field(default_factory=list)
    infeasible: int = 0
    reason: str = ""

    @property
    def top(self) -> RankedPlan | None:
        return self.plans[0] if self.plans else None

    def to_dict(self) -> dict:
        return {
            "workload": self.workload,
            "reason": self.reason,
            "infeasible": self.infeasible,
            "plans": [rp.row() | {"report": rp.report.to_dict()} for rp in self.plans],
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        rows = [rp.row() for rp in self.plans]
        if rows:
            writer = csv.DictWriter(buf, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
        return buf.getvalue()


def recommend(workload: WorkloadSpec, hw: HardwareProfile = HardwareProfile(), k: ModelConstants = DEFAULTS,
              limit: int | None = None) -> Recommendation:
    """Rank every memory-feasible plan by estimated step time (ties broken by plan key)."""
    rec = Recommendation(workload.name)
    ranked = []
    for plan in enumerate_plans(workload, hw):
        if not memory_model(workload, plan, hw, k)["feasible"]:
            rec.infeasible += 1
            continue
        ranked.append(RankedPlan(plan, step_time_and_mfu(workload, plan, hw, k), rules_for(plan, hw)))
    ranked.sort(key=lambda rp: (rp.report.est_step_time, rp.plan.key))
    rec.plans = ranked[:limit] if limit else ranked
    if not ranked:
        rec.reason = f"no plan fits in {hw.hbm_capacity / 1e9:.0f} GB per device ({rec.infeasible} candidates over capacity)"
    return rec


def stdit_strategy_compare(workload: WorkloadSpec, plan: ParallelPlan, hw: HardwareProfile = HardwareProfile(),
                           k: ModelConstants = DEFAULTS, modes=("cp", "a2a", "ulysses")) -> dict:
    """Step time of the same plan under each spatial/temporal attention strategy.

    ``speedup[mode]`` is the ring-CP step time divided by the mode's step time.
    """
    times = {}
    for mode in modes:
        p = replace(plan, stdit_mode=mode)
        try:
            times[mode] = step_time_and_mfu(workload, p, hw, k).est_step_time
        except ContractError as err:
            times[mode] = None
            times[f"{mode}.error"] = str(err)
    base = times.get("cp")
    speedup = {m: (base / times[m] if base and times.get(m) else None) for m in modes}
    return {"workload": workload.name, "plan": plan.label(), "step_time": times, "speedup": speedup}


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=str)


def plan_family(plan: ParallelPlan) -> str:
    """Coarse strategy family used for the context-length comparison."""
    g = plan.grid
    axes = [name for name, v in (("TP", g.tp), ("PP", g.pp), ("CP", g.cp)) if v > 1]
    if not axes:
        return "FSDP" if plan.fsdp else "DP"
    return "+".join(axes)


def context_sweep(workload: WorkloadSpec, seq_lens, hw: HardwareProfile = HardwareProfile(),
                  k: ModelConstants = DEFAULTS) -> list[dict]:
    """Best estimated step time per strategy family at each context length.

    Rows are ``{seq_len, family, plan, step_time_s}``; families with no
    feasible plan at a length are omitted.
    """
    rows = []
    for s in seq_lens:
        rec = recommend(replace(workload, seq_len=int(s)), hw, k)
        best: dict[str, RankedPlan] = {}
        for rp in rec.plans:
            best.setdefault(plan_family(rp.plan), rp)
        for fam in sorted(best):
            rp = best[fam]
            rows.append({"seq_len": int(s), "family": fam, "plan": rp.plan.label(),
                         "step_time_s": round(rp.report.est_step_time, 6)})
    return rows
