"""Worker allocation for a multi-stage streaming curation pipeline.

Each stage is a pool of identical workers with a per-worker item rate. The
pipeline's throughput is set by its slowest stage; ``optimize_allocation``
buys workers under a resource budget to lift that minimum, and ``simulate``
runs a discrete-event model with bounded inter-stage queues to check the
analytic figure.
"""

from __future__ import annotations

import heapq
import math
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction

from .numerics import ContractError, SeededRng


@dataclass(frozen=True)
class StageSpec:
    name: str
    per_worker_rate: float
    worker_cost: float = 1.0
    hw_accel_factor: float = 1.0

    def __post_init__(self):
        if self.per_worker_rate <= 0 or self.worker_cost <= 0:
            raise ContractError(f"stage {self.name}: rate and cost must be positive")
        if self.hw_accel_factor < 1:
            raise ContractError(f"stage {self.name}: hw_accel_factor must be >= 1")

    @property
    def rate(self) -> float:
        return self.per_worker_rate * self.hw_accel_factor


@dataclass(frozen=True)
class PipelineSpec:
    stages: tuple[StageSpec, ...]
    budget: float
    queue_capacity: tuple[int, ...] | None = None  # per inter-stage buffer; default 2x downstream workers

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        if not self.stages:
            raise ContractError("a pipeline needs at least one stage")
        if self.budget < self.min_cost:
            raise ContractError(f"budget {self.budget} cannot buy one worker per stage ({self.min_cost})")
        if self.queue_capacity is not None:
            caps = tuple(self.queue_capacity)
            if len(caps) != len(self.stages) - 1 or min(caps, default=1) < 1:
                raise ContractError("queue_capacity needs one entry >= 1 per inter-stage buffer")
            object.__setattr__(self, "queue_capacity", caps)

    @property
    def min_cost(self) -> float:
        return sum(s.worker_cost for s in self.stages)

    def to_dict(self) -> dict:
        return {
            "stages": [vars(s).copy() for s in self.stages],
            "budget": self.budget,
            "queue_capacity": list(self.queue_capacity) if self.queue_capacity else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineSpec":
        caps = d.get("queue_capacity")
        return cls(tuple(StageSpec(**s) for s in d["stages"]), d["budget"], tuple(caps) if caps else None)


@dataclass(frozen=True)
class Allocation:
    workers: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "workers", tuple(int(w) for w in self.workers))
        if not self.workers or min(self.workers) < 1:
            raise ContractError("every stage needs at least one worker")

    def cost(self, pipeline: PipelineSpec) -> float:
        return sum(w * s.worker_cost for w, s in zip(self.workers, pipeline.stages))


def check_allocation(pipeline: PipelineSpec, alloc: Allocation) -> None:
    if len(alloc.workers) != len(pipeline.stages):
        raise ContractError(f"allocation has {len(alloc.workers)} entries for {len(pipeline.stages)} stages")
    if alloc.cost(pipeline) > pipeline.budget:
        raise ContractError(f"allocation costs {alloc.cost(pipeline)}, over the budget {pipeline.budget}")


def default_pipeline(budget: float = 64, accelerated: bool = True) -> PipelineSpec:
    """Decode, scene-split, transcode, embed, caption with illustrative per-worker rates (clips/s).

    ``accelerated`` applies a 3x hardware-codec factor to decode and transcode.
    """
    f = 3.0 if accelerated else 1.0
    return PipelineSpec((
        StageSpec("decode", 4.0, 1.0, f),
        StageSpec("scene-split", 6.0, 1.0),
        StageSpec("transcode", 2.0, 1.0, f),
        StageSpec("embed", 8.0, 1.0),
        StageSpec("caption", 0.5, 1.0),
    ), budget)


def stage_rates(pipeline: PipelineSpec, alloc: Allocation) -> list[float]:
    return [w * s.rate for w, s in zip(alloc.workers, pipeline.stages)]


def analytic_throughput(pipeline: PipelineSpec, alloc: Allocation) -> float:
    check_allocation(pipeline, alloc)
    return min(stage_rates(pipeline, alloc))


def bottleneck(pipeline: PipelineSpec, alloc: Allocation) -> int:
    rates = stage_rates(pipeline, alloc)
    return rates.index(min(rates))


# --- optimizer -------------------------------------------------------------------------------

def _exact(pipeline: PipelineSpec):
    return [Fraction(s.rate) for s in pipeline.stages], [Fraction(s.worker_cost) for s in pipeline.stages]


def _alloc_for(m: Fraction, rates) -> list[int]:
    return [max(1, math.ceil(m / r)) for r in rates]


def _cost(workers, costs) -> Fraction:
    return sum((w * c for w, c in zip(workers, costs)), Fraction(0))


def min_cost_allocation(pipeline: PipelineSpec, target: float) -> Allocation:
    """Cheapest allocation reaching ``target`` items/s; ignores the budget."""
    if target <= 0:
        raise ContractError("target throughput must be positive")
    rates, _ = _exact(pipeline)
    return Allocation(tuple(_alloc_for(Fraction(target), rates)))


def optimize_allocation(pipeline: PipelineSpec) -> Allocation:
    """Maximize the bottleneck rate under the budget.

    The optimum is always some ``w * rate_i``. Candidates are enumerated per
    stage, sorted, and binary-searched for the largest ``m`` whose allocation
    ``ceil(m / rate_i)`` fits the budget (cost is monotone in ``m``). That
    allocation is componentwise minimal for throughput ``m``, so it is also
    the lexicographically smallest optimum. Arithmetic is exact (Fractions).
    """
    rates, costs = _exact(pipeline)
    budget = Fraction(pipeline.budget)
    base = sum(costs, Fraction(0))
    if base > budget:
        raise ContractError("budget cannot buy one worker per stage")
    cands = set()
    for r, c in zip(rates, costs):
        top = math.floor((budget - base + c) / c)
        cands.update(w * r for w in range(1, top + 1))
    cands = sorted(cands)
    lo, hi = 0, len(cands) - 1  # cands[0] = min rate is always feasible
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if _cost(_alloc_for(cands[mid], rates), costs) <= budget:
            lo = mid
        else:
            hi = mid - 1
    return Allocation(tuple(_alloc_for(cands[lo], rates)))


def fractional_bound(pipeline: PipelineSpec) -> float:
    """Throughput upper bound when workers may be fractional: budget / sum(cost_i / rate_i)."""
    return pipeline.budget / sum(s.worker_cost / s.rate for s in pipeline.stages)


def equal_split(pipeline: PipelineSpec) -> Allocation:
    """Same worker count on every stage, as many as the budget allows."""
    return Allocation(tuple([max(1, int(pipeline.budget // pipeline.min_cost))] * len(pipeline.stages)))


# --- discrete-event simulation ---------------------------------------------------------------

@dataclass
class SimReport:
    throughput: float
    utilization: list[float]
    max_queue_depth: list[int]
    items_in: int
    items_out: int
    makespan: float
    start_order: list[list[int]] = field(repr=False, default_factory=list)
    arrival_order: list[list[int]] = field(repr=False, default_factory=list)


def _service_sampler(rate: float, cv: float, rng: SeededRng):
    mean = 1.0 / rate
    if cv == 0:
        return lambda: mean
    k = 1.0 / (cv * cv)
    return lambda: float(rng.gamma(k, mean / k))


def simulate(pipeline: PipelineSpec, alloc: Allocation, n_items: int, service_time_cv: float = 0.0,
             seed: int = 0, warmup: float = 0.1) -> SimReport:
    """Event-driven run of ``n_items`` through the pipeline.

    Service times are gamma distributed with mean ``1 / rate`` and the given
    coefficient of variation (deterministic at 0). Queues between stages are
    bounded; a worker whose downstream queue is full holds its finished item
    until space frees up. Throughput is measured over exits after the first
    ``warmup`` fraction of items.
    """
    check_allocation(pipeline, alloc)
    if n_items < 1:
        raise ContractError("n_items must be >= 1")
    if service_time_cv < 0:
        raise ContractError("service_time_cv must be >= 0")
    stages = pipeline.stages
    n = len(stages)
    caps = list(pipeline.queue_capacity or [2 * alloc.workers[i + 1] for i in range(n - 1)])
    rng = SeededRng(seed)
    draw = [_service_sampler(s.rate, service_time_cv, rng.split(i)) for i, s in enumerate(stages)]

    queues = [deque() for _ in range(n - 1)]  # queues[i] feeds stage i + 1
    idle = [list(range(w)) for w in alloc.workers]
    blocked: list[deque] = [deque() for _ in range(n)]  # (worker, item) waiting for queue space
    busy_time = [0.0] * n
    max_depth = [0] * (n - 1)
    start_order: list[list[int]] = [[] for _ in range(n)]
    arrival_order: list[list[int]] = [[] for _ in range(n)]
    exits: list[float] = []
    next_item = 0
    events: list[tuple] = []
    seq = 0
    now = 0.0

    def push(i, item):
        queues[i].append(item)
        arrival_order[i + 1].append(item)
        max_depth[i] = max(max_depth[i], len(queues[i]))

    def settle():
        nonlocal next_item, seq
        changed = True
        while changed:
            changed = False
            for i in range(n):
                while blocked[i] and len(queues[i]) < caps[i]:
                    worker, item = blocked[i].popleft()
                    push(i, item)
                    idle[i].append(worker)
                    changed = True
                while idle[i]:
                    if i == 0:
                        if next_item >= n_items:
                            break
                        item = next_item
                        arrival_order[0].append(item)
                        next_item += 1
                    elif queues[i - 1]:
                        item = queues[i - 1].popleft()
                    else:
                        break
                    worker = idle[i].pop(0)
                    dt = draw[i]()
                    busy_time[i] += dt
                    start_order[i].append(item)
                    heapq.heappush(events, (now + dt, seq, i, worker, item))
                    seq += 1
                    changed = True

    settle()
    while events:
        now, _, i, worker, item = heapq.heappop(events)
        if i == n - 1:
            exits.append(now)
            idle[i].append(worker)
        elif len(queues[i]) < caps[i] and not blocked[i]:
            push(i, item)
            idle[i].append(worker)
        else:
            blocked[i].append((worker, item))
        idle[i].sort()
        settle()

    makespan = exits[-1]
    k0 = min(int(warmup * n_items), n_items - 1)
    if n_items - 1 - k0 >= 1 and exits[-1] > exits[k0]:
        throughput = (n_items - 1 - k0) / (exits[-1] - exits[k0])
    else:
        throughput = n_items / makespan
    util = [min(1.0, busy_time[i] / (alloc.workers[i] * makespan)) for i in range(n)]
    return SimReport(throughput, util, max_depth, n_items, len(exits), makespan, start_order, arrival_order)


def speedup_report(pipeline: PipelineSpec, baseline: Allocation, optimized: Allocation, n_items: int = 2000,
                   service_time_cv: float = 0.0, seed: int = 0) -> dict:
    base = simulate(pipeline, baseline, n_items, service_time_cv, seed)
    opt = simulate(pipeline, optimized, n_items, service_time_cv, seed)
    rows = []
    for i, s in enumerate(pipeline.stages):
        rows.append({
            "stage": s.name,
            "rate": s.rate,
            "baseline_workers": baseline.workers[i],
            "optimized_workers": optimized.workers[i],
            "baseline_utilization": round(base.utilization[i], 6),
            "optimized_utilization": round(opt.utilization[i], 6),
        })
    return {
        "ratio": opt.throughput / base.throughput,
        "baseline_throughput": base.throughput,
        "optimized_throughput": opt.throughput,
        "baseline_analytic": analytic_throughput(pipeline, baseline),
        "optimized_analytic": analytic_throughput(pipeline, optimized),
        "baseline_bottleneck": pipeline.stages[bottleneck(pipeline, baseline)].name,
        "bottleneck": pipeline.stages[bottleneck(pipeline, optimized)].name,
        "stages": rows,
    }
