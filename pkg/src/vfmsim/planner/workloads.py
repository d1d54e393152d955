"""Workload, hardware and plan descriptions for the cost planner, plus bundled presets."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from ..dit import DiTConfig
from ..numerics import ContractError
from ..parallel.mesh import DeviceGrid

STDIT_MODES = ("none", "cp", "a2a", "ulysses")


@dataclass(frozen=True)
class HardwareProfile:
    """Per-device peak and link characteristics. Defaults describe an H100-class 8-GPU node.

    ``peak_flops_per_device`` is the dense bf16 tensor-core peak; MFU figures
    produced by the planner use this denominator.
    """

    peak_flops_per_device: float = 989e12
    intra_node_bw: float = 450e9
    inter_node_bw: float = 50e9
    devices_per_node: int = 8
    link_latency: float = 5e-6
    hbm_capacity: float = 80e9

    def __post_init__(self):
        vals = (self.peak_flops_per_device, self.intra_node_bw, self.inter_node_bw, self.devices_per_node, self.hbm_capacity)
        if min(vals) <= 0 or self.link_latency < 0:
            raise ContractError(f"hardware fields must be positive: {self}")
        if self.intra_node_bw < self.inter_node_bw:
            raise ContractError("intra-node bandwidth must be >= inter-node bandwidth")

    @classmethod
    def from_dict(cls, d: dict) -> "HardwareProfile":
        return cls(**d)


@dataclass(frozen=True)
class WorkloadSpec:
    """A training step: model, sequence, global batch and cluster size.

    ``arch="stdit"`` adds frame structure (``t`` frames of ``h*w`` tokens,
    ``seq_len = t*h*w``) and three self-attentions per layer.
    """

    name: str
    config: DiTConfig
    seq_len: int
    global_batch: int
    nodes: int
    text_len: int = 512
    dtype_bytes: int = 2
    arch: str = "dit"
    t: int = 1
    h: int = 1
    w: int = 1

    def __post_init__(self):
        if min(self.seq_len, self.global_batch, self.nodes, self.text_len, self.dtype_bytes) < 1:
            raise ContractError(f"workload fields must be positive: {self.name}")
        if self.arch not in ("dit", "stdit"):
            raise ContractError(f"unknown architecture {self.arch!r}")
        if self.arch == "stdit" and self.t * self.h * self.w != self.seq_len:
            raise ContractError("stdit workloads need t*h*w == seq_len")

    def devices(self, hw: HardwareProfile) -> int:
        return self.nodes * hw.devices_per_node

    def with_nodes(self, nodes: int) -> "WorkloadSpec":
        return replace(self, nodes=nodes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["config"] = asdict(self.config)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WorkloadSpec":
        d = dict(d)
        cfg = d.pop("config")
        return cls(config=cfg if isinstance(cfg, DiTConfig) else DiTConfig.from_dict(cfg), **d)


@dataclass(frozen=True)
class ParallelPlan:
    grid: DeviceGrid = field(default_factory=DeviceGrid)
    fsdp: bool = False
    sp: bool = False
    microbatches: int = 1
    interleave: int = 1
    stdit_mode: str = "none"

    def __post_init__(self):
        if self.microbatches < 1 or self.interleave < 1:
            raise ContractError("microbatches and interleave must be >= 1")
        if self.stdit_mode not in STDIT_MODES:
            raise ContractError(f"stdit_mode must be one of {STDIT_MODES}")

    @property
    def key(self) -> tuple:
        g = self.grid
        return (g.tp, g.cp, g.pp, g.dp, self.fsdp, self.sp, self.microbatches, self.interleave, self.stdit_mode)

    def label(self) -> str:
        g = self.grid
        parts = [f"TP={g.tp}"] if g.tp > 1 else []
        if self.sp:
            parts.append("SP")
        if g.pp > 1:
            parts.append(f"PP={g.pp}")
        if self.interleave > 1:
            parts.append(f"VPP={self.interleave}")
        if g.pp > 1:
            parts.append(f"m={self.microbatches}")
        if g.cp > 1:
            parts.append(f"CP={g.cp}")
        parts.append(f"{'FSDP' if self.fsdp else 'DP'}={g.dp}")
        if self.stdit_mode != "none":
            parts.append(f"stdit={self.stdit_mode}")
        return " ".join(parts)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = asdict(self.grid)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ParallelPlan":
        d = dict(d)
        g = d.pop("grid", {})
        return cls(grid=g if isinstance(g, DeviceGrid) else DeviceGrid(**g), **d)


# --- presets ---------------------------------------------------------------------------------

def dit_7b(adaln_mode: str = "lora", rank: int = 256) -> DiTConfig:
    return DiTConfig(layers=28, hidden=4096, heads=32, adaln_mode=adaln_mode, rank=rank if adaln_mode == "lora" else 0)


def dit_28b(adaln_mode: str = "lora", rank: int = 256) -> DiTConfig:
    return DiTConfig(layers=48, hidden=6144, heads=48, adaln_mode=adaln_mode, rank=rank if adaln_mode == "lora" else 0)


# One global batch for every workload; large enough that each data-parallel replica
# still sees several microbatches at 32 nodes.
GLOBAL_BATCH = 512

REFERENCE_WORKLOADS = {
    "7B-stage2": WorkloadSpec("7B-stage2", dit_7b(), seq_len=8192, global_batch=GLOBAL_BATCH, nodes=8),
    "7B-stage3": WorkloadSpec("7B-stage3", dit_7b(), seq_len=73728, global_batch=GLOBAL_BATCH, nodes=8),
    "28B-stage2": WorkloadSpec("28B-stage2", dit_28b(), seq_len=8192, global_batch=GLOBAL_BATCH, nodes=8),
    "28B-stage3": WorkloadSpec("28B-stage3", dit_28b(), seq_len=73728, global_batch=GLOBAL_BATCH, nodes=32),
}


def stdit_7b() -> DiTConfig:
    return DiTConfig(layers=24, hidden=4096, heads=32, adaln_mode="lora", rank=256)


def stdit_12b() -> DiTConfig:
    return DiTConfig(layers=24, hidden=4608, heads=48, adaln_mode="lora", rank=256)


def stdit_workload(name: str, config: DiTConfig, t: int, h: int, w: int, nodes: int = 8, global_batch: int = 128) -> WorkloadSpec:
    return WorkloadSpec(name, config, seq_len=t * h * w, global_batch=global_batch, nodes=nodes, arch="stdit", t=t, h=h, w=w)


# Frame layouts for the two ST-DiT context lengths: 16 latent frames of 32x68
# tokens (34816, ~35K) and of 64x72 tokens (73728, ~74K).
STDIT_35K = dict(t=16, h=32, w=68)
STDIT_74K = dict(t=16, h=64, w=72)


def _plan(tp=1, cp=1, pp=1, dp=1, fsdp=False, vpp=1) -> ParallelPlan:
    return ParallelPlan(DeviceGrid(tp, cp, pp, dp), fsdp=fsdp, sp=tp > 1, interleave=vpp)


def stdit_strategy_cases() -> list[tuple[WorkloadSpec, ParallelPlan]]:
    """The five model/context/parallelism rows used to compare ST-DiT attention strategies (64 devices)."""
    rows = [
        (stdit_workload("STDiT-7B-35K", stdit_7b(), **STDIT_35K), _plan(tp=2, pp=4, cp=4, dp=2, vpp=2)),
        (stdit_workload("STDiT-12B-35K", stdit_12b(), **STDIT_35K), _plan(cp=8, dp=8, fsdp=True)),
        (stdit_workload("STDiT-12B-35K", stdit_12b(), **STDIT_35K), _plan(tp=2, pp=4, cp=4, dp=2)),
        (stdit_workload("STDiT-7B-74K", stdit_7b(), **STDIT_74K), _plan(tp=2, pp=2, cp=8, dp=2)),
        (stdit_workload("STDiT-12B-74K", stdit_12b(), **STDIT_74K), _plan(tp=2, pp=4, cp=8, dp=1)),
    ]
    out = []
    for wl, plan in rows:
        m = wl.global_batch // plan.grid.dp
        out.append((wl, replace(plan, microbatches=m, stdit_mode="cp")))
    return out


def load_json(path) -> dict:
    return json.loads(Path(path).read_text())
