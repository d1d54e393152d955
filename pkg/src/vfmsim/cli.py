"""Command-line entry point.

Exit codes: 0 success, 1 usage or schema error, 2 infeasible or empty input.
Every command writes its outputs plus ``manifest.json`` into ``--out``.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import sys
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import curation
from .data import BlendSpec, Sample, blend, dedup_assign_and_distribute, load_manifest, pack_sequences, read_shards
from .data import write_manifest, write_shards
from .dit import DiTConfig, init_params
from .numerics import ContractError, SeededRng
from .parallel.inference import GuidedDiT, cp_parallel_denoise
from .parallel.mesh import CollectiveTrace, DeviceGrid
from .planner.model import cp_inference_scaling, sampler_evals
from .planner.recommend import context_sweep, recommend
from .planner.workloads import HardwareProfile, WorkloadSpec, dit_7b
from .train import MAX_TOY_PARAMS, ToyTrainSpec, train_toy

VERSION = "0.1.0"

EXIT_OK, EXIT_USAGE, EXIT_EMPTY = 0, 1, 2


class UsageError(Exception):
    pass


class EmptyResult(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


# --- manifests -------------------------------------------------------------------------------

def digest(obj) -> str:
    """sha256 over canonical JSON; independent of key order."""
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode()).hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None = None
    version: str = VERSION
    outputs: list[str] = field(default_factory=list)

    @property
    def config_digest(self) -> str:
        return digest(self.config)

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "config": self.config,
            "config_digest": self.config_digest,
            "seed": self.seed,
            "tool_version": self.version,
            "outputs": sorted(self.outputs),
        }

    def write(self, out_dir: Path) -> Path:
        path = out_dir / "manifest.json"
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


class Outputs:
    """Writes files under one directory and remembers them for the manifest."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.paths: list[str] = []

    def path(self, name: str) -> Path:
        p = self.root / name
        self.paths.append(name)
        return p

    def text(self, name: str, content: str) -> Path:
        p = self.path(name)
        p.write_text(content)
        return p

    def json(self, name: str, obj) -> Path:
        return self.text(name, json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n")


def _csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return buf.getvalue()


# --- schema checks -------------------------------------------------------------------------

def preset_path(name: str) -> Path:
    return Path(str(resources.files("vfmsim") / "presets" / name))


def _load_json(path, what: str):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"{what}: file not found: {path}")
    except json.JSONDecodeError as err:
        raise UsageError(f"{what}: malformed JSON in {path}: {err}")


def _require(obj, path: str, fields: dict):
    if not isinstance(obj, dict):
        raise UsageError(f"{path}: expected an object")
    for name, (kind, required) in fields.items():
        if name not in obj:
            if required:
                raise UsageError(f"{path}.{name}: missing required field")
            continue
        val = obj[name]
        ok = isinstance(val, kind) and not (kind is not bool and isinstance(val, bool))
        if not ok:
            want = kind.__name__ if isinstance(kind, type) else "/".join(k.__name__ for k in kind)
            raise UsageError(f"{path}.{name}: expected {want}, got {type(val).__name__}")
    unknown = set(obj) - set(fields)
    if unknown:
        raise UsageError(f"{path}.{sorted(unknown)[0]}: unknown field")


NUM = (int, float)
CONFIG_FIELDS = {
    "layers": (int, True), "hidden": (int, True), "heads": (int, True), "adaln_mode": (str, False),
    "rank": (int, False), "cross_dim": (int, False), "mlp_ratio": (NUM, False), "patch_dim": (int, False),
}
WORKLOAD_FIELDS = {
    "name": (str, True), "config": (dict, True), "seq_len": (int, True), "global_batch": (int, True),
    "nodes": (int, True), "text_len": (int, False), "dtype_bytes": (int, False), "arch": (str, False),
    "t": (int, False), "h": (int, False), "w": (int, False),
}
HARDWARE_FIELDS = {
    "peak_flops_per_device": (NUM, True), "intra_node_bw": (NUM, True), "inter_node_bw": (NUM, True),
    "devices_per_node": (int, True), "link_latency": (NUM, True), "hbm_capacity": (NUM, True),
}
STAGE_FIELDS = {"name": (str, True), "per_worker_rate": (NUM, True), "worker_cost": (NUM, False),
                "hw_accel_factor": (NUM, False)}


def _config(d: dict, path: str) -> DiTConfig:
    _require(d, path, CONFIG_FIELDS)
    try:
        return DiTConfig.from_dict(d)
    except ContractError as err:
        raise UsageError(f"{path}: {err}")


def parse_workload(d) -> WorkloadSpec:
    _require(d, "workload", WORKLOAD_FIELDS)
    cfg = _config(d["config"], "workload.config")
    try:
        return WorkloadSpec.from_dict(dict(d, config=cfg))
    except ContractError as err:
        raise UsageError(f"workload: {err}")


def parse_hardware(d) -> HardwareProfile:
    _require(d, "hardware", HARDWARE_FIELDS)
    try:
        return HardwareProfile.from_dict(d)
    except ContractError as err:
        raise UsageError(f"hardware: {err}")


def parse_pipeline(d) -> curation.PipelineSpec:
    _require(d, "pipeline", {"stages": (list, True), "budget": (NUM, True), "queue_capacity": ((list, type(None)), False)})
    for i, s in enumerate(d["stages"]):
        _require(s, f"pipeline.stages[{i}]", STAGE_FIELDS)
    try:
        return curation.PipelineSpec.from_dict(d)
    except ContractError as err:
        raise UsageError(f"pipeline: {err}")


def _grid(text: str) -> DeviceGrid:
    try:
        return DeviceGrid.parse(text)
    except (ContractError, ValueError) as err:
        raise UsageError(f"--grid: {err}")


# --- commands ------------------------------------------------------------------------------

def _int_list(text: str, flag: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"{flag}: expected comma-separated integers, got {text!r}")
    if any(v < 1 for v in vals):
        raise UsageError(f"{flag}: values must be positive")
    return vals


def cmd_plan(args) -> int:
    wl_raw = _load_json(args.workload, "workload")
    hw_raw = _load_json(args.hardware, "hardware") if args.hardware else asdict(HardwareProfile())
    workload, hw = parse_workload(wl_raw), parse_hardware(hw_raw)
    out = Outputs(args.out)
    rec = recommend(workload, hw, limit=args.limit)
    out.json("plans.json", rec.to_dict())
    out.text("plans.csv", rec.to_csv())
    sweep = _int_list(args.sweep, "--sweep")
    if workload.arch == "dit" and sweep:
        out.text("context_sweep.csv", _csv(context_sweep(workload, sweep, hw)) or "seq_len,family,plan,step_time_s\n")
    conf = {"workload": wl_raw, "hardware": hw_raw, "limit": args.limit, "sweep": sweep}
    RunManifest("plan", conf, None, outputs=out.paths).write(out.root)
    if rec.top is None:
        print(f"{workload.name}: {rec.reason}")
        return EXIT_EMPTY
    print(f"{workload.name}: {len(rec.plans)} feasible plans, {rec.infeasible} over memory")
    for rp in rec.plans[:10]:
        r = rp.row()
        print(f"  {r['plan']:<40} step {r['step_time_s']:9.3f} s  MFU {r['mfu']:.3f}  mem {r['memory_gb']:6.1f} GB  rules {r['rules']}")
    return EXIT_OK


def _toy_config(path) -> tuple[DiTConfig, dict]:
    raw = _load_json(path or preset_path("toy_model.json"), "config")
    return _config(raw, "config"), raw


def cmd_simulate_train(args) -> int:
    cfg, raw = _toy_config(args.config)
    grid = _grid(args.grid)
    spec = ToyTrainSpec(cfg, batch=args.batch, seq_len=args.seq_len, lr=args.lr, seed=args.seed,
                        microbatches=args.microbatches)
    try:
        losses, trace = train_toy(spec, grid, args.steps)
    except ContractError as err:
        raise UsageError(str(err))
    out = Outputs(args.out)
    out.text("loss.csv", _csv([{"step": i, "loss": repr(v)} for i, v in enumerate(losses)]) or "step,loss\n")
    out.text("trace.jsonl", trace.to_jsonl())
    conf = {"model": raw, "grid": asdict(grid), "steps": args.steps, "batch": args.batch, "seq_len": args.seq_len,
            "lr": args.lr, "microbatches": args.microbatches, "max_params": MAX_TOY_PARAMS}
    RunManifest("simulate-train", conf, args.seed, outputs=out.paths).write(out.root)
    print(f"{args.steps} steps on grid {args.grid}; final loss {losses[-1]:.6f}" if losses else "0 steps; empty trace")
    return EXIT_OK


def cmd_infer(args) -> int:
    cfg, raw = _toy_config(args.config)
    grid = DeviceGrid(tp=args.tp, cp=args.cp)
    rng = SeededRng(args.seed)
    params = init_params(cfg, args.seed)
    text = rng.split(1).normal((args.text_len, cfg.cross_dim))
    model = GuidedDiT(params, cfg, text, cfg_scale=args.cfg)
    noise = rng.split(2).normal((args.tokens, cfg.patch_dim)) * model.edm.sigma_max
    trace = CollectiveTrace()
    try:
        latent = cp_parallel_denoise(model, noise, args.steps, grid, trace)
    except ContractError as err:
        raise UsageError(str(err))
    out = Outputs(args.out)
    np.save(out.path("latent.npy"), latent)
    target = dit_7b()
    scaling = cp_inference_scaling(target, args.scaling_seq_len, args.steps)
    out.text("scaling.csv", _csv(scaling))
    report = {
        "tokens": args.tokens, "cp": args.cp, "tp": args.tp, "steps": args.steps, "cfg": args.cfg,
        "network_evals": sampler_evals(args.steps),
        "collective_bytes": trace.by_kind(),
        "scaling_model": {"model": asdict(target), "seq_len": args.scaling_seq_len, "rows": scaling},
    }
    out.json("report.json", report)
    conf = {"model": raw, "tokens": args.tokens, "cp": args.cp, "tp": args.tp, "steps": args.steps,
            "cfg": args.cfg, "text_len": args.text_len, "scaling_seq_len": args.scaling_seq_len}
    RunManifest("infer", conf, args.seed, outputs=out.paths).write(out.root)
    print(f"sampled [{args.tokens}, {cfg.patch_dim}] latent with cp={args.cp} in {args.steps} steps")
    for r in scaling:
        print(f"  {r['gpus']:3d} GPUs  latency {r['latency_s']:9.2f} s  speedup {r['speedup']:6.2f}  eff {r['efficiency']:.2f}")
    return EXIT_OK


def _shard_sources(path: Path) -> list[Path]:
    if path.is_file():
        if path.suffix == ".json":
            return load_manifest(path)
        return [path]
    if path.is_dir():
        return sorted(path.glob("*.tar"))
    raise UsageError(f"input not found: {path}")


def cmd_pack(args) -> int:
    groups = [_shard_sources(Path(p)) for p in args.input]
    if not any(groups):
        raise EmptyResult("no shards in input")
    if args.weights and len(args.weights) != len(groups):
        raise UsageError("--weights needs one entry per input")
    streams = [read_shards(g) for g in groups]
    if len(streams) == 1:
        stream = streams[0]
    else:
        stream = blend(streams, BlendSpec(args.weights or [1.0] * len(groups), args.seed))
    lengths = []

    def counted():
        for s in stream:
            lengths.append(s.token_len)
            yield s

    try:
        packs = list(pack_sequences(counted(), args.max_len, args.buffer))
    except ContractError as err:
        raise UsageError(str(err))
    if not packs:
        raise EmptyResult("input shards contain no samples")
    out = Outputs(args.out)
    lines = [json.dumps({"segments": [[s.sample_id, s.start, s.length] for s in p.segments], "pad_len": p.pad_len},
                        sort_keys=True) for p in packs]
    out.text("packs.jsonl", "\n".join(lines) + "\n")
    packed_tokens = sum(p.total_len for p in packs)
    summary = {
        "samples": len(lengths), "sample_tokens": sum(lengths), "packs": len(packs),
        "packed_tokens": packed_tokens, "pad_tokens": sum(p.pad_len for p in packs),
        "pad_fraction": sum(p.pad_len for p in packs) / (len(packs) * args.max_len),
    }
    out.json("summary.json", summary)
    conf = {"input": [str(p) for g in groups for p in g], "max_len": args.max_len, "buffer": args.buffer,
            "weights": args.weights}
    RunManifest("pack", conf, args.seed, outputs=out.paths).write(out.root)
    print(f"{summary['samples']} samples -> {summary['packs']} packs, padding {summary['pad_fraction']:.3f}")
    return EXIT_OK


def _synthetic_samples(n: int, seed: int) -> list[Sample]:
    rng = SeededRng(seed)
    out = []
    for i in range(n):
        r = rng.split(i)
        video = bool(r.integers(0, 2))
        t = int(r.integers(1, 5)) * 2 if video else 1
        h, w = (int(v) * 2 for v in r.integers(2, 9, shape=2))
        payload = r.integers(0, 256, shape=int(r.integers(16, 2048))).astype(np.uint8).tobytes()
        out.append(Sample(f"sample{i:06d}", "video" if video else "image", t, h, w, payload, r.normal((8,))))
    return out


def _read_sample_dir(path: Path) -> list[Sample]:
    out = []
    for meta_path in sorted(path.glob("*.json")):
        meta = json.loads(meta_path.read_text())
        payload_path = meta_path.with_suffix(".bin")
        payload = payload_path.read_bytes() if payload_path.exists() else b""
        emb_path = meta_path.with_suffix(".npy")
        emb = np.load(emb_path) if emb_path.exists() else None
        try:
            out.append(Sample(meta_path.stem, meta["modality"], meta.get("t", 1), meta["h"], meta["w"], payload, emb))
        except (KeyError, ContractError) as err:
            raise UsageError(f"{meta_path}: {err}")
    return out


def cmd_shard(args) -> int:
    if args.synthetic:
        samples = _synthetic_samples(args.synthetic, args.seed)
    elif args.input:
        if not Path(args.input).is_dir():
            raise UsageError(f"input directory not found: {args.input}")
        samples = _read_sample_dir(Path(args.input))
    else:
        raise UsageError("give an input directory or --synthetic N")
    if not samples:
        raise EmptyResult("no samples found")
    out = Outputs(args.out)
    try:
        paths = write_shards(samples, out.root / "shards", args.max_shard_bytes)
    except ContractError as err:
        raise UsageError(str(err))
    out.paths.extend(str(p.relative_to(out.root)) for p in paths)
    manifest = write_manifest(paths, out.path("dataset.json"))
    dist = dedup_assign_and_distribute(paths, args.ranks)
    ledger = [{"rank": r.rank, "origin_shards": len(r.origin_shards), "origin_bytes": r.origin_bytes,
               "allgather_bytes": r.allgather_bytes} for r in dist.ledger]
    out.text("ledger.csv", _csv(ledger))
    conf = {"samples": [s.metadata() for s in samples], "max_shard_bytes": args.max_shard_bytes, "ranks": args.ranks,
            "synthetic": args.synthetic}
    RunManifest("shard", conf, args.seed, outputs=out.paths).write(out.root)
    print(f"{manifest['total_samples']} samples in {len(paths)} shards; origin bytes {dist.origin_total} "
          f"over {args.ranks} ranks")
    return EXIT_OK


def cmd_balance(args) -> int:
    raw = _load_json(args.pipeline or preset_path("pipeline_example.json"), "pipeline")
    pipe = parse_pipeline(raw)
    opt = curation.optimize_allocation(pipe)
    base = curation.equal_split(pipe)
    rep = curation.speedup_report(pipe, base, opt, args.items, args.cv, args.seed)
    out = Outputs(args.out)
    rep["allocation"] = list(opt.workers)
    rep["fractional_bound"] = curation.fractional_bound(pipe)
    out.json("balance.json", rep)
    out.text("utilization.csv", _csv(rep["stages"]))
    RunManifest("balance", {"pipeline": raw, "items": args.items, "cv": args.cv}, args.seed, outputs=out.paths).write(out.root)
    print(f"allocation {tuple(opt.workers)}")
    print(f"analytic throughput {rep['optimized_analytic']:.4f} items/s, simulated {rep['optimized_throughput']:.4f}")
    print(f"equal split {tuple(base.workers)}: simulated {rep['baseline_throughput']:.4f}; speedup {rep['ratio']:.3f}")
    sys.stdout.write(_csv(rep["stages"]))
    return EXIT_OK


# --- parser --------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vfmsim", description="Desk-scale simulator and planner for video diffusion training")
    p.add_argument("--version", action="version", version=VERSION)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("plan", help="rank parallel plans for a workload")
    s.add_argument("workload")
    s.add_argument("--hardware")
    s.add_argument("--limit", type=int)
    s.add_argument("--sweep", default="8192,16384,32768,73728",
                   help="context lengths for context_sweep.csv (dit workloads; empty to skip)")
    s.add_argument("--out", default="out/plan")
    s.set_defaults(fn=cmd_plan)

    s = sub.add_parser("simulate-train", help="toy training run on a simulated grid")
    s.add_argument("--config")
    s.add_argument("--grid", default="1,1,1,1", help="tp,cp,pp,dp")
    s.add_argument("--steps", type=int, default=10)
    s.add_argument("--batch", type=int, default=4)
    s.add_argument("--seq-len", type=int, default=16)
    s.add_argument("--microbatches", type=int, default=1)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="out/train")
    s.set_defaults(fn=cmd_simulate_train)

    s = sub.add_parser("infer", help="context-parallel guided sampling of a toy model")
    s.add_argument("--config")
    s.add_argument("--cp", type=int, default=1)
    s.add_argument("--tp", type=int, default=1)
    s.add_argument("--steps", type=int, default=8)
    s.add_argument("--cfg", type=float, default=1.0)
    s.add_argument("--tokens", type=int, default=16)
    s.add_argument("--text-len", type=int, default=4)
    s.add_argument("--scaling-seq-len", type=int, default=73728)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="out/infer")
    s.set_defaults(fn=cmd_infer)

    s = sub.add_parser("pack", help="pack samples from shard sets into fixed-length sequences")
    s.add_argument("input", nargs="+", help="shard directory, shard file or dataset manifest")
    s.add_argument("--weights", type=float, nargs="+")
    s.add_argument("--max-len", type=int, default=1024)
    s.add_argument("--buffer", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="out/pack")
    s.set_defaults(fn=cmd_pack)

    s = sub.add_parser("shard", help="write samples into tar shards and plan their distribution")
    s.add_argument("input", nargs="?", help="directory of <id>.json (+ .bin, .npy) sample files")
    s.add_argument("--synthetic", type=int, default=0, help="generate N random samples instead")
    s.add_argument("--max-shard-bytes", type=int, default=1 << 20)
    s.add_argument("--ranks", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="out/shard")
    s.set_defaults(fn=cmd_shard)

    s = sub.add_parser("balance", help="allocate curation workers and simulate the pipeline")
    s.add_argument("pipeline", nargs="?")
    s.add_argument("--items", type=int, default=2000)
    s.add_argument("--cv", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="out/balance")
    s.set_defaults(fn=cmd_balance)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except UsageError as err:
        print(f"vfmsim {args.command}: {err}", file=sys.stderr)
        return EXIT_USAGE
    except EmptyResult as err:
        print(f"vfmsim {args.command}: {err}", file=sys.stderr)
        return EXIT_EMPTY


if __name__ == "__main__":
    sys.exit(main())
