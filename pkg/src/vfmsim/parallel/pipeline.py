"""Simulated 4-D parallel DiT forward: TP x CP inside a block, GPipe over PP, batch split over DP."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..dit import (
    GATE_CA, GATE_MLP, GATE_SA, LN_EPS, SCALE_CA, SCALE_MLP, SCALE_SA, SHIFT_CA, SHIFT_MLP, SHIFT_SA,
    DiTConfig, _check_text, block_modulation, block_params, embed_timestep, gelu, linear, merge_heads,
    modulate, multihead_attention, silu, split_heads,
)
from ..numerics import ContractError, as_tensor, flop_counter, layer_norm, matmul, per_head_l2_normalize
from .attention import ring_attention_cp
from .mesh import CollectiveTrace, DeviceGrid, ShardedTensor, all_gather, all_reduce, p2p
from .tensor import tp_linear_forward

STRATEGIES = ("communicate", "recompute")


@dataclass
class PPSchedule:
    """GPipe timeline: all forwards, then all backwards; ``slots[stage][tick]`` is a microbatch or None."""

    pp: int
    microbatches: int
    forward: list[list[int | None]] = field(default_factory=list)
    backward: list[list[int | None]] = field(default_factory=list)

    @classmethod
    def gpipe(cls, pp: int, microbatches: int) -> "PPSchedule":
        ticks = microbatches + pp - 1
        fwd = [[tk - s if 0 <= tk - s < microbatches else None for tk in range(ticks)] for s in range(pp)]
        # backward runs the last stage first, microbatches in reverse
        bwd = [
            [microbatches - 1 - (tk - (pp - 1 - s)) if 0 <= tk - (pp - 1 - s) < microbatches else None for tk in range(ticks)]
            for s in range(pp)
        ]
        return cls(pp, microbatches, fwd, bwd)

    @property
    def ticks(self) -> int:
        return self.microbatches + self.pp - 1

    def idle_slots(self, stage: int) -> int:
        return sum(x is None for x in self.forward[stage]) + sum(x is None for x in self.backward[stage])

    @property
    def bubble_ticks(self) -> tuple[int, int]:
        """Pipeline fill and drain windows, in ticks, of each phase."""
        return self.pp - 1, self.pp - 1

    @property
    def bubble_fraction(self) -> float:
        return (self.pp - 1) / self.ticks


@dataclass
class ParallelResult:
    output: np.ndarray
    schedule: PPSchedule
    trace: CollectiveTrace
    cond_flops: list[int]


def _column_slice(n: int, tp: int, r: int) -> slice:
    w = n // tp
    return slice(r * w, (r + 1) * w)


def _sharded_attention(hs, bp, config: DiTConfig, tp: int, trace, mask, text=None):
    """Self-attention (``text is None``, ring over cp) or cross-attention (local, replicated text).

    ``hs`` are the cp shards of the modulated input; heads are split over tp.
    Returns per-cp-shard outputs after the row-parallel out-projection and all-reduce.
    """
    H, dh = config.heads, config.head_dim
    hl = H // tp
    pre = "attn" if text is None else "cross"
    partials = [[None] * tp for _ in hs]
    for r in range(tp):
        cols = _column_slice(config.hidden, tp, r)

        def proj(x, n):
            return split_heads(linear(x, bp[f"{pre}.w{n}"][:, cols], bp[f"{pre}.b{n}"][cols]), hl)

        q = [proj(h, "q") for h in hs]
        if text is None:
            k = [proj(h, "k") for h in hs]
            v = [proj(h, "v") for h in hs]
            q = [per_head_l2_normalize(a, bp["attn.q_scale"]) for a in q]
            k = [per_head_l2_normalize(a, bp["attn.k_scale"]) for a in k]
            outs = ring_attention_cp(q, k, v, mask, trace, tag="cp")
        else:
            k, v = proj(text, "k"), proj(text, "v")
            outs = [multihead_attention(a, k, v) for a in q]
        wo = bp[f"{pre}.wo"][cols, :]
        for i, o in enumerate(outs):
            partials[i][r] = matmul(merge_heads(o), wo)
    return [all_reduce(p, "tp", trace, tag="tp")[0] + bp[f"{pre}.bo"] for p in partials]


def parallel_block(xs, temb_act, text, bp, config: DiTConfig, tp: int, trace, mask=None):
    """One DiT block on cp shards ``[B, s/cp, d]`` (each replicated over tp)."""
    mod = block_modulation(bp, config, temb_act)

    hs = [modulate(layer_norm(x, eps=LN_EPS), mod[:, SHIFT_SA], mod[:, SCALE_SA]) for x in xs]
    a = _sharded_attention(hs, bp, config, tp, trace, mask)
    xs = [x + mod[:, GATE_SA][:, None, :] * ai for x, ai in zip(xs, a)]

    hs = [modulate(layer_norm(x, eps=LN_EPS), mod[:, SHIFT_CA], mod[:, SCALE_CA]) for x in xs]
    c = _sharded_attention(hs, bp, config, tp, trace, None, text=text)
    xs = [x + mod[:, GATE_CA][:, None, :] * ci for x, ci in zip(xs, c)]

    out = []
    for x in xs:
        h = modulate(layer_norm(x, eps=LN_EPS), mod[:, SHIFT_MLP], mod[:, SCALE_MLP])
        m = tp_linear_forward(h, bp["mlp.w1"], bp["mlp.w2"], tp, trace, bp["mlp.b1"], bp["mlp.b2"], gelu)
        out.append(x + mod[:, GATE_MLP][:, None, :] * m)
    return out


def _check_grid(config: DiTConfig, grid: DeviceGrid, batch: int, seq: int, microbatches: int):
    if config.layers % grid.pp:
        raise ContractError(f"pp={grid.pp} does not divide {config.layers} layers")
    if config.heads % grid.tp or config.mlp_hidden % grid.tp:
        raise ContractError(f"tp={grid.tp} must divide heads ({config.heads}) and MLP width ({config.mlp_hidden})")
    if seq % grid.cp:
        raise ContractError(f"cp={grid.cp} does not divide sequence length {seq}")
    if microbatches < 1 or batch % (grid.dp * microbatches):
        raise ContractError(f"dp*microbatches={grid.dp * microbatches} must divide batch {batch}")


def pp_execute(params: dict, config: DiTConfig, tokens, c_noise, text, grid: DeviceGrid = DeviceGrid(),
               microbatches: int = 1, strategy: str = "recompute", mask=None,
               trace: CollectiveTrace | None = None) -> ParallelResult:
    """Forward pass of the full DiT on a simulated ``tp x cp x pp x dp`` grid.

    Layers are split evenly over pp stages and microbatches flow in GPipe
    order. With ``strategy="communicate"`` the first stage computes the
    timestep embedding and every inter-stage send carries it together with the
    text conditioning; with ``"recompute"`` each stage rebuilds the embedding
    from ``c_noise`` and sends activations only. ``cond_flops[stage]`` counts
    the GEMM FLOPs each stage spends on the embedding.
    """
    if strategy not in STRATEGIES:
        raise ContractError(f"strategy must be one of {STRATEGIES}")
    trace = trace if trace is not None else CollectiveTrace()
    tokens = as_tensor(tokens)
    if tokens.ndim != 3 or tokens.shape[2] != config.patch_dim:
        raise ContractError(f"tokens must be [B, s, {config.patch_dim}], got {tokens.shape}")
    B, s, _ = tokens.shape
    text = _check_text(text, config, B)
    c_noise = np.broadcast_to(np.atleast_1d(as_tensor(c_noise)), (B,))
    mask = None if mask is None else np.asarray(mask, dtype=bool)
    _check_grid(config, grid, B, s, microbatches)

    pp, cp, tp, m = grid.pp, grid.cp, grid.tp, microbatches
    per_stage = config.layers // pp
    schedule = PPSchedule.gpipe(pp, m)
    cond_flops = [0] * pp
    bm = B // (grid.dp * m)
    out = np.empty((B, s, config.patch_dim))

    for rep in range(grid.dp):
        # stage-resident state per microbatch: cp shards and (under communicate) received conditioning
        acts: dict[int, list[np.ndarray]] = {}
        conds: dict[int, np.ndarray] = {}
        for tick in range(schedule.ticks):
            for stage in range(pp):
                mb = schedule.forward[stage][tick]
                if mb is None:
                    continue
                rows = slice((rep * m + mb) * bm, (rep * m + mb + 1) * bm)
                mb_text = text[rows]
                mb_mask = mask[rows] if mask is not None and mask.ndim == 3 else mask
                if stage == 0 or strategy == "recompute":
                    with flop_counter() as fc:
                        temb_act = silu(embed_timestep(params, config, c_noise[rows]))
                    cond_flops[stage] += fc.matmul_flops
                else:
                    temb_act = conds[mb]
                if stage == 0:
                    x = linear(tokens[rows], params["embed.w"], params["embed.b"])
                    acts[mb] = ShardedTensor.shard(x, cp, dim=1).shards
                xs = acts[mb]
                for layer in range(stage * per_stage, (stage + 1) * per_stage):
                    xs = parallel_block(xs, temb_act, mb_text, block_params(params, layer), config, tp, trace, mb_mask)
                if stage < pp - 1:
                    n = sum(x.size for x in xs)
                    if strategy == "communicate":
                        n += temb_act.size + mb_text.size
                        conds[mb] = temb_act
                    p2p(n, 2, "pp", trace, tag="pp")
                    acts[mb] = xs
                else:
                    ys = [linear(layer_norm(x, eps=LN_EPS), params["final.w"], params["final.b"]) for x in xs]
                    out[rows] = all_gather(ShardedTensor(ys, "cp", 1), trace, tag="cp.gather").shards[0]
    return ParallelResult(out, schedule, trace, cond_flops)
