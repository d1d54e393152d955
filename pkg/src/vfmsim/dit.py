"""Toy diffusion transformer with AdaLN / AdaLN-LoRA conditioning.

Activations are batched ``[B, s, d]`` float64 arrays. Parameters live in a flat
``dict[str, ndarray]`` keyed like ``"blocks.0.attn.wq"`` so the parallel
executor can slice them and the backward pass can return matching gradients.

Each block is::

    mod = AdaLN(silu(t_emb))                     # 9 vectors of width d
    x += gate_sa * SelfAttn(modulate(LN(x), shift_sa, scale_sa))
    x += gate_ca * CrossAttn(modulate(LN(x), shift_ca, scale_ca), text)
    x += gate_mlp * MLP(modulate(LN(x), shift_mlp, scale_mlp))

Self-attention normalizes queries and keys per head before the dot product.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .numerics import (
    ContractError,
    SeededRng,
    as_tensor,
    layer_norm,
    matmul,
    per_head_l2_normalize,
    reference_attention,
)

ADALN_BRANCHES = 9
SHIFT_SA, SCALE_SA, GATE_SA, SHIFT_CA, SCALE_CA, GATE_CA, SHIFT_MLP, SCALE_MLP, GATE_MLP = range(9)
LN_EPS = 1e-6


@dataclass(frozen=True)
class DiTConfig:
    layers: int
    hidden: int
    heads: int
    adaln_mode: str = "full"  # "full" | "lora"
    rank: int = 0
    cross_dim: int = 1024
    mlp_ratio: float = 4.0
    patch_dim: int = 64

    def __post_init__(self):
        if self.layers < 1 or self.hidden < 1 or self.heads < 1:
            raise ContractError("layers, hidden and heads must be positive")
        if self.hidden % self.heads:
            raise ContractError(f"heads={self.heads} does not divide hidden={self.hidden}")
        if self.adaln_mode not in ("full", "lora"):
            raise ContractError(f"unknown adaln_mode {self.adaln_mode!r}")
        if self.adaln_mode == "lora" and not 1 <= self.rank < 9 * self.hidden:
            raise ContractError("LoRA rank must satisfy 1 <= rank < 9*hidden")
        if self.mlp_hidden < 1:
            raise ContractError("mlp_ratio too small")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.mlp_ratio * self.hidden))

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "DiTConfig":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)

    @classmethod
    def from_json(cls, text: str) -> "DiTConfig":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class PatchSpec:
    pt: int = 1
    ph: int = 2
    pw: int = 2

    def __post_init__(self):
        if min(self.pt, self.ph, self.pw) < 1:
            raise ContractError("patch extents must be positive")

    def tokens(self, t: int, h: int, w: int) -> int:
        if t % self.pt or h % self.ph or w % self.pw:
            raise ContractError(f"extents {(t, h, w)} not divisible by patch {(self.pt, self.ph, self.pw)}")
        return (t // self.pt) * (h // self.ph) * (w // self.pw)


@dataclass
class ConditioningSet:
    sigma: float
    text: np.ndarray
    extras: dict[str, np.ndarray] = field(default_factory=dict)


# --- patchify -----------------------------------------------------------------

def patchify3d(latent, spec: PatchSpec) -> np.ndarray:
    """``[t, h, w, c]`` -> ``[(t/pt)(h/ph)(w/pw), pt*ph*pw*c]``, tokens t-major."""
    x = as_tensor(latent)
    if x.ndim != 4:
        raise ContractError(f"latent must be [t, h, w, c], got {x.shape}")
    t, h, w, c = x.shape
    spec.tokens(t, h, w)
    x = x.reshape(t // spec.pt, spec.pt, h // spec.ph, spec.ph, w // spec.pw, spec.pw, c)
    x = x.transpose(0, 2, 4, 1, 3, 5, 6)
    return x.reshape(-1, spec.pt * spec.ph * spec.pw * c).copy()


def unpatchify3d(tokens, spec: PatchSpec, extents) -> np.ndarray:
    t, h, w, c = extents
    n = spec.tokens(t, h, w)
    x = as_tensor(tokens)
    if x.shape != (n, spec.pt * spec.ph * spec.pw * c):
        raise ContractError(f"token array {x.shape} does not match extents {tuple(extents)}")
    x = x.reshape(t // spec.pt, h // spec.ph, w // spec.pw, spec.pt, spec.ph, spec.pw, c)
    x = x.transpose(0, 3, 1, 4, 2, 5, 6)
    return x.reshape(t, h, w, c).copy()


# --- embeddings -----------------------------------------------------------------

def sinusoidal_embed(value: float, dim: int) -> np.ndarray:
    if dim < 2 or dim % 2:
        raise ContractError(f"embedding dim must be even, got {dim}")
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = value * freqs
    return np.concatenate([np.sin(args), np.cos(args)])


def timestep_embed(sigma: float, dim: int) -> np.ndarray:
    """Sinusoidal features of ``c_noise = ln(sigma) / 4``."""
    if not sigma > 0:
        raise ContractError("sigma must be positive for the timestep embedding")
    return sinusoidal_embed(math.log(sigma) / 4.0, dim)


# --- elementwise helpers ------------------------------------------------------------

def silu(x):
    return x / (1.0 + np.exp(-x))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x**3)))


def linear(x, w, b=None):
    y = matmul(x, w)
    return y if b is None else y + b


def modulate(x, shift, scale):
    """``shift``/``scale`` are per-sample ``[B, d]``; ``x`` is ``[B, s, d]``."""
    return x * (1.0 + scale[:, None, :]) + shift[:, None, :]


# --- AdaLN ----------------------------------------------------------------------------

def adaln_modulate(t_emb, weight, bias=None) -> np.ndarray:
    """Single affine map ``t_emb @ weight + bias`` split into ``[..., 9, d]``."""
    t_emb = as_tensor(t_emb)
    weight = as_tensor(weight)
    d = t_emb.shape[-1]
    if weight.shape != (d, ADALN_BRANCHES * d):
        raise ContractError(f"AdaLN weight must be [{d}, {9 * d}], got {weight.shape}")
    if bias is not None and as_tensor(bias).shape != (ADALN_BRANCHES * d,):
        raise ContractError("AdaLN bias must be [9d]")
    out = linear(t_emb, weight, bias)
    return out.reshape(*t_emb.shape[:-1], ADALN_BRANCHES, d)


def adaln_lora_modulate(t_emb, down, up, bias=None) -> np.ndarray:
    """Low-rank AdaLN: ``(t_emb @ down) @ up + bias`` with ``down [d, r]``, ``up [r, 9d]``."""
    t_emb = as_tensor(t_emb)
    down, up = as_tensor(down), as_tensor(up)
    d = t_emb.shape[-1]
    if down.ndim != 2 or down.shape[0] != d or down.shape[1] < 1:
        raise ContractError(f"LoRA down projection must be [{d}, r], got {down.shape}")
    if up.shape != (down.shape[1], ADALN_BRANCHES * d):
        raise ContractError(f"LoRA up projection must be [{down.shape[1]}, {9 * d}], got {up.shape}")
    out = linear(matmul(t_emb, down), up, bias)
    return out.reshape(*t_emb.shape[:-1], ADALN_BRANCHES, d)


def block_modulation(bp: dict, config: DiTConfig, temb_act) -> np.ndarray:
    if config.adaln_mode == "lora":
        return adaln_lora_modulate(temb_act, bp["adaln.down"], bp["adaln.up"], bp["adaln.b"])
    return adaln_modulate(temb_act, bp["adaln.w"], bp["adaln.b"])


# --- attention pieces -----------------------------------------------------------------------

def split_heads(x, heads: int):
    B, s, d = x.shape
    return x.reshape(B, s, heads, d // heads)


def merge_heads(x):
    B, s, H, dh = x.shape
    return x.reshape(B, s, H * dh)


def multihead_attention(q, k, v, mask=None) -> np.ndarray:
    """Per-(sample, head) :func:`reference_attention` on ``[B, s, H, dh]`` arrays."""
    B, sq, H, dh = q.shape
    out = np.zeros((B, sq, H, v.shape[-1]))
    for b in range(B):
        m = None
        if mask is not None:
            m = mask[b] if np.ndim(mask) == 3 else mask
        for h in range(H):
            out[b, :, h] = reference_attention(q[b, :, h], k[b, :, h], v[b, :, h], m)
    return out


def project_qkv(h, wq, bq, wk, bk, wv, bv, q_scale, k_scale, heads: int):
    """Self-attention projections with per-head QK normalization."""
    q = per_head_l2_normalize(split_heads(linear(h, wq, bq), heads), q_scale)
    k = per_head_l2_normalize(split_heads(linear(h, wk, bk), heads), k_scale)
    v = split_heads(linear(h, wv, bv), heads)
    return q, k, v


def cross_attention_heads(h, text, wq, bq, wk, bk, wv, bv, heads: int) -> np.ndarray:
    """Video queries against text keys/values; returns merged heads before the out-projection."""
    q = split_heads(linear(h, wq, bq), heads)
    k = split_heads(linear(text, wk, bk), heads)
    v = split_heads(linear(text, wv, bv), heads)
    return merge_heads(multihead_attention(q, k, v))


# --- parameters -------------------------------------------------------------------------------

def _block_shapes(config: DiTConfig) -> dict[str, tuple[int, ...]]:
    d, c, f, dh = config.hidden, config.cross_dim, config.mlp_hidden, config.head_dim
    shapes: dict[str, tuple[int, ...]] = {}
    if config.adaln_mode == "lora":
        shapes["adaln.down"] = (d, config.rank)
        shapes["adaln.up"] = (config.rank, 9 * d)
    else:
        shapes["adaln.w"] = (d, 9 * d)
    shapes["adaln.b"] = (9 * d,)
    for n in ("q", "k", "v", "o"):
        shapes[f"attn.w{n}"] = (d, d)
        shapes[f"attn.b{n}"] = (d,)
    shapes["attn.q_scale"] = (dh,)
    shapes["attn.k_scale"] = (dh,)
    shapes["cross.wq"] = (d, d)
    shapes["cross.bq"] = (d,)
    shapes["cross.wk"] = (c, d)
    shapes["cross.bk"] = (d,)
    shapes["cross.wv"] = (c, d)
    shapes["cross.bv"] = (d,)
    shapes["cross.wo"] = (d, d)
    shapes["cross.bo"] = (d,)
    shapes["mlp.w1"] = (d, f)
    shapes["mlp.b1"] = (f,)
    shapes["mlp.w2"] = (f, d)
    shapes["mlp.b2"] = (d,)
    return shapes


def param_shapes(config: DiTConfig) -> dict[str, tuple[int, ...]]:
    d, p = config.hidden, config.patch_dim
    shapes = {
        "embed.w": (p, d),
        "embed.b": (d,),
        "temb.w1": (d, d),
        "temb.b1": (d,),
        "temb.w2": (d, d),
        "temb.b2": (d,),
    }
    for layer in range(config.layers):
        for k, v in _block_shapes(config).items():
            shapes[f"blocks.{layer}.{k}"] = v
    shapes["final.w"] = (d, p)
    shapes["final.b"] = (p,)
    return shapes


def init_params(config: DiTConfig, seed: int = 0, bias_std: float = 0.02) -> dict[str, np.ndarray]:
    rng = SeededRng(seed)
    params = {}
    for i, (name, shape) in enumerate(param_shapes(config).items()):
        r = rng.split(i)
        if name.endswith("_scale"):
            params[name] = np.ones(shape) + r.normal(shape, scale=0.1)
        elif len(shape) == 1:
            params[name] = r.normal(shape, scale=bias_std)
        else:
            params[name] = r.normal(shape, scale=1.0 / math.sqrt(shape[0]))
    return params


def block_params(params: dict, layer: int) -> dict[str, np.ndarray]:
    prefix = f"blocks.{layer}."
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


# --- forward -------------------------------------------------------------------------------------

def embed_timestep(params: dict, config: DiTConfig, c_noise) -> np.ndarray:
    """Per-sample conditioning vector ``[B, d]`` from ``c_noise`` values ``[B]``."""
    c_noise = np.atleast_1d(as_tensor(c_noise))
    base = np.stack([sinusoidal_embed(float(c), config.hidden) for c in c_noise])
    h = silu(linear(base, params["temb.w1"], params["temb.b1"]))
    return linear(h, params["temb.w2"], params["temb.b2"])


AttnFn = Callable[[np.ndarray, np.ndarray, np.ndarray, object], np.ndarray]


def _block(x, temb_act, text, bp, config: DiTConfig, mask=None, attn_fn: AttnFn | None = None):
    attn_fn = attn_fn or multihead_attention
    H = config.heads
    mod = block_modulation(bp, config, temb_act)

    h = modulate(layer_norm(x, eps=LN_EPS), mod[:, SHIFT_SA], mod[:, SCALE_SA])
    q, k, v = project_qkv(
        h, bp["attn.wq"], bp["attn.bq"], bp["attn.wk"], bp["attn.bk"], bp["attn.wv"], bp["attn.bv"],
        bp["attn.q_scale"], bp["attn.k_scale"], H,
    )
    a = linear(merge_heads(attn_fn(q, k, v, mask)), bp["attn.wo"], bp["attn.bo"])
    x = x + mod[:, GATE_SA][:, None, :] * a

    h = modulate(layer_norm(x, eps=LN_EPS), mod[:, SHIFT_CA], mod[:, SCALE_CA])
    c = cross_attention_heads(
        h, text, bp["cross.wq"], bp["cross.bq"], bp["cross.wk"], bp["cross.bk"], bp["cross.wv"], bp["cross.bv"], H
    )
    x = x + mod[:, GATE_CA][:, None, :] * linear(c, bp["cross.wo"], bp["cross.bo"])

    h = modulate(layer_norm(x, eps=LN_EPS), mod[:, SHIFT_MLP], mod[:, SCALE_MLP])
    m = linear(gelu(linear(h, bp["mlp.w1"], bp["mlp.b1"])), bp["mlp.w2"], bp["mlp.b2"])
    return x + mod[:, GATE_MLP][:, None, :] * m


def _check_text(text, config: DiTConfig, batch: int):
    text = as_tensor(text)
    if text.ndim == 2:
        text = np.broadcast_to(text, (batch, *text.shape))
    if text.ndim != 3 or text.shape[0] != batch or text.shape[2] != config.cross_dim:
        raise ContractError(f"text must be [B, s_text, {config.cross_dim}], got {text.shape}")
    if text.shape[1] == 0:
        raise ContractError("empty text conditioning is not allowed")
    return text


def dit_block_forward(x, cond: ConditioningSet, params: dict, config: DiTConfig, layer: int = 0, mask=None):
    """One block on ``x [s, d]`` (or ``[B, s, d]``) conditioned on ``cond``."""
    x = as_tensor(x)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    if x.ndim != 3 or x.shape[2] != config.hidden:
        raise ContractError(f"block input must be [B, s, {config.hidden}], got {x.shape}")
    B = x.shape[0]
    text = _check_text(cond.text, config, B)
    temb = embed_timestep(params, config, [math.log(cond.sigma) / 4.0] * B)
    out = _block(x, silu(temb), text, block_params(params, layer), config, mask)
    return out[0] if squeeze else out


def dit_forward(params: dict, config: DiTConfig, tokens, c_noise, text, mask=None, attn_fn: AttnFn | None = None):
    """Full network: ``tokens [B, s, patch_dim]`` -> ``[B, s, patch_dim]``."""
    tokens = as_tensor(tokens)
    if tokens.ndim != 3 or tokens.shape[2] != config.patch_dim:
        raise ContractError(f"tokens must be [B, s, {config.patch_dim}], got {tokens.shape}")
    B = tokens.shape[0]
    text = _check_text(text, config, B)
    temb_act = silu(embed_timestep(params, config, c_noise))
    x = linear(tokens, params["embed.w"], params["embed.b"])
    for layer in range(config.layers):
        x = _block(x, temb_act, text, block_params(params, layer), config, mask, attn_fn)
    return linear(layer_norm(x, eps=LN_EPS), params["final.w"], params["final.b"])


def make_raw_net(params: dict, config: DiTConfig, mask=None):
    """Adapter to the ``raw_net(x, c_noise, cond)`` contract used by the EDM preconditioner.

    ``x`` may be ``[s, patch_dim]`` or ``[B, s, patch_dim]``; ``cond`` carries the text.
    """

    def raw_net(x, c_noise, cond):
        x = as_tensor(x)
        squeeze = x.ndim == 2
        xb = x[None] if squeeze else x
        text = cond.text if isinstance(cond, ConditioningSet) else cond
        out = dit_forward(params, config, xb, [c_noise] * xb.shape[0], text, mask)
        return out[0] if squeeze else out

    return raw_net


# --- accounting ---------------------------------------------------------------------------------------

def _per_layer_counts(config: DiTConfig) -> dict[str, int]:
    d, c, f, dh = config.hidden, config.cross_dim, config.mlp_hidden, config.head_dim
    if config.adaln_mode == "lora":
        adaln = 10 * d * config.rank + 9 * d
    else:
        adaln = 9 * d * d + 9 * d
    return {
        "self_attn": 4 * d * d + 4 * d + 2 * dh,
        "cross_attn": 2 * d * d + 2 * c * d + 4 * d,
        "mlp": 2 * d * f + f + d,
        "adaln": adaln,
    }


def count_params(config: DiTConfig) -> dict[str, int]:
    """Closed-form parameter breakdown.

    Per layer: self-attention ``4d^2 + 4d + 2*head_dim`` (QKVO plus the two
    per-head norm gains), cross-attention ``2d^2 + 2*cross_dim*d + 4d``, MLP
    ``2*d*f + f + d``, AdaLN ``9d^2 + 9d`` or ``10*d*r + 9d``. Embeddings cover
    the patch in/out projections and the two-layer timestep MLP.
    """
    d, p = config.hidden, config.patch_dim
    per = _per_layer_counts(config)
    out = {k: v * config.layers for k, v in per.items()}
    out["embeddings"] = (p * d + d) + 2 * (d * d + d) + (d * p + p)
    out["total"] = sum(out.values())
    return out


def count_flops(config: DiTConfig, seq_len: int, text_len: int, batch: int = 1) -> int:
    """Training FLOPs (forward + backward) for ``batch`` samples.

    GEMMs cost ``2 * weights * tokens``; core attention costs ``4*s^2*d``
    forward (scores plus weighted sum); backward is twice the forward. The
    AdaLN projection and timestep MLP run once per sample, not per token.
    """
    if min(seq_len, text_len, batch) < 1:
        raise ContractError("seq_len, text_len and batch must be positive")
    return 3 * forward_flops(config, seq_len, text_len, batch)


def forward_flops(config: DiTConfig, seq_len: int, text_len: int, batch: int = 1) -> int:
    d, c, f, p = config.hidden, config.cross_dim, config.mlp_hidden, config.patch_dim
    s, st = seq_len, text_len
    if config.adaln_mode == "lora":
        adaln = 2 * d * config.rank + 2 * config.rank * 9 * d
    else:
        adaln = 2 * 9 * d * d
    per_layer = (
        adaln
        + 2 * s * 4 * d * d
        + 4 * s * s * d
        + 2 * s * 2 * d * d
        + 2 * st * 2 * c * d
        + 4 * s * st * d
        + 2 * s * 2 * d * f
    )
    embed = 2 * s * p * d * 2 + 2 * 2 * d * d
    return batch * (config.layers * per_layer + embed)
