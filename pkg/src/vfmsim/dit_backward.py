"""Hand-written reverse pass through the fixed DiT graph and the EDM epsilon loss.

Only what the toy gradient checks need: one forward that caches intermediates
and its exact adjoint. Uses numpy's own ``@``; agreement with
:func:`vfmsim.dit.dit_forward` is at rounding level, not bitwise.
"""

from __future__ import annotations

import math

import numpy as np

from .diffusion import EDMParams, loss_weight, precondition_coefficients
from .dit import (
    GATE_CA, GATE_MLP, GATE_SA, LN_EPS, SCALE_CA, SCALE_MLP, SCALE_SA, SHIFT_CA, SHIFT_MLP, SHIFT_SA,
    DiTConfig, block_params, dit_forward, sinusoidal_embed,
)

_GELU_C = math.sqrt(2.0 / math.pi)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _silu_grad(x):
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def _gelu_and_grad(x):
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    y = 0.5 * x * (1.0 + t)
    dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return y, dy


def _ln(x):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    r = 1.0 / np.sqrt(var + LN_EPS)
    return (x - mu) * r, r


def _ln_bwd(dy, y, r):
    return r * (dy - dy.mean(-1, keepdims=True) - y * (dy * y).mean(-1, keepdims=True))


def _l2(x, scale):
    n = np.sqrt((x * x).sum(-1, keepdims=True))
    u = x / n
    return u * scale, u, n


def _l2_bwd(dy, u, n, scale):
    du = dy * scale
    dscale = (dy * u).reshape(-1, u.shape[-1]).sum(0)
    dx = (du - u * (u * du).sum(-1, keepdims=True)) / n
    return dx, dscale


def _attn(q, k, v, mask):
    """Batched ``[B, s, H, dh]`` attention; returns output and probabilities ``[B, H, sq, skv]``."""
    scale = 1.0 / math.sqrt(q.shape[-1])
    s = np.einsum("bqhd,bkhd->bhqk", q, k) * scale
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        m = m[:, None] if m.ndim == 3 else m[None, None]
        s = np.where(m, s, -np.inf)
        live = np.isfinite(s).any(-1, keepdims=True)
        s = np.where(live, s, 0.0)
    else:
        live = None
    s = s - s.max(-1, keepdims=True)
    p = np.exp(s)
    p = p / p.sum(-1, keepdims=True)
    if live is not None:
        p = np.where(live, p, 0.0)
    o = np.einsum("bhqk,bkhd->bqhd", p, v)
    return o, p


def _attn_bwd(do, q, k, v, p):
    scale = 1.0 / math.sqrt(q.shape[-1])
    dv = np.einsum("bhqk,bqhd->bkhd", p, do)
    dp = np.einsum("bqhd,bkhd->bhqk", do, v)
    ds = p * (dp - (dp * p).sum(-1, keepdims=True))
    dq = np.einsum("bhqk,bkhd->bqhd", ds, k) * scale
    dk = np.einsum("bhqk,bqhd->bkhd", ds, q) * scale
    return dq, dk, dv


def _split(x, H):
    B, s, d = x.shape
    return x.reshape(B, s, H, d // H)


def _merge(x):
    B, s, H, dh = x.shape
    return x.reshape(B, s, H * dh)


def _lin_bwd(dy, x, w, grads, wname, bname):
    grads[wname] = grads.get(wname, 0.0) + x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])
    if bname is not None:
        grads[bname] = grads.get(bname, 0.0) + dy.reshape(-1, dy.shape[-1]).sum(0)
    return dy @ w.T


def _block_fwd(x, ta, text, bp, cfg: DiTConfig, mask):
    H = cfg.heads
    c = {"x": x}
    if cfg.adaln_mode == "lora":
        c["ta_down"] = ta @ bp["adaln.down"]
        mod = c["ta_down"] @ bp["adaln.up"] + bp["adaln.b"]
    else:
        mod = ta @ bp["adaln.w"] + bp["adaln.b"]
    mod = mod.reshape(x.shape[0], 9, cfg.hidden)
    c["mod"] = mod

    n1, r1 = _ln(x)
    h1 = n1 * (1 + mod[:, SCALE_SA, None]) + mod[:, SHIFT_SA, None]
    qp = _split(h1 @ bp["attn.wq"] + bp["attn.bq"], H)
    kp = _split(h1 @ bp["attn.wk"] + bp["attn.bk"], H)
    v = _split(h1 @ bp["attn.wv"] + bp["attn.bv"], H)
    q, qu, qn = _l2(qp, bp["attn.q_scale"])
    k, ku, kn = _l2(kp, bp["attn.k_scale"])
    o, p = _attn(q, k, v, mask)
    om = _merge(o)
    a = om @ bp["attn.wo"] + bp["attn.bo"]
    x1 = x + mod[:, GATE_SA, None] * a
    c.update(n1=n1, r1=r1, h1=h1, q=q, qu=qu, qn=qn, k=k, ku=ku, kn=kn, v=v, p=p, om=om, a=a)

    n2, r2 = _ln(x1)
    h2 = n2 * (1 + mod[:, SCALE_CA, None]) + mod[:, SHIFT_CA, None]
    cq = _split(h2 @ bp["cross.wq"] + bp["cross.bq"], H)
    ck = _split(text @ bp["cross.wk"] + bp["cross.bk"], H)
    cv = _split(text @ bp["cross.wv"] + bp["cross.bv"], H)
    co, cp = _attn(cq, ck, cv, None)
    com = _merge(co)
    ca = com @ bp["cross.wo"] + bp["cross.bo"]
    x2 = x1 + mod[:, GATE_CA, None] * ca
    c.update(x1=x1, n2=n2, r2=r2, h2=h2, cq=cq, ck=ck, cv=cv, cp=cp, com=com, ca=ca)

    n3, r3 = _ln(x2)
    h3 = n3 * (1 + mod[:, SCALE_MLP, None]) + mod[:, SHIFT_MLP, None]
    u = h3 @ bp["mlp.w1"] + bp["mlp.b1"]
    gu, dgu = _gelu_and_grad(u)
    m = gu @ bp["mlp.w2"] + bp["mlp.b2"]
    x3 = x2 + mod[:, GATE_MLP, None] * m
    c.update(x2=x2, n3=n3, r3=r3, h3=h3, gu=gu, dgu=dgu, m=m)
    return x3, c


def _modulate_bwd(dh, n, mod, shift_i, scale_i, dmod):
    dmod[:, shift_i] += dh.sum(1)
    dmod[:, scale_i] += (dh * n).sum(1)
    return dh * (1 + mod[:, scale_i, None])


def _block_bwd(dx3, c, ta, text, bp, cfg: DiTConfig, pre: str, g: dict):
    H = cfg.heads
    mod = c["mod"]
    dmod = np.zeros_like(mod)

    # MLP branch
    dmod[:, GATE_MLP] += (dx3 * c["m"]).sum(1)
    dm = dx3 * mod[:, GATE_MLP, None]
    dgu = _lin_bwd(dm, c["gu"], bp["mlp.w2"], g, pre + "mlp.w2", pre + "mlp.b2")
    du = dgu * c["dgu"]
    dh3 = _lin_bwd(du, c["h3"], bp["mlp.w1"], g, pre + "mlp.w1", pre + "mlp.b1")
    dn3 = _modulate_bwd(dh3, c["n3"], mod, SHIFT_MLP, SCALE_MLP, dmod)
    dx2 = dx3 + _ln_bwd(dn3, c["n3"], c["r3"])

    # cross-attention branch
    dmod[:, GATE_CA] += (dx2 * c["ca"]).sum(1)
    dca = dx2 * mod[:, GATE_CA, None]
    dcom = _lin_bwd(dca, c["com"], bp["cross.wo"], g, pre + "cross.wo", pre + "cross.bo")
    dcq, dck, dcv = _attn_bwd(_split(dcom, H), c["cq"], c["ck"], c["cv"], c["cp"])
    _lin_bwd(_merge(dck), text, bp["cross.wk"], g, pre + "cross.wk", pre + "cross.bk")
    _lin_bwd(_merge(dcv), text, bp["cross.wv"], g, pre + "cross.wv", pre + "cross.bv")
    dh2 = _lin_bwd(_merge(dcq), c["h2"], bp["cross.wq"], g, pre + "cross.wq", pre + "cross.bq")
    dn2 = _modulate_bwd(dh2, c["n2"], mod, SHIFT_CA, SCALE_CA, dmod)
    dx1 = dx2 + _ln_bwd(dn2, c["n2"], c["r2"])

    # self-attention branch
    dmod[:, GATE_SA] += (dx1 * c["a"]).sum(1)
    da = dx1 * mod[:, GATE_SA, None]
    dom = _lin_bwd(da, c["om"], bp["attn.wo"], g, pre + "attn.wo", pre + "attn.bo")
    dq, dk, dv = _attn_bwd(_split(dom, H), c["q"], c["k"], c["v"], c["p"])
    dqp, dqs = _l2_bwd(dq, c["qu"], c["qn"], bp["attn.q_scale"])
    dkp, dks = _l2_bwd(dk, c["ku"], c["kn"], bp["attn.k_scale"])
    g[pre + "attn.q_scale"] = g.get(pre + "attn.q_scale", 0.0) + dqs
    g[pre + "attn.k_scale"] = g.get(pre + "attn.k_scale", 0.0) + dks
    dh1 = _lin_bwd(_merge(dqp), c["h1"], bp["attn.wq"], g, pre + "attn.wq", pre + "attn.bq")
    dh1 = dh1 + _lin_bwd(_merge(dkp), c["h1"], bp["attn.wk"], g, pre + "attn.wk", pre + "attn.bk")
    dh1 = dh1 + _lin_bwd(_merge(dv), c["h1"], bp["attn.wv"], g, pre + "attn.wv", pre + "attn.bv")
    dn1 = _modulate_bwd(dh1, c["n1"], mod, SHIFT_SA, SCALE_SA, dmod)
    dx = dx1 + _ln_bwd(dn1, c["n1"], c["r1"])

    # AdaLN projection
    dflat = dmod.reshape(mod.shape[0], -1)
    g[pre + "adaln.b"] = g.get(pre + "adaln.b", 0.0) + dflat.sum(0)
    if cfg.adaln_mode == "lora":
        g[pre + "adaln.up"] = g.get(pre + "adaln.up", 0.0) + c["ta_down"].T @ dflat
        dtd = dflat @ bp["adaln.up"].T
        g[pre + "adaln.down"] = g.get(pre + "adaln.down", 0.0) + ta.T @ dtd
        dta = dtd @ bp["adaln.down"].T
    else:
        g[pre + "adaln.w"] = g.get(pre + "adaln.w", 0.0) + ta.T @ dflat
        dta = dflat @ bp["adaln.w"].T
    return dx, dta


def _as_batch(a, B):
    a = np.asarray(a, dtype=np.float64)
    return np.broadcast_to(a, (B,)) if a.ndim == 0 else a


def loss_and_grads(params, config: DiTConfig, x0, eps, sigma, text, edm: EDMParams = EDMParams(), mask=None):
    """Weighted epsilon loss for fixed ``(eps, sigma)`` and its gradient for every parameter.

    ``x0``/``eps`` are ``[B, s, patch_dim]``, ``sigma`` is scalar or ``[B]``,
    ``text`` is ``[B, s_text, cross_dim]``. The loss is the batch mean of
    ``w(sigma_b) * mean((eps_b - eps_hat_b)**2)``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    B = x0.shape[0]
    sig = _as_batch(sigma, B)
    coef = np.array([precondition_coefficients(float(s), edm) for s in sig])
    c_skip, c_out, c_in, c_noise = (coef[:, i][:, None, None] for i in range(4))
    w = np.array([loss_weight(float(s), edm) for s in sig])
    sig3 = sig[:, None, None]
    text = np.broadcast_to(np.asarray(text, dtype=np.float64), (B, *np.shape(text)[-2:]))

    z = x0 + sig3 * eps
    zin = c_in * z

    base = np.stack([sinusoidal_embed(float(c), config.hidden) for c in coef[:, 3]])
    a1 = base @ params["temb.w1"] + params["temb.b1"]
    h1 = a1 * _sigmoid(a1)
    temb = h1 @ params["temb.w2"] + params["temb.b2"]
    ta = temb * _sigmoid(temb)

    x = zin @ params["embed.w"] + params["embed.b"]
    caches = []
    for layer in range(config.layers):
        x, c = _block_fwd(x, ta, text, block_params(params, layer), config, mask)
        caches.append(c)
    nf, rf = _ln(x)
    F = nf @ params["final.w"] + params["final.b"]

    D = c_skip * z + c_out * F
    eps_hat = (z - D) / sig3
    per = ((eps - eps_hat) ** 2).reshape(B, -1).mean(1)
    loss = float(np.mean(w * per))

    g: dict[str, np.ndarray] = {}
    n_el = x0[0].size
    d_eps_hat = (-2.0 / (B * n_el)) * w[:, None, None] * (eps - eps_hat)
    dF = d_eps_hat * (-c_out / sig3)
    dnf = _lin_bwd(dF, nf, params["final.w"], g, "final.w", "final.b")
    dx = _ln_bwd(dnf, nf, rf)
    dta = np.zeros_like(ta)
    for layer in reversed(range(config.layers)):
        pre = f"blocks.{layer}."
        dx, dta_l = _block_bwd(dx, caches[layer], ta, text, block_params(params, layer), config, pre, g)
        dta += dta_l
    _lin_bwd(dx, zin, params["embed.w"], g, "embed.w", "embed.b")
    dtemb = dta * _silu_grad(temb)
    dh1 = _lin_bwd(dtemb, h1, params["temb.w2"], g, "temb.w2", "temb.b2")
    da1 = dh1 * _silu_grad(a1)
    _lin_bwd(da1, base, params["temb.w1"], g, "temb.w1", "temb.b1")
    return loss, {k: np.asarray(v) for k, v in g.items()}


def reference_loss(params, config: DiTConfig, x0, eps, sigma, text, edm: EDMParams = EDMParams(), mask=None) -> float:
    """Same objective evaluated through :func:`vfmsim.dit.dit_forward`."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    B = x0.shape[0]
    sig = _as_batch(sigma, B)
    total = 0.0
    for b in range(B):
        s = float(sig[b])
        c_skip, c_out, c_in, c_noise = precondition_coefficients(s, edm)
        z = x0[b] + s * eps[b]
        tb = np.asarray(text, dtype=np.float64)
        tb = tb[b] if tb.ndim == 3 else tb
        F = dit_forward(params, config, (c_in * z)[None], [c_noise], tb[None], mask)[0]
        D = c_skip * z + c_out * F
        eps_hat = (z - D) / s
        total += loss_weight(s, edm) * float(np.mean((eps[b] - eps_hat) ** 2))
    return total / B
