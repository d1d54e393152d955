"""Toy end-to-end training loop: EDM loss, DiT forward on a simulated grid, SGD updates."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffusion import EDMParams, loss_weight, precondition_coefficients
from .dit import DiTConfig, count_params, init_params
from .dit_backward import loss_and_grads
from .numerics import ContractError, SeededRng
from .parallel.mesh import CollectiveTrace, DeviceGrid, all_reduce
from .parallel.pipeline import pp_execute

MAX_TOY_PARAMS = 1_000_000

TOY_CONFIG = DiTConfig(layers=4, hidden=32, heads=4, adaln_mode="lora", rank=8, cross_dim=16, patch_dim=8)


@dataclass
class ToyTrainSpec:
    config: DiTConfig = TOY_CONFIG
    batch: int = 4
    seq_len: int = 16
    text_len: int = 4
    lr: float = 1e-3
    seed: int = 0
    microbatches: int = 1
    edm: EDMParams = field(default_factory=EDMParams)


def toy_dataset(spec: ToyTrainSpec) -> tuple[np.ndarray, np.ndarray]:
    """Fixed latents (smooth random waves) and caption embeddings for every step."""
    rng = SeededRng(spec.seed).split(10_000)
    pos = np.arange(spec.seq_len)[:, None] / spec.seq_len
    freq = rng.uniform((spec.batch, 1, spec.config.patch_dim), 0.5, 3.0)
    phase = rng.uniform((spec.batch, 1, spec.config.patch_dim), 0.0, 2 * np.pi)
    x0 = 0.5 * np.sin(2 * np.pi * freq * pos[None] + phase)
    text = rng.normal((spec.batch, spec.text_len, spec.config.cross_dim))
    return x0, text


def train_toy(spec: ToyTrainSpec, grid: DeviceGrid, steps: int, trace: CollectiveTrace | None = None):
    """Return the per-step losses and the collective trace.

    The loss is evaluated with the grid-parallel forward. Gradients come from
    the analytic reverse pass on each data-parallel replica's rows and are
    averaged with an all-reduce over dp, so grids that differ only in
    tp/cp/pp/dp give the same trajectory up to rounding.
    """
    n_params = count_params(spec.config)["total"]
    if n_params > MAX_TOY_PARAMS:
        raise ContractError(f"config has {n_params} parameters; the simulator runs toy models up to "
                            f"{MAX_TOY_PARAMS}. Reduce layers/hidden/cross_dim.")
    if steps < 0:
        raise ContractError("steps must be >= 0")
    if spec.batch % (grid.dp * spec.microbatches):
        raise ContractError(f"dp*microbatches must divide batch {spec.batch}")
    trace = trace if trace is not None else CollectiveTrace()
    cfg, edm = spec.config, spec.edm
    params = init_params(cfg, spec.seed)
    x0, text = toy_dataset(spec)
    B = spec.batch
    rows = B // grid.dp
    losses = []
    for step in range(steps):
        trace.step = step
        rng = SeededRng(spec.seed).split(step)
        sigma = np.exp(edm.p_mean + edm.p_std * rng.normal((B,)))
        eps = rng.normal(x0.shape)
        coef = np.array([precondition_coefficients(float(s), edm) for s in sigma])
        c_skip, c_out, c_in, c_noise = (coef[:, i] for i in range(4))
        sig3 = sigma[:, None, None]
        z = x0 + sig3 * eps
        F = pp_execute(params, cfg, c_in[:, None, None] * z, c_noise, text, grid, spec.microbatches,
                       trace=trace).output
        D = c_skip[:, None, None] * z + c_out[:, None, None] * F
        eps_hat = (z - D) / sig3
        w = np.array([loss_weight(float(s), edm) for s in sigma])
        losses.append(float(np.mean(w * ((eps - eps_hat) ** 2).reshape(B, -1).mean(1))))

        per_rep = []
        for r in range(grid.dp):
            sl = slice(r * rows, (r + 1) * rows)
            _, g = loss_and_grads(params, cfg, x0[sl], eps[sl], sigma[sl], text[sl], edm)
            per_rep.append(g)
        for name in params:
            summed = all_reduce([g[name] for g in per_rep], "dp", trace, tag="dp.grad")[0]
            params[name] = params[name] - spec.lr * summed / grid.dp
    return losses, trace
