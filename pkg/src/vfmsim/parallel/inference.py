"""Context-parallel sampling: the latent is split along the sequence for the whole Heun loop."""

from __future__ import annotations

import numpy as np

from ..diffusion import EDMParams, cfg_combine, heun_sample, precondition_coefficients
from ..dit import LN_EPS, DiTConfig, block_params, dit_forward, embed_timestep, linear, silu
from ..numerics import ContractError, as_tensor, layer_norm
from .mesh import CollectiveTrace, DeviceGrid, ShardedTensor, all_gather
from .pipeline import parallel_block


class GuidedDiT:
    """EDM-preconditioned DiT evaluated on a conditional/unconditional pair.

    The unconditional branch uses all-zero text. Guidance is applied to the
    denoised estimate, which is equivalent to guiding the noise estimate
    because both are affine in the network output with the same coefficients.
    """

    def __init__(self, params: dict, config: DiTConfig, text, cfg_scale: float = 1.0, edm: EDMParams = EDMParams()):
        self.params = params
        self.config = config
        text = as_tensor(text)
        if text.ndim != 2 or text.shape[1] != config.cross_dim or text.shape[0] == 0:
            raise ContractError(f"text must be [s_text>0, {config.cross_dim}], got {text.shape}")
        self.text_pair = np.stack([np.zeros_like(text), text])
        self.cfg_scale = cfg_scale
        self.edm = edm

    def _combine(self, z, f, sigma):
        c_skip, c_out, _, _ = precondition_coefficients(sigma, self.edm)
        d_uncond = c_skip * z + c_out * f[0]
        d_cond = c_skip * z + c_out * f[1]
        return cfg_combine(d_uncond, d_cond, self.cfg_scale)

    def denoise(self, z, sigma: float, cond=None) -> np.ndarray:
        """Serial reference on the full ``[s, patch_dim]`` latent."""
        z = as_tensor(z)
        _, _, c_in, c_noise = precondition_coefficients(sigma, self.edm)
        x = np.stack([c_in * z, c_in * z])
        f = dit_forward(self.params, self.config, x, [c_noise, c_noise], self.text_pair)
        return self._combine(z, f, sigma)

    def denoise_sharded(self, shards, sigma: float, tp: int, trace: CollectiveTrace) -> list[np.ndarray]:
        """Same computation with the latent split into cp sequence chunks ``[s/cp, patch_dim]``."""
        p, cfg = self.params, self.config
        _, _, c_in, c_noise = precondition_coefficients(sigma, self.edm)
        temb_act = silu(embed_timestep(p, cfg, [c_noise, c_noise]))
        xs = [linear(np.stack([c_in * z, c_in * z]), p["embed.w"], p["embed.b"]) for z in shards]
        for layer in range(cfg.layers):
            xs = parallel_block(xs, temb_act, self.text_pair, block_params(p, layer), cfg, tp, trace)
        fs = [linear(layer_norm(x, eps=LN_EPS), p["final.w"], p["final.b"]) for x in xs]
        return [self._combine(z, f, sigma) for z, f in zip(shards, fs)]


def cp_parallel_denoise(model: GuidedDiT, noise, n_steps: int, grid: DeviceGrid = DeviceGrid(),
                        trace: CollectiveTrace | None = None) -> np.ndarray:
    """Run the Heun sampler with every network call executed over ``grid.cp`` sequence shards.

    The sampler state is kept as stacked shards ``[cp, s/cp, patch_dim]``; the
    update arithmetic is elementwise, so it is unaffected by the split. The
    denoised chunks are gathered once at the end. ``trace.step`` is the
    sampler step of each recorded collective.
    """
    trace = trace if trace is not None else CollectiveTrace()
    noise = as_tensor(noise)
    cp = grid.cp
    if noise.ndim != 2 or noise.shape[1] != model.config.patch_dim:
        raise ContractError(f"noise must be [s, {model.config.patch_dim}], got {noise.shape}")
    if noise.shape[0] % cp:
        raise ContractError(f"cp={cp} does not divide token count {noise.shape[0]}")
    if model.config.heads % grid.tp:
        raise ContractError(f"tp={grid.tp} does not divide {model.config.heads} heads")

    def denoiser(z, sigma, cond):
        return np.stack(model.denoise_sharded(list(z), sigma, grid.tp, trace))

    def set_step(i):
        trace.step = i

    start = ShardedTensor.shard(noise, cp, dim=0)
    state = heun_sample(denoiser, np.stack(start.shards), n_steps, params=model.edm, on_step=set_step)
    trace.step = n_steps
    return all_gather(ShardedTensor(list(state), "cp", 0), trace, tag="cp.gather").shards[0]
