"""Vertex embedding: strided CNN, feature-map ODE, average pool, FC.

All functions take a batch ``[N, C, S, S]`` (or a single :class:`Patch`)
and a flat parameter mapping with keys ``ds.{i}.w``, ``ds.{i}.b``,
``ode.w1``, ``ode.b1``, ``ode.w2``, ``ode.b2``, ``ode.gamma``, ``fc.w``
and ``fc.b``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from . import ode
from .autodiff import Parameter, Tensor
from .config import ModelConfig
from .graph import Patch

Params = Mapping[str, Tensor]


def init_vertex_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Parameter]:
    p: dict[str, Parameter] = {}
    c_in = cfg.in_channels
    for i, (c_out, k, _, _) in enumerate(cfg.downsample):
        fan_in = c_in * k * k
        p[f"ds.{i}.w"] = Parameter(rng.normal(0, np.sqrt(2.0 / fan_in), (c_out, c_in, k, k)), f"ds.{i}.w")
        p[f"ds.{i}.b"] = Parameter(np.zeros(c_out), f"ds.{i}.b")
        c_in = c_out
    c, k = cfg.channels, cfg.ode_kernel
    std = cfg.ode_init_scale / np.sqrt(c * k * k)
    for j in (1, 2):
        p[f"ode.w{j}"] = Parameter(rng.normal(0, std, (c, c, k, k)), f"ode.w{j}")
        p[f"ode.b{j}"] = Parameter(np.zeros(c), f"ode.b{j}")
    if cfg.variant == "robustmat" and cfg.vertex_form == "contraction":
        p["ode.gamma"] = Parameter(np.full(c, cfg.gamma_init), "ode.gamma")
    width = c * cfg.pool * cfg.pool
    p["fc.w"] = Parameter(rng.normal(0, 1.0 / np.sqrt(width), (cfg.n_f, width)), "fc.w")
    p["fc.b"] = Parameter(np.zeros(cfg.n_f), "fc.b")
    return p


def as_batch(x) -> Tensor:
    if isinstance(x, Patch):
        return Tensor(x.pixels[None])
    if isinstance(x, (list, tuple)):
        return Tensor(np.stack([p.pixels for p in x]))
    return x if isinstance(x, Tensor) else Tensor(x)


def downsample(x, params: Params, cfg: ModelConfig) -> Tensor:
    """Strided conv stack with ReLU between layers; returns ``[N, c, H, W]``."""
    h = as_batch(x)
    if h.shape[-1] != cfg.patch_side or h.shape[-2] != cfg.patch_side:
        raise ValueError(f"patch side {h.shape[-1]} does not match the configured {cfg.patch_side}")
    last = len(cfg.downsample) - 1
    for i, (_, _, stride, pad) in enumerate(cfg.downsample):
        h = ad.conv2d(h, params[f"ds.{i}.w"], params[f"ds.{i}.b"], stride, pad)
        if i < last:
            h = ad.relu(h)
    return h


def _same_pad(params: Params) -> int:
    return params["ode.w1"].shape[-1] // 2


def ode_net(z: Tensor, params: Params) -> Tensor:
    pad = _same_pad(params)
    h = ad.tanh(ad.conv2d(z, params["ode.w1"], params["ode.b1"], 1, pad))
    return ad.conv2d(h, params["ode.w2"], params["ode.b2"], 1, pad)


def channel_decay(z: Tensor, gamma: Tensor) -> Tensor:
    """``gamma * z`` with one decay per channel (axis -3)."""
    g = ad.broadcast_to(ad.reshape(gamma, (gamma.shape[0], 1, 1)), z.shape)
    return ad.mul(g, z)


def vertex_ode_func(z: Tensor, t, params: Params) -> Tensor:
    """Right-hand side of the feature-map ODE; autonomous, ``t`` is unused.

    With an ``ode.gamma`` entry the contraction form ``-gamma*z + net(z)``
    is used, otherwise the plain two-conv net.
    """
    out = ode_net(z, params)
    if "ode.gamma" in params:
        out = ad.sub(out, channel_decay(z, params["ode.gamma"]))
    return out


def residual_update(z: Tensor, params: Params) -> Tensor:
    """Single residual block ``z + net(z)`` used by the baseline in place of the ODE."""
    return ad.add(z, ode_net(z, params))


def avg_pool(z: Tensor, out_side: int) -> Tensor:
    n, c, h, w = z.shape
    kh, kw = h // out_side, w // out_side
    r = ad.reshape(z, (n, c, out_side, kh, out_side, kw))
    return ad.mean(r, axis=(3, 5))


def head(z: Tensor, params: Params, cfg: ModelConfig) -> Tensor:
    pooled = avg_pool(z, cfg.pool)
    flat = ad.reshape(pooled, (z.shape[0], -1))
    return ad.linear(flat, params["fc.w"], params["fc.b"])


@dataclass
class VertexStages:
    downsampled: Tensor  # h_DS(x), [N, c, H, W]
    diffused: Tensor  # state at the terminal time
    embedding: Tensor  # [N, n_f]


def vertex_stages(x, params: Params, cfg: ModelConfig, solver: ode.SolverConfig | None = None) -> VertexStages:
    solver = solver or cfg.vertex_solver.solver()
    h = downsample(x, params, cfg)
    if cfg.variant == "resnet_gat":
        z = residual_update(h, params)
    else:
        z = ode.integrate(lambda s, t: vertex_ode_func(s, t, params), h, solver, per_sample=True)
    return VertexStages(h, z, head(z, params, cfg))


def embed_vertex(x, params: Params, cfg: ModelConfig, solver: ode.SolverConfig | None = None) -> Tensor:
    """Embeddings ``[N, n_f]``; each sample is integrated with its own step control."""
    return vertex_stages(x, params, cfg, solver).embedding
