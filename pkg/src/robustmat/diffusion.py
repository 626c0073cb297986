"""Graph diffusion embedding over neighbourhood graphs.

The state is a batch of graphs ``[G, V, n_f]`` sharing one adjacency
``[V, V]`` (neighbourhood graphs in a frame all have the same size), or a
single graph ``[V, n_f]``. Self-loops are always added inside the blocks.
Parameter keys: ``gat.{b}.w`` ``[H, n_f, n_f/H]``, ``gat.{b}.a_src`` and
``gat.{b}.a_dst`` ``[H, n_f/H]`` for blocks b in {1, 2}; ``gcn.{b}.w``;
``graph.gamma`` for the contraction form.
"""

from __future__ import annotations

from typing import Mapping

import numpy as np

from . import autodiff as ad
from . import ode
from .autodiff import Parameter, Tensor
from .config import ModelConfig

Params = Mapping[str, Tensor]


def init_graph_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Parameter]:
    n = cfg.n_f
    p: dict[str, Parameter] = {}
    s = cfg.graph_init_scale
    if cfg.graph_variant == "gat":
        h = cfg.gat_heads
        d = n // h
        for b in (1, 2):
            p[f"gat.{b}.w"] = Parameter(rng.normal(0, s / np.sqrt(n), (h, n, d)), f"gat.{b}.w")
            p[f"gat.{b}.a_src"] = Parameter(rng.normal(0, 1.0 / np.sqrt(2 * d), (h, d)), f"gat.{b}.a_src")
            p[f"gat.{b}.a_dst"] = Parameter(rng.normal(0, 1.0 / np.sqrt(2 * d), (h, d)), f"gat.{b}.a_dst")
    else:
        widths = [(n, cfg.gcn_hidden), (cfg.gcn_hidden, n)]
        for b, (i, o) in enumerate(widths, start=1):
            p[f"gcn.{b}.w"] = Parameter(rng.normal(0, s / np.sqrt(i), (i, o)), f"gcn.{b}.w")
    if cfg.variant == "robustmat" and cfg.graph_form == "contraction":
        p["graph.gamma"] = Parameter(np.full(n, cfg.graph_gamma_init), "graph.gamma")
    return p


def with_self_loops(adj: np.ndarray) -> np.ndarray:
    a = np.array(adj, dtype=np.float64, copy=True)
    np.fill_diagonal(a, 1.0)
    return a


def _batched(Z: Tensor) -> tuple[Tensor, bool]:
    if Z.ndim == 2:
        return ad.reshape(Z, (1,) + Z.shape), True
    return Z, False


def gat_attention(Z: Tensor, adj: np.ndarray, w: Tensor, a_src: Tensor, a_dst: Tensor) -> tuple[Tensor, Tensor]:
    """Per-head attention weights ``[G, H, V, V]`` and projected features ``[G, H, V, d]``."""
    Zb, _ = _batched(Z)
    g, v, n = Zb.shape
    h, _, d = w.shape
    x = ad.broadcast_to(ad.reshape(Zb, (g, 1, v, n)), (g, h, v, n))
    wz = ad.matmul(x, w)  # [G,H,V,d]
    src = ad.matmul(wz, ad.reshape(a_src, (h, d, 1)))  # [G,H,V,1]: score contribution of row i
    dst = ad.matmul(wz, ad.reshape(a_dst, (h, d, 1)))  # [G,H,V,1]: contribution of column j
    e = ad.add(ad.broadcast_to(src, (g, h, v, v)),
               ad.broadcast_to(ad.transpose(dst, (0, 1, 3, 2)), (g, h, v, v)))
    mask = adj.astype(bool)
    alpha = ad.masked_softmax(ad.leaky_relu(e, 0.2), mask, axis=-1)
    return alpha, wz


def gat_block(Z: Tensor, adj: np.ndarray, params: Params, block: int) -> Tensor:
    """Multi-head graph attention; heads are concatenated then passed through ELU."""
    Zb, single = _batched(Z)
    g, v, n = Zb.shape
    alpha, wz = gat_attention(Zb, adj, params[f"gat.{block}.w"], params[f"gat.{block}.a_src"],
                              params[f"gat.{block}.a_dst"])
    out = ad.matmul(alpha, wz)  # [G,H,V,d]
    h, d = out.shape[1], out.shape[3]
    out = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (g, v, h * d))
    out = ad.elu(out)
    return ad.reshape(out, (v, h * d)) if single else out


def normalized_adjacency(adj: np.ndarray) -> np.ndarray:
    a = with_self_loops(adj)
    deg = a.sum(axis=1)
    inv = 1.0 / np.sqrt(deg)
    return a * inv[:, None] * inv[None, :]


def gcn_block(Z: Tensor, adj: np.ndarray, params: Params, block: int) -> Tensor:
    """``relu(D^-1/2 (A + I) D^-1/2 Z W)``; the diagonal of ``adj`` is ignored."""
    norm = Tensor(normalized_adjacency(adj))
    zw = ad.matmul(Z, params[f"gcn.{block}.w"])
    return ad.relu(ad.matmul(norm, zw))


def graph_net(Z: Tensor, adj: np.ndarray, params: Params) -> Tensor:
    if "gat.1.w" in params:
        return gat_block(gat_block(Z, adj, params, 1), adj, params, 2)
    return gcn_block(gcn_block(Z, adj, params, 1), adj, params, 2)


def graph_ode_func(Z: Tensor, t, params: Params, adj: np.ndarray) -> Tensor:
    """``-gamma*Z + net(Z)`` when ``graph.gamma`` is present, else ``net(Z)``."""
    adj = with_self_loops(adj)
    out = graph_net(Z, adj, params)
    if "graph.gamma" in params:
        gamma = ad.broadcast_to(params["graph.gamma"], Z.shape)
        out = ad.sub(out, ad.mul(gamma, Z))
    return out


def diffuse_graph(Z: Tensor, adj: np.ndarray, params: Params, cfg: ModelConfig,
                  solver: ode.SolverConfig | None = None) -> Tensor:
    """Vertex states at the terminal time, ``[G, V, n_f]`` or ``[V, n_f]``."""
    if cfg.variant == "resnet_gat":
        return graph_net(Z, with_self_loops(adj), params)
    solver = solver or cfg.graph_solver.solver()
    return ode.integrate(lambda s, t: graph_ode_func(s, t, params, adj), Z, solver, per_sample=Z.ndim == 3)


def embed_graph(Z: Tensor, adj: np.ndarray, params: Params, cfg: ModelConfig,
                solver: ode.SolverConfig | None = None) -> Tensor:
    """Mean over vertices of the diffused states: ``[G, n_f]`` or ``[n_f]``."""
    out = diffuse_graph(Z, adj, params, cfg, solver)
    return ad.mean(out, axis=-2)
