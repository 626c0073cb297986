import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from robustmat import autodiff as ad
from robustmat import ode
from robustmat.autodiff import Tensor
from robustmat.diffusion import (diffuse_graph, embed_graph, gat_attention, gat_block, gcn_block, graph_ode_func,
                                 normalized_adjacency, with_self_loops)
from robustmat.model import ModelParams, adjacency_of


def params(cfg, seed=0, **upd):
    return ModelParams.init(cfg.model_copy(update=upd), seed)


def test_singleton_attention_is_one(tiny_model_cfg, rng):
    p = params(tiny_model_cfg)
    Z = Tensor(rng.normal(size=(1, 8)))
    alpha, wz = gat_attention(Z, np.ones((1, 1)), p["gat.1.w"], p["gat.1.a_src"], p["gat.1.a_dst"])
    np.testing.assert_array_equal(alpha.data, 1.0)
    out = gat_block(Z, np.ones((1, 1)), p, 1).data
    wzc = np.concatenate([Z.data @ p["gat.1.w"].data[h] for h in range(2)], axis=-1)
    np.testing.assert_allclose(out, np.where(wzc > 0, wzc, np.expm1(wzc)), atol=1e-15)


def test_identical_vertices_give_identical_rows(tiny_model_cfg, rng):
    p = params(tiny_model_cfg)
    z = rng.normal(size=8)
    out = gat_block(Tensor(np.stack([z, z, z])), with_self_loops(adjacency_of(3)), p, 1).data
    np.testing.assert_array_equal(out[0], out[1])
    np.testing.assert_array_equal(out[1], out[2])


def test_attention_rows_sum_to_one(tiny_model_cfg):
    p = params(tiny_model_cfg)
    rng = np.random.default_rng(5)
    for _ in range(100):
        v = int(rng.integers(1, 7))
        adj = with_self_loops(rng.random((v, v)) < 0.5)
        alpha, _ = gat_attention(Tensor(rng.normal(size=(v, 8))), adj, p["gat.2.w"], p["gat.2.a_src"], p["gat.2.a_dst"])
        np.testing.assert_allclose(alpha.data.sum(axis=-1), 1.0, atol=1e-12)
        assert np.all(alpha.data[..., ~adj.astype(bool)] == 0)


def test_gcn_singleton_and_two_vertex_average(tiny_model_cfg):
    p = params(tiny_model_cfg, graph_variant="gcn")
    Z = Tensor(np.array([[0.5, -1.0, 2.0, 0.0, 1.0, 1.0, -3.0, 0.2]]))
    out = gcn_block(Z, np.zeros((1, 1)), p, 1).data
    np.testing.assert_allclose(out, np.maximum(Z.data @ p["gcn.1.w"].data, 0.0), atol=1e-15)
    p["gcn.1.w"].data[...] = np.eye(8)
    Z2 = np.abs(np.random.default_rng(0).normal(size=(2, 8)))
    out = gcn_block(Tensor(Z2), adjacency_of(2), p, 1).data
    np.testing.assert_allclose(out, np.tile(Z2.mean(axis=0), (2, 1)), atol=1e-15)


def test_normalized_adjacency_is_symmetric_with_unit_spectral_radius():
    a = normalized_adjacency(adjacency_of(4))
    np.testing.assert_allclose(a, a.T)
    assert max(abs(np.linalg.eigvalsh(a))) == pytest.approx(1.0)


@pytest.mark.parametrize("variant", ["gat", "gcn"])
def test_blocks_are_permutation_equivariant(tiny_model_cfg, variant):
    p = params(tiny_model_cfg, graph_variant=variant)
    rng = np.random.default_rng(1)
    block = gat_block if variant == "gat" else gcn_block
    for _ in range(20):
        v = int(rng.integers(2, 6))
        Z = rng.normal(size=(v, 8))
        adj = with_self_loops(adjacency_of(v))
        perm = rng.permutation(v)
        a = block(Tensor(Z), adj, p, 1).data
        b = block(Tensor(Z[perm]), adj[np.ix_(perm, perm)], p, 1).data
        np.testing.assert_allclose(a[perm], b, atol=1e-12)


def test_zero_field_keeps_vertex_states(tiny_model_cfg, rng):
    p = params(tiny_model_cfg, graph_variant="gcn", graph_gamma_init=0.0, gamma_min=0.0)
    for k in p:
        if k.startswith("gcn."):
            p[k].data[...] = 0.0
    Z = Tensor(rng.normal(size=(3, 8)))
    np.testing.assert_array_equal(diffuse_graph(Z, adjacency_of(3), p, p.cfg).data, Z.data)
    np.testing.assert_allclose(embed_graph(Z, adjacency_of(3), p, p.cfg).data, Z.data.mean(axis=0), atol=1e-15)


def test_pure_decay_graph_state(tiny_model_cfg, rng):
    p = params(tiny_model_cfg, graph_variant="gcn", graph_gamma_init=1.0)
    for k in p:
        if k.startswith("gcn."):
            p[k].data[...] = 0.0
    Z = rng.normal(size=(4, 8))
    out = diffuse_graph(Tensor(Z), adjacency_of(4), p, p.cfg, ode.SolverConfig(rtol=1e-9, atol=1e-12))
    np.testing.assert_allclose(out.data, math.exp(-1.0) * Z, rtol=1e-7)


def test_single_vertex_without_diffusion_weights_returns_the_embedding(tiny_model_cfg, rng):
    p = params(tiny_model_cfg, graph_gamma_init=0.0, gamma_min=0.0)
    for k in p:
        if k.endswith(".w") and k.startswith("gat"):
            p[k].data[...] = 0.0
    z = rng.normal(size=(1, 8))
    np.testing.assert_array_equal(embed_graph(Tensor(z), adjacency_of(1), p, p.cfg).data, z[0])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 5), st.sampled_from(["gat", "gcn"]))
def test_graph_embedding_is_permutation_invariant(tiny_model_cfg, seed, v, variant):
    rng = np.random.default_rng(seed)
    p = params(tiny_model_cfg, seed % 7, graph_variant=variant)
    Z = rng.normal(size=(v, 8))
    perm = np.concatenate([[0], 1 + rng.permutation(v - 1)])
    a = embed_graph(Tensor(Z), adjacency_of(v), p, p.cfg).data
    b = embed_graph(Tensor(Z[perm]), adjacency_of(v), p, p.cfg).data
    np.testing.assert_allclose(a, b, atol=1e-10)


def test_batched_graphs_match_single_graphs(tiny_model_cfg, rng):
    p = params(tiny_model_cfg)
    Z = rng.normal(size=(3, 4, 8))
    batch = embed_graph(Tensor(Z), adjacency_of(4), p, p.cfg).data
    for g in range(3):
        np.testing.assert_allclose(batch[g], embed_graph(Tensor(Z[g]), adjacency_of(4), p, p.cfg).data, rtol=0, atol=1e-12)


def test_graph_rhs_adds_self_loops(tiny_model_cfg, rng):
    p = params(tiny_model_cfg)
    Z = Tensor(rng.normal(size=(3, 8)))
    a = graph_ode_func(Z, 0.0, p, adjacency_of(3)).data
    b = graph_ode_func(Z, 0.0, p, with_self_loops(adjacency_of(3))).data
    np.testing.assert_array_equal(a, b)
