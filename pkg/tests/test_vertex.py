import math

import numpy as np
import pytest

from robustmat import autodiff as ad
from robustmat import ode
from robustmat.autodiff import Tensor
from robustmat.config import ModelConfig
from robustmat.model import ModelParams
from robustmat.robustness import jacobian_diagonal, spectral_norm
from robustmat.vertex import (avg_pool, downsample, embed_vertex, head, ode_net, vertex_ode_func, vertex_stages)


def zeroed(params, prefix):
    for k, p in params.tensors.items():
        if k.startswith(prefix):
            p.data[...] = 0.0
    return params


def test_desk_downsampler_shape():
    cfg = ModelConfig()
    p = ModelParams.init(cfg, 0)
    out = downsample(Tensor(np.zeros((2, 3, 32, 32))), p, cfg)
    assert out.shape == (2, 16, 8, 8)


def test_all_zero_patch_with_zero_biases_gives_zero_map():
    cfg = ModelConfig()
    out = downsample(Tensor(np.zeros((1, 3, 32, 32))), ModelParams.init(cfg, 0), cfg)
    assert not np.any(out.data)


def test_wrong_patch_side_is_rejected(tiny_model_cfg):
    with pytest.raises(ValueError):
        downsample(Tensor(np.zeros((1, 3, 16, 16))), ModelParams.init(tiny_model_cfg, 0), tiny_model_cfg)


def test_config_rejects_incompatible_pool():
    with pytest.raises(ValueError):
        ModelConfig(pool=3)


def test_zero_field_leaves_feature_map_unchanged(tiny_model_cfg, rng):
    p = zeroed(ModelParams.init(tiny_model_cfg.model_copy(update={"gamma_init": 0.0, "gamma_min": 0.0}), 0), "ode.")
    x = rng.uniform(0, 1, (3, 3, 8, 8))
    st = vertex_stages(Tensor(x), p, tiny_model_cfg)
    np.testing.assert_array_equal(st.diffused.data, st.downsampled.data)
    np.testing.assert_allclose(st.embedding.data, head(st.downsampled, p, tiny_model_cfg).data, atol=1e-14)


def test_pure_decay_contracts_by_exp_minus_gamma():
    cfg = ModelConfig(patch_side=8, downsample=[(1, 1, 1, 0)], pool=1, n_f=2, gat_heads=1, ode_kernel=1,
                      gamma_init=2.0)
    p = zeroed(ModelParams.init(cfg, 0), "ode.w")
    eps = 1e-3
    out = ode.integrate(lambda z, t: vertex_ode_func(z, t, p), Tensor(np.full((1, 1, 1, 1), eps)),
                        ode.SolverConfig(rtol=1e-8, atol=1e-12))
    assert out.item() == pytest.approx(eps * math.exp(-2.0), rel=1e-6)


def test_identical_patches_embed_identically(tiny_model_cfg, rng):
    p = ModelParams.init(tiny_model_cfg, 0)
    x = rng.uniform(0, 1, (1, 3, 8, 8))
    out = embed_vertex(Tensor(np.concatenate([x, x])), p, tiny_model_cfg).data
    np.testing.assert_array_equal(out[0], out[1])


def test_embedding_of_a_sample_does_not_depend_on_its_batch(tiny_model_cfg, rng):
    p = ModelParams.init(tiny_model_cfg, 0)
    x = rng.uniform(0, 1, (4, 3, 8, 8))
    batch = embed_vertex(Tensor(x), p, tiny_model_cfg).data
    solo = embed_vertex(Tensor(x[2:3]), p, tiny_model_cfg).data
    # step control is per sample; only BLAS blocking differs with the batch size
    np.testing.assert_allclose(batch[2], solo[0], rtol=0, atol=1e-12)


def test_jacobian_diagonal_bounded_by_decay_plus_net_lipschitz(tiny_model_cfg, rng):
    p = ModelParams.init(tiny_model_cfg.model_copy(update={"ode_init_scale": 1.5}), 3).frozen()
    z = rng.normal(size=(4, 4, 4))
    diag = jacobian_diagonal(lambda s: vertex_ode_func(s, 0.0, p), z)
    lip = spectral_norm(lambda s: ode_net(s, p), z, iters=50)
    gamma = np.repeat(p["ode.gamma"].data, 16)
    assert np.all(diag <= -gamma + lip + 1e-6)


def test_jacobian_diagonal_matches_autodiff(tiny_model_cfg, rng):
    p = ModelParams.init(tiny_model_cfg, 0).frozen()
    z = rng.normal(size=(4, 4, 4))
    diag = jacobian_diagonal(lambda s: vertex_ode_func(s, 0.0, p), z)
    exact = np.empty(z.size)
    for i in range(z.size):
        x = Tensor(z[None], requires_grad=True)
        with ad.Tape() as tape:
            out = ad.take(ad.reshape(vertex_ode_func(x, 0.0, p), (-1,)), [i])
            loss = ad.sum(out)
        exact[i] = ad.backward(tape, loss)[id(x)].reshape(-1)[i]
    np.testing.assert_allclose(diag, exact, atol=1e-8)


def test_avg_pool():
    z = Tensor(np.arange(16.0).reshape(1, 1, 4, 4))
    np.testing.assert_array_equal(avg_pool(z, 2).data[0, 0], [[2.5, 4.5], [10.5, 12.5]])


def test_baseline_uses_one_residual_block(tiny_model_cfg, rng):
    cfg = tiny_model_cfg.model_copy(update={"variant": "resnet_gat"})
    p = ModelParams.init(cfg, 0)
    assert "ode.gamma" not in p
    x = Tensor(rng.uniform(0, 1, (2, 3, 8, 8)))
    st = vertex_stages(x, p, cfg)
    np.testing.assert_allclose(st.diffused.data, st.downsampled.data + ode_net(st.downsampled, p).data)
