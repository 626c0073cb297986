import numpy as np
import pytest

from robustmat import ode
from robustmat.dataio import generate_dataset
from robustmat.gradcheck import pipeline_check, toy_batch
from robustmat.model import ModelParams, embed_frames, forward, index_graphs, match_score, s_match


@pytest.fixture(scope="module")
def data(tiny_data_cfg):
    return generate_dataset(tiny_data_cfg)


def randomized(cfg, seed):
    p = ModelParams.init(cfg, seed)
    rng = np.random.default_rng(seed)
    p["M"].data[...] = rng.normal(size=p["M"].shape)
    for k in p:
        if k.startswith("r."):
            p[k].data[...] = rng.normal(size=p[k].shape)
    return p


def test_graph_index_covers_every_patch(data, tiny_model_cfg):
    frames = data.frames[:4]
    idx = index_graphs(frames, tiny_model_cfg.K)
    total = sum(len(f) for f in frames)
    assert sorted(idx.graph_row) == list(range(total))
    for v, rows in idx.groups.items():
        assert rows.shape[1] == v
        for row in rows:
            assert idx.graph_row[row[0]] >= 0


def test_score_symmetry_and_range(data, tiny_model_cfg):
    from robustmat.synth import PairRef
    for seed in range(5):
        p = randomized(tiny_model_cfg, seed)
        pairs = data.split_pairs("train")[:8]
        swapped = [PairRef(q.frame_b, q.patch_b, q.frame_a, q.patch_a, q.label) for q in pairs]
        frames = sorted({q.frame_a for q in pairs} | {q.frame_b for q in pairs})
        a = s_match(forward(data.frames, frames, pairs, p))
        b = s_match(forward(data.frames, frames, swapped, p))
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-10)
        assert np.all((a >= 0) & (a <= 2))


def test_embedding_matches_per_frame_embedding(data, tiny_model_cfg):
    p = randomized(tiny_model_cfg, 0)
    both = embed_frames(data.frames[:2], p)
    one = embed_frames(data.frames[1:2], p)
    n0 = len(data.frames[0])
    np.testing.assert_allclose(both.g.data[n0:], one.g.data, rtol=0, atol=1e-12)


def test_match_score_predictions(data, tiny_model_cfg):
    p = randomized(tiny_model_cfg, 1)
    pairs = data.split_pairs("test")[:4]
    fw = forward(data.frames, sorted({q.frame_a for q in pairs} | {q.frame_b for q in pairs}), pairs, p)
    preds = match_score(fw, threshold=1.0)
    assert [x.s_match for x in preds] == pytest.approx(list(s_match(fw)))
    assert all(x.predicted == (x.s_match > 1.0) for x in preds)


@pytest.mark.parametrize("lam", [0.0, 0.5, 1.0])
def test_full_loss_gradients(lam):
    rows = pipeline_check(seed=1, lam=lam)
    bad = [(r.name, r.max_rel_error) for r in rows if not r.passed]
    assert not bad


def test_full_loss_gradients_gcn(tiny_model_cfg):
    from robustmat.gradcheck import toy_model_config
    cfg = toy_model_config().model_copy(update={"graph_variant": "gcn", "gcn_hidden": 6})
    assert all(r.passed for r in pipeline_check(seed=2, cfg=cfg))


def test_toy_batch_shape():
    frames, pairs = toy_batch(np.random.default_rng(0))
    assert len(frames) == 2 and len(pairs) == 6


def test_clamp_projects_decay(tiny_model_cfg):
    p = ModelParams.init(tiny_model_cfg, 0)
    p["ode.gamma"].data[...] = -1.0
    p.clamp()
    assert np.all(p["ode.gamma"].data == tiny_model_cfg.gamma_min)


def test_non_finite_input_raises(data, tiny_model_cfg):
    p = ModelParams.init(tiny_model_cfg, 0)
    px = np.stack([q.pixels for q in data.frames[0].patches])
    px[0, 0, 0, 0] = np.nan
    with pytest.raises(ode.NumericalError):
        embed_frames(data.frames[:1], p, px)
