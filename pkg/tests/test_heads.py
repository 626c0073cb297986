import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from robustmat import autodiff as ad
from robustmat.autodiff import Parameter, Tensor
from robustmat.gradcheck import check
from robustmat.heads import (bce, combine, init_head_params, loss_total, loss_vg, loss_vv, predictions, v2g_score,
                             v2v_score)


@pytest.fixture
def head_params(tiny_model_cfg):
    p = init_head_params(tiny_model_cfg, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    for v in p.values():
        v.data[...] = rng.normal(size=v.shape)
    return p


def test_untrained_head_scores_every_pair_as_one(tiny_model_cfg, rng):
    p = init_head_params(tiny_model_cfg, rng)
    fx, fy = Tensor(rng.normal(size=(5, 8))), Tensor(rng.normal(size=(5, 8)))
    r = v2v_score(fx, fy, p).data
    d = v2g_score(fx, fy, p).data
    np.testing.assert_array_equal(combine(r, d, d), 1.0)


def test_equal_embeddings_give_constant_comparator_output(head_params, rng):
    zero = Tensor(np.zeros((1, 8)))
    expected = v2v_score(zero, zero, head_params).item()
    for _ in range(5):
        f = Tensor(rng.normal(size=(1, 8)))
        assert v2v_score(f, f, head_params).item() == expected


def test_comparator_is_symmetric_and_in_open_unit_interval(head_params):
    rng = np.random.default_rng(2)
    a, b = Tensor(rng.normal(size=(100, 8))), Tensor(rng.normal(size=(100, 8)))
    ab, ba = v2v_score(a, b, head_params).data, v2v_score(b, a, head_params).data
    np.testing.assert_array_equal(ab, ba)
    assert np.all((ab > 0) & (ab < 1))


def test_bilinear_discriminator_examples():
    e1 = np.zeros(4)
    e1[0] = 1.0
    assert v2g_score(Tensor(e1), Tensor(e1), {"M": Tensor(np.zeros((4, 4)))}).item() == 0.5
    assert v2g_score(Tensor(e1), Tensor(e1), {"M": Tensor(np.eye(4))}).item() == pytest.approx(0.7310586, abs=1e-7)


def test_discriminator_gradient_in_m(rng):
    f, g = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    err = check(lambda t: v2g_score(Tensor(f), Tensor(g), {"M": t[0]}), [rng.normal(size=(4, 4))], rng)
    assert err <= 1e-4


def test_width_mismatch_raises(head_params):
    with pytest.raises(ad.ShapeError):
        v2v_score(Tensor(np.zeros(8)), Tensor(np.zeros(7)), head_params)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=3, max_size=3), st.lists(st.floats(0, 1), min_size=3, max_size=3),
       st.lists(st.floats(0, 1), min_size=3, max_size=3))
def test_score_range_and_symmetry(r, a, b):
    s = combine(np.array(r), np.array(a), np.array(b))
    assert np.all((s >= 0) & (s <= 2))
    np.testing.assert_array_equal(s, combine(np.array(r), np.array(b), np.array(a)))


def test_predictions_threshold_strictly():
    preds = predictions([0.5, 0.5], [0.5, 0.6], [0.5, 0.6], threshold=1.0)
    assert [p.predicted for p in preds] == [False, True]
    assert preds[1].s_match == pytest.approx(1.1)


def direct_bce(p, y):
    p = np.clip(p, 1e-7, 1 - 1e-7)
    total = 0.0
    for pi, yi in zip(p, y):
        total += yi * math.log(pi) + (1 - yi) * math.log(1 - pi)
    return -total / len(p)


def test_loss_values():
    half = Tensor(np.full(6, 0.5))
    y = [1, 0, 1, 1, 0, 0]
    assert loss_vv(half, y).item() == pytest.approx(math.log(2), abs=1e-15)
    assert loss_vg(half, half, y).item() == pytest.approx(math.log(2), abs=1e-15)
    perfect = Tensor(np.array(y, dtype=float))
    assert 0 < loss_vv(perfect, y).item() < 2e-7


def test_losses_match_direct_summation():
    rng = np.random.default_rng(3)
    for _ in range(50):
        n = int(rng.integers(1, 20))
        y = rng.integers(0, 2, n)
        r, a, b = rng.uniform(0, 1, (3, n))
        assert loss_vv(Tensor(r), y).item() == pytest.approx(direct_bce(r, y), abs=1e-12)
        want = 0.5 * (direct_bce(a, y) + direct_bce(b, y))
        assert loss_vg(Tensor(a), Tensor(b), y).item() == pytest.approx(want, abs=1e-12)


def test_better_matched_discriminator_lowers_loss():
    y = np.array([1, 1, 0, 0])
    d = np.array([0.6, 0.4, 0.3, 0.5])
    base = loss_vg(Tensor(d), Tensor(d), y).item()
    up = d + np.array([1e-3, 1e-3, 0, 0])
    assert loss_vg(Tensor(up), Tensor(up), y).item() < base


def test_weighted_total():
    a, b = Tensor(0.3), Tensor(0.9)
    assert loss_total(a, b, 0.0) is a
    assert loss_total(a, b, 1.0) is b
    assert loss_total(a, b, 0.5).item() == pytest.approx(0.6, abs=1e-15)
    with pytest.raises(ValueError):
        loss_total(a, b, 1.5)


def test_label_validation():
    with pytest.raises(ValueError):
        bce(Tensor([0.5]), [2])
    with pytest.raises(ValueError):
        bce(Tensor(np.zeros(0)), [])


def test_bce_gradient_is_finite_at_the_clamp():
    p = Parameter([0.0, 1.0], "p")
    with ad.Tape() as tape:
        loss = bce(p, [1, 0])
    ad.backward(tape, loss)
    assert np.all(np.isfinite(p.grad))
