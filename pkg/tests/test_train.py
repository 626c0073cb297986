import numpy as np
import pytest

from robustmat import autodiff as ad
from robustmat.autodiff import Tensor
from robustmat.config import DatasetConfig, TrainConfig
from robustmat.dataio import generate_dataset
from robustmat.heads import loss_total, loss_vg, loss_vv
from robustmat.model import ModelParams, forward
from robustmat.ode import NumericalError
from robustmat.train import AdamState, TrainingError, adam_step, quotient_regularizer, train


@pytest.fixture(scope="module")
def data(tiny_data_cfg):
    return generate_dataset(tiny_data_cfg)


def test_adam_zero_gradient_leaves_parameters(tiny_model_cfg):
    p = ModelParams.init(tiny_model_cfg, 0)
    before = {k: v.data.copy() for k, v in p.tensors.items()}
    state = AdamState()
    adam_step(p, {k: np.zeros_like(v.data) for k, v in p.tensors.items()}, state)
    assert state.step == 1
    for k, v in p.tensors.items():
        np.testing.assert_array_equal(v.data, before[k])


def test_adam_single_step_oracle(tiny_model_cfg):
    p = ModelParams.init(tiny_model_cfg, 0)
    rng = np.random.default_rng(0)
    grads = {k: rng.normal(size=v.shape) for k, v in p.tensors.items()}
    before = {k: v.data.copy() for k, v in p.tensors.items()}
    state = AdamState(lr=1e-3)
    adam_step(p, grads, state)
    for k, g in grads.items():
        m_hat = (0.1 * g) / (1 - 0.9)
        v_hat = (0.001 * g * g) / (1 - 0.999)
        want = before[k] - 1e-3 * m_hat / (np.sqrt(v_hat) + 1e-8)
        if k.endswith("gamma"):
            want = np.maximum(want, tiny_model_cfg.gamma_min)
        np.testing.assert_allclose(p[k].data, want, rtol=0, atol=1e-15)
        if not k.endswith("gamma"):
            # first step: every coordinate moves by lr * |g| / (|g| + eps)
            np.testing.assert_allclose(np.abs(p[k].data - before[k]), 1e-3 * np.abs(g) / (np.abs(g) + 1e-8), rtol=1e-9)


def test_adam_rejects_non_finite_gradient(tiny_model_cfg):
    p = ModelParams.init(tiny_model_cfg, 0)
    g = {k: np.zeros_like(v.data) for k, v in p.tensors.items()}
    g["fc.w"][0, 0] = np.nan
    with pytest.raises(NumericalError, match="fc.w"):
        adam_step(p, g, AdamState())


def test_quotient_regularizer_values(rng):
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    assert quotient_regularizer(Tensor(a), Tensor(b), Tensor(a), Tensor(b)).item() == pytest.approx(1.0)
    assert abs(quotient_regularizer(Tensor(a), Tensor(b), Tensor(a), Tensor(a)).item()) < 1e-12
    # identical inputs hit the denominator floor instead of dividing by zero
    assert np.isfinite(quotient_regularizer(Tensor(a), Tensor(a), Tensor(a), Tensor(b)).item())


def pair_loss(ds, params, lam=0.5):
    pairs = ds.split_pairs("train")
    frames = sorted({p.frame_a for p in pairs} | {p.frame_b for p in pairs})
    fw = forward(ds.frames, frames, pairs, params)
    y = [p.label for p in pairs]
    return loss_total(loss_vv(fw.r, y), loss_vg(fw.d_xy, fw.d_yx, y), lam).item()


def test_one_epoch_on_four_pairs_lowers_the_loss(tiny_model_cfg):
    ds = generate_dataset(DatasetConfig(n_scenes=1, n_train_scenes=1, n_landmarks=2, patch_side=8, min_separation=8.0))
    assert len(ds.split_pairs("train")) == 4
    wins = 0
    for seed in range(5):
        start = pair_loss(ds, ModelParams.init(tiny_model_cfg, seed))
        res = train(ds, tiny_model_cfg, TrainConfig(epochs=1, seed=seed, lr=1e-2))
        wins += pair_loss(ds, res.params) < start
    assert wins >= 4


def test_history_and_determinism(data, tiny_model_cfg):
    cfg = TrainConfig(epochs=2, seed=3, batch_scenes=2)
    a = train(data, tiny_model_cfg, cfg)
    b = train(data, tiny_model_cfg, cfg)
    assert len(a.history) == 2
    assert a.history == b.history
    for k in a.params:
        np.testing.assert_array_equal(a.params[k].data, b.params[k].data)


def test_zero_weight_on_the_discriminator_loss_leaves_m_untouched(data, tiny_model_cfg):
    res = train(data, tiny_model_cfg, TrainConfig(epochs=1, lam=0.0, batch_scenes=2))
    assert res.params["M"].grad is None
    assert not np.any(res.params["M"].data)


def test_augmentation_and_regularizer_paths_run(data, tiny_model_cfg):
    res = train(data, tiny_model_cfg, TrainConfig(epochs=1, augment_psnr=16.0, regularize=True, batch_scenes=4))
    assert np.isfinite(res.history[0])
    assert np.all(res.params["ode.gamma"].data >= tiny_model_cfg.gamma_min)


def test_divergence_reports_epoch_and_batch(data, tiny_model_cfg):
    cfg = tiny_model_cfg.model_copy(update={"vertex_solver": tiny_model_cfg.vertex_solver.model_copy(
        update={"max_steps": 1, "rtol": 1e-12, "atol": 1e-12})})
    with pytest.raises(TrainingError) as info:
        train(data, cfg, TrainConfig(epochs=1))
    assert info.value.epoch == 0 and info.value.batch == 0


def test_training_needs_both_labels(data, tiny_model_cfg):
    from robustmat.dataio import Dataset
    only_pos = Dataset(data.frames, [p for p in data.pairs if p.label], data.frame_scene, data.frame_split)
    with pytest.raises(ValueError):
        train(only_pos, tiny_model_cfg, TrainConfig(epochs=1))


def test_invalid_train_config():
    with pytest.raises(ValueError):
        TrainConfig(lam=1.5)
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
