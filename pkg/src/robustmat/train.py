"""Adam optimizer, the training loop and the quotient regularizer."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig, TrainConfig
from .dataio import Dataset
from .heads import loss_total, loss_vg, loss_vv
from .model import ModelParams, forward, stack_patches
from .ode import DivergenceError, NumericalError
from .synth import gauss_sigma

log = logging.getLogger(__name__)

REG_DELTA = 1e-8


class TrainingError(RuntimeError):
    def __init__(self, message: str, epoch: int | None = None, batch: int | None = None):
        where = f"epoch {epoch}, batch {batch}: " if epoch is not None else ""
        super().__init__(where + message)
        self.epoch = epoch
        self.batch = batch


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "AdamState":
        return cls(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)


def adam_step(params: ModelParams, grads: dict[str, np.ndarray | None], state: AdamState) -> None:
    """In-place bias-corrected Adam update; a missing gradient counts as zero."""
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.tensors.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ad.ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {p.data.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    params.clamp()


def quotient_regularizer(in_clean: Tensor, in_pert: Tensor, out_clean: Tensor, out_pert: Tensor) -> Tensor:
    """Mean over the leading axis of ``|out diff| / max(|in diff|, delta)``.

    The input side is treated as a constant, so the penalty pushes only on
    the module that maps inputs to outputs.
    """
    n = in_clean.shape[0]
    din = np.sqrt(((in_clean.data - in_pert.data).reshape(n, -1) ** 2).sum(axis=1))
    dout = ad.reshape(ad.sub(out_clean, out_pert), (n, -1))
    num = ad.l2_norm(dout, axis=-1, eps=1e-300)
    return ad.mean(ad.mul(num, Tensor(1.0 / np.maximum(din, REG_DELTA))))


def add_noise(pixels: np.ndarray, psnr_db: float, rng: np.random.Generator) -> np.ndarray:
    return np.clip(pixels + gauss_sigma(psnr_db) * rng.standard_normal(pixels.shape), 0.0, 1.0)


@dataclass
class TrainResult:
    params: ModelParams
    history: list[float]
    seconds: float


def scene_frames(ds: Dataset) -> dict[int, list[int]]:
    out: dict[int, list[int]] = {}
    for i, s in enumerate(ds.frame_scene):
        out.setdefault(s, []).append(i)
    return out


def train(ds: Dataset, model_cfg: ModelConfig, cfg: TrainConfig, *, progress=None) -> TrainResult:
    """Adam on the weighted pair loss, one optimizer step per group of scenes.

    Scenes are the shuffling unit: every pair lives inside one scene, and
    all patches of a scene's frames are embedded once per step.
    """
    pairs = ds.split_pairs("train")
    labels = {p.label for p in pairs}
    if labels != {0, 1}:
        raise ValueError("training needs at least one positive and one negative pair")
    frames_of = scene_frames(ds)
    pairs_of: dict[int, list] = {}
    for p in pairs:
        pairs_of.setdefault(ds.frame_scene[p.frame_a], []).append(p)
    scenes = sorted(pairs_of)
    params = ModelParams.init(model_cfg, cfg.seed)
    state = AdamState.from_config(cfg)
    history = []
    start = time.perf_counter()
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch, 0x545241]))
        order = rng.permutation(len(scenes))
        total, count = 0.0, 0
        for b, lo in enumerate(range(0, len(order), cfg.batch_scenes)):
            batch = [scenes[i] for i in order[lo : lo + cfg.batch_scenes]]
            frame_ids = [f for s in batch for f in frames_of[s]]
            bpairs = [p for s in batch for p in pairs_of[s]]
            try:
                value = _step(ds, frame_ids, bpairs, params, state, cfg, rng)
            except (DivergenceError, NumericalError) as exc:
                raise TrainingError(str(exc), epoch, b) from exc
            total += value * len(bpairs)
            count += len(bpairs)
        history.append(total / count)
        if progress is not None:
            progress(epoch, history[-1])
        log.debug("epoch %d loss %.6f", epoch, history[-1])
    return TrainResult(params, history, time.perf_counter() - start)


def _step(ds: Dataset, frame_ids: list[int], pairs: list, params: ModelParams, state: AdamState,
          cfg: TrainConfig, rng: np.random.Generator) -> float:
    frames = [ds.frames[i] for i in frame_ids]
    pixels = stack_patches(frames)
    if cfg.augment_psnr is not None:
        sizes = [len(f) for f in frames]
        noisy = np.repeat(rng.random(len(frames)) < 0.5, sizes)
        pixels = np.where(noisy[:, None, None, None], add_noise(pixels, cfg.augment_psnr, rng), pixels)
    y = np.array([p.label for p in pairs], dtype=np.float64)
    ad.zero_grad(params.parameters())
    with ad.Tape() as tape:
        fw = forward(ds.frames, frame_ids, pairs, params, pixels)
        loss = loss_total(loss_vv(fw.r, y), loss_vg(fw.d_xy, fw.d_yx, y), cfg.lam)
        if cfg.regularize:
            loss = ad.add(loss, ad.scale(_regularizer(ds, frame_ids, pairs, params, cfg, rng, pixels, fw), cfg.beta_reg))
    ad.backward(tape, loss)
    adam_step(params, {k: p.grad for k, p in params.tensors.items()}, state)
    return float(loss.data)


def _regularizer(ds, frame_ids, pairs, params, cfg, rng, pixels, fw) -> Tensor:
    pert = forward(ds.frames, frame_ids, pairs, params, add_noise(pixels, cfg.reg_psnr, rng))
    terms = [quotient_regularizer(fw.stages.downsampled, pert.stages.downsampled, fw.stages.diffused,
                                  pert.stages.diffused)]
    for v in fw.graph_in:
        terms.append(quotient_regularizer(fw.graph_in[v], pert.graph_in[v], fw.graph_out[v], pert.graph_out[v]))
    return ad.lincomb([1.0 / len(terms)] * len(terms), terms)
