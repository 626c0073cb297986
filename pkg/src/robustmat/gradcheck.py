"""Finite-difference checks of every differentiable operation and of the full training loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import ode
from .autodiff import Parameter, Tensor
from .config import ModelConfig, SolverSettings
from .graph import Frame, Patch
from .heads import loss_total, loss_vg, loss_vv
from .model import ModelParams, forward
from .synth import PairRef

STEP = 1e-5


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``max|a - n| / max(max|n|, max|a|)``, with an absolute floor for all-zero gradients."""
    scale = max(np.abs(numeric).max(initial=0.0), np.abs(analytic).max(initial=0.0), 1e-8)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def numeric_grad(fn: Callable[[], float], x: np.ndarray, step: float = STEP) -> np.ndarray:
    """Central differences of ``fn`` with respect to the array ``x`` (modified in place, then restored)."""
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + step
        hi = fn()
        x[i] = old - step
        lo = fn()
        x[i] = old
        g[i] = (hi - lo) / (2 * step)
    return g


def check(build: Callable[[Sequence[Tensor]], Tensor], inputs: Sequence[np.ndarray], rng: np.random.Generator,
          step: float = STEP) -> float:
    """Worst relative error over all inputs of ``sum(build(inputs) * R)`` for a random projection R."""
    leaves = [Parameter(x) for x in inputs]
    with ad.Tape() as tape:
        out = build(leaves)
        proj = Tensor(rng.standard_normal(out.shape))
        loss = ad.sum(ad.mul(out, proj))
    ad.backward(tape, loss)

    def value() -> float:
        return float(np.sum(build([Tensor(p.data) for p in leaves]).data * proj.data))

    worst = 0.0
    for p in leaves:
        worst = max(worst, rel_error(p.grad if p.grad is not None else np.zeros_like(p.data),
                                     numeric_grad(value, p.data, step)))
    return worst


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.uniform(-2, 2, shape)
    return np.where(np.abs(x) < margin, x + np.sign(x + 1e-12) * margin, x)


def op_cases() -> dict[str, Callable[[np.random.Generator], tuple[Callable, list[np.ndarray]]]]:
    """Per operation: a builder from a generator to (graph function, input arrays)."""
    mask = lambda rng, n: rng.random(n) < 0.5  # noqa: E731
    return {
        "add": lambda r: (lambda t: ad.add(*t), [r.normal(size=(3, 4)), r.normal(size=(3, 4))]),
        "sub": lambda r: (lambda t: ad.sub(*t), [r.normal(size=(3, 4)), r.normal(size=(3, 4))]),
        "mul": lambda r: (lambda t: ad.mul(*t), [r.normal(size=(3, 4)), r.normal(size=(3, 4))]),
        "neg": lambda r: (lambda t: ad.neg(t[0]), [r.normal(size=(5,))]),
        "scale": lambda r: (lambda t: ad.scale(t[0], -1.7), [r.normal(size=(2, 3))]),
        "square": lambda r: (lambda t: ad.square(t[0]), [r.normal(size=(4,))]),
        "sigmoid": lambda r: (lambda t: ad.sigmoid(t[0]), [r.normal(scale=3, size=(6,))]),
        "relu": lambda r: (lambda t: ad.relu(t[0]), [_away_from_zero(r, (6,))]),
        "elu": lambda r: (lambda t: ad.elu(t[0]), [_away_from_zero(r, (6,))]),
        "tanh": lambda r: (lambda t: ad.tanh(t[0]), [r.normal(size=(6,))]),
        "leaky_relu": lambda r: (lambda t: ad.leaky_relu(t[0]), [_away_from_zero(r, (6,))]),
        "log": lambda r: (lambda t: ad.log(t[0]), [r.uniform(0.5, 2.0, (5,))]),
        "clip": lambda r: (lambda t: ad.clip(t[0], -0.5, 0.5), [_away_from_zero(r, (8,)) * 0.4 + 0.5 * _away_from_zero(r, (8,))]),
        "lincomb": lambda r: (lambda t, c=r.normal(size=3): ad.lincomb((0.3, c), t), [r.normal(size=(3, 2)), r.normal(size=(3, 2))]),
        "select": lambda r: (lambda t, m=mask(r, 4): ad.select(m, *t), [r.normal(size=(4, 2)), r.normal(size=(4, 2))]),
        "transpose": lambda r: (lambda t: ad.transpose(t[0], (2, 0, 1)), [r.normal(size=(2, 3, 4))]),
        "broadcast_to": lambda r: (lambda t: ad.broadcast_to(t[0], (3, 2, 4)), [r.normal(size=(2, 1))]),
        "reshape": lambda r: (lambda t: ad.reshape(t[0], (3, 4)), [r.normal(size=(2, 6))]),
        "concat": lambda r: (lambda t: ad.concat(t, axis=1), [r.normal(size=(2, 3)), r.normal(size=(2, 1))]),
        "take": lambda r: (lambda t: ad.take(t[0], [0, 2, 2, 1], axis=0), [r.normal(size=(3, 2))]),
        "matmul": lambda r: (lambda t: ad.matmul(*t), [r.normal(size=(2, 3, 4)), r.normal(size=(4, 5))]),
        "linear": lambda r: (lambda t: ad.linear(*t), [r.normal(size=(3, 4)), r.normal(size=(5, 4)), r.normal(size=(5,))]),
        "bilinear": lambda r: (lambda t: ad.bilinear(*t), [r.normal(size=(4,)), r.normal(size=(4, 4)), r.normal(size=(4,))]),
        "conv2d": lambda r: (lambda t: ad.conv2d(t[0], t[1], t[2], 1, 0),
                             [r.normal(size=(2, 5, 5)), r.normal(size=(3, 2, 3, 3)), r.normal(size=(3,))]),
        "conv2d_strided": lambda r: (lambda t: ad.conv2d(t[0], t[1], t[2], 2, 1),
                                     [r.normal(size=(2, 2, 6, 6)), r.normal(size=(3, 2, 3, 3)), r.normal(size=(3,))]),
        "sum": lambda r: (lambda t: ad.sum(t[0], axis=1), [r.normal(size=(3, 4))]),
        "mean": lambda r: (lambda t: ad.mean(t[0]), [r.normal(size=(3, 4))]),
        "mean_axis": lambda r: (lambda t: ad.mean(t[0], axis=(0, 2)), [r.normal(size=(2, 3, 4))]),
        "softmax": lambda r: (lambda t: ad.softmax(t[0], axis=-1), [r.normal(size=(3, 5))]),
        "masked_softmax": lambda r: (lambda t, m=np.eye(4, dtype=bool) | (r.random((4, 4)) < 0.5):
                                     ad.masked_softmax(t[0], m), [r.normal(size=(4, 4))]),
        "l2_norm": lambda r: (lambda t: ad.l2_norm(t[0]), [r.normal(size=(3, 4))]),
    }


@dataclass(frozen=True)
class CheckRow:
    name: str
    instances: int
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def run_op_checks(instances: int = 20, seed: int = 0, tol: float = 1e-4) -> list[CheckRow]:
    rows = []
    for name, case in op_cases().items():
        worst = 0.0
        for k in range(instances):
            rng = np.random.default_rng(np.random.SeedSequence([seed, k, len(name)]))
            build, inputs = case(rng)
            worst = max(worst, check(build, inputs, rng))
        rows.append(CheckRow(name, instances, worst, tol))
    return rows


def ode_check(instances: int = 5, seed: int = 0, tol: float = 1e-3) -> CheckRow:
    """Unrolled dopri5 through a random two-layer tanh right-hand side, step schedule held fixed."""
    worst = 0.0
    for k in range(instances):
        rng = np.random.default_rng(np.random.SeedSequence([seed, k, 0x4F4445]))
        W1, W2 = rng.normal(scale=0.6, size=(6, 4)), rng.normal(scale=0.6, size=(4, 6))
        b1 = rng.normal(scale=0.3, size=6)
        z0 = rng.normal(size=(2, 4))
        cfg = ode.SolverConfig(rtol=1e-4, atol=1e-4)

        def build(t, sched=None):
            w1, w2, bb, z = t
            f = lambda s, _t: ad.matmul(ad.tanh(ad.linear(s, w1, bb)), ad.transpose(w2, (1, 0)))  # noqa: E731
            return ode.solve(f, z, cfg, per_sample=True, schedule=sched)

        sched = build([Tensor(W1), Tensor(W2), Tensor(b1), Tensor(z0)]).steps
        worst = max(worst, check(lambda t: build(t, sched).z, [W1, W2, b1, z0], rng))
    return CheckRow("ode_dopri5", instances, worst, tol)


def toy_model_config() -> ModelConfig:
    return ModelConfig(patch_side=8, downsample=[(3, 3, 2, 1)], pool=2, n_f=8, gat_heads=2, r_hidden=[6],
                       gamma_init=0.7, graph_gamma_init=0.7,
                       vertex_solver=SolverSettings(rtol=1e-2, atol=1e-2),
                       graph_solver=SolverSettings(rtol=1e-3, atol=1e-3))


def toy_batch(rng: np.random.Generator, side: int = 8, n: int = 3) -> tuple[list[Frame], list[PairRef]]:
    frames = []
    base = rng.uniform(0.1, 0.9, (n, 3, side, side))
    for f in range(2):
        px = np.clip(base + 0.05 * rng.standard_normal(base.shape), 0, 1)
        centers = rng.uniform(0, 50, (n, 2))
        frames.append(Frame(f, [Patch(px[i], tuple(centers[i]), i, f) for i in range(n)]))
    pairs = [PairRef(0, i, 1, i, 1) for i in range(n)] + [PairRef(0, i, 1, (i + 1) % n, 0) for i in range(n)]
    return frames, pairs


def pipeline_check(seed: int = 0, lam: float = 0.5, tol: float = 1e-3, cfg: ModelConfig | None = None) -> list[CheckRow]:
    """Gradient of the weighted pair loss on a two-frame toy batch, for every parameter tensor."""
    cfg = cfg or toy_model_config()
    rng = np.random.default_rng(seed)
    params = ModelParams.init(cfg, seed)
    for name, p in params.tensors.items():  # the zero-initialized heads would make half the gradients trivially zero
        if not name.endswith("gamma"):
            p.data[...] = p.data + 0.3 * rng.standard_normal(p.shape) / np.sqrt(max(p.data.shape[-1], 1))
    frames, pairs = toy_batch(rng, cfg.patch_side)
    y = np.array([p.label for p in pairs], dtype=float)

    def loss_value():
        fw = forward(frames, [0, 1], pairs, params)
        return loss_total(loss_vv(fw.r, y), loss_vg(fw.d_xy, fw.d_yx, y), lam)

    with ode.record_steps() as log:
        ad.zero_grad(params.parameters())
        with ad.Tape() as tape:
            loss = loss_value()
        ad.backward(tape, loss)

    def replayed() -> float:
        with ode.replay_steps(log):
            return float(loss_value().data)

    rows = []
    for name, p in params.tensors.items():
        num = numeric_grad(replayed, p.data)
        rows.append(CheckRow(f"pipeline:{name}", 1, rel_error(p.grad if p.grad is not None else np.zeros_like(num), num), tol))
    return rows


def run_all(instances: int = 20, seed: int = 0) -> list[CheckRow]:
    return run_op_checks(instances, seed) + [ode_check(seed=seed)] + pipeline_check(seed)


def format_table(rows: list[CheckRow]) -> str:
    width = max(len(r.name) for r in rows)
    lines = [f"{'check':<{width}}  instances  max_rel_err  tol     status"]
    for r in rows:
        lines.append(f"{r.name:<{width}}  {r.instances:>9}  {r.max_rel_error:11.3e}  {r.tolerance:.0e}  "
                     f"{'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines)
