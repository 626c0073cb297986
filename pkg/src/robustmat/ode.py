"""Explicit Runge-Kutta integration of tensor-valued ODEs.

Two methods: fixed-step classical RK4 and adaptive Dormand-Prince 5(4).
Every stage is built from autodiff ops, so running under an active tape
gives gradients of the computed discretization (unrolled backprop). The
adaptive controller only reads ``.data``; rejected attempts are cut off the
tape (or masked out per sample), so the recorded graph is exactly the
accepted step sequence.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Literal

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

OdeFunction = Callable[[Tensor, float], Tensor]

__all__ = [
    "SolverConfig",
    "OdeResult",
    "DivergenceError",
    "NumericalError",
    "integrate",
    "integrate_differentiable",
    "solve",
    "dopri5_step",
    "rk4_step",
    "record_steps",
    "replay_steps",
]


class DivergenceError(RuntimeError):
    def __init__(self, message: str, last_t: float):
        super().__init__(message)
        self.last_t = last_t


class NumericalError(ArithmeticError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    method: Literal["rk4_fixed", "dopri5"] = "dopri5"
    t0: float = 0.0
    t1: float = 1.0
    rtol: float = 1e-3
    atol: float = 1e-3
    max_steps: int = 10_000
    initial_step: float | None = None
    fixed_step_count: int = 10

    def __post_init__(self):
        if not self.t1 > self.t0:
            raise ValueError(f"t1 ({self.t1}) must exceed t0 ({self.t0})")
        if self.rtol <= 0 or self.atol <= 0:
            raise ValueError("rtol and atol must be positive")
        if self.max_steps < 1 or self.fixed_step_count < 1:
            raise ValueError("max_steps and fixed_step_count must be >= 1")
        if self.method not in ("rk4_fixed", "dopri5"):
            raise ValueError(f"unknown method {self.method!r}")

    def with_t1(self, t1: float) -> "SolverConfig":
        return SolverConfig(self.method, self.t0, t1, self.rtol, self.atol, self.max_steps,
                            self.initial_step, self.fixed_step_count)


@dataclass
class OdeResult:
    z: Tensor
    # one entry per attempted step: (t, h, accepted, normalized error); arrays in per-sample mode
    attempts: list[tuple] = field(default_factory=list)

    @property
    def steps(self) -> list[tuple]:
        """Schedule to hand back to :func:`solve` for an exact replay."""
        return [a[:3] for a in self.attempts]

    @property
    def n_accepted(self) -> int:
        if not self.attempts:
            return 0
        return int(np.max(np.sum([np.asarray(a[2], dtype=int) for a in self.attempts], axis=0)))

    @property
    def n_rejected(self) -> int:
        if not self.attempts:
            return 0
        rej = [(~np.asarray(a[2], dtype=bool)) & (np.asarray(a[1]) > 0) for a in self.attempts]
        return int(np.max(np.sum(np.asarray(rej, dtype=int), axis=0)))


# Dormand-Prince 5(4) tableau
_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_B5 = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0)
_B4 = (5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40)
_E = tuple(b5 - b4 for b5, b4 in zip(_B5, _B4))


def _check_finite(k: Tensor, t) -> Tensor:
    if not np.all(np.isfinite(k.data)):
        raise NumericalError(f"non-finite derivative at t={np.min(t):.6g}")
    return k


def dopri5_step(f: OdeFunction, z: Tensor, t, h, k1: Tensor | None = None):
    """One Dormand-Prince step. Returns ``(z5, z5 - z4, stages)``.

    ``t`` and ``h`` may be per-sample arrays over the leading axis (a zero
    step leaves that sample unchanged). ``k1`` reuses the last stage of the
    previous step.
    """
    if np.any(np.asarray(h) < 0) or (np.ndim(h) == 0 and h == 0):
        raise ValueError("step size must be positive")
    ks = [k1 if k1 is not None else _check_finite(f(z, t), t)]
    for i in range(1, 7):
        ti = t + _C[i] * h
        zi = ad.lincomb((1.0,) + tuple(h * a for a in _A[i]), [z] + ks)
        ks.append(_check_finite(f(zi, ti), ti))
    # the 7th stage is evaluated at the 5th-order solution itself
    err = ad.lincomb([h * e for e in _E], ks)
    return zi, err, ks


def rk4_step(f: OdeFunction, z: Tensor, t: float, h: float) -> Tensor:
    k1 = _check_finite(f(z, t), t)
    k2 = _check_finite(f(ad.lincomb((1.0, h / 2), (z, k1)), t + h / 2), t)
    k3 = _check_finite(f(ad.lincomb((1.0, h / 2), (z, k2)), t + h / 2), t)
    k4 = _check_finite(f(ad.lincomb((1.0, h), (z, k3)), t + h), t)
    return ad.lincomb((1.0, h / 6, h / 3, h / 3, h / 6), (z, k1, k2, k3, k4))


def _error_norm(err: np.ndarray, z: np.ndarray, z_new: np.ndarray, rtol: float, atol: float, per_sample: bool):
    scale = atol + rtol * np.maximum(np.abs(z), np.abs(z_new))
    ratio = err / scale
    if per_sample:
        return np.sqrt((ratio.reshape(ratio.shape[0], -1) ** 2).mean(axis=1))
    return float(np.sqrt((ratio**2).mean()))


# ---------------------------------------------------------------- step logs

_local = threading.local()


class StepLog:
    """Step schedules of successive solver calls, in call order."""

    def __init__(self):
        self.schedules: list[list[tuple]] = []


@contextlib.contextmanager
def record_steps():
    """Record the step schedule of every solve inside the block."""
    log = StepLog()
    prev = getattr(_local, "mode", None)
    _local.mode = ("record", log, None)
    try:
        yield log
    finally:
        _local.mode = prev


@contextlib.contextmanager
def replay_steps(log: StepLog):
    """Force solves inside the block to reuse ``log``'s schedules, in call order."""
    prev = getattr(_local, "mode", None)
    _local.mode = ("replay", log, iter(log.schedules))
    try:
        yield
    finally:
        _local.mode = prev


# ---------------------------------------------------------------- drivers


def solve(f: OdeFunction, z0: Tensor, cfg: SolverConfig, *, per_sample: bool = False,
          schedule: list[tuple] | None = None) -> OdeResult:
    """Integrate ``dz/dt = f(z, t)`` from ``cfg.t0`` to ``cfg.t1``.

    With ``per_sample`` the leading axis is a batch and every sample gets its
    own step-size controller (``t`` then reaches ``f`` as an array), so a
    sample's result does not depend on the rest of the batch. ``schedule``
    (from :attr:`OdeResult.steps`) replays a previous step sequence exactly.
    """
    if not np.all(np.isfinite(z0.data)):
        raise NumericalError("initial state is not finite")
    mode = getattr(_local, "mode", None)
    if schedule is None and mode is not None and mode[0] == "replay":
        try:
            schedule = next(mode[2])
        except StopIteration:
            raise RuntimeError("replay_steps: more solver calls than recorded schedules") from None
    if cfg.method == "rk4_fixed":
        res = _rk4(f, z0, cfg, schedule)
    else:
        res = _dopri5(f, z0, cfg, per_sample, schedule)
    if mode is not None and mode[0] == "record":
        mode[1].schedules.append(res.steps)
    return res


def _rk4(f: OdeFunction, z: Tensor, cfg: SolverConfig, schedule) -> OdeResult:
    if schedule is None:
        h = (cfg.t1 - cfg.t0) / cfg.fixed_step_count
        schedule = [(cfg.t0 + i * h, h, True) for i in range(cfg.fixed_step_count)]
    res = OdeResult(z)
    for t, h, _ in schedule:
        z = rk4_step(f, z, t, h)
        res.attempts.append((t, h, True, 0.0))
    res.z = z
    return res


def _dopri5(f: OdeFunction, z: Tensor, cfg: SolverConfig, per_sample: bool, schedule) -> OdeResult:
    tape = ad._active_tape()
    t1 = cfg.t1
    span = t1 - cfg.t0
    h0 = cfg.initial_step if cfg.initial_step is not None else 0.1 * span
    if per_sample:
        t, h = np.full(z.shape[0], cfg.t0), np.full(z.shape[0], h0)
    else:
        t, h = cfg.t0, h0
    res = OdeResult(z)
    replay = iter(schedule) if schedule is not None else None
    k1 = None
    while True:
        if replay is not None:
            try:
                t, h_eff, acc = next(replay)
            except StopIteration:
                break
        else:
            active = (t1 - t) > 1e-12 * span
            if not np.any(active):
                break
            if len(res.attempts) >= cfg.max_steps:
                last = float(np.min(t))
                raise DivergenceError(f"dopri5 exceeded max_steps={cfg.max_steps}; last accepted t={last:.6g}", last)
            h_eff = np.where(active, np.minimum(h, t1 - t), 0.0) if per_sample else min(h, t1 - t)
        mark = tape.mark() if tape is not None else 0
        z_new, err, ks = dopri5_step(f, z, t, h_eff, k1)
        norm = 0.0
        if replay is None:
            norm = _error_norm(err.data, z.data, z_new.data, cfg.rtol, cfg.atol, per_sample)
            if not np.all(np.isfinite(norm)):
                raise NumericalError(f"non-finite error estimate at t={np.min(t):.6g}")
            acc = ((norm <= 1.0) & active) if per_sample else norm <= 1.0
        if per_sample:
            res.attempts.append((np.copy(t), np.copy(h_eff), np.copy(acc), norm))
            z = ad.select(acc, z_new, z)
            k1 = ad.select(acc, ks[6], ks[0])
        else:
            res.attempts.append((t, h_eff, bool(acc), norm))
            if acc:
                z, k1 = z_new, ks[6]
            else:
                if tape is not None:
                    tape.truncate(mark)  # a carried-over k1 predates the mark and survives
                else:
                    k1 = ks[0]
        if replay is not None:
            continue
        with np.errstate(divide="ignore"):
            factor = np.where(norm == 0.0, 5.0, np.clip(0.9 * np.power(np.maximum(norm, 1e-300), -0.2), 0.2, 5.0))
        if per_sample:
            t_next = t + h_eff
            t_next = np.where(t1 - t_next <= 1e-12 * span, t1, t_next)
            t = np.where(acc, t_next, t)
            h = np.where(active, h_eff * factor, h)
        else:
            if acc:
                t = t1 if t1 - (t + h_eff) <= 1e-12 * span else t + h_eff
            h = h_eff * float(factor)
    res.z = z
    return res


def integrate(f: OdeFunction, z0: Tensor, cfg: SolverConfig, *, per_sample: bool = False) -> Tensor:
    """State at ``cfg.t1``."""
    return solve(f, z0, cfg, per_sample=per_sample).z


def integrate_differentiable(f: OdeFunction, z0: Tensor, cfg: SolverConfig, tape: ad.Tape, *,
                             per_sample: bool = False) -> Tensor:
    """Like :func:`integrate`, recording the accepted steps on ``tape``."""
    with tape:
        return solve(f, z0, cfg, per_sample=per_sample).z
