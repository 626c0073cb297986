"""Pair scoring heads and the training objective.

``v2v_score`` compares two vertex embeddings through an FC stack applied
to their elementwise squared difference. ``v2g_score`` is a bilinear
discriminator between a vertex embedding and a graph embedding. The match
score adds the comparator output to the mean of both cross discriminator
outputs, so it lies in [0, 2].
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .config import ModelConfig

Params = Mapping[str, Tensor]
PROB_CLAMP = 1e-7


def init_head_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Parameter]:
    p: dict[str, Parameter] = {}
    widths = [cfg.n_f, *cfg.r_hidden, 1]
    last = len(widths) - 2
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        # zero output layer and zero M: an untrained model scores every pair exactly 1.0
        w = np.zeros((b, a)) if i == last else rng.normal(0, np.sqrt(2.0 / a), (b, a))
        p[f"r.{i}.w"] = Parameter(w, f"r.{i}.w")
        p[f"r.{i}.b"] = Parameter(np.zeros(b), f"r.{i}.b")
    p["M"] = Parameter(np.zeros((cfg.n_f, cfg.n_f)), "M")
    return p


def _n_r_layers(params: Params) -> int:
    n = 0
    while f"r.{n}.w" in params:
        n += 1
    return n


def _check_widths(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ad.ShapeError(f"embedding shapes differ: {a.shape} vs {b.shape}")


def v2v_score(fx: Tensor, fy: Tensor, params: Params) -> Tensor:
    """Comparator output in (0, 1); batched over leading axes."""
    _check_widths(fx, fy)
    h = ad.square(ad.sub(fx, fy))
    n = _n_r_layers(params)
    for i in range(n):
        h = ad.linear(h, params[f"r.{i}.w"], params[f"r.{i}.b"])
        h = ad.relu(h) if i < n - 1 else ad.sigmoid(h)
    return ad.reshape(h, h.shape[:-1])


def v2g_score(fx: Tensor, gy: Tensor, params: Params) -> Tensor:
    _check_widths(fx, gy)
    return ad.sigmoid(ad.bilinear(fx, params["M"], gy))


@dataclass(frozen=True)
class MatchPrediction:
    r_score: float
    d_xy: float
    d_yx: float
    s_match: float
    predicted: bool
    threshold: float


def combine(r: np.ndarray, d_xy: np.ndarray, d_yx: np.ndarray) -> np.ndarray:
    # adding the d terms in sorted order keeps the score exactly symmetric in (x, y)
    lo, hi = np.minimum(d_xy, d_yx), np.maximum(d_xy, d_yx)
    return r + 0.5 * (lo + hi)


def predictions(r, d_xy, d_yx, threshold: float = 1.0) -> list[MatchPrediction]:
    r, d_xy, d_yx = (np.atleast_1d(np.asarray(a, dtype=np.float64)) for a in (r, d_xy, d_yx))
    s = combine(r, d_xy, d_yx)
    return [MatchPrediction(float(a), float(b), float(c), float(v), bool(v > threshold), threshold)
            for a, b, c, v in zip(r, d_xy, d_yx, s)]


# ---------------------------------------------------------------- losses


def _labels(labels, like: Tensor) -> np.ndarray:
    y = np.asarray(labels, dtype=np.float64).reshape(like.shape)
    if y.size == 0:
        raise ValueError("empty batch")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    return y


def bce(prob: Tensor, labels) -> Tensor:
    """Mean cross-entropy with probabilities clamped to [1e-7, 1 - 1e-7]."""
    y = _labels(labels, prob)
    p = ad.clip(prob, PROB_CLAMP, 1.0 - PROB_CLAMP)
    ll = ad.add(ad.mul(Tensor(y), ad.log(p)), ad.mul(Tensor(1.0 - y), ad.log(ad.sub(Tensor(np.ones(y.shape)), p))))
    return ad.neg(ad.mean(ll))


def loss_vv(r_out: Tensor, labels) -> Tensor:
    return bce(r_out, labels)


def loss_vg(d_xy: Tensor, d_yx: Tensor, labels) -> Tensor:
    """Negated mean of the two empirical discriminator log-likelihoods."""
    return ad.scale(ad.add(bce(d_xy, labels), bce(d_yx, labels)), 0.5)


def loss_total(l_vv: Tensor, l_vg: Tensor, lam: float = 0.5) -> Tensor:
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    if lam == 0.0:
        return l_vv
    if lam == 1.0:
        return l_vg
    return ad.lincomb((1.0 - lam, lam), (l_vv, l_vg))
