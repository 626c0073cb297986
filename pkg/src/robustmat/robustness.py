"""Perturbation probes for the two diffusion modules.

* :func:`stage_perturbation_stats` measures how far Gaussian pixel noise
  moves a patch after the downsampler, after the vertex embedding and
  after the graph embedding.
* :func:`jacobian_probe` samples states along solution trajectories and
  measures the diagonal of the right-hand-side Jacobian by central
  differences; its worst entry gives the contraction margin ``C*``.
* :func:`contraction_probe` perturbs the ODE initial state by ``eps`` and
  tracks the output distance over several terminal times. Clean and
  perturbed solves share one step schedule, so the ratio reflects the
  dynamics rather than step-size noise.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field
from typing import Callable, Literal

import numpy as np

from . import autodiff as ad
from . import ode
from .autodiff import Tensor
from .dataio import Dataset
from .diffusion import graph_net, graph_ode_func, with_self_loops
from .model import ModelParams, adjacency_of, embed_frames, index_graphs, stack_patches
from .synth import gauss_sigma
from .vertex import downsample, head, ode_net, vertex_ode_func

Module = Literal["vertex", "graph"]


# ---------------------------------------------------------------- sampling


def sample_patches(ds: Dataset, n: int, seed: int = 0, split: str = "test") -> list[tuple[int, int]]:
    """``n`` distinct (frame, patch) positions from ``split``, or all of them if fewer exist."""
    pool = [(fi, pi) for fi, fr in enumerate(ds.frames) if ds.frame_split[fi] == split for pi in range(len(fr))]
    if not pool:
        raise ValueError(f"no {split} patches to sample")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x524F42]))
    pick = np.sort(rng.choice(len(pool), size=min(n, len(pool)), replace=False))
    return [pool[i] for i in pick]


def noisy_pixels(pixels: np.ndarray, psnr_db: float, rng: np.random.Generator) -> np.ndarray:
    if np.isinf(psnr_db):
        return pixels.copy()
    return np.clip(pixels + gauss_sigma(psnr_db) * rng.standard_normal(pixels.shape), 0.0, 1.0)


# ---------------------------------------------------------------- stage statistics


@dataclass
class StageSamples:
    psnr: float
    downsampled: list[float] = field(default_factory=list)
    vertex: list[float] = field(default_factory=list)
    graph: list[float] = field(default_factory=list)

    def medians(self) -> dict[str, float]:
        return {k: float(np.median(getattr(self, k))) for k in ("downsampled", "vertex", "graph")}

    def median_vertex_ratio(self) -> float:
        d = np.asarray(self.downsampled)
        v = np.asarray(self.vertex)
        ok = d > 0
        return float(np.median(v[ok] / d[ok])) if ok.any() else 0.0


@dataclass
class RobustnessReport:
    stages: list[StageSamples]
    probes: list["ProbeResult"] = field(default_factory=list)
    jacobian: list["JacobianProbe"] = field(default_factory=list)

    def summary(self) -> dict:
        out = {"stages": [], "probes": [p.as_dict() for p in self.probes],
               "jacobian": [dict(asdict(j), passed=j.passed) for j in self.jacobian]}
        for s in self.stages:
            q = {k: np.quantile(getattr(s, k), [0.1, 0.25, 0.5, 0.75, 0.9]).tolist()
                 for k in ("downsampled", "vertex", "graph")}
            out["stages"].append({"psnr": s.psnr, "n": len(s.vertex), "quantiles": q,
                                  "median_vertex_ratio": s.median_vertex_ratio()})
        return out

    def samples_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["psnr", "index", "downsampled", "vertex", "graph"])
        for s in self.stages:
            for i, row in enumerate(zip(s.downsampled, s.vertex, s.graph)):
                w.writerow([s.psnr, i, *(f"{x:.10g}" for x in row)])
        return buf.getvalue()


def stage_perturbation_stats(params: ModelParams, ds: Dataset, psnr_levels=(19.0, 16.0, 13.0),
                             n_patches: int = 100, seed: int = 0) -> RobustnessReport:
    """Distances between clean and noisy copies at three pipeline stages.

    Noise is applied to every patch of a sampled patch's frame so that the
    graph embedding sees a consistently perturbed neighbourhood.
    """
    picks = sample_patches(ds, n_patches, seed)
    frame_ids = sorted({fi for fi, _ in picks})
    frames = [ds.frames[i] for i in frame_ids]
    offsets = np.concatenate([[0], np.cumsum([len(f) for f in frames])[:-1]])
    pos = {fi: k for k, fi in enumerate(frame_ids)}
    rows = np.array([offsets[pos[fi]] + pi for fi, pi in picks], dtype=np.intp)
    clean_px = stack_patches(frames)
    clean = embed_frames(frames, params, clean_px)
    stages = []
    for level in psnr_levels:
        rng = np.random.default_rng(np.random.SeedSequence([seed, int(round(float(level) * 1000)) if np.isfinite(level) else 0]))
        noisy = embed_frames(frames, params, noisy_pixels(clean_px, level, rng))
        s = StageSamples(float(level))
        for name, a, b in (("downsampled", clean.stages.downsampled, noisy.stages.downsampled),
                           ("vertex", clean.f, noisy.f), ("graph", clean.g, noisy.g)):
            diff = (a.data - b.data).reshape(a.shape[0], -1)[rows]
            getattr(s, name).extend(np.sqrt((diff**2).sum(axis=1)).tolist())
        stages.append(s)
    return RobustnessReport(stages)


# ---------------------------------------------------------------- Jacobian probe


@dataclass
class JacobianProbe:
    module: str
    max_diagonal: float  # largest sampled diagonal entry
    c_star: float  # -max_diagonal; positive when the contraction condition holds on the samples
    lipschitz_net: float  # largest spectral-norm estimate of the net's Jacobian
    min_gamma: float
    n_points: int
    diagonal_bound_holds: bool  # every diagonal entry <= -gamma + L_net

    @property
    def passed(self) -> bool:
        return self.c_star > 0


def _rhs(module: Module, params: ModelParams, adj: np.ndarray | None) -> Callable[[Tensor], Tensor]:
    if module == "vertex":
        return lambda z: vertex_ode_func(z, 0.0, params)
    return lambda z: graph_ode_func(z, 0.0, params, adj)


def _net(module: Module, params: ModelParams, adj: np.ndarray | None) -> Callable[[Tensor], Tensor]:
    if module == "vertex":
        return lambda z: ode_net(z, params)
    a = with_self_loops(adj)
    return lambda z: graph_net(z, a, params)


def trajectory_points(module: Module, z0: Tensor, params: ModelParams, solver: ode.SolverConfig,
                      adj: np.ndarray | None = None) -> np.ndarray:
    """Every state the solver evaluates the right-hand side at, one row per sample and stage."""
    f = _rhs(module, params, adj)
    seen: list[np.ndarray] = []

    def logged(z: Tensor, t) -> Tensor:
        seen.append(z.data.copy())
        return f(z)

    res = ode.solve(logged, z0, solver, per_sample=True)
    seen.append(res.z.data)
    return np.concatenate(seen)


def jacobian_diagonal(f: Callable[[Tensor], Tensor], z: np.ndarray, delta: float = 1e-5,
                      coords: np.ndarray | None = None, chunk: int = 512) -> np.ndarray:
    """Central-difference diagonal of the Jacobian of ``f`` at a single state ``z``."""
    flat = z.reshape(-1)
    idx = np.arange(flat.size) if coords is None else np.asarray(coords)
    out = np.empty(idx.size)
    for lo in range(0, idx.size, chunk):
        part = idx[lo : lo + chunk]
        m = part.size
        batch = np.broadcast_to(flat, (2 * m, flat.size)).copy()
        batch[np.arange(m), part] += delta
        batch[m + np.arange(m), part] -= delta
        fz = f(Tensor(batch.reshape((2 * m,) + z.shape))).data.reshape(2 * m, -1)
        out[lo : lo + m] = (fz[np.arange(m), part] - fz[m + np.arange(m), part]) / (2 * delta)
    return out


def spectral_norm(net: Callable[[Tensor], Tensor], z: np.ndarray, iters: int = 30, seed: int = 0,
                  delta: float = 1e-6) -> float:
    """Largest singular value of the Jacobian of ``net`` at a single state ``z``.

    Power iteration on ``J^T J``: the forward product by central
    differences, the transpose product by reverse mode.
    """
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(z.shape)
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(iters):
        jv = (net(Tensor(z[None] + delta * v[None])).data - net(Tensor(z[None] - delta * v[None])).data) / (2 * delta)
        x = Tensor(z[None], requires_grad=True)
        with ad.Tape() as tape:
            loss = ad.sum(ad.mul(net(x), Tensor(jv)))
        w = ad.backward(tape, loss).get(id(x), np.zeros_like(x.data))[0]
        nw = np.linalg.norm(w)
        if nw == 0:
            return 0.0
        sigma = float(np.sqrt(nw))
        v = w / nw
    return sigma


def jacobian_probe(module: Module, params: ModelParams, z0: Tensor, n_points: int = 200,
                   coords_per_point: int | None = None, solver: ode.SolverConfig | None = None,
                   seed: int = 0, power_points: int = 5) -> JacobianProbe:
    """Sample ``n_points`` trajectory states from solves started at ``z0`` (a batch)."""
    cfg = params.cfg
    params = params.frozen()
    adj = adjacency_of(z0.shape[1]) if module == "graph" else None
    solver = solver or (cfg.vertex_solver if module == "vertex" else cfg.graph_solver).solver()
    pts = trajectory_points(module, z0, params, solver, adj)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x4A4143]))
    pick = rng.choice(len(pts), size=min(n_points, len(pts)), replace=False)
    f = _rhs(module, params, adj)
    net = _net(module, params, adj)
    gamma_key = "ode.gamma" if module == "vertex" else "graph.gamma"
    gamma = params.tensors[gamma_key].data if gamma_key in params.tensors else np.zeros(1)
    if module == "vertex":
        gamma_full = np.broadcast_to(gamma[:, None, None], pts.shape[1:]).reshape(-1) if gamma.size > 1 else None
    else:
        gamma_full = np.broadcast_to(gamma, pts.shape[1:]).reshape(-1) if gamma.size > 1 else None
    worst = -np.inf
    lip = 0.0
    bound_ok = True
    diag_excess = -np.inf
    for n, i in enumerate(pick):
        size = pts[i].size
        coords = None if coords_per_point is None or coords_per_point >= size else rng.choice(size, coords_per_point, replace=False)
        d = jacobian_diagonal(f, pts[i], coords=coords)
        worst = max(worst, float(d.max()))
        if gamma_full is not None:
            g = gamma_full if coords is None else gamma_full[coords]
            diag_excess = max(diag_excess, float((d + g).max()))
        if n < power_points:
            lip = max(lip, spectral_norm(lambda x: net(x), pts[i], seed=seed + n))
    if gamma_full is not None:
        bound_ok = diag_excess <= lip * (1 + 1e-6) + 1e-8
    return JacobianProbe(module, worst, -worst, lip, float(gamma.min()) if gamma.size > 1 else 0.0,
                         len(pick), bool(bound_ok))


# ---------------------------------------------------------------- contraction probe


@dataclass
class ProbeResult:
    module: str
    eps: float
    t_list: list[float]
    ratio: list[float]  # mean over samples of |out(x~) - out(x)| / eps, per terminal time
    ratio_t0: float  # same at T = 0 (no diffusion)
    slope: float
    intercept: float
    r2: float
    c_star: float
    assumption_met: bool

    @property
    def non_increasing(self) -> bool:
        return all(b <= a * (1 + 1e-9) for a, b in zip(self.ratio, self.ratio[1:]))

    @property
    def envelope_ok(self) -> bool:
        return self.slope <= -0.5 * self.c_star

    def as_dict(self) -> dict:
        d = asdict(self)
        d["non_increasing"] = self.non_increasing
        d["envelope_ok"] = self.envelope_ok
        d["status"] = "ok" if self.assumption_met else "assumption unmet"
        return d


def _fit(t: np.ndarray, y: np.ndarray) -> tuple[float, float, float]:
    ly = np.log(y)
    slope, icpt = np.polyfit(t, ly, 1)
    resid = ly - (slope * t + icpt)
    ss = ((ly - ly.mean()) ** 2).sum()
    r2 = 1.0 - (resid**2).sum() / ss if ss > 0 else 1.0
    return float(slope), float(icpt), float(r2)


def _unit_directions(shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    u = rng.standard_normal(shape)
    norms = np.sqrt((u.reshape(shape[0], -1) ** 2).sum(axis=1))
    return u / norms.reshape((-1,) + (1,) * (len(shape) - 1))


def contraction_ratios(module: Module, params: ModelParams, z0: Tensor, t_list, eps: float,
                       seed: int = 0, solver: ode.SolverConfig | None = None) -> tuple[list[float], float]:
    """Mean output distance over ``eps`` per terminal time, plus the T = 0 value.

    The output is the module's embedding: FC head after pooling for the
    vertex module, vertex mean for the graph module.
    """
    cfg = params.cfg
    adj = adjacency_of(z0.shape[1]) if module == "graph" else None
    base = solver or (cfg.vertex_solver if module == "vertex" else cfg.graph_solver).solver()
    f = _rhs(module, params, adj)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x434F4E]))
    zp = Tensor(z0.data + eps * _unit_directions(z0.shape, rng))

    def readout(z: Tensor) -> np.ndarray:
        out = head(z, params, cfg) if module == "vertex" else ad.mean(z, axis=1)
        return out.data

    def dist(a: Tensor, b: Tensor) -> float:
        return float(np.mean(np.sqrt(((readout(a) - readout(b)) ** 2).sum(axis=1)))) / eps

    ratios = []
    for T in t_list:
        cfg_t = base.with_t1(float(T))
        clean = ode.solve(lambda z, t: f(z), z0, cfg_t, per_sample=True)
        pert = ode.solve(lambda z, t: f(z), zp, cfg_t, per_sample=True, schedule=clean.steps)
        ratios.append(dist(clean.z, pert.z))
    return ratios, dist(z0, zp)


def contraction_probe(module: Module, params: ModelParams, z0: Tensor, t_list=(0.5, 1.0, 2.0, 4.0),
                      eps_list=(1e-3, 1e-2), jacobian: JacobianProbe | None = None, seed: int = 0,
                      jacobian_points: int = 200) -> list[ProbeResult]:
    """Ratio tables for each eps, gated on the Jacobian probe."""
    jac = jacobian or jacobian_probe(module, params, z0, n_points=jacobian_points, seed=seed)
    out = []
    for eps in eps_list:
        ratios, r0 = contraction_ratios(module, params, z0, t_list, eps, seed)
        slope, icpt, r2 = _fit(np.asarray(t_list, dtype=float), np.asarray(ratios))
        out.append(ProbeResult(module, float(eps), [float(t) for t in t_list], ratios, r0, slope, icpt, r2,
                               jac.c_star, jac.passed))
    return out


def vertex_probe_states(params: ModelParams, ds: Dataset, n: int, seed: int = 0) -> Tensor:
    """Downsampled feature maps of ``n`` sampled test patches."""
    picks = sample_patches(ds, n, seed)
    x = np.stack([ds.frames[fi].patches[pi].pixels for fi, pi in picks])
    return downsample(Tensor(x), params, params.cfg)


def graph_probe_states(params: ModelParams, ds: Dataset, n: int, seed: int = 0) -> Tensor:
    """Stacked vertex embeddings ``[G, V, n_f]`` of the neighbourhood graphs of ``n`` sampled test patches."""
    picks = sample_patches(ds, n, seed)
    frame_ids = sorted({fi for fi, _ in picks})
    frames = [ds.frames[i] for i in frame_ids]
    fw = embed_frames(frames, params)
    idx = index_graphs(frames, params.cfg.K, params.cfg.include_anchor)
    offsets = np.concatenate([[0], np.cumsum([len(f) for f in frames])[:-1]])
    pos = {fi: k for k, fi in enumerate(frame_ids)}
    sizes = {v: rows for v, rows in idx.groups.items()}
    v = max(sizes, key=lambda k: len(sizes[k]))
    rows = sizes[v]
    wanted = {int(offsets[pos[fi]] + pi) for fi, pi in picks}
    keep = [r for r in rows if int(r[0]) in wanted] if params.cfg.include_anchor else list(rows)
    rows = np.array(keep, dtype=np.intp)
    return Tensor(fw.f.data[rows.reshape(-1)].reshape(rows.shape[0], v, -1))
