"""Run configuration: one JSON document covering data, model, solver, training and probes.

Unknown keys are rejected at every level. Field metadata carries a help
string and, where a value comes from the published model, its provenance;
``robustmat --help`` prints both.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator

from . import ode


def _f(default, help: str, published: str | None = None, **kw):
    extra = {"published": published} if published else None
    return Field(default, description=help, json_schema_extra=extra, **kw)


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SolverSettings(_Strict):
    method: Literal["dopri5", "rk4_fixed"] = _f("dopri5", "integration method", "published: dopri5")
    t1: float = _f(1.0, "terminal diffusion time", "published: 1.0 for both modules", gt=0)
    rtol: float = _f(1e-2, "relative tolerance", gt=0)
    atol: float = _f(1e-2, "absolute tolerance", gt=0)
    max_steps: int = _f(10_000, "step attempt limit before a divergence error", ge=1)
    initial_step: float | None = _f(None, "first trial step (default 0.1 * t1)")
    fixed_step_count: int = _f(10, "steps for rk4_fixed", ge=1)

    def solver(self) -> ode.SolverConfig:
        return ode.SolverConfig(self.method, 0.0, self.t1, self.rtol, self.atol, self.max_steps,
                                self.initial_step, self.fixed_step_count)


class DatasetConfig(_Strict):
    n_scenes: int = _f(160, "scenes to generate", ge=1)
    n_train_scenes: int = _f(120, "leading scenes used for training; the rest form the test split", ge=0)
    n_landmarks: int = _f(6, "landmarks per scene", ge=2)
    n_views: int = _f(2, "rendered frames per scene", ge=1)
    patch_side: int = _f(32, "patch side S in pixels", ge=8)
    plane_size: float = _f(256.0, "side of the virtual image plane holding landmark centers", gt=0)
    min_separation: float = _f(24.0, "minimum distance between landmark centers in a scene", ge=0)
    max_translation: float = _f(2.0, "per-view content shift in patch pixels (view jitter proxy)", ge=0)
    center_jitter: float = _f(4.0, "per-view jitter of landmark centers in plane units", ge=0)
    scale_range: tuple[float, float] = _f((0.9, 1.1), "per-view zoom factor range")
    brightness_range: tuple[float, float] = _f((-0.08, 0.08), "per-view additive brightness range",
                                               "published perturbation family")
    saturation_range: tuple[float, float] = _f((0.8, 1.2), "per-view chroma scale range",
                                               "published perturbation family")
    noise_psnr: float | None = _f(None, "Gaussian noise target PSNR (dB) applied to every rendered patch", ge=5, le=60)
    pair_ratio: float = _f(1.0, "negatives sampled per positive pair", ge=0)
    seed: int = _f(0, "dataset seed")

    @model_validator(mode="after")
    def _split(self):
        if self.n_train_scenes > self.n_scenes:
            raise ValueError("n_train_scenes exceeds n_scenes")
        return self


class ModelConfig(_Strict):
    variant: Literal["robustmat", "resnet_gat"] = _f(
        "robustmat", "robustmat: neural ODE + graph PDE; resnet_gat: residual block + plain GAT baseline",
        "published ablation baseline")
    in_channels: int = _f(3, "patch channels", ge=1)
    patch_side: int = _f(32, "input patch side", ge=8)
    downsample: list[tuple[int, int, int, int]] = _f(
        [(8, 3, 2, 1), (16, 3, 2, 1), (16, 3, 1, 1)],
        "downsampler conv stack as (out_channels, kernel, stride, padding); ReLU between layers",
        "published: 7 layers, output 128x64x64")
    pool: int = _f(2, "average-pool output grid side before the FC layer", ge=1)
    n_f: int = _f(64, "embedding width", "published: 512")
    vertex_form: Literal["contraction", "plain"] = _f("contraction", "vertex ODE right-hand side form")
    ode_kernel: int = _f(3, "kernel of the two ODE-function convolutions", ge=1)
    ode_init_scale: float = _f(0.5, "init std multiplier (times 1/sqrt(fan_in)) for ODE-function convolutions", ge=0)
    gamma_init: float = _f(1.0, "initial per-channel decay of the contraction form", ge=0)
    gamma_min: float = _f(0.1, "lower clamp of the decay", ge=0)
    graph_variant: Literal["gat", "gcn"] = _f("gat", "graph right-hand side", "published: both")
    graph_form: Literal["contraction", "plain"] = _f("contraction", "graph ODE right-hand side form")
    gat_heads: int = _f(2, "attention heads per GAT block", "published: 4", ge=1)
    gcn_hidden: int = _f(64, "GCN hidden width", "published: 512", ge=1)
    graph_init_scale: float = _f(0.5, "init std multiplier for graph block weights", ge=0)
    graph_gamma_init: float = _f(1.0, "initial per-feature decay of the graph contraction form", ge=0)
    K: int = _f(3, "nearest neighbours per patch", "published: 3", ge=1)
    include_anchor: bool = _f(True, "the anchor patch is a vertex of its own neighbourhood graph")
    r_hidden: list[int] = _f([128, 64], "hidden widths of the comparator FC stack",
                             "published: [1024, 512, 256]")
    vertex_solver: SolverSettings = _f(SolverSettings(rtol=1e-2, atol=1e-2), "vertex ODE solver",
                                       "published: dopri5, rtol = atol = 0.01")
    graph_solver: SolverSettings = _f(SolverSettings(rtol=1e-3, atol=1e-3), "graph PDE solver",
                                      "published: dopri5, rtol = atol = 0.001")

    @model_validator(mode="after")
    def _shapes(self):
        if self.graph_variant == "gat" and self.n_f % self.gat_heads:
            raise ValueError("n_f must be divisible by gat_heads so the GAT block preserves state width")
        side = self.patch_side
        for _, k, s, p in self.downsample:
            side = (side + 2 * p - k) // s + 1
            if side < 1:
                raise ValueError("patch side incompatible with the downsampler stride stack")
        if side % self.pool:
            raise ValueError(f"feature map side {side} is not divisible by pool {self.pool}")
        return self

    @property
    def channels(self) -> int:
        return self.downsample[-1][0]

    @property
    def feature_side(self) -> int:
        side = self.patch_side
        for _, k, s, p in self.downsample:
            side = (side + 2 * p - k) // s + 1
        return side


class TrainConfig(_Strict):
    epochs: int = _f(30, "training epochs", "published: 150", ge=1)
    batch_scenes: int = _f(4, "frame groups (scenes) per optimizer step", ge=1)
    lr: float = _f(1e-3, "Adam learning rate", "published: 1e-4", gt=0)
    beta1: float = _f(0.9, "Adam first-moment decay")
    beta2: float = _f(0.999, "Adam second-moment decay")
    adam_eps: float = _f(1e-8, "Adam denominator guard", gt=0)
    lam: float = _f(0.5, "weight of the vertex-to-graph loss", "published: 0.5", ge=0, le=1)
    regularize: bool = _f(False, "add the output/input quotient regularizer to the loss")
    beta_reg: float = _f(0.1, "weight of the quotient regularizer when enabled", ge=0)
    reg_psnr: float = _f(16.0, "noise level used to build perturbed copies for the regularizer", ge=5, le=60)
    augment_psnr: float | None = _f(None, "train-time Gaussian noise (dB) on a random half of the frames; null disables",
                                    ge=5, le=60)
    seed: int = _f(0, "initialization and shuffling seed")


class EvalConfig(_Strict):
    threshold: float = _f(1.0, "decision threshold on S_match in [0, 2]", ge=0, le=2)
    noise_psnr: float = _f(16.0, "noise level of the noisy test condition", "published main setting: 16", ge=5, le=60)


class RobustnessConfig(_Strict):
    psnr: list[float] = _f([19.0, 16.0, 13.0], "noise levels for stage statistics", "published: 19, 16, 13")
    n_patches: int = _f(100, "patches sampled for stage statistics and probes", ge=1)
    t_list: list[float] = _f([0.5, 1.0, 2.0, 4.0], "terminal times for the contraction probe")
    eps_list: list[float] = _f([1e-3, 1e-2], "input perturbation norms for the contraction probe")
    jacobian_points: int = _f(200, "trajectory points sampled by the Jacobian probe", ge=1)
    seed: int = _f(0, "probe sampling seed")


class RunConfig(_Strict):
    dataset: DatasetConfig = DatasetConfig()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    eval: EvalConfig = EvalConfig()
    robustness: RobustnessConfig = RobustnessConfig()


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    with open(path, encoding="utf-8") as fh:
        return RunConfig.model_validate(json.load(fh))


def describe(obj: BaseModel | None = None, prefix: str = "") -> list[str]:
    """One line per config key: dotted name, default, help, provenance."""
    obj = RunConfig() if obj is None else obj
    lines = []
    for name, info in type(obj).model_fields.items():
        key = f"{prefix}{name}"
        value = getattr(obj, name)
        if isinstance(value, BaseModel):
            lines.extend(describe(value, key + "."))
            continue
        text = f"  {key} = {json.dumps(value)}: {info.description or ''}"
        extra = info.json_schema_extra or {}
        if isinstance(extra, dict) and extra.get("published"):
            text += f" [{extra['published']}]"
        lines.append(text)
    return lines
