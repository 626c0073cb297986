"""Full matcher: parameters and the batched forward pass over frames and pairs."""

from __future__ import annotations

from collections.abc import Iterator, Mapping
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .config import ModelConfig
from .diffusion import diffuse_graph, init_graph_params
from .graph import Frame, build_neighborhood
from .heads import MatchPrediction, combine, init_head_params, predictions, v2g_score, v2v_score
from .synth import PairRef
from .vertex import VertexStages, init_vertex_params, vertex_stages


class ModelParams(Mapping):
    """Named trainable tensors plus the model config that shaped them."""

    def __init__(self, cfg: ModelConfig, tensors: dict[str, Parameter]):
        self.cfg = cfg
        self.tensors = dict(tensors)

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int = 0) -> "ModelParams":
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x4D4F44]))
        tensors = {}
        tensors.update(init_vertex_params(cfg, rng))
        tensors.update(init_graph_params(cfg, rng))
        tensors.update(init_head_params(cfg, rng))
        return cls(cfg, tensors)

    def __getitem__(self, key: str) -> Parameter:
        return self.tensors[key]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def parameters(self) -> list[Parameter]:
        return list(self.tensors.values())

    def copy(self) -> "ModelParams":
        return ModelParams(self.cfg, {k: Parameter(v.data, k) for k, v in self.tensors.items()})

    def frozen(self) -> "ModelParams":
        """A view whose tensors are constants: taped passes through it leave no gradients behind."""
        return ModelParams(self.cfg, {k: Tensor(v.data, name=k) for k, v in self.tensors.items()})

    def clamp(self) -> None:
        """Project decay vectors back onto ``gamma >= gamma_min``."""
        for key in ("ode.gamma", "graph.gamma"):
            if key in self.tensors:
                np.maximum(self.tensors[key].data, self.cfg.gamma_min, out=self.tensors[key].data)


@dataclass
class GraphIndex:
    """Neighbourhood graphs of every patch in a frame list, grouped by vertex count."""

    patch_offset: list[int]  # first row of each frame in the stacked patch batch
    groups: dict[int, np.ndarray]  # vertex count -> [G, V] rows into the patch batch
    graph_row: np.ndarray  # patch row -> row in the concatenated graph embedding
    order: list[int]  # vertex counts in concatenation order


def index_graphs(frames: list[Frame], K: int, include_anchor: bool = True) -> GraphIndex:
    offsets, total = [], 0
    for fr in frames:
        offsets.append(total)
        total += len(fr)
    by_size: dict[int, list[tuple[int, list[int]]]] = {}
    for fr, off in zip(frames, offsets):
        for a in range(len(fr)):
            g = build_neighborhood(fr, a, K, include_anchor)
            by_size.setdefault(len(g), []).append((off + a, [off + v for v in g.vertices]))
    order = sorted(by_size)
    graph_row = np.empty(total, dtype=np.intp)
    groups = {}
    row = 0
    for v in order:
        items = by_size[v]
        groups[v] = np.array([verts for _, verts in items], dtype=np.intp)
        for anchor, _ in items:
            graph_row[anchor] = row
            row += 1
    return GraphIndex(offsets, groups, graph_row, order)


@dataclass
class Forward:
    stages: VertexStages
    f: Tensor  # [N, n_f] vertex embeddings of all stacked patches
    g: Tensor  # [N, n_f] graph embeddings, row i belongs to the graph anchored at patch row graph_row[i]
    graph_in: dict[int, Tensor]
    graph_out: dict[int, Tensor]
    r: Tensor | None = None
    d_xy: Tensor | None = None
    d_yx: Tensor | None = None


def stack_patches(frames: list[Frame]) -> np.ndarray:
    return np.stack([p.pixels for fr in frames for p in fr.patches])


def embed_frames(frames: list[Frame], params: ModelParams, pixels: np.ndarray | None = None) -> Forward:
    """Vertex and graph embeddings for every patch of ``frames``.

    ``pixels`` overrides the stacked patch pixels (same layout), which lets
    callers embed perturbed copies under the clean graph structure.
    """
    cfg = params.cfg
    x = stack_patches(frames) if pixels is None else pixels
    stages = vertex_stages(Tensor(x), params, cfg)
    f = stages.embedding
    idx = index_graphs(frames, cfg.K, cfg.include_anchor)
    parts, gin, gout = [], {}, {}
    for v in idx.order:
        rows = idx.groups[v]
        Z = ad.reshape(ad.take(f, rows.reshape(-1), axis=0), (rows.shape[0], v, cfg.n_f))
        out = diffuse_graph(Z, adjacency_of(v), params, cfg)
        gin[v], gout[v] = Z, out
        parts.append(ad.mean(out, axis=1))
    g_cat = parts[0] if len(parts) == 1 else ad.concat(parts, axis=0)
    g = ad.take(g_cat, idx.graph_row, axis=0)
    return Forward(stages, f, g, gin, gout)


def adjacency_of(n_vertices: int) -> np.ndarray:
    adj = np.ones((n_vertices, n_vertices))
    np.fill_diagonal(adj, 0.0)
    return adj


def pair_rows(frames_offset: list[int], pairs: list[PairRef], frame_pos: Mapping[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Stacked-batch rows of both sides of each pair; ``frame_pos`` maps dataset frame index to list position."""
    a = np.array([frames_offset[frame_pos[p.frame_a]] + p.patch_a for p in pairs], dtype=np.intp)
    b = np.array([frames_offset[frame_pos[p.frame_b]] + p.patch_b for p in pairs], dtype=np.intp)
    return a, b


def score_pairs(fw: Forward, rows_a: np.ndarray, rows_b: np.ndarray, params: ModelParams) -> Forward:
    fx, fy = ad.take(fw.f, rows_a), ad.take(fw.f, rows_b)
    gx, gy = ad.take(fw.g, rows_a), ad.take(fw.g, rows_b)
    fw.r = v2v_score(fx, fy, params)
    fw.d_xy = v2g_score(fx, gy, params)
    fw.d_yx = v2g_score(fy, gx, params)
    return fw


def forward(all_frames: list[Frame], frame_ids: list[int], pairs: list[PairRef], params: ModelParams,
            pixels: np.ndarray | None = None) -> Forward:
    """Embed the frames ``frame_ids`` (indices into ``all_frames``) and score ``pairs`` among them."""
    frames = [all_frames[i] for i in frame_ids]
    pos = {fi: k for k, fi in enumerate(frame_ids)}
    fw = embed_frames(frames, params, pixels)
    offsets = index_offsets(frames)
    a, b = pair_rows(offsets, pairs, pos)
    return score_pairs(fw, a, b, params)


def index_offsets(frames: list[Frame]) -> list[int]:
    return [int(x) for x in np.concatenate([[0], np.cumsum([len(f) for f in frames])[:-1]])]


def match_score(fw: Forward, threshold: float = 1.0) -> list[MatchPrediction]:
    return predictions(fw.r.data, fw.d_xy.data, fw.d_yx.data, threshold)


def s_match(fw: Forward) -> np.ndarray:
    return combine(fw.r.data, fw.d_xy.data, fw.d_yx.data)
