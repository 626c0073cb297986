"""Patches, frames and K-nearest-neighbour neighbourhood graphs."""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np


@dataclass
class Patch:
    pixels: np.ndarray  # [3, S, S], values in [0, 1]
    center: tuple[float, float]
    identity: int | None = None
    frame_id: int = 0

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3 or self.pixels.shape[1] != self.pixels.shape[2]:
            raise ValueError(f"patch pixels must be [C,S,S], got {self.pixels.shape}")
        if self.pixels.size and (self.pixels.min() < 0.0 or self.pixels.max() > 1.0):
            raise ValueError("patch pixels must lie in [0, 1]")

    @property
    def side(self) -> int:
        return self.pixels.shape[-1]

    def replace_pixels(self, pixels: np.ndarray) -> "Patch":
        return Patch(pixels, self.center, self.identity, self.frame_id)


@dataclass
class Frame:
    frame_id: int
    patches: list[Patch] = field(default_factory=list)

    def __post_init__(self):
        for p in self.patches:
            if p.frame_id != self.frame_id:
                raise ValueError(f"patch frame_id {p.frame_id} != frame {self.frame_id}")

    def __len__(self) -> int:
        return len(self.patches)

    def centers(self) -> np.ndarray:
        return np.array([p.center for p in self.patches], dtype=np.float64).reshape(-1, 2)


@dataclass(frozen=True)
class NeighborhoodGraph:
    anchor: int  # patch index within the frame
    vertices: tuple[int, ...]  # patch indices; the anchor comes first when included
    K: int

    @property
    def edges(self) -> list[tuple[int, int]]:
        return list(combinations(self.vertices, 2))

    def __len__(self) -> int:
        return len(self.vertices)


def build_neighborhood(frame: Frame, anchor: int, K: int = 3, include_anchor: bool = True) -> NeighborhoodGraph:
    """Anchor plus its ``K`` nearest in-frame neighbours by center distance.

    Ties are broken by ascending patch index. Frames with fewer than ``K``
    other patches yield a smaller graph.
    """
    n = len(frame)
    if n == 0:
        raise ValueError("cannot build a neighbourhood in an empty frame")
    if not 0 <= anchor < n:
        raise IndexError(f"anchor {anchor} out of range for frame of {n} patches")
    if K < 1:
        raise ValueError("K must be >= 1")
    centers = frame.centers()
    d2 = ((centers - centers[anchor]) ** 2).sum(axis=1)
    others = [i for i in range(n) if i != anchor]
    others.sort(key=lambda i: (d2[i], i))
    nearest = others[:K]
    if include_anchor:
        vertices = (anchor, *nearest)
    else:
        if not nearest:
            raise ValueError("single-patch frame has no neighbours to form a graph without the anchor")
        vertices = tuple(nearest)
    return NeighborhoodGraph(anchor, vertices, K)


def adjacency(graph: NeighborhoodGraph, self_loops: bool = False) -> np.ndarray:
    """Dense 0/1 adjacency of the complete graph on the vertices."""
    n = len(graph)
    adj = np.ones((n, n))
    if not self_loops:
        np.fill_diagonal(adj, 0.0)
    return adj
