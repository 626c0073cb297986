"""Matching metrics: thresholded precision/recall/F1 and ROC-AUC."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

from .dataio import Dataset
from .model import ModelParams, forward, s_match
from .train import scene_frames


@dataclass(frozen=True)
class Metrics:
    precision: float
    recall: float
    f1: float
    auc: float
    tp: int
    fp: int
    tn: int
    fn: int
    threshold: float

    def as_dict(self) -> dict:
        return asdict(self)


def roc_auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative, ties counting one half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc needs both positive and negative labels")
    ranks = rankdata(s)  # average ranks give the half credit for ties
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def confusion_metrics(scores, labels, threshold: float = 1.0) -> Metrics:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    pred = s > threshold
    tp = int(np.sum(pred & y))
    fp = int(np.sum(pred & ~y))
    tn = int(np.sum(~pred & ~y))
    fn = int(np.sum(~pred & y))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    auc = roc_auc(s, y) if 0 < y.sum() < y.size else float("nan")
    return Metrics(precision, recall, f1, auc, tp, fp, tn, fn, threshold)


def pair_scores(params: ModelParams, ds: Dataset, split: str = "test", scenes_per_batch: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """S_match and labels for every pair of ``split``, in dataset order."""
    pairs = ds.split_pairs(split)
    if not pairs:
        raise ValueError(f"no {split} pairs in the dataset")
    frames_of = scene_frames(ds)
    by_scene: dict[int, list[int]] = {}
    for i, p in enumerate(pairs):
        by_scene.setdefault(ds.frame_scene[p.frame_a], []).append(i)
    scenes = sorted(by_scene)
    scores = np.empty(len(pairs))
    for lo in range(0, len(scenes), scenes_per_batch):
        batch = scenes[lo : lo + scenes_per_batch]
        idx = [i for s in batch for i in by_scene[s]]
        fw = forward(ds.frames, [f for s in batch for f in frames_of[s]], [pairs[i] for i in idx], params)
        scores[idx] = s_match(fw)
    return scores, np.array([p.label for p in pairs])


def evaluate(params: ModelParams, ds: Dataset, threshold: float = 1.0, split: str = "test") -> Metrics:
    scores, labels = pair_scores(params, ds, split)
    return confusion_metrics(scores, labels, threshold)
