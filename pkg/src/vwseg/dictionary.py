"""Per-class visual-word dictionaries built by k-means over pixel embeddings.

Each annotated class gets its own k-means run; background (class 0) gets a
multiple of the foreground word budget. Words are append-only: adaptation
extends a dictionary but never rewrites or removes existing words.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dataio
from .errors import ConfigError, EmptyClass, EmptyInput, LabelMismatch, ShapeMismatch

log = logging.getLogger(__name__)


def _sqdist(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    pp = (points * points).sum(axis=1)[:, None]
    cc = (centers * centers).sum(axis=1)[None, :]
    d2 = pp + cc - 2.0 * (points @ centers.T)
    return np.maximum(d2, 0.0)


def _kpp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = ((points - points[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            idx = int(rng.integers(n))
        chosen.append(idx)
        d2 = np.minimum(d2, ((points - points[idx]) ** 2).sum(axis=1))
    return points[chosen].copy()


def kmeans(points, k: int, seed: int, max_iter: int = 50, tol: float = 1e-6,
           objective_trace: list | None = None):
    """Lloyd's algorithm with k-means++ seeding.

    Returns (assignments, centroids). Distances and means run in float64;
    centroids come back in the input dtype. The objective after each
    assignment step is appended to objective_trace when given. Ties in
    assignment go to the lowest centroid index; empty clusters are
    re-seeded to the point farthest from its current centroid.
    """
    points = np.asarray(points)
    if points.ndim != 2:
        raise ShapeMismatch(f"kmeans points shape {points.shape}")
    n = points.shape[0]
    if n == 0:
        raise EmptyInput("kmeans on zero points")
    if k < 1:
        raise ConfigError(f"kmeans k={k}")
    if k > n:
        log.warning("kmeans: clamping k=%d to n=%d points", k, n)
        k = n
    pts = points.astype(np.float64, copy=False)
    rng = np.random.default_rng(seed)
    centers = _kpp_init(pts, k, rng)
    rows = np.arange(n)
    assign = None
    prev_obj = None
    for _ in range(max_iter):
        d2 = _sqdist(pts, centers)
        assign = d2.argmin(axis=1)
        obj = float(d2[rows, assign].sum())
        if objective_trace is not None:
            objective_trace.append(obj)
        counts = np.bincount(assign, minlength=k)
        sums = np.zeros_like(centers)
        np.add.at(sums, assign, pts)
        new_centers = centers.copy()
        nonempty = counts > 0
        new_centers[nonempty] = sums[nonempty] / counts[nonempty, None]
        empties = np.flatnonzero(~nonempty)
        if empties.size:
            order = np.argsort(-d2[rows, assign], kind="stable")
            for slot, cid in enumerate(empties):
                new_centers[cid] = pts[order[slot]]
        centers = new_centers
        if prev_obj is not None and prev_obj - obj < tol * max(prev_obj, 1e-300):
            break
        prev_obj = obj
    return assign, centers.astype(points.dtype, copy=False)


def kmeans_objective(points, assignments, centroids) -> float:
    """Sum of squared distances to the assigned centroid (float64)."""
    pts = np.asarray(points, dtype=np.float64)
    cents = np.asarray(centroids, dtype=np.float64)
    diff = pts - cents[np.asarray(assignments)]
    return float((diff * diff).sum())


@dataclass
class VisualWord:
    centroid: np.ndarray
    class_id: int
    member_count: int
    birth_frame: int = 0
    birth_round: int = 0


@dataclass
class DictionaryConfig:
    k_foreground: int = 8
    background_multiplier: int = 4
    seed: int = 0


class Dictionary:
    """Ordered collection of visual words with per-word class ids."""

    def __init__(self, words: list[VisualWord], num_classes: int,
                 config: DictionaryConfig):
        if not words:
            raise EmptyInput("dictionary with no words")
        self.words = words
        self.num_classes = num_classes
        self.config = config
        self._matrix = np.stack([w.centroid for w in words]).astype(np.float32)
        self._class_ids = np.array([w.class_id for w in words], dtype=np.int64)

    def __len__(self) -> int:
        return len(self.words)

    def word_matrix(self) -> np.ndarray:
        return self._matrix

    def class_ids(self) -> np.ndarray:
        return self._class_ids

    def classes_present(self) -> list[int]:
        return sorted(set(int(c) for c in self._class_ids))

    def words_of_class(self, class_id: int) -> np.ndarray:
        return np.flatnonzero(self._class_ids == class_id)

    def extended(self, new_words: list[VisualWord]) -> "Dictionary":
        """New dictionary whose word list starts with this one's (shared)."""
        return Dictionary(self.words + list(new_words), self.num_classes, self.config)


@dataclass
class ClassPartition:
    """One class's k-means result over its annotated pixels."""

    class_id: int
    pixel_indices: np.ndarray
    assignments: np.ndarray
    centroids: np.ndarray


def _as_grid(emb) -> np.ndarray:
    x = getattr(emb, "tensor", emb)
    x = getattr(x, "data", x)
    arr = np.asarray(x)
    if arr.ndim != 3:
        raise ShapeMismatch(f"embedding grid shape {arr.shape}, expected (H, W, d)")
    return arr


def words_per_class(class_id: int, cfg: DictionaryConfig) -> int:
    if class_id == 0:
        return cfg.k_foreground * cfg.background_multiplier
    return cfg.k_foreground


def class_partitions(emb, mask: np.ndarray, cfg: DictionaryConfig,
                     seed: int | None = None,
                     num_classes: int | None = None) -> list[ClassPartition]:
    """Per-class k-means over annotated pixels, classes in ascending order."""
    grid = _as_grid(emb)
    h, w, d = grid.shape
    mask = np.asarray(mask)
    if mask.shape != (h, w):
        raise ShapeMismatch(f"mask {mask.shape} vs embeddings {(h, w)}")
    if mask.min(initial=0) < 0:
        raise LabelMismatch("negative class id in mask")
    labels = [int(v) for v in np.unique(mask)]
    declared = num_classes if num_classes is not None else max(labels)
    for c in range(1, declared + 1):
        if c not in labels:
            raise EmptyClass(f"class {c} has no annotated pixels")
    base = cfg.seed if seed is None else seed
    flat = grid.reshape(-1, d)
    mask_flat = mask.ravel()
    parts = []
    for c in labels:
        idx = np.flatnonzero(mask_flat == c)
        assign, cents = kmeans(flat[idx], words_per_class(c, cfg), base ^ c)
        parts.append(ClassPartition(c, idx, assign, cents))
    return parts


def build_dictionary(emb, mask: np.ndarray, cfg: DictionaryConfig,
                     frame_index: int = 0,
                     num_classes: int | None = None) -> Dictionary:
    """Cluster each annotated class of one frame into visual words."""
    parts = class_partitions(emb, mask, cfg, num_classes=num_classes)
    words = []
    for part in parts:
        counts = np.bincount(part.assignments, minlength=part.centroids.shape[0])
        for j in range(part.centroids.shape[0]):
            words.append(VisualWord(
                centroid=part.centroids[j].astype(np.float32),
                class_id=part.class_id,
                member_count=int(counts[j]),
                birth_frame=frame_index,
                birth_round=0,
            ))
    declared = num_classes if num_classes is not None else max(
        int(v) for v in np.unique(mask))
    return Dictionary(words, declared, cfg)


def save_dictionary(d: Dictionary, path_base) -> None:
    base = Path(path_base)
    dataio.write_tensor(base.with_suffix(".vwt"), d.word_matrix())
    meta = {
        "num_classes": d.num_classes,
        "class_ids": [int(w.class_id) for w in d.words],
        "member_counts": [int(w.member_count) for w in d.words],
        "birth": [[int(w.birth_frame), int(w.birth_round)] for w in d.words],
        "config": {
            "k_foreground": d.config.k_foreground,
            "background_multiplier": d.config.background_multiplier,
            "seed": d.config.seed,
        },
    }
    base.with_suffix(".json").write_text(json.dumps(meta, indent=2) + "\n")


def load_dictionary(path_base) -> Dictionary:
    base = Path(path_base)
    matrix = dataio.read_tensor(base.with_suffix(".vwt"))
    meta = json.loads(base.with_suffix(".json").read_text())
    cfg = DictionaryConfig(**meta["config"])
    words = [
        VisualWord(
            centroid=matrix[i],
            class_id=meta["class_ids"][i],
            member_count=meta["member_counts"][i],
            birth_frame=meta["birth"][i][0],
            birth_round=meta["birth"][i][1],
        )
        for i in range(matrix.shape[0])
    ]
    return Dictionary(words, meta["num_classes"], cfg)
