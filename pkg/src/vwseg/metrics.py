"""Segmentation quality metrics and dataset-level evaluation reports.

Region quality is intersection-over-union; contour quality matches
one-pixel boundaries within a Chebyshev tolerance; temporal decay is the
drop between the first and last quarter of a video. Frame 0 carries the
given annotation and is always excluded from scores.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import dataio
from .errors import (
    EmptyInput,
    MissingFrames,
    MissingInput,
    ShapeMismatch,
    TooFewFrames,
)


def iou(pred: np.ndarray, gt: np.ndarray, class_id: int) -> float:
    """Jaccard index for one class; two empty masks count as perfect."""
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs gt {gt.shape}")
    p = pred == class_id
    g = gt == class_id
    union = (p | g).sum()
    if union == 0:
        return 1.0
    return float((p & g).sum() / union)


def _inner_boundary(binary: np.ndarray) -> np.ndarray:
    """Region pixels with an in-frame 4-neighbour outside the region.

    Frame edges do not create boundary pixels on their own.
    """
    b = np.zeros_like(binary, dtype=bool)
    b[1:, :] |= binary[1:, :] & ~binary[:-1, :]
    b[:-1, :] |= binary[:-1, :] & ~binary[1:, :]
    b[:, 1:] |= binary[:, 1:] & ~binary[:, :-1]
    b[:, :-1] |= binary[:, :-1] & ~binary[:, 1:]
    return b


def default_boundary_tolerance(shape) -> int:
    h, w = shape[:2]
    return int(math.ceil(0.008 * math.hypot(h, w)))


def boundary_f(pred: np.ndarray, gt: np.ndarray, class_id: int,
               tolerance: int | None = None) -> float:
    """F-measure between one-pixel boundaries within a Chebyshev tolerance."""
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs gt {gt.shape}")
    if tolerance is None:
        tolerance = default_boundary_tolerance(pred.shape)
    pb = _inner_boundary(pred == class_id)
    gb = _inner_boundary(gt == class_id)
    if not pb.any() and not gb.any():
        return 1.0
    if not pb.any() or not gb.any():
        return 0.0
    if tolerance > 0:
        square = np.ones((2 * tolerance + 1, 2 * tolerance + 1), dtype=bool)
        gb_wide = ndimage.binary_dilation(gb, structure=square)
        pb_wide = ndimage.binary_dilation(pb, structure=square)
    else:
        gb_wide, pb_wide = gb, pb
    precision = float((pb & gb_wide).sum() / pb.sum())
    recall = float((gb & pb_wide).sum() / gb.sum())
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def j_decay(per_frame_j) -> float:
    """Mean of the first quarter minus mean of the last; positive is worse."""
    arr = np.asarray(per_frame_j, dtype=np.float64)
    if arr.size < 4:
        raise TooFewFrames(f"decay needs >= 4 frames, got {arr.size}")
    clips = np.array_split(arr, 4)
    return float(clips[0].mean() - clips[3].mean())


def part_consistency(word_maps, part_maps) -> float:
    """Percent of later-frame words whose majority part keeps its frame-0 part.

    Frame 0 assigns each word the part it covers most (ties to the lower
    part id).  Every later frame re-votes each word that still claims at
    least one part pixel; the score counts (frame, word) pairs, so small
    words weigh as much as large ones.  Words first seen later count as
    inconsistent.
    """
    if len(word_maps) != len(part_maps):
        raise ShapeMismatch("word and part sequences differ in length")
    if len(word_maps) < 2:
        raise TooFewFrames("part consistency needs >= 2 frames")
    w0 = np.asarray(word_maps[0]).ravel()
    p0 = np.asarray(part_maps[0]).ravel()
    sel = p0 > 0
    if not sel.any():
        raise EmptyInput("no part pixels in the first frame")
    mapping: dict[int, int] = {}
    for word in np.unique(w0[sel]):
        votes = np.bincount(p0[sel][w0[sel] == word])
        mapping[int(word)] = int(votes.argmax())
    consistent = 0
    total = 0
    for wm, pm in zip(word_maps[1:], part_maps[1:]):
        wm = np.asarray(wm).ravel()
        pm = np.asarray(pm).ravel()
        on = pm > 0
        for word in np.unique(wm[on]):
            votes = np.bincount(pm[on][wm[on] == word])
            total += 1
            if mapping.get(int(word), -1) == int(votes.argmax()):
                consistent += 1
    if total == 0:
        raise EmptyInput("no part pixels after the first frame")
    return 100.0 * consistent / total


@dataclass
class ObjectResult:
    video: str
    class_id: int
    j_mean: float
    f_mean: float
    jf_mean: float
    decay: float | None
    per_frame_j: list[float]
    per_frame_f: list[float]
    frames: list[int]


@dataclass
class EvalReport:
    objects: list[ObjectResult]
    dataset_j: float
    dataset_f: float
    dataset_jf: float
    boundary_tolerance: int
    mean_frame_seconds: float | None = None

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            out = csv.writer(f)
            out.writerow(["video", "object", "j_mean", "f_mean", "jf_mean", "j_decay"])
            for r in self.objects:
                decay = "" if r.decay is None else f"{r.decay:.6f}"
                out.writerow([r.video, r.class_id, f"{r.j_mean:.6f}",
                              f"{r.f_mean:.6f}", f"{r.jf_mean:.6f}", decay])

    def write_per_frame_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            out = csv.writer(f)
            out.writerow(["video", "object", "frame", "j", "f"])
            for r in self.objects:
                for t, jv, fv in zip(r.frames, r.per_frame_j, r.per_frame_f):
                    out.writerow([r.video, r.class_id, t, f"{jv:.6f}", f"{fv:.6f}"])

    def write_json(self, path) -> None:
        doc = {
            "dataset": {
                "j_mean": self.dataset_j,
                "f_mean": self.dataset_f,
                "jf_mean": self.dataset_jf,
                "boundary_tolerance": self.boundary_tolerance,
                "mean_frame_seconds": self.mean_frame_seconds,
            },
            "objects": [
                {
                    "video": r.video,
                    "object": r.class_id,
                    "j_mean": r.j_mean,
                    "f_mean": r.f_mean,
                    "jf_mean": r.jf_mean,
                    "j_decay": r.decay,
                }
                for r in self.objects
            ],
        }
        Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def _read_timing(path) -> list[float]:
    seconds = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            seconds.append(float(row["seconds"]))
    return seconds


def evaluate_run(pred_root, gt_root, tolerance: int | None = None,
                 include_timing: bool = False) -> EvalReport:
    """Score every video under pred_root against gt_root annotations.

    Predictions live in <pred_root>/<video>/mask_%05d.pgm. Frame 0 is
    excluded; remaining annotated frames all need predictions. Videos
    shorter than four evaluated frames report no decay.
    """
    pred_root = Path(pred_root)
    records = dataio.scan_dataset(gt_root)
    objects: list[ObjectResult] = []
    tol_used = None
    timing: list[float] = []
    for rec in records:
        pdir = pred_root / rec.name
        if not pdir.is_dir():
            raise MissingInput(f"no predictions for video {rec.name}")
        gt0 = dataio.read_mask(rec.masks[0]) if 0 in rec.masks else None
        if gt0 is None:
            raise MissingFrames(f"{rec.name}: no frame-0 annotation")
        tol = tolerance if tolerance is not None \
            else default_boundary_tolerance(gt0.shape)
        tol_used = tol if tol_used is None else tol_used
        eval_frames = sorted(i for i in rec.masks if i > 0)
        class_ids = sorted(int(v) for v in np.unique(gt0) if v > 0)
        per_j = {c: [] for c in class_ids}
        per_f = {c: [] for c in class_ids}
        for t in eval_frames:
            ppath = pdir / f"mask_{t:05d}.pgm"
            if not ppath.exists():
                raise MissingFrames(f"{rec.name}: missing prediction frame {t}")
            pred = dataio.read_mask(ppath)
            gt = dataio.read_mask(rec.masks[t])
            for c in class_ids:
                per_j[c].append(iou(pred, gt, c))
                per_f[c].append(boundary_f(pred, gt, c, tolerance=tol))
        for c in class_ids:
            jm = float(np.mean(per_j[c]))
            fm = float(np.mean(per_f[c]))
            decay = j_decay(per_j[c]) if len(per_j[c]) >= 4 else None
            objects.append(ObjectResult(
                video=rec.name, class_id=c, j_mean=jm, f_mean=fm,
                jf_mean=(jm + fm) / 2.0, decay=decay,
                per_frame_j=per_j[c], per_frame_f=per_f[c],
                frames=eval_frames))
        if include_timing and (pdir / "timing.csv").exists():
            timing.extend(_read_timing(pdir / "timing.csv"))
    if not objects:
        raise EmptyInput("nothing to evaluate")
    dj = float(np.mean([r.j_mean for r in objects]))
    df = float(np.mean([r.f_mean for r in objects]))
    return EvalReport(
        objects=objects,
        dataset_j=dj,
        dataset_f=df,
        dataset_jf=(dj + df) / 2.0,
        boundary_tolerance=int(tol_used or 0),
        mean_frame_seconds=float(np.mean(timing)) if timing else None,
    )
