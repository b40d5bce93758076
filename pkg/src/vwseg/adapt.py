"""Online dictionary adaptation and box-initialized dictionaries.

Every delta frames the current prediction becomes a pseudo-label: spurious
connected components are relabelled to background, each predicted class is
re-clustered into k_new candidate words, and candidates pass an admission
gate comparing normalized-centroid distance against existing words of the
same class. Admitted words are appended; nothing is ever removed.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import dictionary as D
from . import matcher
from .encoder import EncoderParams, encode
from .errors import (
    AllClustersDiscarded,
    EmptyBackground,
    EmptyBox,
    ShapeMismatch,
)
from .tensor import Tensor

log = logging.getLogger(__name__)

# 4-connectivity: components touch through edges, not corners
_CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


@dataclass
class AdaptConfig:
    delta: int = 5                 # adapt every delta frames; 0 disables
    alpha: float = 0.5             # admission distance on unit-normalized centroids
    k_new: int | None = None       # per-class new words; None -> k_foreground
    bg_resemblance_tau: float = 0.85
    max_words: int | None = None
    gate_per_word: bool = False


@dataclass
class AdaptRecord:
    frame_index: int
    round_index: int
    regions_removed: int
    proposed: dict[int, int] = field(default_factory=dict)
    accepted: dict[int, int] = field(default_factory=dict)
    words_before: int = 0
    words_after: int = 0


@dataclass
class AdaptLog:
    records: list[AdaptRecord] = field(default_factory=list)
    frame_seconds: list[float] = field(default_factory=list)


def _filter_components(pred: np.ndarray, prev: np.ndarray):
    """Relabel to background every foreground component of pred that has
    zero overlap with the previous frame's pixels of the same class."""
    if pred.shape != prev.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs prev {prev.shape}")
    out = pred.copy()
    removed = 0
    for c in (int(v) for v in np.unique(pred) if v > 0):
        comps, n = ndimage.label(pred == c, structure=_CROSS)
        prev_c = prev == c
        for j in range(1, n + 1):
            comp = comps == j
            if not (comp & prev_c).any():
                out[comp] = 0
                removed += 1
    return out, removed


def remove_outliers(pred: np.ndarray, prev: np.ndarray) -> np.ndarray:
    """Pseudo-label cleanup between consecutive frames (4-connectivity)."""
    out, _ = _filter_components(pred, prev)
    return out


def _unit_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    return m / np.maximum(norms, 1e-12)


def _mix_seed(base: int, round_index: int, class_id: int) -> int:
    return (base + 0x9E3779B1 * (round_index + 1) + class_id) % (2 ** 32)


def adapt_step(d: D.Dictionary, emb, pseudo_label: np.ndarray, cfg: AdaptConfig,
               frame_index: int, round_index: int):
    """Propose new per-class words from a pseudo-labelled frame and append
    the ones the distance gate admits. Returns (dictionary, record)."""
    grid = D._as_grid(emb)
    h, w, dim = grid.shape
    if pseudo_label.shape != (h, w):
        raise ShapeMismatch(f"label {pseudo_label.shape} vs embeddings {(h, w)}")
    flat = grid.reshape(-1, dim)
    lab = pseudo_label.ravel()
    k_new = cfg.k_new if cfg.k_new is not None else d.config.k_foreground
    record = AdaptRecord(frame_index=frame_index, round_index=round_index,
                         regions_removed=0, words_before=len(d))
    new_words: list[D.VisualWord] = []
    for c in (int(v) for v in np.unique(lab)):
        pts = flat[lab == c]
        seed = _mix_seed(d.config.seed, round_index, c)
        assign, cents = D.kmeans(pts, min(k_new, len(pts)), seed)
        counts = np.bincount(assign, minlength=cents.shape[0])
        record.proposed[c] = int(cents.shape[0])
        old_idx = d.words_of_class(c)
        if old_idx.size == 0:
            record.accepted[c] = 0
            continue
        old_unit = _unit_rows(d.word_matrix()[old_idx])
        new_unit = _unit_rows(cents.astype(np.float64))
        dist = np.linalg.norm(new_unit[:, None, :] - old_unit[None, :, :], axis=2)
        nearest = dist.min(axis=1)
        if cfg.gate_per_word:
            keep = np.flatnonzero(nearest <= cfg.alpha)
        elif (nearest <= cfg.alpha).any():
            keep = np.arange(cents.shape[0])
        else:
            keep = np.array([], dtype=np.int64)
        record.accepted[c] = int(keep.size)
        for j in keep:
            new_words.append(D.VisualWord(
                centroid=cents[j].astype(np.float32),
                class_id=c,
                member_count=int(counts[j]),
                birth_frame=frame_index,
                birth_round=round_index,
            ))
    if cfg.max_words is not None and len(d) + len(new_words) > cfg.max_words:
        # hard ceiling: drop this round's appends rather than evict
        log.warning("word cap %d reached; dropping %d new words",
                    cfg.max_words, len(new_words))
        for c in record.accepted:
            record.accepted[c] = 0
        new_words = []
    out = d.extended(new_words) if new_words else d
    record.words_after = len(out)
    return out, record


def run_video(params: EncoderParams, dict0: D.Dictionary, frames,
              first_mask: np.ndarray | None, cfg: AdaptConfig,
              video: str | None = None):
    """Segment a frame sequence causally, adapting every cfg.delta frames.

    Frame 0's output is the given annotation verbatim (or the dictionary's
    own segmentation when initialized from boxes). Adaptation at frame t
    only ever affects frames t+1 onward.
    """
    preds: list[np.ndarray] = []
    logbook = AdaptLog()
    d = dict0
    for t, frame in enumerate(frames):
        start = time.perf_counter()
        if t == 0:
            if first_mask is not None:
                preds.append(np.asarray(first_mask).copy())
            else:
                emb0 = encode(params, frame, video=video, frame_index=0)
                preds.append(matcher.segment(emb0, d))
            logbook.frame_seconds.append(time.perf_counter() - start)
            continue
        emb = encode(params, frame, video=video, frame_index=t)
        pred = matcher.segment(emb, d)
        preds.append(pred)
        if cfg.delta > 0 and t % cfg.delta == 0:
            cleaned, removed = _filter_components(pred, preds[t - 1])
            d, record = adapt_step(d, emb, cleaned, cfg,
                                   frame_index=t, round_index=t // cfg.delta)
            record.regions_removed = removed
            logbook.records.append(record)
        logbook.frame_seconds.append(time.perf_counter() - start)
    return preds, logbook, d


def init_from_bbox(emb, boxes, dict_cfg: D.DictionaryConfig, cfg: AdaptConfig,
                   frame_index: int = 0) -> D.Dictionary:
    """Dictionary from frame-0 boxes instead of a mask.

    Pixels outside every box build the background words; each box's pixels
    are clustered and clusters that resemble the background (max cosine to
    any background word >= bg_resemblance_tau) are discarded.
    """
    grid = D._as_grid(emb)
    h, w, dim = grid.shape
    label = np.zeros((h, w), dtype=np.int32)
    for c, x0, y0, x1, y1 in boxes:
        if x1 < x0 or y1 < y0:
            raise EmptyBox(f"degenerate box {(c, x0, y0, x1, y1)}")
        if x0 < 0 or y0 < 0 or x1 >= w or y1 >= h:
            raise ShapeMismatch(f"box {(x0, y0, x1, y1)} outside {w}x{h}")
        label[y0:y1 + 1, x0:x1 + 1] = c
    flat = grid.reshape(-1, dim)
    outside = np.flatnonzero(label.ravel() == 0)
    if outside.size == 0:
        raise EmptyBackground("boxes cover every pixel; no background words")
    k_bg = dict_cfg.k_foreground * dict_cfg.background_multiplier
    bg_assign, bg_cents = D.kmeans(flat[outside], min(k_bg, outside.size),
                                   dict_cfg.seed)
    bg_counts = np.bincount(bg_assign, minlength=bg_cents.shape[0])
    bg_unit = _unit_rows(bg_cents.astype(np.float64))
    words = [
        D.VisualWord(bg_cents[j].astype(np.float32), 0, int(bg_counts[j]),
                     frame_index, 0)
        for j in range(bg_cents.shape[0])
    ]
    classes = sorted(int(v) for v in np.unique(label) if v > 0)
    for c in classes:
        idx = np.flatnonzero(label.ravel() == c)
        assign, cents = D.kmeans(flat[idx], min(dict_cfg.k_foreground, idx.size),
                                 dict_cfg.seed ^ c)
        counts = np.bincount(assign, minlength=cents.shape[0])
        unit = _unit_rows(cents.astype(np.float64))
        resemblance = (unit @ bg_unit.T).max(axis=1)
        kept = np.flatnonzero(resemblance < cfg.bg_resemblance_tau)
        if kept.size == 0:
            raise AllClustersDiscarded(
                f"class {c}: all {cents.shape[0]} clusters look like background")
        for j in kept:
            words.append(D.VisualWord(cents[j].astype(np.float32), c,
                                      int(counts[j]), frame_index, 0))
    return D.Dictionary(words, max(classes) if classes else 0, dict_cfg)
