"""Pixel-to-word matching and class posteriors.

Every pixel embedding is scored against every visual word by cosine
similarity fed through a shared softmax over all words of all classes.
A class's score is its best word's posterior; class posteriors are those
maxima renormalized. Ties resolve to the lowest word or class index.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import AllIgnored, LabelMismatch, ShapeMismatch


def _emb_tensor(emb) -> T.Tensor:
    t = getattr(emb, "tensor", emb)
    if not isinstance(t, T.Tensor):
        t = T.Tensor(np.asarray(t))
    if t.data.ndim != 3:
        raise ShapeMismatch(f"embedding grid shape {t.data.shape}")
    return t


def _word_tensor(words, dtype) -> tuple[T.Tensor, np.ndarray]:
    if hasattr(words, "word_matrix"):
        return (T.Tensor(words.word_matrix().astype(dtype, copy=False)),
                words.class_ids())
    raise ShapeMismatch("expected a Dictionary; pass tensors to the *_flat functions")


def word_posteriors_flat(flat_emb: T.Tensor, word_matrix: T.Tensor) -> T.Tensor:
    """Softmax over exp(cosine) against every word; rows sum to 1."""
    sims = T.cosine_rows(flat_emb, word_matrix)
    e = T.exp(sims)
    denom = T.reduce_sum(e, axis=1, keepdims=True)
    return T.div(e, denom)


def class_posteriors_flat(word_post: T.Tensor, class_ids: np.ndarray):
    """Max word posterior per class, renormalized across classes.

    Returns (posteriors, present) where column j scores class present[j].
    """
    class_ids = np.asarray(class_ids)
    present = sorted(int(c) for c in set(class_ids.tolist()))
    lookup = {c: j for j, c in enumerate(present)}
    groups = np.array([lookup[int(c)] for c in class_ids], dtype=np.int64)
    numer = T.colgroup_max(word_post, groups, len(present))
    denom = T.reduce_sum(numer, axis=1, keepdims=True)
    return T.div(numer, denom), present


def word_posteriors(emb, dictionary) -> T.Tensor:
    """Per-pixel word posteriors as an (H, W, num_words) grid."""
    t = _emb_tensor(emb)
    h, w, d = t.data.shape
    wm, _ = _word_tensor(dictionary, t.data.dtype)
    flat = T.reshape(t, (h * w, d))
    wp = word_posteriors_flat(flat, wm)
    return T.reshape(wp, (h, w, wp.data.shape[1]))


def class_posteriors(emb, dictionary):
    """Per-pixel class posteriors as an (H, W, C_present) grid."""
    t = _emb_tensor(emb)
    h, w, d = t.data.shape
    wm, ids = _word_tensor(dictionary, t.data.dtype)
    flat = T.reshape(t, (h * w, d))
    wp = word_posteriors_flat(flat, wm)
    cp, present = class_posteriors_flat(wp, ids)
    return T.reshape(cp, (h, w, len(present))), present


def pixel_loss(class_post: T.Tensor, labels: np.ndarray, present: list[int],
               ignore: int | None = None) -> T.Tensor:
    """Mean cross-entropy of the true class over non-ignored pixels."""
    cp = class_post
    if cp.data.ndim == 3:
        cp = T.reshape(cp, (-1, cp.data.shape[2]))
    labels = np.asarray(labels).ravel()
    if labels.shape[0] != cp.data.shape[0]:
        raise ShapeMismatch(f"{labels.shape[0]} labels vs {cp.data.shape[0]} pixels")
    keep = np.ones(labels.shape[0], dtype=bool)
    if ignore is not None:
        keep = labels != ignore
        if not keep.any():
            raise AllIgnored("every pixel carries the ignore label")
    lookup = {c: j for j, c in enumerate(present)}
    try:
        cols = np.array([lookup[int(v)] for v in labels[keep]], dtype=np.int64)
    except KeyError as e:
        raise LabelMismatch(f"label {e.args[0]} has no words") from None
    rows = cp if keep.all() else T.gather_rows(cp, np.flatnonzero(keep))
    picked = T.take_per_row(rows, cols)
    return T.neg(T.reduce_mean(T.log(picked)))


def segment(emb, dictionary, return_confidence: bool = False):
    """Argmax class per pixel; ties go to the lowest class id."""
    cp, present = class_posteriors(emb, dictionary)
    probs = cp.data
    arg = probs.argmax(axis=2)
    lut = np.array(present, dtype=np.int32)
    out = lut[arg]
    if return_confidence:
        h, w = arg.shape
        conf = probs[np.arange(h)[:, None], np.arange(w)[None, :], arg]
        return out, conf.astype(np.float32)
    return out


def word_assignment(emb, dictionary, class_id: int | None = None) -> np.ndarray:
    """Per-pixel index of the best-matching word (global word index).

    With class_id, the argmax is restricted to that class's words; the
    shared softmax denominator makes this the same as the raw cosine argmax.
    """
    t = _emb_tensor(emb)
    h, w, d = t.data.shape
    wm, ids = _word_tensor(dictionary, t.data.dtype)
    flat = T.reshape(t, (h * w, d))
    sims = T.cosine_rows(flat, wm).data
    if class_id is not None:
        cols = np.flatnonzero(np.asarray(ids) == class_id)
        if cols.size == 0:
            raise LabelMismatch(f"no words for class {class_id}")
        local = sims[:, cols].argmax(axis=1)
        return cols[local].reshape(h, w)
    return sims.argmax(axis=1).reshape(h, w)
