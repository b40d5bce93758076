"""Episodic meta-training of the encoder.

Each episode clusters the support frame's pixels into per-class words,
then scores later query frames against those words; the mean query
cross-entropy trains the encoder. Words are constants with respect to
the encoder unless backprop_through_centroids is set, in which case the
cluster means are rebuilt differentiably from the support embeddings
(assignments stay fixed).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dictionary, encoder, matcher
from . import tensor as T
from .dataio import LoadedVideo
from .errors import EmptyInput, NonFinite, TooShortVideo, TrainingAborted

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    episodes: int = 500
    queries_per_episode: int = 2
    step_size: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    k_foreground: int = 8
    background_multiplier: int = 4
    seed: int = 0
    backprop_through_centroids: bool = False
    checkpoint_every: int = 0


@dataclass
class Episode:
    video: str
    support_index: int
    support_frame: np.ndarray
    support_mask: np.ndarray
    queries: list[tuple[np.ndarray, np.ndarray]]
    query_indices: list[int]
    num_classes: int


def sample_episode(video: LoadedVideo, rng: np.random.Generator,
                   cfg: TrainConfig) -> Episode:
    """Support is the first annotated frame; queries come from a random
    horizon so short clips and the full video are both represented."""
    if not video.masks:
        raise TooShortVideo(f"{video.name}: no annotated frames")
    support = min(video.masks)
    later = sorted(i for i in video.masks if i > support)
    if not later:
        raise TooShortVideo(f"{video.name}: needs two annotated frames")
    length = len(video.frames)
    low = min(3, length - 1)
    candidates: list[int] = []
    for _ in range(32):
        horizon = int(rng.integers(low, length))
        candidates = [i for i in later if i <= horizon]
        if candidates:
            break
    if not candidates:
        candidates = later
    n_q = min(cfg.queries_per_episode, len(candidates))
    picked = rng.choice(len(candidates), size=n_q, replace=False)
    indices = sorted(candidates[i] for i in picked)
    return Episode(
        video=video.name,
        support_index=support,
        support_frame=video.frames[support],
        support_mask=video.masks[support],
        queries=[(video.frames[i], video.masks[i]) for i in indices],
        query_indices=indices,
        num_classes=int(video.masks[support].max()),
    )


def dictionary_tensor(support_emb: T.Tensor, support_mask: np.ndarray,
                      dcfg: dictionary.DictionaryConfig,
                      differentiable: bool,
                      num_classes: int | None = None):
    """Word matrix for the loss path, plus per-word class ids.

    The differentiable form rebuilds each centroid as a constant-selector
    average of its cluster's embedding rows, so gradients reach the
    encoder through the words while assignments stay fixed. Clusters the
    repair step left empty keep their constant centroid.
    """
    h, w, d = support_emb.data.shape
    parts = dictionary.class_partitions(support_emb.data, support_mask, dcfg,
                                        num_classes=num_classes)
    ids = np.concatenate([
        np.full(p.centroids.shape[0], p.class_id, dtype=np.int64) for p in parts
    ])
    if not differentiable:
        matrix = np.concatenate([p.centroids for p in parts]).astype(
            support_emb.data.dtype)
        return T.Tensor(matrix), ids
    flat = T.reshape(support_emb, (h * w, d))
    blocks = []
    for p in parts:
        k_c = p.centroids.shape[0]
        n_c = p.pixel_indices.shape[0]
        counts = np.bincount(p.assignments, minlength=k_c)
        sel = np.zeros((k_c, n_c), dtype=support_emb.data.dtype)
        sel[p.assignments, np.arange(n_c)] = 1.0 / counts[p.assignments]
        rows = T.gather_rows(flat, p.pixel_indices)
        block = T.matmul(T.Tensor(sel), rows)
        if (counts == 0).any():
            fill = np.where((counts == 0)[:, None], p.centroids, 0.0)
            block = T.add(block, T.Tensor(fill.astype(support_emb.data.dtype)))
        blocks.append(block)
    return T.concat(blocks, axis=0), ids


def episode_loss(params: encoder.EncoderParams, episode: Episode,
                 cfg: TrainConfig) -> T.Tensor:
    """Mean query cross-entropy against the support frame's words."""
    dcfg = dictionary.DictionaryConfig(
        k_foreground=cfg.k_foreground,
        background_multiplier=cfg.background_multiplier,
        seed=cfg.seed,
    )
    s_emb = encoder.encode(params, episode.support_frame)
    words, ids = dictionary_tensor(
        s_emb.tensor, episode.support_mask, dcfg,
        differentiable=cfg.backprop_through_centroids,
        num_classes=episode.num_classes,
    )
    losses = []
    for frame, mask in episode.queries:
        q_emb = encoder.encode(params, frame)
        h, w, d = q_emb.tensor.data.shape
        flat = T.reshape(q_emb.tensor, (h * w, d))
        wp = matcher.word_posteriors_flat(flat, words)
        cp, present = matcher.class_posteriors_flat(wp, ids)
        losses.append(matcher.pixel_loss(cp, mask, present))
    total = losses[0]
    for extra in losses[1:]:
        total = T.add(total, extra)
    return T.mul_scalar(total, 1.0 / len(losses))


class Adam:
    """Standard Adam with bias correction, float32 state."""

    def __init__(self, tensors, step_size: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.tensors = list(tensors)
        self.step_size = step_size
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(t.data) for t in self.tensors]
        self.v = [np.zeros_like(t.data) for t in self.tensors]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.tensors):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            mhat = self.m[i] / c1
            vhat = self.v[i] / c2
            p.data -= self.step_size * mhat / (np.sqrt(vhat) + self.eps)


def meta_train(dataset: list[LoadedVideo], cfg: TrainConfig,
               encoder_config: encoder.EncoderConfig | None = None,
               params: encoder.EncoderParams | None = None,
               checkpoint_dir=None):
    """Train over random episodes; returns (params, per-episode losses)."""
    if not dataset:
        raise EmptyInput("empty training set")
    if params is None:
        params = encoder.init_params(encoder_config or encoder.EncoderConfig(),
                                     cfg.seed)
    params.set_requires_grad(True)
    opt = Adam(params.tensors(), cfg.step_size, cfg.beta1, cfg.beta2, cfg.adam_eps)
    rng = np.random.default_rng(cfg.seed)
    trace: list[float] = []
    report_every = max(1, cfg.episodes // 10)
    for ep in range(cfg.episodes):
        video = dataset[int(rng.integers(len(dataset)))]
        episode = sample_episode(video, rng, cfg)
        T.zero_grads(params.tensors())
        try:
            with T.Tape() as tape:
                loss = episode_loss(params, episode, cfg)
                T.backward(tape, loss)
        except NonFinite as e:
            raise TrainingAborted(ep, f"episode {ep}: {e}") from e
        opt.step()
        trace.append(loss.item())
        if (ep + 1) % report_every == 0:
            recent = float(np.mean(trace[-report_every:]))
            log.info("episode %d/%d mean loss %.4f", ep + 1, cfg.episodes, recent)
        if checkpoint_dir is not None and cfg.checkpoint_every > 0 \
                and (ep + 1) % cfg.checkpoint_every == 0:
            encoder.save_checkpoint(
                params, Path(checkpoint_dir) / f"checkpoint_{ep + 1:06d}")
    return params, trace
