"""Synthetic multi-part object videos with exact ground-truth masks.

Each object is a rigid row of colored discs (one color per part) moving
over a textured background. Masks come from the same point-in-disc test
that paints the colors, so annotations are exact by construction. All
randomness flows from one seeded generator; identical configs produce
byte-identical files.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass, field, replace, asdict
from pathlib import Path

import numpy as np

from . import dataio
from .errors import ConfigError, ObjectTooLarge

_SAT = 0.75
_VAL = 0.9
_BG_NOISE = 0.05


@dataclass
class SynthConfig:
    resolution: tuple[int, int] = (24, 24)   # (H, W)
    num_frames: int = 12
    num_objects: int = 1
    parts_per_object: int = 2
    velocity: float = 0.8        # max object speed, pixels per frame
    rotation: float = 0.0        # max angular speed, radians per frame
    drift_rate: float = 0.0      # hue shift per frame
    frame_noise: float = 0.0     # per-frame additive jitter amplitude
    part_radius: float = 2.5
    hue_span: float = 0.45       # width of the warm band the part hues tile
    occlusion: list[tuple[int, int, int]] = field(default_factory=list)
    seed: int = 0


@dataclass
class Scene:
    """Sampled parameters of one video."""

    centers: np.ndarray      # (K, 2) object centers at t=0, (x, y)
    velocities: np.ndarray   # (K, 2) pixels per frame
    angles: np.ndarray       # (K,) axis angle at t=0
    rot_speeds: np.ndarray   # (K,) radians per frame
    part_hues: np.ndarray    # (K, P) base hues
    background: np.ndarray   # (H, W, 3) static background in [0, 1]


def _extent(cfg: SynthConfig) -> float:
    return cfg.part_radius * cfg.parts_per_object


def sample_scene(cfg: SynthConfig, rng: np.random.Generator) -> Scene:
    h, w = cfg.resolution
    k, p = cfg.num_objects, cfg.parts_per_object
    if k < 1 or p < 1 or cfg.num_frames < 1:
        raise ConfigError("num_objects, parts_per_object, num_frames must be >= 1")
    ext = _extent(cfg)
    if 2 * ext + 2 >= min(h, w):
        raise ObjectTooLarge(f"extent {ext:.1f} does not fit in {h}x{w}")
    centers = np.zeros((k, 2))
    placed = 0
    for _ in range(200):
        cand = np.array([
            rng.uniform(ext + 1, w - ext - 1),
            rng.uniform(ext + 1, h - ext - 1),
        ])
        if all(np.linalg.norm(cand - centers[j]) >= 2 * ext for j in range(placed)):
            centers[placed] = cand
            placed += 1
            if placed == k:
                break
    if placed < k:
        raise ObjectTooLarge(f"could not place {k} objects in {h}x{w}")
    speed = rng.uniform(0.3, 1.0, size=k) * cfg.velocity
    heading = rng.uniform(0.0, 2 * np.pi, size=k)
    velocities = np.stack([speed * np.cos(heading), speed * np.sin(heading)], axis=1)
    angles = rng.uniform(0.0, 2 * np.pi, size=k)
    rot_speeds = rng.uniform(-1.0, 1.0, size=k) * cfg.rotation
    # well-separated warm hues per (object, part); background stays cool.
    # hues interleave across objects (object o takes every k-th hue) so one
    # object's parts straddle the other objects' hues: class appearance is
    # multimodal and a single per-class mean is never a faithful summary
    if not 0.0 < cfg.hue_span <= 0.45:
        raise ConfigError(f"hue_span must be in (0, 0.45], got {cfg.hue_span}")
    total = k * p
    base = np.arange(total) / total * cfg.hue_span
    jitter = rng.uniform(-0.02, 0.02, size=total) * (cfg.hue_span / 0.45)
    part_hues = (base + jitter).reshape(p, k).T
    yy = np.arange(h)[:, None] / max(h - 1, 1)
    bg_val = 0.3 + 0.25 * yy
    bg = np.zeros((h, w, 3))
    hue = rng.uniform(0.55, 0.68)
    for i in range(h):
        bg[i, :, :] = colorsys.hsv_to_rgb(hue, 0.35, float(bg_val[i, 0]))
    bg = bg + rng.uniform(-_BG_NOISE, _BG_NOISE, size=bg.shape)
    return Scene(centers, velocities, angles, rot_speeds, part_hues,
                 np.clip(bg, 0.0, 1.0))


def part_centers(scene: Scene, cfg: SynthConfig, obj: int, t: int) -> np.ndarray:
    """(P, 2) disc centers of one object at frame t, (x, y) coordinates."""
    p = cfg.parts_per_object
    r = cfg.part_radius
    center = scene.centers[obj] + scene.velocities[obj] * t
    theta = scene.angles[obj] + scene.rot_speeds[obj] * t
    offsets = (np.arange(p) - (p - 1) / 2.0) * (2.0 * r)
    direction = np.array([np.cos(theta), np.sin(theta)])
    return center[None, :] + offsets[:, None] * direction[None, :]


def _hidden(cfg: SynthConfig, class_id: int, t: int) -> bool:
    return any(c == class_id and s <= t <= e for c, s, e in cfg.occlusion)


def render_frame(scene: Scene, cfg: SynthConfig, t: int):
    """(frame u8, mask, parts) for frame t; masks exact by the disc test."""
    h, w = cfg.resolution
    r2 = cfg.part_radius ** 2
    xs = np.arange(w)[None, :, None]
    ys = np.arange(h)[:, None, None]
    frame = scene.background.copy()
    mask = np.zeros((h, w), dtype=np.int32)
    parts = np.zeros((h, w), dtype=np.int32)
    for obj in range(cfg.num_objects):
        class_id = obj + 1
        if _hidden(cfg, class_id, t):
            continue
        pc = part_centers(scene, cfg, obj, t)
        d2 = (xs - pc[None, None, :, 0]) ** 2 + (ys - pc[None, None, :, 1]) ** 2
        for p in range(cfg.parts_per_object):
            inside = d2[:, :, p] <= r2
            hue = (scene.part_hues[obj, p] + cfg.drift_rate * t) % 1.0
            rgb = colorsys.hsv_to_rgb(hue, _SAT, _VAL)
            frame[inside] = rgb
            mask[inside] = class_id
            parts[inside] = p + 1
    return frame, mask, parts


def generate_arrays(cfg: SynthConfig):
    """All frames in memory: (frames u8, masks, parts, scene)."""
    rng = np.random.default_rng(cfg.seed)
    scene = sample_scene(cfg, rng)
    frames, masks, parts = [], [], []
    for t in range(cfg.num_frames):
        frame, mask, part = render_frame(scene, cfg, t)
        if cfg.frame_noise > 0:
            frame = frame + rng.uniform(-cfg.frame_noise, cfg.frame_noise,
                                        size=frame.shape)
        u8 = np.round(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8)
        frames.append(u8)
        masks.append(mask)
        parts.append(part)
    return frames, masks, parts, scene


def bounding_boxes(mask: np.ndarray) -> list[tuple[int, int, int, int, int]]:
    """Tight (class, x0, y0, x1, y1) boxes, inclusive coordinates."""
    boxes = []
    for c in sorted(int(v) for v in np.unique(mask) if v > 0):
        ys, xs = np.nonzero(mask == c)
        boxes.append((c, int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())))
    return boxes


def generate_video(cfg: SynthConfig, out_dir) -> dataio.VideoRecord:
    """Write one video directory: frames, masks, parts, frame-0 boxes."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frames, masks, parts, _ = generate_arrays(cfg)
    for t, (frame, mask, part) in enumerate(zip(frames, masks, parts)):
        dataio.write_frame(out_dir / f"frame_{t:05d}.ppm", frame)
        dataio.write_mask(out_dir / f"mask_{t:05d}.pgm", mask)
        dataio.write_mask(out_dir / f"parts_{t:05d}.pgm", part)
    boxes = bounding_boxes(masks[0])
    if boxes:
        dataio.write_boxes(out_dir / "bbox_00000.txt", boxes)
    return dataio.scan_video(out_dir)


def generate_dataset(root, cfg: SynthConfig, num_videos: int,
                     prefix: str = "video") -> list[dataio.VideoRecord]:
    """num_videos directories with per-video seeds cfg.seed + i, plus manifest."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    names = []
    records = []
    for i in range(num_videos):
        name = f"{prefix}_{i:03d}"
        vcfg = replace(cfg, seed=cfg.seed + i)
        records.append(generate_video(vcfg, root / name))
        names.append(name)
    doc = asdict(cfg)
    doc["occlusion"] = [list(o) for o in cfg.occlusion]
    doc["resolution"] = list(cfg.resolution)
    doc["num_videos"] = num_videos
    dataio.write_manifest(root, names, config=doc)
    return records
