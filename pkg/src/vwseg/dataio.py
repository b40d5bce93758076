"""On-disk formats: PPM frames, PGM masks, VWT1 tensors, video directories.

A video directory holds frame_%05d.ppm files (contiguous from 0), optional
mask_%05d.pgm annotations whose pixel value is the class id, optional
parts_%05d.pgm part annotations, and an optional bbox_00000.txt with one
"class x0 y0 x1 y1" line per object (inclusive pixel coordinates).
A dataset root holds such directories plus a manifest.json naming them.
"""

from __future__ import annotations

import json
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    LengthMismatch,
    MissingFrames,
    MissingInput,
    OversizedLabel,
    ShapeMismatch,
    TruncatedFile,
)

_MAGIC = b"VWT1"
_DTYPE_F32 = 0


# --- PNM (PPM/PGM) ---

def _read_pnm_header(f, magic: bytes, path):
    got = f.read(2)
    if got != magic:
        raise BadMagic(f"{path}: expected {magic!r}, got {got!r}")
    fields = []
    while len(fields) < 3:
        line = f.readline()
        if not line:
            raise TruncatedFile(f"{path}: header ended early")
        line = line.split(b"#", 1)[0]
        fields.extend(line.split())
    width, height, maxval = (int(v) for v in fields[:3])
    if width <= 0 or height <= 0:
        raise BadMagic(f"{path}: non-positive dimensions {width}x{height}")
    if maxval != 255:
        raise BadMagic(f"{path}: max value {maxval}, only 255 supported")
    return width, height


def _read_payload(f, n: int, path) -> bytes:
    data = f.read(n)
    if len(data) < n:
        raise TruncatedFile(f"{path}: payload {len(data)} bytes, expected {n}")
    return data


def read_frame(path) -> np.ndarray:
    """Read a binary PPM into a float32 (H, W, 3) array in [0, 1]."""
    path = Path(path)
    with open(path, "rb") as f:
        w, h = _read_pnm_header(f, b"P6", path)
        raw = _read_payload(f, w * h * 3, path)
    img = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)
    return img.astype(np.float32) / 255.0


def write_frame(path, frame: np.ndarray) -> None:
    """Write an (H, W, 3) image; floats in [0, 1] are quantized to bytes."""
    frame = np.asarray(frame)
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise ShapeMismatch(f"frame shape {frame.shape}, expected (H, W, 3)")
    if frame.dtype != np.uint8:
        frame = np.round(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = frame.shape[:2]
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(frame.tobytes())


def read_mask(path, num_classes: int | None = None) -> np.ndarray:
    """Read a binary PGM label map; pixel value is the class id."""
    path = Path(path)
    with open(path, "rb") as f:
        w, h = _read_pnm_header(f, b"P5", path)
        raw = _read_payload(f, w * h, path)
    mask = np.frombuffer(raw, dtype=np.uint8).reshape(h, w).astype(np.int32)
    if num_classes is not None and mask.max(initial=0) > num_classes:
        raise OversizedLabel(f"{path}: label {mask.max()} > {num_classes} classes")
    return mask


def write_mask(path, mask: np.ndarray) -> None:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ShapeMismatch(f"mask shape {mask.shape}, expected (H, W)")
    if mask.min(initial=0) < 0 or mask.max(initial=0) > 255:
        raise OversizedLabel(f"mask values outside [0, 255]")
    h, w = mask.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(mask.astype(np.uint8).tobytes())


# --- VWT1 tensor container ---

def write_tensor(dst, arr: np.ndarray) -> None:
    """Write one float32 tensor record to a path or open binary file."""
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim > 8:
        raise ShapeMismatch(f"rank {arr.ndim} > 8")
    header = _MAGIC + struct.pack("<BI", _DTYPE_F32, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = arr.astype("<f4", copy=False).tobytes()
    if hasattr(dst, "write"):
        dst.write(header + payload)
    else:
        with open(dst, "wb") as f:
            f.write(header + payload)


def read_tensor(src) -> np.ndarray:
    """Read one tensor record from a path or open binary file."""
    if hasattr(src, "read"):
        return _read_tensor_record(src, getattr(src, "name", "<stream>"))
    with open(src, "rb") as f:
        arr = _read_tensor_record(f, src)
        extra = f.read(1)
        if extra:
            raise LengthMismatch(f"{src}: trailing bytes after payload")
    return arr


def _read_tensor_record(f, path) -> np.ndarray:
    magic = f.read(4)
    if magic != _MAGIC:
        raise BadMagic(f"{path}: bad tensor magic {magic!r}")
    head = f.read(5)
    if len(head) < 5:
        raise TruncatedFile(f"{path}: header ended early")
    code, rank = struct.unpack("<BI", head)
    if code != _DTYPE_F32:
        raise BadMagic(f"{path}: unsupported dtype code {code}")
    if rank > 8:
        raise LengthMismatch(f"{path}: rank {rank} > 8")
    dims_raw = f.read(4 * rank)
    if len(dims_raw) < 4 * rank:
        raise TruncatedFile(f"{path}: header ended early")
    dims = struct.unpack(f"<{rank}I", dims_raw)
    n = int(np.prod(dims, dtype=np.int64)) if rank else 1
    raw = f.read(4 * n)
    if len(raw) < 4 * n:
        raise LengthMismatch(f"{path}: payload {len(raw)} bytes, header says {4 * n}")
    return np.frombuffer(raw, dtype="<f4").reshape(dims).copy()


# --- bounding boxes ---

def read_boxes(path) -> list[tuple[int, int, int, int, int]]:
    """Read (class_id, x0, y0, x1, y1) lines; inclusive pixel coordinates."""
    boxes = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 5:
            raise BadMagic(f"{path}: bad box line {line!r}")
        boxes.append(tuple(int(p) for p in parts))
    return boxes


def write_boxes(path, boxes) -> None:
    lines = [" ".join(str(int(v)) for v in box) for box in boxes]
    Path(path).write_text("\n".join(lines) + "\n")


# --- video directories ---

@dataclass
class VideoRecord:
    """Paths of one video's frames and annotations."""

    root: Path
    name: str
    frames: list[Path]
    masks: dict[int, Path] = field(default_factory=dict)
    parts: dict[int, Path] = field(default_factory=dict)
    boxes: Path | None = None

    def __len__(self) -> int:
        return len(self.frames)


_FRAME_RE = re.compile(r"frame_(\d{5})\.ppm$")


def scan_video(video_dir) -> VideoRecord:
    video_dir = Path(video_dir)
    if not video_dir.is_dir():
        raise MissingInput(f"video directory {video_dir} not found")
    indices = {}
    for p in video_dir.iterdir():
        m = _FRAME_RE.search(p.name)
        if m:
            indices[int(m.group(1))] = p
    if not indices:
        raise MissingInput(f"{video_dir}: no frame_*.ppm files")
    count = max(indices) + 1
    missing = sorted(set(range(count)) - set(indices))
    if missing:
        raise MissingFrames(f"{video_dir}: missing frame indices {missing}")
    frames = [indices[i] for i in range(count)]
    masks = {}
    parts = {}
    for i in range(count):
        mp = video_dir / f"mask_{i:05d}.pgm"
        if mp.exists():
            masks[i] = mp
        pp = video_dir / f"parts_{i:05d}.pgm"
        if pp.exists():
            parts[i] = pp
    boxes = video_dir / "bbox_00000.txt"
    return VideoRecord(
        root=video_dir,
        name=video_dir.name,
        frames=frames,
        masks=masks,
        parts=parts,
        boxes=boxes if boxes.exists() else None,
    )


def scan_dataset(root) -> list[VideoRecord]:
    """Videos under a dataset root, in manifest order when one exists."""
    root = Path(root)
    if not root.is_dir():
        raise MissingInput(f"dataset directory {root} not found")
    manifest = root / "manifest.json"
    if manifest.exists():
        names = json.loads(manifest.read_text())["videos"]
        return [scan_video(root / n) for n in names]
    dirs = sorted(d for d in root.iterdir() if (d / "frame_00000.ppm").exists())
    if not dirs:
        raise MissingInput(f"{root}: no video directories")
    return [scan_video(d) for d in dirs]


def write_manifest(root, names, config: dict | None = None) -> None:
    doc = {"videos": list(names)}
    if config is not None:
        doc["config"] = config
    (Path(root) / "manifest.json").write_text(json.dumps(doc, indent=2) + "\n")


@dataclass
class LoadedVideo:
    """One video's arrays in memory."""

    name: str
    frames: list[np.ndarray]
    masks: dict[int, np.ndarray]
    parts: dict[int, np.ndarray] = field(default_factory=dict)
    boxes: list[tuple[int, int, int, int, int]] | None = None


def load_video(rec: VideoRecord, with_parts: bool = False) -> LoadedVideo:
    frames = [read_frame(p) for p in rec.frames]
    h, w = frames[0].shape[:2]
    masks = {}
    for i, p in rec.masks.items():
        m = read_mask(p)
        if m.shape != (h, w):
            raise ShapeMismatch(f"{p}: mask {m.shape} vs frame {(h, w)}")
        masks[i] = m
    parts = {}
    if with_parts:
        for i, p in rec.parts.items():
            parts[i] = read_mask(p)
    boxes = read_boxes(rec.boxes) if rec.boxes else None
    return LoadedVideo(name=rec.name, frames=frames, masks=masks, parts=parts, boxes=boxes)
