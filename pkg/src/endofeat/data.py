"""Frame ingestion, specularity masking, and pseudo-label generation.

Frames are binary PGM (P5) files named ``frame_%06d.pgm``, 8- or 16-bit,
normalized to [0, 1] on load. An optional region-of-interest mask (also
PGM, nonzero = valid) excludes pixels — typically black corners of the
endoscope circle — from detection, labeling, and metrics.

Pseudo-labels are keypoints proposed by a teacher network: the dense
heatmap is thresholded, non-maximum suppressed over 9x9 windows, and the
top 600 survivors are kept. They are cached as text files of
``x y score`` lines.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass

import numpy as np

from . import network
from .ioutil import atomic_write_bytes, atomic_write_text, fmt
from .matching import greedy_nms
from .tensor import Tensor

SPECULAR_THRESHOLD = 0.7
LABEL_THRESHOLD = 0.015
LABEL_NMS_WINDOW = 9
LABEL_MAX_POINTS = 600

_FRAME_RE = re.compile(r"^frame_(\d{6})\.pgm$")


class FrameError(Exception):
    """A frame or mask file could not be used; message names the file."""


# ---------------------------------------------------------------------------
# PGM (P5) codec
# ---------------------------------------------------------------------------


def read_pgm(path) -> np.ndarray:
    """Binary PGM to a float64 image in [0, 1] (value / maxval)."""
    with open(path, "rb") as f:
        blob = f.read()
    pos = 0

    def token():
        nonlocal pos
        while True:
            while pos < len(blob) and blob[pos : pos + 1].isspace():
                pos += 1
            if pos < len(blob) and blob[pos : pos + 1] == b"#":
                while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                    pos += 1
                continue
            break
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FrameError(f"{path}: truncated PGM header")
        return blob[start:pos]

    if token() != b"P5":
        raise FrameError(f"{path}: not a binary PGM (P5) file")
    try:
        width, height, maxval = int(token()), int(token()), int(token())
    except ValueError as e:
        raise FrameError(f"{path}: bad PGM header") from e
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise FrameError(f"{path}: bad PGM dimensions or maxval")
    pos += 1  # single whitespace after maxval
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height
    raw = blob[pos : pos + count * dtype.itemsize]
    if len(raw) != count * dtype.itemsize:
        raise FrameError(f"{path}: pixel data truncated")
    img = np.frombuffer(raw, dtype=dtype).reshape(height, width)
    return img.astype(np.float64) / maxval


def write_pgm(path, image: np.ndarray, maxval: int = 255) -> None:
    """Quantize a [0, 1] image to PGM with the given maxval (8- or 16-bit)."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"write_pgm expects an H x W image, got shape {image.shape}")
    if not 0 < maxval < 65536:
        raise ValueError(f"maxval out of range: {maxval}")
    q = np.clip(np.rint(image * maxval), 0, maxval)
    data = q.astype(">u2" if maxval > 255 else "u1").tobytes()
    header = f"P5\n{image.shape[1]} {image.shape[0]}\n{maxval}\n".encode("ascii")
    atomic_write_bytes(path, header + data)


# ---------------------------------------------------------------------------
# frame ingestion
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FrameRecord:
    frame_id: int
    image: np.ndarray  # float64 in [0, 1]
    mask: np.ndarray  # bool, True = valid region


def frame_name(frame_id: int) -> str:
    return f"frame_{frame_id:06d}.pgm"


def list_frames(directory):
    """Sorted (frame_id, path) pairs for every frame file in the directory."""
    out = []
    for name in os.listdir(directory):
        m = _FRAME_RE.match(name)
        if m:
            out.append((int(m.group(1)), os.path.join(directory, name)))
    out.sort()
    return out


def load_roi_mask(path) -> np.ndarray:
    mask = read_pgm(path)
    return mask > 0


def ingest_frames(directory, mask_path=None):
    """Load every frame in id order, applying the optional ROI mask.

    Raises FrameError naming the offending file on unreadable frames or a
    mask whose size does not match a frame.
    """
    mask = load_roi_mask(mask_path) if mask_path else None
    records = []
    for frame_id, path in list_frames(directory):
        try:
            image = read_pgm(path)
        except FrameError:
            raise
        except OSError as e:
            raise FrameError(f"{path}: unreadable frame {frame_id}: {e}") from e
        if mask is not None and mask.shape != image.shape:
            raise FrameError(
                f"{path}: mask size {mask.shape} does not match frame {frame_id} size {image.shape}"
            )
        m = mask if mask is not None else np.ones(image.shape, dtype=bool)
        records.append(FrameRecord(frame_id, image, m))
    return records


# ---------------------------------------------------------------------------
# specularity mask
# ---------------------------------------------------------------------------


def specularity_mask(image) -> np.ndarray:
    """Boolean mask of saturated highlights: intensity strictly above 0.7."""
    image = np.asarray(image)
    return image > SPECULAR_THRESHOLD


# ---------------------------------------------------------------------------
# pseudo-labels
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PseudoLabel:
    """Teacher keypoints: integer (x, y) pixels plus heatmap scores.

    Points are stored in descending-score order. A fresh label from
    generate_pseudolabels has at most 600 points, pairwise at least 5
    pixels apart in Chebyshev distance; labels warped to another view may
    violate the spacing.
    """

    points: np.ndarray  # (N, 2) int64, columns x, y
    scores: np.ndarray  # (N,) float64

    def __post_init__(self):
        object.__setattr__(self, "points", np.asarray(self.points, dtype=np.int64).reshape(-1, 2))
        object.__setattr__(self, "scores", np.asarray(self.scores, dtype=np.float64).reshape(-1))
        if self.points.shape[0] != self.scores.shape[0]:
            raise ValueError("points and scores must have equal length")

    def __len__(self):
        return self.points.shape[0]

    def to_map(self, height: int, width: int) -> np.ndarray:
        out = np.zeros((height, width), dtype=np.float64)
        if len(self):
            out[self.points[:, 1], self.points[:, 0]] = 1.0
        return out


def generate_pseudolabels(
    teacher: "network.NetworkParams",
    image: np.ndarray,
    mask=None,
    threshold: float = LABEL_THRESHOLD,
    nms_window: int = LABEL_NMS_WINDOW,
    max_points: int = LABEL_MAX_POINTS,
) -> PseudoLabel:
    """Run the teacher and keep its strongest well-separated detections."""
    heads = network.forward(teacher, Tensor(image, dtype=teacher.dtype()))
    heat = np.asarray(network.densify(heads).heatmap.data, dtype=np.float64)
    if mask is not None:
        heat = heat * np.asarray(mask, dtype=bool)
    ys, xs, vals = greedy_nms(heat, threshold, nms_window, max_points)
    return PseudoLabel(np.stack([xs, ys], axis=1), vals)


def warp_label(label: PseudoLabel, h: np.ndarray, height: int, width: int) -> PseudoLabel:
    """Map label points through a pixel-frame homography.

    Points are rounded to the nearest pixel; out-of-frame points are
    dropped; if two land on one pixel the higher score wins.
    """
    from .homography import warp_points

    if not len(label):
        return label
    mapped = warp_points(label.points.astype(np.float64), h)
    xs = np.rint(mapped[:, 0]).astype(np.int64)
    ys = np.rint(mapped[:, 1]).astype(np.int64)
    keep = (xs >= 0) & (xs < width) & (ys >= 0) & (ys < height)
    xs, ys, scores = xs[keep], ys[keep], label.scores[keep]
    if xs.size == 0:
        return PseudoLabel(np.empty((0, 2), dtype=np.int64), np.empty(0))
    order = np.lexsort((xs, ys, -scores))
    flat = ys[order] * width + xs[order]
    _, first = np.unique(flat, return_index=True)
    win = order[np.sort(first)]  # per-pixel winners, back in score order
    return PseudoLabel(np.stack([xs[win], ys[win]], axis=1), scores[win])


# ---------------------------------------------------------------------------
# label cache files: one text line per point, "x y score"
# ---------------------------------------------------------------------------


def label_path(directory, frame_id: int) -> str:
    return os.path.join(os.fspath(directory), f"frame_{frame_id:06d}.txt")


def save_label(path, label: PseudoLabel) -> None:
    lines = [
        f"{int(x)} {int(y)} {fmt(s)}"
        for (x, y), s in zip(label.points, label.scores)
    ]
    atomic_write_text(path, "".join(line + "\n" for line in lines))


def load_label(path) -> PseudoLabel:
    points = []
    scores = []
    with open(path, "r", encoding="utf-8") as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ValueError(f"{path}:{ln}: expected 'x y score'")
            points.append((int(parts[0]), int(parts[1])))
            scores.append(float(parts[2]))
    if not points:
        return PseudoLabel(np.empty((0, 2), dtype=np.int64), np.empty(0))
    return PseudoLabel(np.asarray(points, dtype=np.int64), np.asarray(scores))
