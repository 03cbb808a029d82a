"""Keypoint extraction and bi-directional brute-force descriptor matching.

Extraction thresholds the dense heatmap, suppresses non-maxima greedily
over a square window, caps the count, and samples a descriptor at each
surviving pixel. Matching keeps a pair only when each descriptor is the
other's nearest neighbor (ties to the lowest index), with L2 distance for
real descriptors and Hamming distance for packed binary ones.

Feature files are a small text + binary-sidecar format shared with
ingested baseline detectors, so every method flows through one pipeline.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field

import numpy as np

from .ioutil import atomic_write_bytes, fmt

DETECTION_THRESHOLD = 0.015
DETECTION_NMS_WINDOW = 3
MAX_FEATURES = 10000

METRIC_L2 = "L2"
METRIC_HAMMING = "HAMMING"

_POPCOUNT = np.unpackbits(np.arange(256, dtype=np.uint8)[:, None], axis=1).sum(axis=1)


def greedy_nms(scores: np.ndarray, threshold: float, window: int, max_points=None):
    """Greedy descending-score non-maximum suppression.

    Candidates are pixels with score >= threshold, visited from highest
    score down (ties by row then column ascending). A candidate is kept
    unless a previously kept point lies within (window-1)//2 pixels in
    Chebyshev distance. Returns (ys, xs, scores) in kept order.
    """
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be odd and positive, got {window}")
    scores = np.asarray(scores)
    ys, xs = np.nonzero(scores >= threshold)
    vals = scores[ys, xs]
    empty = (np.empty(0, np.int64), np.empty(0, np.int64), np.empty(0, np.float64))
    if ys.size == 0:
        return empty
    radius = (window - 1) // 2
    order = np.lexsort((xs, ys, -vals))
    h, w = scores.shape
    blocked = np.zeros((h, w), dtype=bool)
    kept = []
    for idx in order:
        y, x = ys[idx], xs[idx]
        if blocked[y, x]:
            continue
        kept.append(idx)
        if max_points is not None and len(kept) >= max_points:
            break
        blocked[max(0, y - radius) : y + radius + 1, max(0, x - radius) : x + radius + 1] = True
    kept = np.asarray(kept, dtype=np.int64)
    return ys[kept], xs[kept], vals[kept].astype(np.float64)


@dataclass(frozen=True)
class KeypointSet:
    points: np.ndarray  # (N, 2) float64, columns x, y (pixel coordinates)
    scores: np.ndarray  # (N,) float64
    frame_id: int = -1

    def __post_init__(self):
        object.__setattr__(self, "points", np.asarray(self.points, np.float64).reshape(-1, 2))
        object.__setattr__(self, "scores", np.asarray(self.scores, np.float64).reshape(-1))
        if self.points.shape[0] != self.scores.shape[0]:
            raise ValueError("points and scores must have equal length")

    def __len__(self):
        return self.points.shape[0]


@dataclass(frozen=True)
class DescriptorSet:
    """Per-keypoint descriptors: float rows (L2) or packed-bit rows (Hamming)."""

    vectors: np.ndarray  # (N, D) floats, or (N, ceil(bits/8)) uint8
    metric: str = METRIC_L2
    bits: int = 0  # Hamming only: descriptor length in bits

    def __post_init__(self):
        if self.metric not in (METRIC_L2, METRIC_HAMMING):
            raise ValueError(f"unknown metric {self.metric!r}")
        v = np.asarray(self.vectors)
        if v.ndim != 2:
            raise ValueError(f"descriptors must be a 2-D array, got shape {v.shape}")
        if self.metric == METRIC_HAMMING:
            if v.dtype != np.uint8:
                raise ValueError("Hamming descriptors must be packed uint8 rows")
            if not 0 < self.bits <= v.shape[1] * 8:
                raise ValueError("bits must match the packed row width")
        object.__setattr__(self, "vectors", v)

    def __len__(self):
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.bits if self.metric == METRIC_HAMMING else self.vectors.shape[1]


@dataclass
class MatchSet:
    pairs: np.ndarray  # (M, 2) int64 indices into the two keypoint sets
    distances: np.ndarray  # (M,) float64
    metric: str = METRIC_L2
    inliers: dict = field(default_factory=dict)  # model tag -> (M,) bool flags

    def __post_init__(self):
        self.pairs = np.asarray(self.pairs, np.int64).reshape(-1, 2)
        self.distances = np.asarray(self.distances, np.float64).reshape(-1)

    def __len__(self):
        return self.pairs.shape[0]


def extract_keypoints(
    dense,
    mask=None,
    threshold: float = DETECTION_THRESHOLD,
    nms_window: int = DETECTION_NMS_WINDOW,
    max_features: int = MAX_FEATURES,
    frame_id: int = -1,
):
    """Dense outputs to a (KeypointSet, DescriptorSet) pair.

    The heatmap is zeroed outside the ROI mask before thresholding, so no
    keypoint lands on an excluded pixel; descriptors are read from the
    dense descriptor map at each kept pixel.
    """
    heat = np.asarray(dense.heatmap.data, dtype=np.float64)
    if mask is not None:
        heat = heat * np.asarray(mask, dtype=bool)
    ys, xs, vals = greedy_nms(heat, threshold, nms_window, max_features)
    kp = KeypointSet(np.stack([xs, ys], axis=1).astype(np.float64), vals, frame_id)
    dmap = np.asarray(dense.descriptors.data)
    desc = DescriptorSet(np.ascontiguousarray(dmap[ys, xs]), METRIC_L2)
    return kp, desc


def match_mutual(da: DescriptorSet, db: DescriptorSet) -> MatchSet:
    """Mutual nearest-neighbor matching between two descriptor sets.

    Pair (i, j) is kept iff b_j is the nearest neighbor of a_i and a_i is
    the nearest neighbor of b_j; argmin ties go to the lowest index. Pairs
    come out in ascending i order.
    """
    if da.metric != db.metric:
        raise ValueError(f"metric mismatch: {da.metric} vs {db.metric}")
    na, nb = len(da), len(db)
    if na == 0 or nb == 0:
        return MatchSet(np.empty((0, 2), np.int64), np.empty(0), da.metric)
    if da.vectors.shape[1] != db.vectors.shape[1]:
        raise ValueError("descriptor widths differ")

    if da.metric == METRIC_HAMMING:
        a_rows, b_rows = da.vectors, db.vectors

        def dist_rows(q, others):
            return _POPCOUNT[np.bitwise_xor(q, others)].sum(axis=1)

    else:
        a_rows = da.vectors.astype(np.float64, copy=False)
        b_rows = db.vectors.astype(np.float64, copy=False)

        def dist_rows(q, others):
            return np.sum((q - others) ** 2, axis=1)

    best_b = np.empty(na, dtype=np.int64)
    dist_b = np.empty(na, dtype=np.float64)
    for i in range(na):
        d = dist_rows(a_rows[i], b_rows)
        best_b[i] = int(np.argmin(d))
        dist_b[i] = d[best_b[i]]
    best_a = np.empty(nb, dtype=np.int64)
    for j in range(nb):
        d = dist_rows(b_rows[j], a_rows)
        best_a[j] = int(np.argmin(d))

    pairs = []
    dists = []
    for i in range(na):
        j = best_b[i]
        if best_a[j] == i:
            pairs.append((i, j))
            d = dist_b[i]
            dists.append(float(np.sqrt(d)) if da.metric == METRIC_L2 else float(d))
    if not pairs:
        return MatchSet(np.empty((0, 2), np.int64), np.empty(0), da.metric)
    return MatchSet(np.asarray(pairs, np.int64), np.asarray(dists), da.metric)


# ---------------------------------------------------------------------------
# feature files: text header + keypoint lines, descriptors in a binary
# sidecar at path + ".desc" (little-endian f32 rows, or packed bits)
# ---------------------------------------------------------------------------


_FEATURE_NAME = re.compile(r"^frame_(\d{6})\.feat$")


def feature_path(directory, frame_id: int) -> str:
    return os.path.join(os.fspath(directory), f"frame_{frame_id:06d}.feat")


def list_feature_ids(directory):
    """Sorted frame ids that have a feature file in the directory."""
    ids = []
    for name in os.listdir(directory):
        m = _FEATURE_NAME.match(name)
        if m:
            ids.append(int(m.group(1)))
    return sorted(ids)


def save_features(path, keypoints: KeypointSet, descriptors: DescriptorSet) -> None:
    if len(keypoints) != len(descriptors):
        raise ValueError("keypoint and descriptor counts differ")
    lines = [f"metric {descriptors.metric} dim {descriptors.dim}"]
    for (x, y), s in zip(keypoints.points, keypoints.scores):
        lines.append(f"{fmt(x)} {fmt(y)} {fmt(s)}")
    atomic_write_bytes(os.fspath(path), "".join(l + "\n" for l in lines).encode("ascii"))
    if descriptors.metric == METRIC_HAMMING:
        payload = np.ascontiguousarray(descriptors.vectors).tobytes()
    else:
        payload = np.ascontiguousarray(descriptors.vectors, dtype="<f4").tobytes()
    atomic_write_bytes(os.fspath(path) + ".desc", payload)


def load_features(path, frame_id: int = -1):
    with open(path, "r", encoding="ascii") as f:
        lines = [ln.rstrip("\n") for ln in f]
    if not lines:
        raise ValueError(f"{path}: empty feature file")
    head = lines[0].split()
    if len(head) != 4 or head[0] != "metric" or head[2] != "dim":
        raise ValueError(f"{path}: bad feature header {lines[0]!r}")
    metric = head[1]
    if metric not in (METRIC_L2, METRIC_HAMMING):
        raise ValueError(f"{path}: unknown metric {metric!r}")
    dim = int(head[3])
    pts, scores = [], []
    for ln in lines[1:]:
        if not ln.strip():
            continue
        x, y, s = ln.split()
        pts.append((float(x), float(y)))
        scores.append(float(s))
    n = len(pts)
    kp = KeypointSet(
        np.asarray(pts, np.float64).reshape(-1, 2),
        np.asarray(scores, np.float64),
        frame_id,
    )
    with open(os.fspath(path) + ".desc", "rb") as f:
        blob = f.read()
    if metric == METRIC_HAMMING:
        row = (dim + 7) // 8
        if len(blob) != n * row:
            raise ValueError(f"{path}.desc: expected {n * row} bytes, got {len(blob)}")
        vec = np.frombuffer(blob, dtype=np.uint8).reshape(n, row) if n else np.empty((0, row), np.uint8)
        desc = DescriptorSet(np.ascontiguousarray(vec), METRIC_HAMMING, bits=dim)
    else:
        if len(blob) != n * dim * 4:
            raise ValueError(f"{path}.desc: expected {n * dim * 4} bytes, got {len(blob)}")
        vec = np.frombuffer(blob, dtype="<f4").reshape(n, dim) if n else np.empty((0, dim), np.float32)
        desc = DescriptorSet(np.ascontiguousarray(vec.astype(np.float32)), METRIC_L2)
    return kp, desc


# match files: one pair per line
def save_matches(path, matches: MatchSet) -> None:
    lines = [f"metric {matches.metric}"]
    for (i, j), d in zip(matches.pairs, matches.distances):
        lines.append(f"{int(i)} {int(j)} {fmt(d)}")
    atomic_write_bytes(os.fspath(path), "".join(l + "\n" for l in lines).encode("ascii"))
