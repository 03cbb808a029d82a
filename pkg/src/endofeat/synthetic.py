"""Synthetic imagery and scenes for tests and scaled-down experiments.

Provides band-limited textures, planted specular blobs with a target
coverage fraction, distinctive corner markers with known locations,
warped frame sequences with known homographies, and random two-view 3-D
scenes with known relative pose.
"""

from __future__ import annotations

import numpy as np

from .data import PseudoLabel
from .geometry import Intrinsics, RelativePose, rotation_to_quat
from .homography import HomographyConfig, sample_homography, to_pixel_frame, warp_image


def band_limited_texture(height: int, width: int, seed: int = 0, cutoff: float = 0.12,
                         lo: float = 0.1, hi: float = 0.55) -> np.ndarray:
    """Smooth random texture with values in [lo, hi] (below the highlight cut)."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0)))
    noise = rng.standard_normal((height, width))
    fy = np.fft.fftfreq(height)[:, None]
    fx = np.fft.fftfreq(width)[None, :]
    keep = np.sqrt(fy**2 + fx**2) <= cutoff
    img = np.fft.ifft2(np.fft.fft2(noise) * keep).real
    rng_min, rng_max = img.min(), img.max()
    if rng_max - rng_min < 1e-12:
        return np.full((height, width), (lo + hi) / 2.0)
    return lo + (hi - lo) * (img - rng_min) / (rng_max - rng_min)


def add_specular_blobs(image: np.ndarray, seed: int = 0, coverage: float = 0.075,
                       intensity: float = 0.9) -> np.ndarray:
    """Plant bright gaussian blobs until ~coverage of pixels exceeds 0.7.

    Returns a copy; the blob peaks reach `intensity` so the saturated area
    is well above the 0.7 highlight threshold.
    """
    if not 0 < coverage < 0.5:
        raise ValueError("coverage must be a small fraction of the image")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 1)))
    h, w = image.shape
    out = image.copy()
    ys, xs = np.mgrid[0:h, 0:w]
    target = coverage * h * w
    for _ in range(200):
        if (out > 0.7).sum() >= target:
            break
        cy = rng.uniform(0.1 * h, 0.9 * h)
        cx = rng.uniform(0.1 * w, 0.9 * w)
        sigma = rng.uniform(0.02, 0.04) * min(h, w)
        blob = intensity * np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / (2 * sigma**2))
        out = np.maximum(out, blob)
    return np.clip(out, 0.0, 1.0)


def add_corner_markers(image: np.ndarray, seed: int = 0, count: int = 40,
                       size: int = 4, margin: int = 12, min_separation: int = 10):
    """Stamp small dark/bright squares; returns (image copy, (x, y) centers).

    The marker centers are distinctive, well-separated keypoint locations
    with known ground-truth coordinates.
    """
    rng = np.random.default_rng(np.random.SeedSequence((seed, 2)))
    h, w = image.shape
    out = image.copy()
    centers = []
    attempts = 0
    while len(centers) < count and attempts < count * 200:
        attempts += 1
        x = int(rng.integers(margin, w - margin))
        y = int(rng.integers(margin, h - margin))
        if any(max(abs(x - cx), abs(y - cy)) < min_separation for cx, cy in centers):
            continue
        dark = rng.random() < 0.5
        lo, hi = (0.02, 0.62) if dark else (0.62, 0.02)
        half = size // 2
        out[y - half : y + half + 1, x - half : x + half + 1] = lo
        inner = max(1, half - 1)
        out[y - inner : y + inner + 1, x - inner : x + inner + 1] = hi
        centers.append((x, y))
    return out, np.asarray(centers, dtype=np.int64).reshape(-1, 2)


def planted_label(centers: np.ndarray, scores=None) -> PseudoLabel:
    centers = np.asarray(centers, dtype=np.int64).reshape(-1, 2)
    if scores is None:
        scores = np.linspace(1.0, 0.5, centers.shape[0]) if centers.shape[0] else np.empty(0)
    return PseudoLabel(centers, np.asarray(scores, dtype=np.float64))


def specular_training_set(n_images: int, size: int = 64, seed: int = 0,
                          labels_per_image: int = 40, on_blob_fraction: float = 0.3,
                          coverage: float = 0.075):
    """Textured images with specular blobs and planted labels.

    A fraction of each image's label points is placed inside the blobs,
    imitating a teacher that fires on highlights. Returns a list of
    (image, PseudoLabel, specular mask) triples.
    """
    out = []
    for i in range(n_images):
        base = band_limited_texture(size, size, seed=seed * 1000 + i)
        img = add_specular_blobs(base, seed=seed * 1000 + i, coverage=coverage)
        mask = img > 0.7
        rng = np.random.default_rng(np.random.SeedSequence((seed, i, 3)))
        spec_idx = np.flatnonzero(mask.ravel())
        clean_idx = np.flatnonzero(~mask.ravel())
        n_on = min(int(round(labels_per_image * on_blob_fraction)), spec_idx.size)
        n_off = min(labels_per_image - n_on, clean_idx.size)
        chosen = np.concatenate(
            [
                rng.choice(spec_idx, size=n_on, replace=False) if n_on else np.empty(0, np.int64),
                rng.choice(clean_idx, size=n_off, replace=False) if n_off else np.empty(0, np.int64),
            ]
        ).astype(np.int64)
        ys, xs = np.divmod(chosen, size)
        scores = rng.uniform(0.5, 1.0, size=chosen.size)
        order = np.argsort(-scores, kind="stable")
        label = PseudoLabel(np.stack([xs[order], ys[order]], axis=1), scores[order])
        out.append((img, label, mask))
    return out


def warped_sequence(base: np.ndarray, n_frames: int, seed: int = 0,
                    config: HomographyConfig | None = None):
    """Frames warped from one base image by known pixel-frame homographies.

    Frame 0 is the base itself (identity); returns (frames, homographies)
    where homographies[i] maps base pixels to frame-i pixels. The relative
    warp between frames a and b is H_b @ inv(H_a).
    """
    if config is None:
        config = HomographyConfig(
            perspective=0.01, scale_min=0.95, scale_max=1.05,
            rotation_deg=4.0, translation=0.05,
        )
    h_img, w_img = base.shape
    frames = [base.copy()]
    homs = [np.eye(3)]
    for i in range(1, n_frames):
        h_unit = sample_homography(np.random.default_rng(np.random.SeedSequence((seed, i, 4))), config)
        h_px = to_pixel_frame(h_unit, h_img, w_img)
        frames.append(warp_image(base, h_px))
        homs.append(h_px)
    return frames, homs


def random_rotation(rng: np.random.Generator, max_angle_deg: float) -> np.ndarray:
    axis = rng.standard_normal(3)
    axis = axis / np.linalg.norm(axis)
    angle = np.deg2rad(rng.uniform(0, max_angle_deg))
    k = np.array(
        [[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]]
    )
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


def random_two_view_scene(
    n_points: int = 100,
    seed: int = 0,
    noise_px: float = 0.0,
    rotation_deg: float = 10.0,
    baseline: float = 0.3,
    intrinsics: Intrinsics | None = None,
    translation: np.ndarray | None = None,
):
    """Random 3-D points seen by two cameras with a known relative pose.

    Returns (pts_a, pts_b, pose, intrinsics): pixel correspondences, the
    ground-truth RelativePose (camera A frame to camera B frame), and the
    shared intrinsics. Points are drawn in front of both cameras.
    """
    if intrinsics is None:
        intrinsics = Intrinsics(400.0, 400.0, 320.0, 240.0)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 5)))
    r = random_rotation(rng, rotation_deg)
    if translation is None:
        t = rng.standard_normal(3)
        t = baseline * t / np.linalg.norm(t)
    else:
        t = np.asarray(translation, dtype=np.float64)
    k = intrinsics.matrix
    pts_a = np.zeros((n_points, 2))
    pts_b = np.zeros((n_points, 2))
    kept = 0
    while kept < n_points:
        x = np.array([rng.uniform(-2, 2), rng.uniform(-1.5, 1.5), rng.uniform(4, 9)])
        x2 = r @ x + t
        if x[2] <= 0.1 or x2[2] <= 0.1:
            continue
        pa = k @ (x / x[2])
        pb = k @ (x2 / x2[2])
        pts_a[kept] = pa[:2]
        pts_b[kept] = pb[:2]
        kept += 1
    if noise_px > 0:
        pts_a = pts_a + rng.normal(0, noise_px, pts_a.shape)
        pts_b = pts_b + rng.normal(0, noise_px, pts_b.shape)
    pose = RelativePose(rotation_to_quat(r), t)
    return pts_a, pts_b, pose, intrinsics


def checkerboard(height: int, width: int, cell: int = 16, lo: float = 0.15, hi: float = 0.6) -> np.ndarray:
    ys, xs = np.mgrid[0:height, 0:width]
    board = ((ys // cell + xs // cell) % 2).astype(np.float64)
    return lo + (hi - lo) * board
