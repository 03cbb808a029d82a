"""Two-view geometry: robust model estimation and relative pose recovery.

Conventions, used consistently throughout:

* Image A points are x1, image B points are x2; every epipolar model
  satisfies x2^T M x1 = 0, i.e. M maps A-points to lines in B.
* The relative pose maps A-frame coordinates to B-frame: X2 = R X1 + t,
  so E = [t]x R up to scale.
* Inlier tests are symmetric: a match is an inlier when the larger of the
  forward and backward residuals is within the pixel threshold.

RANSAC hypothesis sampling uses a counter-based generator keyed by
(seed, iteration), so estimates are deterministic for a fixed seed and
invariant to the order of the input matches (samples are drawn from the
match list sorted by index pair). Among hypotheses tied on inlier count
the earliest iteration wins. The winning model is refit by least squares
on its inliers and the returned flags correspond to the refit model,
unless the refit sheds more than half of that support — then the sampled
hypothesis and its flags are returned instead.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ioutil import atomic_write_text, fmt

RANSAC_CONFIDENCE = 0.9999
RANSAC_THRESHOLD_PX = 3.0
RANSAC_MAX_ITERATIONS = 10000

_EPS = 1e-12


class PoseRecoveryError(Exception):
    """Pose decomposition failed; .front_counts lists per-candidate support."""

    def __init__(self, message: str, front_counts=None):
        super().__init__(message)
        self.front_counts = list(front_counts) if front_counts is not None else []


# ---------------------------------------------------------------------------
# quaternions and poses
# ---------------------------------------------------------------------------


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_rotation(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def rotation_to_quat(r: np.ndarray) -> np.ndarray:
    """Rotation matrix to unit quaternion (w, x, y, z) with w >= 0."""
    m00, m01, m02 = r[0]
    m10, m11, m12 = r[1]
    m20, m21, m22 = r[2]
    tr = m00 + m11 + m22
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s, (m21 - m12) / s, (m02 - m20) / s, (m10 - m01) / s])
    elif m00 >= m11 and m00 >= m22:
        s = np.sqrt(1.0 + m00 - m11 - m22) * 2
        q = np.array([(m21 - m12) / s, 0.25 * s, (m01 + m10) / s, (m02 + m20) / s])
    elif m11 >= m22:
        s = np.sqrt(1.0 + m11 - m00 - m22) * 2
        q = np.array([(m02 - m20) / s, (m01 + m10) / s, 0.25 * s, (m12 + m21) / s])
    else:
        s = np.sqrt(1.0 + m22 - m00 - m11) * 2
        q = np.array([(m10 - m01) / s, (m02 + m20) / s, (m12 + m21) / s, 0.25 * s])
    q = q / np.linalg.norm(q)
    if q[0] < 0:
        q = -q
    return q


def quat_rotation_angle_deg(q: np.ndarray) -> float:
    """Rotation angle of a unit quaternion, in degrees (always >= 0)."""
    vec = np.linalg.norm(q[1:])
    return float(np.degrees(2.0 * np.arctan2(vec, abs(q[0]))))


@dataclass(frozen=True)
class RelativePose:
    """Rotation (unit quaternion, w >= 0) and unit translation direction.

    Maps image-A camera coordinates into image-B camera coordinates:
    X_b = R X_a + t. Translation scale is unobservable from two views, so
    t is stored unit length.
    """

    quaternion: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.quaternion, dtype=np.float64).reshape(4)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        qn, tn = np.linalg.norm(q), np.linalg.norm(t)
        if qn < _EPS or tn < _EPS:
            raise ValueError("quaternion and translation must be nonzero")
        q = q / qn
        if q[0] < 0:
            q = -q
        object.__setattr__(self, "quaternion", q)
        object.__setattr__(self, "translation", t / tn)

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_rotation(self.quaternion)


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def normalize(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        return np.stack(
            [(points[:, 0] - self.cx) / self.fx, (points[:, 1] - self.cy) / self.fy], axis=1
        )


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0, -z, y], [z, 0, -x], [-y, x, 0.0]])


def essential_from_pose(pose: RelativePose) -> np.ndarray:
    e = skew(pose.translation) @ pose.rotation
    return e / np.linalg.norm(e) * np.sqrt(2.0)


# ---------------------------------------------------------------------------
# model fitting
# ---------------------------------------------------------------------------


def hartley_normalization(points: np.ndarray):
    """Similarity T mapping points to zero centroid, mean distance sqrt(2).

    Returns (T, normalized points) or (None, None) for a degenerate cloud.
    """
    points = np.asarray(points, dtype=np.float64)
    centroid = points.mean(axis=0)
    d = np.sqrt(((points - centroid) ** 2).sum(axis=1)).mean()
    if not np.isfinite(d) or d < _EPS:
        return None, None
    s = np.sqrt(2.0) / d
    t = np.array([[s, 0, -s * centroid[0]], [0, s, -s * centroid[1]], [0, 0, 1.0]])
    return t, (points - centroid) * s


def fit_homography(pts_a: np.ndarray, pts_b: np.ndarray):
    """Normalized DLT from >= 4 correspondences; None when degenerate."""
    pts_a = np.asarray(pts_a, dtype=np.float64)
    pts_b = np.asarray(pts_b, dtype=np.float64)
    n = pts_a.shape[0]
    if n < 4:
        return None
    t1, na = hartley_normalization(pts_a)
    t2, nb = hartley_normalization(pts_b)
    if t1 is None or t2 is None:
        return None
    a = np.zeros((2 * n, 9))
    x, y = na[:, 0], na[:, 1]
    u, v = nb[:, 0], nb[:, 1]
    a[0::2, 0] = -x
    a[0::2, 1] = -y
    a[0::2, 2] = -1
    a[0::2, 6] = x * u
    a[0::2, 7] = y * u
    a[0::2, 8] = u
    a[1::2, 3] = -x
    a[1::2, 4] = -y
    a[1::2, 5] = -1
    a[1::2, 6] = x * v
    a[1::2, 7] = y * v
    a[1::2, 8] = v
    try:
        _, sv, vt = np.linalg.svd(a)
    except np.linalg.LinAlgError:
        return None
    h = vt[-1].reshape(3, 3)
    if n == 4 and sv[-2] < 1e-9 * max(sv[0], _EPS):
        return None  # null space not unique: degenerate (collinear) sample
    h = np.linalg.inv(t2) @ h @ t1
    if not np.all(np.isfinite(h)) or abs(np.linalg.det(h)) < _EPS:
        return None
    if abs(h[2, 2]) > _EPS:
        h = h / h[2, 2]
    return h


def homography_distances(h: np.ndarray, pts_a: np.ndarray, pts_b: np.ndarray) -> np.ndarray:
    """Symmetric transfer residual: max of forward and backward distance."""

    def transfer(m, src, dst):
        ones = np.ones((src.shape[0], 1))
        mapped = np.hstack([src, ones]) @ m.T
        w = mapped[:, 2]
        bad = np.abs(w) < _EPS
        w = np.where(bad, 1.0, w)
        d = np.sqrt(((mapped[:, :2] / w[:, None] - dst) ** 2).sum(axis=1))
        return np.where(bad, np.inf, d)

    hinv = np.linalg.inv(h)
    return np.maximum(transfer(h, pts_a, pts_b), transfer(hinv, pts_b, pts_a))


def fit_fundamental(pts_a: np.ndarray, pts_b: np.ndarray, essential: bool = False):
    """Normalized 8-point fit of x2^T F x1 = 0; None when degenerate.

    With essential=True the result is projected onto the essential
    manifold (two equal singular values, one zero) and scaled to
    Frobenius norm sqrt(2). That projection happens only after undoing
    the conditioning maps: the conditioned frame is a different
    similarity of each image plane, where an essential matrix loses its
    equal-singular-value structure, so projecting there would bias even
    a noise-free fit.
    """
    pts_a = np.asarray(pts_a, dtype=np.float64)
    pts_b = np.asarray(pts_b, dtype=np.float64)
    n = pts_a.shape[0]
    if n < 8:
        return None
    t1, na = hartley_normalization(pts_a)
    t2, nb = hartley_normalization(pts_b)
    if t1 is None or t2 is None:
        return None
    x, y = na[:, 0], na[:, 1]
    u, v = nb[:, 0], nb[:, 1]
    a = np.stack([u * x, u * y, u, v * x, v * y, v, x, y, np.ones(n)], axis=1)
    try:
        _, sv, vt = np.linalg.svd(a)
    except np.linalg.LinAlgError:
        return None
    f = vt[-1].reshape(3, 3)
    if n == 8 and sv[-2] < 1e-9 * max(sv[0], _EPS):
        return None
    if not essential:
        try:
            u2, s2, vt2 = np.linalg.svd(f)
        except np.linalg.LinAlgError:
            return None
        f = u2 @ np.diag([s2[0], s2[1], 0.0]) @ vt2
    f = t2.T @ f @ t1
    norm = np.linalg.norm(f)
    if not np.all(np.isfinite(f)) or norm < _EPS:
        return None
    f = f / norm
    if essential:
        # single manifold projection, in the original (unconditioned) frame
        try:
            u3, s3, vt3 = np.linalg.svd(f)
        except np.linalg.LinAlgError:
            return None
        sigma = (s3[0] + s3[1]) / 2.0
        if sigma < _EPS:
            return None
        f = u3 @ np.diag([1.0, 1.0, 0.0]) @ vt3
    return f


def epipolar_distances(f: np.ndarray, pts_a: np.ndarray, pts_b: np.ndarray) -> np.ndarray:
    """Symmetric epipolar residual: max point-to-line distance both ways."""
    pts_a = np.asarray(pts_a, dtype=np.float64)
    pts_b = np.asarray(pts_b, dtype=np.float64)
    ones = np.ones((pts_a.shape[0], 1))
    x1 = np.hstack([pts_a, ones])
    x2 = np.hstack([pts_b, ones])
    lines_b = x1 @ f.T  # epipolar lines of A-points in image B
    lines_a = x2 @ f  # epipolar lines of B-points in image A
    val = np.abs((x2 * lines_b).sum(axis=1))

    def dist(val, lines):
        n = np.sqrt(lines[:, 0] ** 2 + lines[:, 1] ** 2)
        bad = n < _EPS
        return np.where(bad, np.inf, val / np.where(bad, 1.0, n))

    return np.maximum(dist(val, lines_b), dist(val, lines_a))


# ---------------------------------------------------------------------------
# RANSAC
# ---------------------------------------------------------------------------


@dataclass
class RansacResult:
    success: bool
    model: np.ndarray | None
    inliers: np.ndarray  # bool flags aligned with the input matches
    iterations: int = 0
    reason: str = ""


def _match_points(matches, kp_a, kp_b):
    pairs = matches.pairs
    return kp_a.points[pairs[:, 0]], kp_b.points[pairs[:, 1]]


def _canonical_order(matches) -> np.ndarray:
    pairs = matches.pairs
    return np.lexsort((pairs[:, 1], pairs[:, 0]))


def _hypothesis_rng(seed: int, iteration: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, iteration))))


def _adaptive_bound(inlier_ratio: float, sample_size: int, confidence: float) -> int:
    if inlier_ratio <= 0:
        return RANSAC_MAX_ITERATIONS
    p_good = inlier_ratio**sample_size
    if p_good >= 1.0:
        return 0
    denom = np.log1p(-p_good)
    if denom >= 0:
        return RANSAC_MAX_ITERATIONS
    need = np.log1p(-confidence) / denom
    return int(min(RANSAC_MAX_ITERATIONS, np.ceil(need)))


def _ransac(
    pts_a: np.ndarray,
    pts_b: np.ndarray,
    order: np.ndarray,
    sample_size: int,
    fit,
    residuals,
    threshold: float,
    confidence: float,
    seed: int,
):
    """Generic RANSAC core; returns (model, inlier flags, iterations, reason).

    order is the canonical permutation (matches sorted by index pair);
    samples are drawn from that view so the seed-to-sample mapping ignores
    the caller's match ordering.
    """
    n = pts_a.shape[0]
    ca, cb = pts_a[order], pts_b[order]

    best_count = -1
    best_model = None
    bound = RANSAC_MAX_ITERATIONS
    it = 0
    while it < bound:
        rng = _hypothesis_rng(seed, it)
        pick = rng.choice(n, size=sample_size, replace=False)
        model = fit(ca[pick], cb[pick])
        it += 1
        if model is None:
            continue
        count = int((residuals(model, pts_a, pts_b) <= threshold).sum())
        if count > best_count:
            best_count = count
            best_model = model
            bound = min(bound, _adaptive_bound(count / n, sample_size, confidence))
    if best_model is None:
        return None, None, it, "all hypotheses degenerate"
    flags = residuals(best_model, pts_a, pts_b) <= threshold
    if flags.sum() < sample_size:
        return None, None, it, "insufficient inlier support"
    refit = fit(pts_a[flags], pts_b[flags])
    if refit is None:
        return None, None, it, "degenerate final support"
    new_flags = residuals(refit, pts_a, pts_b) <= threshold
    if 2 * int(new_flags.sum()) < int(flags.sum()):
        # An algebraic least-squares refit can drift far from the geometric
        # inlier criterion (plane-dominant or low-parallax supports) and shed
        # most of the consensus that selected the hypothesis.  Keep the
        # sampled hypothesis on such a collapse; marginal one-off flips near
        # the threshold are normal and the refit stays preferable there.
        return best_model, flags, it, ""
    return refit, new_flags, it, ""


def estimate_homography_ransac(
    matches,
    kp_a,
    kp_b,
    confidence: float = RANSAC_CONFIDENCE,
    threshold_px: float = RANSAC_THRESHOLD_PX,
    seed: int = 0,
) -> RansacResult:
    """Robust plane-projective fit; inlier = symmetric transfer <= threshold."""
    if len(matches) < 4:
        return RansacResult(False, None, np.zeros(len(matches), bool), 0, "need at least 4 matches")
    pts_a, pts_b = _match_points(matches, kp_a, kp_b)
    model, flags, iters, reason = _ransac(
        pts_a, pts_b, _canonical_order(matches), 4,
        fit_homography, homography_distances, threshold_px, confidence, seed,
    )
    if model is None:
        return RansacResult(False, None, np.zeros(len(matches), bool), iters, reason)
    return RansacResult(True, model, flags, iters)


def estimate_fundamental_ransac(
    matches,
    kp_a,
    kp_b,
    confidence: float = RANSAC_CONFIDENCE,
    threshold_px: float = RANSAC_THRESHOLD_PX,
    seed: int = 0,
) -> RansacResult:
    """Robust uncalibrated epipolar fit, rank-2 enforced."""
    if len(matches) < 8:
        return RansacResult(False, None, np.zeros(len(matches), bool), 0, "need at least 8 matches")
    pts_a, pts_b = _match_points(matches, kp_a, kp_b)
    model, flags, iters, reason = _ransac(
        pts_a, pts_b, _canonical_order(matches), 8,
        fit_fundamental, epipolar_distances, threshold_px, confidence, seed,
    )
    if model is None:
        return RansacResult(False, None, np.zeros(len(matches), bool), iters, reason)
    return RansacResult(True, model, flags, iters)


def estimate_essential_ransac(
    matches,
    kp_a,
    kp_b,
    intrinsics: Intrinsics,
    confidence: float = RANSAC_CONFIDENCE,
    threshold_px: float = RANSAC_THRESHOLD_PX,
    seed: int = 0,
) -> RansacResult:
    """Robust calibrated epipolar fit on the essential manifold.

    Hypotheses are fit on K-normalized coordinates; the inlier threshold
    stays in pixels by scoring the pixel-frame equivalent of each
    candidate.
    """
    if len(matches) < 8:
        return RansacResult(False, None, np.zeros(len(matches), bool), 0, "need at least 8 matches")
    pts_a, pts_b = _match_points(matches, kp_a, kp_b)
    norm_a = intrinsics.normalize(pts_a)
    norm_b = intrinsics.normalize(pts_b)
    kinv = np.linalg.inv(intrinsics.matrix)

    def fit(sa, sb):
        return fit_fundamental(sa, sb, essential=True)

    def residuals(e, na, nb):
        # na/nb are the normalized clouds; score in pixel units instead
        f_px = kinv.T @ e @ kinv
        return epipolar_distances(f_px, pts_a, pts_b)

    model, flags, iters, reason = _ransac(
        norm_a, norm_b, _canonical_order(matches), 8,
        fit, residuals, threshold_px, confidence, seed,
    )
    if model is None:
        return RansacResult(False, None, np.zeros(len(matches), bool), iters, reason)
    return RansacResult(True, model, flags, iters)


# ---------------------------------------------------------------------------
# pose recovery
# ---------------------------------------------------------------------------


def triangulate_points(norm_a: np.ndarray, norm_b: np.ndarray, r: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Linear triangulation in camera-A coordinates from normalized points."""
    p1 = np.hstack([np.eye(3), np.zeros((3, 1))])
    p2 = np.hstack([r, t.reshape(3, 1)])
    out = np.zeros((norm_a.shape[0], 3))
    for i, ((x1, y1), (x2, y2)) in enumerate(zip(norm_a, norm_b)):
        a = np.stack(
            [
                x1 * p1[2] - p1[0],
                y1 * p1[2] - p1[1],
                x2 * p2[2] - p2[0],
                y2 * p2[2] - p2[1],
            ]
        )
        _, _, vt = np.linalg.svd(a)
        xh = vt[-1]
        w = xh[3] if abs(xh[3]) > _EPS else _EPS
        out[i] = xh[:3] / w
    return out


def decompose_essential(e: np.ndarray):
    """The four (R, t) candidates of an essential matrix."""
    u, _, vt = np.linalg.svd(e)
    if np.linalg.det(u) < 0:
        u = -u
    if np.linalg.det(vt) < 0:
        vt = -vt
    w = np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1.0]])
    r1 = u @ w @ vt
    r2 = u @ w.T @ vt
    t = u[:, 2]
    return [(r1, t), (r1, -t), (r2, t), (r2, -t)]


def recover_pose(e: np.ndarray, matches, kp_a, kp_b, intrinsics: Intrinsics, inlier_flags=None) -> RelativePose:
    """Pick the essential decomposition placing the most points in front.

    Triangulates the (inlier) correspondences under each of the four
    candidates and keeps the one with the most points at positive depth
    in both cameras; a tie is a failure carrying the per-candidate counts.
    """
    pts_a, pts_b = _match_points(matches, kp_a, kp_b)
    if inlier_flags is not None:
        pts_a, pts_b = pts_a[inlier_flags], pts_b[inlier_flags]
    if pts_a.shape[0] < 1:
        raise PoseRecoveryError("pose recovery needs at least one inlier")
    norm_a = intrinsics.normalize(pts_a)
    norm_b = intrinsics.normalize(pts_b)
    counts = []
    candidates = decompose_essential(e)
    for r, t in candidates:
        pts3 = triangulate_points(norm_a, norm_b, r, t)
        z1 = pts3[:, 2]
        z2 = (pts3 @ r.T + t)[:, 2]
        counts.append(int(((z1 > 0) & (z2 > 0)).sum()))
    best = int(np.argmax(counts))
    if counts.count(counts[best]) > 1:
        raise PoseRecoveryError(
            f"ambiguous pose: front-point counts {counts}", front_counts=counts
        )
    r, t = candidates[best]
    return RelativePose(rotation_to_quat(r), t)


def pgt_inliers(
    matches,
    kp_a,
    kp_b,
    pose: RelativePose,
    intrinsics: Intrinsics,
    threshold_px: float = RANSAC_THRESHOLD_PX,
) -> np.ndarray:
    """Matches consistent with a reference pose's epipolar geometry."""
    if len(matches) == 0:
        return np.zeros(0, dtype=bool)
    e = essential_from_pose(pose)
    kinv = np.linalg.inv(intrinsics.matrix)
    f_px = kinv.T @ e @ kinv
    pts_a, pts_b = _match_points(matches, kp_a, kp_b)
    return epipolar_distances(f_px, pts_a, pts_b) <= threshold_px


# ---------------------------------------------------------------------------
# pose and intrinsics files
# ---------------------------------------------------------------------------


def save_pose_file(path, entries) -> None:
    """entries: iterable of (frame_a, frame_b, RelativePose)."""
    lines = []
    for fa, fb, pose in entries:
        q = pose.quaternion
        t = pose.translation
        lines.append(
            f"{int(fa)} {int(fb)} " + " ".join(fmt(v) for v in (*q, *t))
        )
    atomic_write_text(path, "".join(l + "\n" for l in lines))


def load_pose_file(path) -> dict:
    """Text pose file to {(frame_a, frame_b): RelativePose}."""
    out = {}
    with open(path, "r", encoding="utf-8") as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 9:
                raise ValueError(f"{path}:{ln}: expected 'frameA frameB qw qx qy qz tx ty tz'")
            fa, fb = int(parts[0]), int(parts[1])
            vals = [float(v) for v in parts[2:]]
            out[(fa, fb)] = RelativePose(np.array(vals[:4]), np.array(vals[4:]))
    return out


def save_intrinsics(path, k: Intrinsics) -> None:
    atomic_write_text(path, f"{fmt(k.fx)} {fmt(k.fy)} {fmt(k.cx)} {fmt(k.cy)}\n")


def load_intrinsics(path) -> Intrinsics:
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 4:
                raise ValueError(f"{path}: expected 'fx fy cx cy'")
            return Intrinsics(*(float(v) for v in parts))
    raise ValueError(f"{path}: no intrinsics line found")
