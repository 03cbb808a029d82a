"""NMS, keypoint extraction, mutual matching, feature/match files."""

from types import SimpleNamespace

import numpy as np
import pytest

from endofeat.matching import (
    METRIC_HAMMING,
    METRIC_L2,
    DescriptorSet,
    KeypointSet,
    MatchSet,
    extract_keypoints,
    feature_path,
    greedy_nms,
    list_feature_ids,
    load_features,
    match_mutual,
    save_features,
    save_matches,
)
from endofeat.tensor import Tensor

from helpers import rng


# --- greedy NMS ------------------------------------------------------------


def _nms_oracle(scores, threshold, window, max_points=None):
    radius = (window - 1) // 2
    cands = [
        (y, x, scores[y, x])
        for y in range(scores.shape[0])
        for x in range(scores.shape[1])
        if scores[y, x] >= threshold
    ]
    cands.sort(key=lambda c: (-c[2], c[0], c[1]))
    kept = []
    for y, x, v in cands:
        if any(max(abs(y - ky), abs(x - kx)) <= radius for ky, kx, _ in kept):
            continue
        kept.append((y, x, v))
        if max_points is not None and len(kept) >= max_points:
            break
    ys = np.asarray([k[0] for k in kept], np.int64)
    xs = np.asarray([k[1] for k in kept], np.int64)
    vs = np.asarray([k[2] for k in kept], np.float64)
    return ys, xs, vs


@pytest.mark.parametrize("seed", range(6))
def test_greedy_nms_matches_oracle(seed):
    r = rng((50, seed))
    scores = r.uniform(0, 1, (17, 23))
    scores[scores < 0.2] = 0.0
    for window, cap in ((3, None), (9, 10), (5, 3)):
        got = greedy_nms(scores, 0.3, window, cap)
        want = _nms_oracle(scores, 0.3, window, cap)
        for g, w in zip(got, want):
            np.testing.assert_array_equal(g, w)


def test_greedy_nms_ties_row_major():
    scores = np.zeros((9, 9))
    scores[2, 7] = 0.5
    scores[2, 1] = 0.5
    scores[6, 0] = 0.5
    ys, xs, _ = greedy_nms(scores, 0.1, 3)
    np.testing.assert_array_equal(np.stack([ys, xs], 1), [[2, 1], [2, 7], [6, 0]])


def test_greedy_nms_validation_and_empty():
    with pytest.raises(ValueError, match="odd"):
        greedy_nms(np.zeros((4, 4)), 0.1, 4)
    ys, xs, vs = greedy_nms(np.zeros((4, 4)), 0.1, 3)
    assert ys.size == xs.size == vs.size == 0


# --- extraction ------------------------------------------------------------


def _fake_dense(heat, desc):
    return SimpleNamespace(heatmap=Tensor(heat), descriptors=Tensor(desc))


def test_extract_keypoints_reads_descriptors_and_mask():
    r = rng(51)
    heat = r.uniform(0, 1, (16, 16))
    desc = r.normal(size=(16, 16, 4))
    mask = np.ones((16, 16), dtype=bool)
    mask[:, 8:] = False
    kp, ds = extract_keypoints(_fake_dense(heat, desc), mask, threshold=0.2, nms_window=3)
    assert len(kp) == len(ds) > 0
    assert np.all(kp.points[:, 0] < 8)  # x stays inside the ROI
    for (x, y), row in zip(kp.points, ds.vectors):
        np.testing.assert_array_equal(row, desc[int(y), int(x)])
    assert np.all(np.diff(kp.scores) <= 0)


def test_extract_keypoints_cap():
    heat = rng(52).uniform(0.5, 1.0, (16, 16))
    kp, ds = extract_keypoints(_fake_dense(heat, np.zeros((16, 16, 2))), threshold=0.1,
                               nms_window=3, max_features=5)
    assert len(kp) == 5 and len(ds) == 5


# --- mutual matching -------------------------------------------------------


def _mutual_oracle(da, db):
    na, nb = len(da), len(db)
    if da.metric == METRIC_HAMMING:
        bits = np.unpackbits(np.arange(256, dtype=np.uint8)[:, None], axis=1).sum(axis=1)
        dist = np.array(
            [[bits[np.bitwise_xor(da.vectors[i], db.vectors[j])].sum() for j in range(nb)]
             for i in range(na)],
            dtype=np.float64,
        )
    else:
        a = da.vectors.astype(np.float64)
        b = db.vectors.astype(np.float64)
        dist = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
    best_b = dist.argmin(axis=1)
    best_a = dist.argmin(axis=0)
    pairs, dists = [], []
    for i in range(na):
        j = best_b[i]
        if best_a[j] == i:
            pairs.append((i, j))
            d = dist[i, j]
            dists.append(np.sqrt(d) if da.metric == METRIC_L2 else d)
    return np.asarray(pairs, np.int64).reshape(-1, 2), np.asarray(dists, np.float64)


@pytest.mark.parametrize("seed", range(6))
def test_match_mutual_l2_matches_oracle(seed):
    r = rng((53, seed))
    # integer-valued descriptors force exact ties
    da = DescriptorSet(r.integers(0, 3, size=(20, 4)).astype(np.float32))
    db = DescriptorSet(r.integers(0, 3, size=(17, 4)).astype(np.float32))
    got = match_mutual(da, db)
    pairs, dists = _mutual_oracle(da, db)
    np.testing.assert_array_equal(got.pairs, pairs)
    np.testing.assert_allclose(got.distances, dists, rtol=0, atol=0)
    assert np.all(np.diff(got.pairs[:, 0]) > 0)  # ascending i


@pytest.mark.parametrize("seed", range(4))
def test_match_mutual_hamming_matches_oracle(seed):
    r = rng((54, seed))
    da = DescriptorSet(r.integers(0, 256, size=(15, 4), dtype=np.uint8), METRIC_HAMMING, bits=32)
    db = DescriptorSet(r.integers(0, 256, size=(12, 4), dtype=np.uint8), METRIC_HAMMING, bits=32)
    got = match_mutual(da, db)
    pairs, dists = _mutual_oracle(da, db)
    np.testing.assert_array_equal(got.pairs, pairs)
    np.testing.assert_array_equal(got.distances, dists)


def test_match_mutual_validation_and_empty():
    l2 = DescriptorSet(np.zeros((2, 4), np.float32))
    ham = DescriptorSet(np.zeros((2, 1), np.uint8), METRIC_HAMMING, bits=8)
    with pytest.raises(ValueError, match="metric"):
        match_mutual(l2, ham)
    with pytest.raises(ValueError, match="width"):
        match_mutual(l2, DescriptorSet(np.zeros((2, 3), np.float32)))
    out = match_mutual(l2, DescriptorSet(np.empty((0, 4), np.float32)))
    assert len(out) == 0


def test_descriptor_set_validation():
    with pytest.raises(ValueError, match="metric"):
        DescriptorSet(np.zeros((1, 2)), "COSINE")
    with pytest.raises(ValueError, match="uint8"):
        DescriptorSet(np.zeros((1, 2)), METRIC_HAMMING, bits=16)
    with pytest.raises(ValueError, match="bits"):
        DescriptorSet(np.zeros((1, 2), np.uint8), METRIC_HAMMING, bits=17)
    with pytest.raises(ValueError, match="equal length"):
        KeypointSet(np.zeros((2, 2)), np.zeros(3))


# --- files -----------------------------------------------------------------


def test_feature_file_round_trip_l2(tmp_path):
    r = rng(55)
    kp = KeypointSet(r.uniform(0, 64, (9, 2)), r.uniform(0, 1, 9), frame_id=4)
    ds = DescriptorSet(r.normal(size=(9, 6)).astype(np.float32))
    path = feature_path(tmp_path, 4)
    save_features(path, kp, ds)
    kp2, ds2 = load_features(path, 4)
    np.testing.assert_array_equal(kp2.points, kp.points)
    np.testing.assert_array_equal(kp2.scores, kp.scores)
    np.testing.assert_array_equal(ds2.vectors, ds.vectors)
    assert ds2.metric == METRIC_L2 and ds2.dim == 6


def test_feature_file_round_trip_hamming(tmp_path):
    r = rng(56)
    kp = KeypointSet(r.uniform(0, 64, (5, 2)), r.uniform(0, 1, 5))
    ds = DescriptorSet(r.integers(0, 256, size=(5, 8), dtype=np.uint8), METRIC_HAMMING, bits=64)
    path = feature_path(tmp_path, 0)
    save_features(path, kp, ds)
    _, ds2 = load_features(path)
    assert ds2.metric == METRIC_HAMMING and ds2.bits == 64
    np.testing.assert_array_equal(ds2.vectors, ds.vectors)


def test_feature_file_empty_and_errors(tmp_path):
    path = feature_path(tmp_path, 1)
    save_features(path, KeypointSet(np.empty((0, 2)), np.empty(0)),
                  DescriptorSet(np.empty((0, 3), np.float32)))
    kp, ds = load_features(path)
    assert len(kp) == 0 and len(ds) == 0 and ds.dim == 3

    bad = tmp_path / "frame_000002.feat"
    bad.write_text("header nonsense\n")
    with pytest.raises(ValueError, match="header"):
        load_features(bad)

    path3 = feature_path(tmp_path, 3)
    save_features(path3, KeypointSet([[1.0, 2.0]], [0.5]),
                  DescriptorSet(np.zeros((1, 3), np.float32)))
    (tmp_path / "frame_000003.feat.desc").write_bytes(b"\x00" * 5)
    with pytest.raises(ValueError, match="bytes"):
        load_features(path3)


def test_list_feature_ids(tmp_path):
    for fid in (7, 1, 30):
        save_features(feature_path(tmp_path, fid), KeypointSet(np.empty((0, 2)), np.empty(0)),
                      DescriptorSet(np.empty((0, 2), np.float32)))
    (tmp_path / "frame_12.feat").write_text("decoy")
    (tmp_path / "other.txt").write_text("decoy")
    assert list_feature_ids(tmp_path) == [1, 7, 30]


def test_save_matches_layout(tmp_path):
    ms = MatchSet(np.array([[0, 2], [3, 1]]), np.array([0.5, 1.25]), METRIC_L2)
    path = tmp_path / "pair.matches"
    save_matches(path, ms)
    lines = path.read_text().strip().split("\n")
    assert lines[0] == "metric L2"
    assert lines[1] == "0 2 0.5" and lines[2] == "3 1 1.25"
