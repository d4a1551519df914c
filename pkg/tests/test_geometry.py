import itertools
from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mitodetect.geometry import (
    Detection,
    DiskTargetSpec,
    mask_to_detections,
    match_detections,
    read_detections,
    render_disk_mask,
    write_detections,
)


def lattice_count(radius):
    """Integer offsets (di, dj) with di^2 + dj^2 <= r^2, counted by brute force."""
    n = int(radius) + 1
    return sum(1 for di in range(-n, n + 1) for dj in range(-n, n + 1) if di * di + dj * dj <= radius * radius)


def test_disk_pixel_count_matches_lattice_oracle():
    mask = render_disk_mask([(256, 256)])
    assert mask.shape == (512, 512)
    assert mask.dtype == np.uint8
    assert int(mask.sum()) == lattice_count(10.5) == 349


def test_disk_is_symmetric_and_centered():
    mask = render_disk_mask([(256, 256)])
    ys, xs = np.nonzero(mask)
    assert ys.mean() == pytest.approx(256)
    assert xs.mean() == pytest.approx(256)
    crop = mask[246:267, 246:267]
    np.testing.assert_array_equal(crop, crop.T)
    np.testing.assert_array_equal(crop, crop[::-1])


def test_overlapping_disks_union():
    mask = render_disk_mask([(100, 100), (110, 100)])
    assert 349 < mask.sum() < 2 * 349
    assert mask.max() == 1


def test_disk_clipped_at_border():
    mask = render_disk_mask([(0, 0)])
    assert 0 < mask.sum() < 349


def test_out_of_bounds_centroid_rejected():
    with pytest.raises(ValueError):
        render_disk_mask([(512, 10)])


@pytest.mark.parametrize("kwargs", [{"diameter_px": 0}, {"mpp": -1}, {"patch_size_px": 0}])
def test_disk_spec_validation(kwargs):
    with pytest.raises(ValueError):
        DiskTargetSpec(**kwargs)


def flood_components(binary):
    """Reference 8-connected labelling by BFS; returns list of pixel lists."""
    h, w = binary.shape
    seen = np.zeros_like(binary, dtype=bool)
    comps = []
    for i in range(h):
        for j in range(w):
            if binary[i, j] and not seen[i, j]:
                q, pix = deque([(i, j)]), []
                seen[i, j] = True
                while q:
                    a, b = q.popleft()
                    pix.append((a, b))
                    for da, db in itertools.product((-1, 0, 1), repeat=2):
                        u, v = a + da, b + db
                        if 0 <= u < h and 0 <= v < w and binary[u, v] and not seen[u, v]:
                            seen[u, v] = True
                            q.append((u, v))
                comps.append(pix)
    return comps


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_components_match_flood_fill(seed):
    rng = np.random.default_rng(seed)
    prob = rng.random((24, 24)) * (rng.random((24, 24)) < 0.45)
    dets = mask_to_detections(prob, threshold=0.5, min_area_px=1)
    comps = flood_components(prob >= 0.5)
    expected = sorted(
        (float(np.mean([p[0] for p in c])), float(np.mean([p[1] for p in c])),
         float(max(prob[p] for p in c)))
        for c in comps
    )
    got = sorted((d.y, d.x, d.score) for d in dets)
    assert len(got) == len(expected)
    np.testing.assert_allclose(np.array(got).reshape(-1, 3), np.array(expected).reshape(-1, 3), atol=1e-9)


def test_diagonal_pixels_are_one_component():
    prob = np.zeros((5, 5))
    prob[1, 1] = prob[2, 2] = 0.9
    assert len(mask_to_detections(prob, min_area_px=1)) == 1


def test_min_area_filter():
    prob = np.zeros((64, 64))
    prob[5:9, 5:9] = 0.8      # 16 px
    prob[30:36, 30:36] = 0.7  # 36 px
    dets = mask_to_detections(prob, min_area_px=25)
    assert len(dets) == 1
    assert (dets[0].x, dets[0].y) == pytest.approx((32.5, 32.5))
    assert dets[0].score == pytest.approx(0.7)


@pytest.mark.parametrize("threshold", [0.0, 1.0])
def test_threshold_bounds(threshold):
    with pytest.raises(ValueError):
        mask_to_detections(np.zeros((4, 4)), threshold=threshold)


def test_mask_round_trip_recovers_disjoint_centroids():
    rng = np.random.default_rng(3)
    for _ in range(20):
        cents = []
        while len(cents) < 5:
            c = tuple(rng.uniform(15, 497, size=2).round().tolist())
            if all(np.hypot(c[0] - a, c[1] - b) > 25 for a, b in cents):
                cents.append(c)
        dets = mask_to_detections(render_disk_mask(cents).astype(float), 0.5)
        assert len(dets) == len(cents)
        res = match_detections(dets, cents, radius_px=0.5)
        assert res.tp == len(cents)


def _brute_max_matching(preds, truths, radius):
    if not preds or not truths:
        return 0
    # pad the shorter side so a full permutation enumerates every assignment
    n = max(len(preds), len(truths))
    best = 0
    for perm in itertools.permutations(range(n)):
        hits = sum(
            1 for i, j in enumerate(perm)
            if i < len(preds) and j < len(truths)
            and np.hypot(preds[i].x - truths[j][0], preds[i].y - truths[j][1]) <= radius
        )
        best = max(best, hits)
    return best


def _random_instance(rng, max_n=6, span=100.0):
    preds = [Detection(*rng.uniform(0, span, 2), score=float(rng.random())) for _ in range(rng.integers(0, max_n))]
    truths = [tuple(rng.uniform(0, span, 2)) for _ in range(rng.integers(0, max_n))]
    return preds, truths


def test_matcher_identities_on_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(100):
        preds, truths = _random_instance(rng)
        tp, fp, fn, pairs = match_detections(preds, truths, 30)
        assert tp + fn == len(truths)
        assert tp + fp == len(preds)
        assert len({i for i, _ in pairs}) == len({j for _, j in pairs}) == tp
        for i, j in pairs:
            assert np.hypot(preds[i].x - truths[j][0], preds[i].y - truths[j][1]) <= 30


def test_greedy_never_exceeds_optimal_matching():
    rng = np.random.default_rng(1)
    for _ in range(60):
        preds, truths = _random_instance(rng, max_n=5)
        assert match_detections(preds, truths, 30).tp <= _brute_max_matching(preds, truths, 30)


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.tuples(st.floats(0, 200), st.floats(0, 200), st.floats(0, 1)), max_size=8),
    st.lists(st.tuples(st.floats(0, 200), st.floats(0, 200)), max_size=8),
    st.floats(1, 60),
)
def test_matcher_identities_property(pred_rows, truths, radius):
    preds = [Detection(*row) for row in pred_rows]
    tp, fp, fn, _ = match_detections(preds, truths, radius)
    assert tp + fn == len(truths) and tp + fp == len(preds)
    assert 0 <= tp <= min(len(preds), len(truths))


def test_higher_score_wins_contested_truth():
    truths = [(50.0, 50.0)]
    preds = [Detection(55, 50, 0.6), Detection(50, 52, 0.9)]
    res = match_detections(preds, truths, 30)
    assert res.pairs == [(1, 0)]
    assert (res.tp, res.fp, res.fn) == (1, 1, 0)


def test_radius_boundary_inclusive():
    assert match_detections([Detection(30, 0, 0.5)], [(0.0, 0.0)], 30).tp == 1
    assert match_detections([Detection(30.01, 0, 0.5)], [(0.0, 0.0)], 30).tp == 0


def test_detection_score_validation():
    with pytest.raises(ValueError):
        Detection(1, 1, 1.5)


def test_detections_csv_round_trip(tmp_path):
    dets = {"b": [Detection(1.5, 2.25, 0.75)], "a": [Detection(10, 20, 0.5), Detection(3, 4, 0.125)], "c": []}
    path = tmp_path / "d.csv"
    write_detections(path, dets)
    back = read_detections(path)
    assert set(back) == {"a", "b"}
    assert back["a"] == dets["a"]
    assert back["b"] == dets["b"]
