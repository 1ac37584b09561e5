"""DSC / HD95 against exhaustive brute-force oracles, plus nn_avg."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from volformer import metrics
from volformer.errors import UsageError


def brute_hd95(a, b, spacing):
    """All-pairs surface-distance oracle with explicit nearest-rank percentile."""
    def surf(m):
        pts = []
        H, W, D = m.shape
        for i, j, k in np.argwhere(m):
            for di, dj, dk in [(1, 0, 0), (-1, 0, 0), (0, 1, 0),
                               (0, -1, 0), (0, 0, 1), (0, 0, -1)]:
                ii, jj, kk = i + di, j + dj, k + dk
                if not (0 <= ii < H and 0 <= jj < W and 0 <= kk < D) or not m[ii, jj, kk]:
                    pts.append((i, j, k))
                    break
        return np.array(pts, dtype=float) * spacing

    sa, sb = surf(a), surf(b)
    d_ab = [math.sqrt(min(((p - q) ** 2).sum() for q in sb)) for p in sa]
    d_ba = [math.sqrt(min(((p - q) ** 2).sum() for q in sa)) for p in sb]
    pooled = sorted(d_ab + d_ba)
    return pooled[math.ceil(0.95 * len(pooled)) - 1]


def random_pair(rng, max_extent=(12, 12, 8), density=0.3):
    shape = tuple(int(rng.integers(3, e + 1)) for e in max_extent)
    return rng.random(shape) < density, rng.random(shape) < density


class TestDsc:
    def test_identical_nonempty(self):
        m = np.zeros((4, 4, 4), bool)
        m[1:3, 1:3, 1:3] = True
        assert metrics.dsc(m, m) == 1.0

    def test_disjoint(self):
        a = np.zeros((4, 4, 4), bool)
        b = np.zeros((4, 4, 4), bool)
        a[0, 0, 0] = True
        b[3, 3, 3] = True
        assert metrics.dsc(a, b) == 0.0

    def test_half_overlap(self):
        a = np.zeros((4, 2, 2), bool)
        b = np.zeros((4, 2, 2), bool)
        a[:2] = True   # |A| = 8
        b[1:3] = True  # |B| = 8, overlap 4
        assert metrics.dsc(a, b) == 0.5

    def test_empty_conventions(self):
        e = np.zeros((2, 2, 2), bool)
        f = np.ones((2, 2, 2), bool)
        assert metrics.dsc(e, e) == 1.0
        assert metrics.dsc(e, f) == 0.0
        assert metrics.dsc(f, e) == 0.0

    def test_extent_mismatch(self):
        with pytest.raises(UsageError):
            metrics.dsc(np.zeros((2, 2, 2)), np.zeros((3, 2, 2)))

    @given(st.integers(0, 1000))
    @settings(max_examples=30, deadline=None)
    def test_symmetry(self, seed):
        rng = np.random.default_rng(seed)
        a, b = random_pair(rng, (6, 6, 4))
        assert metrics.dsc(a, b) == metrics.dsc(b, a)


class TestHd95:
    def test_identical_zero(self):
        m = np.zeros((5, 5, 5), bool)
        m[1:4, 1:4, 1:4] = True
        assert metrics.hd95(m, m) == 0.0

    def test_single_voxel_pair(self):
        a = np.zeros((5, 5, 5), bool)
        b = np.zeros((5, 5, 5), bool)
        a[1, 1, 1] = True
        b[2, 1, 1] = True
        assert metrics.hd95(a, b) == 1.0
        assert metrics.hd95(a, b, (2.0, 1.0, 1.0)) == 2.0

    def test_empty_flagged_nan(self):
        e = np.zeros((3, 3, 3), bool)
        f = np.ones((3, 3, 3), bool)
        assert math.isnan(metrics.hd95(e, f))
        assert math.isnan(metrics.hd95(f, e))

    def test_pooled_symmetry_and_linear_spacing(self):
        rng = np.random.default_rng(11)
        a, b = random_pair(rng)
        while not (a.any() and b.any()):
            a, b = random_pair(rng)
        assert metrics.hd95(a, b) == metrics.hd95(b, a)
        base = metrics.hd95(a, b, (1.0, 1.0, 1.0))
        np.testing.assert_allclose(metrics.hd95(a, b, (3.0, 3.0, 3.0)), 3.0 * base)

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(12)
        checked = 0
        while checked < 25:
            a, b = random_pair(rng)
            if not (a.any() and b.any()):
                continue
            spacing = rng.uniform(0.5, 2.0, 3)
            got = metrics.hd95(a, b, tuple(spacing))
            want = brute_hd95(a, b, spacing)
            np.testing.assert_allclose(got, want, atol=1e-10)
            checked += 1


class TestEvaluate:
    def test_perfect_prediction(self):
        labels = np.random.default_rng(13).integers(0, 3, (8, 8, 8))
        m = metrics.SegmentationMask(labels)
        rep = metrics.evaluate(m, m, 3)
        assert rep.avg_dsc == 1.0
        assert rep.avg_hd95 == 0.0

    def test_absent_class_flagged_and_excluded(self):
        labels = np.zeros((4, 4, 4), dtype=np.int64)
        labels[:2] = 1  # class 2 absent everywhere
        m = metrics.SegmentationMask(labels)
        rep = metrics.evaluate(m, m, 3)
        assert not rep.per_class[1].flagged
        assert rep.per_class[2].flagged
        assert rep.avg_hd95 == rep.per_class[1].hd95

    def test_spacing_mismatch_rejected(self):
        labels = np.zeros((2, 2, 2), dtype=np.int64)
        with pytest.raises(UsageError):
            metrics.evaluate(
                metrics.SegmentationMask(labels, (1, 1, 1)),
                metrics.SegmentationMask(labels, (2, 1, 1)), 2,
            )

    def test_report_format(self):
        labels = np.random.default_rng(14).integers(0, 3, (6, 6, 4))
        rep = metrics.evaluate(metrics.SegmentationMask(labels),
                               metrics.SegmentationMask(labels), 3)
        lines = rep.render().splitlines()
        assert lines[0] == "class\tdsc\thd95\tflag"
        assert lines[-1].startswith("avg\t")


class TestNnAvg:
    def test_identical_inputs_match_single_argmax(self):
        p = np.random.default_rng(15).random((3, 4, 4, 2))
        p /= p.sum(axis=0)
        out = metrics.nn_avg(p, p)
        np.testing.assert_array_equal(out.labels, np.argmax(p, axis=0))

    def test_certain_model_wins(self):
        k = 4
        pa = np.full((k, 1, 1, 1), 1.0 / k)  # uniform
        pb = np.zeros((k, 1, 1, 1))
        pb[2] = 1.0  # certain
        assert metrics.nn_avg(pa, pb).labels[0, 0, 0] == 2

    def test_conflicting_confidences_hand_case(self):
        # voxel 0: a says class1 (0.9), b says class0 (0.6) -> class1 wins
        # voxel 1: a says class0 (0.55), b says class1 (0.65) -> class1 wins
        pa = np.array([[0.1, 0.55], [0.9, 0.45]]).reshape(2, 2, 1, 1)
        pb = np.array([[0.6, 0.35], [0.4, 0.65]]).reshape(2, 2, 1, 1)
        np.testing.assert_array_equal(metrics.nn_avg(pa, pb).labels.ravel(), [1, 1])

    def test_scale_invariance(self):
        rng = np.random.default_rng(16)
        pa = rng.random((3, 3, 3, 2))
        pb = rng.random((3, 3, 3, 2))
        np.testing.assert_array_equal(
            metrics.nn_avg(pa, pb).labels, metrics.nn_avg(5 * pa, 5 * pb).labels
        )

    def test_shape_mismatch(self):
        with pytest.raises(UsageError):
            metrics.nn_avg(np.zeros((2, 2, 2, 2)), np.zeros((3, 2, 2, 2)))
