"""Tests for hard and probabilistic match-weight computation."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from atlasseg.bspline import HybridWeights
from atlasseg.correspondence import (
    RegionPriors,
    SigmaSchedule,
    icp_weights,
    posterior_weights,
    region_priors,
    uniform_priors,
)
from atlasseg.fileio import read_matrix, write_matrix
from atlasseg.grid import PointSet


class TestWeightsType:
    def test_rejects_negative_entry(self):
        with pytest.raises(ValueError):
            HybridWeights(np.array([[1.5, -0.5]]))

    def test_rejects_bad_row_sum(self):
        with pytest.raises(ValueError):
            HybridWeights(np.array([[0.4, 0.4]]))

    def test_accepts_one_hot(self):
        w = HybridWeights(np.array([[0.0, 1.0], [1.0, 0.0]]))
        assert w.n_scene == 2 and w.n_model == 2


class TestIcp:
    def test_coincident_point_one_hot(self):
        model = PointSet(np.array([[0.0, 0, 0], [5, 0, 0], [0, 5, 0],
                                   [2, 2, 2], [9, 9, 9]]))
        scene = PointSet(np.array([[2.0, 2, 2]]))
        w = icp_weights(model, scene).w
        assert w.tolist() == [[0, 0, 0, 1, 0]]

    def test_tie_breaks_to_lowest_index(self):
        model = PointSet(np.array([[1.0, 0, 0], [-1.0, 0, 0]]))
        scene = PointSet(np.array([[0.0, 0, 0]]))
        w = icp_weights(model, scene).w
        assert w.tolist() == [[1, 0]]

    def test_matches_naive_scan(self):
        rng = np.random.default_rng(10)
        model = rng.normal(size=(20, 3)) * 10
        scene = rng.normal(size=(50, 3)) * 10
        w = icp_weights(PointSet(model), PointSet(scene)).w
        expected = np.zeros_like(w)
        for j in range(len(scene)):
            best, best_d = 0, np.inf
            for i in range(len(model)):
                d = ((scene[j] - model[i]) ** 2).sum()
                if d < best_d:
                    best, best_d = i, d
            expected[j, best] = 1.0
        assert np.array_equal(w, expected)

    def test_empty_model_rejected(self):
        with pytest.raises(ValueError):
            icp_weights(PointSet(np.zeros((0, 3))),
                        PointSet(np.zeros((1, 3))))


class TestRegionPriors:
    def test_single_model_point(self):
        pr = region_priors(PointSet(np.array([[1.0, 2, 3]])),
                           PointSet(np.array([[9.0, 9, 9]])), 5.0)
        assert pr.pi.tolist() == [[1.0]]

    def test_equidistant_pair_splits_evenly(self):
        model = PointSet(np.array([[1.0, 0, 0], [-1.0, 0, 0]]))
        center = PointSet(np.array([[0.0, 0, 0]]))
        pr = region_priors(model, center, 3.0)
        assert pr.pi[0] == pytest.approx([0.5, 0.5], abs=1e-15)

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(11)
        model = rng.normal(size=(10, 3)) * 8
        centers = rng.normal(size=(2, 3)) * 8
        sigma = 5.0
        pr = region_priors(PointSet(model), PointSet(centers), sigma)
        for j in range(2):
            g = np.array([
                np.exp(-((model[i] - centers[j]) ** 2).sum()
                       / (2 * sigma ** 2))
                for i in range(10)
            ])
            assert pr.pi[j] == pytest.approx(g / g.sum(), rel=1e-12)

    def test_distant_region_still_normalized(self):
        # huge distances with a small kernel: naive evaluation would
        # underflow every entry
        model = PointSet(np.array([[0.0, 0, 0], [1.0, 0, 0]]))
        center = PointSet(np.array([[1e4, 0, 0]]))
        pr = region_priors(model, center, 0.5)
        assert pr.pi.sum() == pytest.approx(1.0, abs=1e-12)

    def test_invalid_sigma(self):
        with pytest.raises(ValueError):
            region_priors(PointSet(np.zeros((1, 3))),
                          PointSet(np.zeros((1, 3))), 0.0)


class TestPosterior:
    def test_uniform_prior_equidistant_row_uniform(self):
        model = PointSet(np.array([[1.0, 0, 0], [-1, 0, 0], [0, 1, 0],
                                   [0, -1, 0]]))
        scene = PointSet(np.array([[0.0, 0, 0]]))
        w = posterior_weights(model, scene, uniform_priors(1, 4), 2.0).w
        assert w == pytest.approx(np.full((1, 4), 0.25), abs=1e-15)

    def test_one_hot_prior_dominates(self):
        model = PointSet(np.array([[0.0, 0, 0], [50.0, 0, 0]]))
        scene = PointSet(np.array([[0.5, 0, 0]]))
        pr = RegionPriors(np.array([[0.0, 1.0]]),
                          PointSet(np.zeros((1, 3))), 1.0)
        w = posterior_weights(model, scene, pr, 2.0).w
        assert w.tolist() == [[0.0, 1.0]]

    def test_known_distances_row(self):
        # distances 1, 2, 3 mm with sigma_m = 4 mm^2: the row is
        # proportional to (e^-0.25, e^-1, e^-2.25)
        model = PointSet(np.array([[1.0, 0, 0], [2.0, 0, 0],
                                   [3.0, 0, 0]]))
        scene = PointSet(np.array([[0.0, 0, 0]]))
        w = posterior_weights(model, scene, uniform_priors(1, 3), 4.0).w
        expected = np.array([0.7788007830714049, 0.36787944117144233,
                             0.10539922456186433])
        expected /= 1.2520794488047116
        assert w[0] == pytest.approx(expected, rel=1e-12)

    def test_shift_invariance_via_orthogonal_lift(self):
        # model points in the z = 0 plane; moving the scene point along
        # z adds the same constant to every squared distance of its row,
        # which must leave the posterior row unchanged
        rng = np.random.default_rng(12)
        model = rng.normal(size=(6, 3)) * 5
        model[:, 2] = 0.0
        s0 = np.array([[1.0, -2.0, 0.0]])
        s1 = s0 + [[0.0, 0.0, 7.0]]
        pr = region_priors(PointSet(model),
                           PointSet(np.array([[0.0, 0, 0]])), 4.0)
        w0 = posterior_weights(PointSet(model), PointSet(s0), pr, 3.0).w
        w1 = posterior_weights(PointSet(model), PointSet(s1), pr, 3.0).w
        assert w0 == pytest.approx(w1, rel=1e-12)

    def test_small_sigma_recovers_icp(self):
        rng = np.random.default_rng(13)
        model = rng.normal(size=(8, 3)) * 10
        scene = rng.normal(size=(15, 3)) * 10
        hard = icp_weights(PointSet(model), PointSet(scene)).w
        soft = posterior_weights(PointSet(model), PointSet(scene),
                                 uniform_priors(15, 8), 1e-6).w
        assert np.max(np.abs(soft - hard)) < 1e-12

    def test_underflow_row_survives(self):
        model = PointSet(np.array([[0.0, 0, 0], [1.0, 0, 0]]))
        scene = PointSet(np.array([[1e4, 0, 0]]))
        w = posterior_weights(model, scene, uniform_priors(1, 2), 1.0).w
        assert np.isfinite(w).all()
        assert w.sum() == pytest.approx(1.0, abs=1e-12)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            posterior_weights(PointSet(np.zeros((3, 3))),
                              PointSet(np.zeros((2, 3))),
                              uniform_priors(2, 4), 1.0)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 30), st.integers(1, 12),
           st.floats(0.1, 50.0), st.integers(0, 2 ** 31 - 1))
    def test_rows_are_probability_vectors(self, n_scene, n_model,
                                          sigma, seed):
        rng = np.random.default_rng(seed)
        model = rng.normal(size=(n_model, 3)) * 10
        scene = rng.normal(size=(n_scene, 3)) * 10
        centers = rng.normal(size=(n_scene, 3)) * 10
        pr = region_priors(PointSet(model), PointSet(centers), 5.0)
        w = posterior_weights(PointSet(model), PointSet(scene), pr,
                              sigma).w
        assert np.all(w >= 0)
        assert np.max(np.abs(w.sum(axis=1) - 1.0)) < 1e-9


class TestSchedule:
    def test_decay_and_floor(self):
        sched = SigmaSchedule(initial=25.0, decay=0.95, floor=2.0)
        assert sched.value(0) == 25.0
        assert sched.value(1) == pytest.approx(23.75)
        vals = [sched.value(t) for t in range(200)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))
        assert vals[-1] == 2.0

    def test_invalid_params(self):
        with pytest.raises(ValueError):
            SigmaSchedule(initial=-1.0)


class TestMatrixIO:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(14)
        arr = rng.normal(size=(4, 7))
        path = tmp_path / "m.txt"
        write_matrix(path, arr)
        assert np.array_equal(read_matrix(path), arr)

    def test_accepts_weights_object(self, tmp_path):
        w = icp_weights(PointSet(np.array([[0.0, 0, 0], [4.0, 0, 0]])),
                        PointSet(np.array([[3.0, 0, 0]])))
        path = tmp_path / "w.txt"
        write_matrix(path, w)
        assert np.array_equal(read_matrix(path), w.w)

    def test_malformed_header(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("shape 2 2\n1 0\n0 1\n")
        with pytest.raises(ValueError):
            read_matrix(path)
