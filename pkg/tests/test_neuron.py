import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from relpsp.neuron import (
    NO_SPIKE, T_MAX, DenseLayerParams, DimensionError, forward_layer, membrane_potential,
    solve_layer, solve_spike_time,
)
from relpsp.oracle import simulate_first_crossing


class TestMembranePotential:
    def test_single_input(self):
        assert membrane_potential([0.0], [2.0], 0.5) == 1.0

    def test_before_input_is_zero(self):
        assert membrane_potential([0.3], [1.0], 0.2) == 0.0

    def test_superposition(self):
        assert membrane_potential([0.1, 0.2], [1.0, -0.5], 0.4) == pytest.approx(0.2, abs=1e-15)

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            membrane_potential([0.1, 0.2], [1.0], 0.4)


class TestSolveSpikeTime:
    def test_single_input(self):
        t, c = solve_spike_time([0.0], [2.0], 1.0)
        assert t == 0.5
        assert c.indices == (0,)

    def test_second_prefix(self):
        t, c = solve_spike_time([0.0, 0.4], [1.0, 1.0], 1.0, 4.0)
        assert t == pytest.approx(0.7, abs=1e-15)
        assert c.indices == (0, 1)
        assert c.weight_sum == 2.0 and c.weighted_time_sum == pytest.approx(0.4)
        assert abs(t - simulate_first_crossing([0.0, 0.4], [1.0, 1.0], dt=1e-4)) < 2e-4

    def test_negative_weight_never_fires(self):
        t, c = solve_spike_time([0.0], [-1.0], 1.0)
        assert t == NO_SPIKE and c.dead

    def test_late_crossing_is_no_spike(self):
        # (1 + 0) / 0.1 = 10 > T_max
        t, c = solve_spike_time([0.0], [0.1], 1.0)
        assert t == T_MAX and c.dead

    def test_inhibition_then_recovery(self):
        # slope 1 - 2 < 0 after the second input, recovers after the third
        t, c = solve_spike_time([0.0, 0.5, 1.0], [1.0, -2.0, 3.0], 1.0)
        assert c.indices == (0, 1, 2)
        assert t == pytest.approx((1.0 + 0 - 1.0 + 3.0) / 2.0)

    def test_tie_broken_by_index(self):
        t, c = solve_spike_time([0.2, 0.2], [1.0, 1.0], 1.0)
        assert t == pytest.approx(0.7)
        assert c.indices == (0, 1)

    def test_rejects_bad_threshold(self):
        with pytest.raises(ValueError):
            solve_spike_time([0.0], [1.0], 0.0)

    def test_empty_layer_is_dead(self):
        t, c = solve_spike_time([], [], 1.0)
        assert c.dead and t == T_MAX


def _case(rng, n):
    x = rng.uniform(0, 1, n)
    w = rng.uniform(-0.5, 2.0, n) / np.sqrt(n)
    return x, w


class TestInvariants:
    def test_crossing_consistency(self, rng):
        eps = 1e-6 * T_MAX
        for _ in range(300):
            x, w = _case(rng, int(rng.integers(1, 20)))
            t, c = solve_spike_time(x, w)
            if c.dead:
                continue
            assert membrane_potential(x, w, t - eps) < 1.0 + 1e-9
            assert membrane_potential(x, w, t + eps) >= 1.0 - 1e-9

    def test_causal_partition(self, rng):
        for _ in range(300):
            x, w = _case(rng, int(rng.integers(1, 20)))
            t, c = solve_spike_time(x, w)
            if c.dead:
                continue
            members = np.zeros(len(x), bool)
            members[list(c.indices)] = True
            assert np.all(x[members] <= t)
            assert np.all(x[~members] >= t)
            assert c.weight_sum > 0

    def test_monotone_advance(self, rng):
        for _ in range(200):
            x, w = _case(rng, 10)
            t, c = solve_spike_time(x, w)
            if c.dead:
                continue
            i = c.indices[int(rng.integers(len(c.indices)))]
            w2 = w.copy()
            w2[i] += 1e-6
            assert solve_spike_time(x, w2)[0] <= t + 1e-12

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, 8, elements=st.floats(0, 1)),
           arrays(np.float64, 8, elements=st.floats(-1, 2)),
           st.floats(0.0, 0.5))
    def test_shift_equivariance(self, x, w, delta):
        t0, c0 = solve_spike_time(x, w, 1.0, t_max=100.0)
        t1, c1 = solve_spike_time(x + delta, w, 1.0, t_max=100.0)
        assert c0.dead == c1.dead
        if not c0.dead:
            assert t1 == pytest.approx(t0 + delta, rel=1e-9, abs=1e-12)

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, 8, elements=st.floats(0, 1)),
           arrays(np.float64, 8, elements=st.floats(-1, 2)),
           st.floats(0.25, 4.0))
    def test_scale_covariance(self, x, w, c):
        t0, c0 = solve_spike_time(x, w, 1.0, t_max=1e3)
        t1, c1 = solve_spike_time(c * x, w, c, t_max=1e3)
        assert c0.dead == c1.dead
        if not c0.dead:
            assert t1 == pytest.approx(c * t0, rel=1e-9, abs=1e-12)

    def test_oracle_equivalence(self, rng):
        for _ in range(100):
            n = int(rng.integers(1, 33))
            x, w = _case(rng, n)
            t, _ = solve_spike_time(x, w)
            assert abs(t - simulate_first_crossing(x, w, dt=1e-3)) <= 2e-3


class TestLayer:
    def test_identity(self):
        out, _ = forward_layer(np.array([0.0]), DenseLayerParams(np.array([[2.0]])))
        assert out.tolist() == [0.5]

    def test_symmetric_pair(self):
        out, _ = forward_layer(np.array([0.0, 0.0]), DenseLayerParams(np.ones((2, 2))))
        np.testing.assert_allclose(out, [0.5, 0.5])

    def test_output_read_only(self):
        out, _ = forward_layer(np.array([0.0]), DenseLayerParams(np.array([[2.0]])))
        with pytest.raises(ValueError):
            out[0] = 1.0

    def test_random_layer_vs_simulation(self, rng):
        x = rng.uniform(0, 1, 5)
        w = rng.uniform(0, 1, (5, 3))
        out, _ = forward_layer(x, DenseLayerParams(w))
        for j in range(3):
            assert abs(out[j] - simulate_first_crossing(x, w[:, j], dt=1e-4)) < 1e-3

    def test_kernel_matches_reference(self, rng):
        x = rng.uniform(0, 1, (50, 30))
        w = rng.uniform(-0.3, 1.0, (30, 20)) / np.sqrt(30)
        tr = solve_layer(x, np.ascontiguousarray(w.T))
        for r in range(50):
            for j in range(20):
                t, c = solve_spike_time(x[r], w[:, j])
                assert tr.times[r, j] == pytest.approx(t, rel=1e-12, abs=1e-12)
                assert tr.causal_set(r, j, w[:, j]).indices == c.indices

    def test_float32_close_to_float64(self, rng):
        x = rng.uniform(0, 1, (20, 100))
        w = rng.uniform(0, 2 / 10, (100, 10))
        t64 = solve_layer(x, np.ascontiguousarray(w.T)).times
        t32 = solve_layer(x.astype(np.float32), np.ascontiguousarray(w.T, dtype=np.float32)).times
        assert t32.dtype == np.float32
        np.testing.assert_allclose(t32, t64, atol=1e-5)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            forward_layer(np.zeros(3), DenseLayerParams(np.ones((2, 2))))

    def test_params_validation(self):
        with pytest.raises(ValueError):
            DenseLayerParams(np.ones((2, 2)), threshold=-1.0)
        with pytest.raises(ValueError):
            DenseLayerParams(np.array([[np.nan]]))

    def test_dead_marked_in_trace(self):
        _, tr = forward_layer(np.array([0.0, 0.1]), DenseLayerParams(np.array([[-1.0, 1.0], [-1.0, 1.0]])))
        assert tr.dead.tolist() == [[True, False]]
        assert tr.times[0, 0] == NO_SPIKE
