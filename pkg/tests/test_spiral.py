"""Tests for spiral trajectory generation."""

import numpy as np
import pytest

from agdeblur import spiral


READOUTS = spiral.READOUT_LENGTHS_S


class TestSampleCounts:
    @pytest.mark.parametrize("readout,expected", [
        (2.520e-3, 630), (4.016e-3, 1004), (5.320e-3, 1330), (7.936e-3, 1984)])
    def test_samples_per_interleaf(self, readout, expected):
        traj = spiral.make_spiral(64, 20.0, readout)
        assert traj.samples_per_interleaf == expected

    def test_total_samples(self):
        traj = spiral.make_spiral(32, 20.0, 2.520e-3, n_interleaves=3)
        assert traj.n_samples == 3 * 630


class TestGeometry:
    def test_k_max_value(self):
        traj = spiral.make_spiral(64, 20.0, 2.520e-3)
        assert traj.k_max == pytest.approx(64 / (2 * 20.0))

    def test_max_radius_hits_k_max_exactly(self):
        traj = spiral.make_spiral(64, 20.0, 4.016e-3)
        r = np.hypot(traj.kx, traj.ky)
        assert r.max() == pytest.approx(traj.k_max, rel=1e-12)
        nsi = traj.samples_per_interleaf
        # the last sample of every interleaf reaches the edge
        last = r.reshape(-1, nsi)[:, -1]
        np.testing.assert_allclose(last, traj.k_max, rtol=1e-12)

    def test_starts_at_center(self):
        traj = spiral.make_spiral(64, 20.0, 2.520e-3)
        nsi = traj.samples_per_interleaf
        kx = traj.kx.reshape(-1, nsi)
        ky = traj.ky.reshape(-1, nsi)
        np.testing.assert_allclose(kx[:, 0], 0.0, atol=1e-15)
        np.testing.assert_allclose(ky[:, 0], 0.0, atol=1e-15)

    def test_interleaves_are_rotated_copies(self):
        traj = spiral.make_spiral(32, 20.0, 2.520e-3, n_interleaves=4)
        nsi = traj.samples_per_interleaf
        k = (traj.kx + 1j * traj.ky).reshape(4, nsi)
        rot = np.exp(2j * np.pi / 4)
        np.testing.assert_allclose(k[1], k[0] * rot, atol=1e-12)
        np.testing.assert_allclose(k[3], k[0] * rot ** 3, atol=1e-12)

    def test_times_restart_per_interleaf(self):
        traj = spiral.make_spiral(32, 20.0, 2.520e-3, n_interleaves=3)
        nsi = traj.samples_per_interleaf
        t = traj.t.reshape(3, nsi)
        np.testing.assert_allclose(t[0], t[1])
        assert t[0, 0] == 0.0
        assert t[0, 1] == pytest.approx(spiral.DEFAULT_DT_S)


class TestNyquist:
    def test_min_interleaves_formula(self):
        n_s = 630
        expected = int(np.ceil(np.pi * 32 ** 2 / (2 * (n_s - 1))))
        assert spiral.min_interleaves(32, 2.520e-3) == expected

    def test_default_uses_min_interleaves(self):
        traj = spiral.make_spiral(64, 20.0, 2.520e-3)
        assert traj.n_interleaves == spiral.min_interleaves(64, 2.520e-3)

    def test_undersampled_request_rejected(self):
        need = spiral.min_interleaves(64, 2.520e-3)
        with pytest.raises(spiral.SpiralDesignError):
            spiral.make_spiral(64, 20.0, 2.520e-3, n_interleaves=need - 1)

    def test_oversampled_request_allowed(self):
        need = spiral.min_interleaves(64, 2.520e-3)
        traj = spiral.make_spiral(64, 20.0, 2.520e-3, n_interleaves=need + 2)
        assert traj.n_interleaves == need + 2


class TestValidation:
    @pytest.mark.parametrize("kwargs", [
        dict(matrix_size=0, fov_cm=20.0, readout_len_s=2.52e-3),
        dict(matrix_size=64, fov_cm=0.0, readout_len_s=2.52e-3),
        dict(matrix_size=64, fov_cm=20.0, readout_len_s=0.0),
    ])
    def test_non_positive_rejected(self, kwargs):
        with pytest.raises(spiral.SpiralDesignError):
            spiral.make_spiral(**kwargs)


class TestTensorExport:
    def test_trajectory_to_tensor_layout(self):
        traj = spiral.make_spiral(32, 20.0, 2.520e-3)
        t = spiral.trajectory_to_tensor(traj)
        assert t.shape == (traj.n_samples, 3)
        np.testing.assert_array_equal(t[:, 0], traj.kx)
        np.testing.assert_array_equal(t[:, 1], traj.ky)
        np.testing.assert_array_equal(t[:, 2], traj.t)

    def test_cache_key_distinguishes_designs(self):
        a = spiral.make_spiral(32, 20.0, 2.520e-3)
        b = spiral.make_spiral(32, 20.0, 4.016e-3)
        c = spiral.make_spiral(32, 24.0, 2.520e-3)
        assert len({a.cache_key(), b.cache_key(), c.cache_key()}) == 3
