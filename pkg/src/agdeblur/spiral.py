"""2D spiral k-space trajectory generation with per-sample timing.

Constant-angular-pitch Archimedean spirals with a linear radial ramp; no
gradient-amplitude or slew constraints. Interleaf j is interleaf 0 rotated by
2*pi*j/n_interleaves and every interleaf shares the same time axis (each is a
separate excitation).
"""

import math
from dataclasses import dataclass, field

import numpy as np

# The four readout durations used throughout the experiments (seconds).
READOUT_LENGTHS_S = (2.520e-3, 4.016e-3, 5.320e-3, 7.936e-3)
DEFAULT_DT_S = 4e-6


class SpiralDesignError(ValueError):
    pass


@dataclass(frozen=True)
class SpiralTrajectory:
    """Spiral sample positions (cycles/cm), per-sample times (s, t=0 at
    readout start of each interleaf), and the design parameters."""

    kx: np.ndarray
    ky: np.ndarray
    t: np.ndarray
    readout_len: float
    n_interleaves: int
    fov: float
    matrix_size: int
    dt: float = field(default=DEFAULT_DT_S)

    @property
    def n_samples(self):
        return self.kx.size

    @property
    def samples_per_interleaf(self):
        return self.kx.size // self.n_interleaves

    @property
    def k_max(self):
        """Edge of k-space in cycles/cm."""
        return self.matrix_size / (2.0 * self.fov)

    def cache_key(self):
        return (self.matrix_size, round(self.fov, 9), round(self.readout_len, 12),
                self.n_interleaves, round(self.dt, 12))


def min_interleaves(matrix_size, readout_len_s, dt_s=DEFAULT_DT_S):
    """Smallest interleaf count whose sample spacing at the k-space edge stays
    below 1/FOV (radial spacing is 1/FOV by construction for any count)."""
    n_samp = int(round(readout_len_s / dt_s))
    if n_samp < 2:
        raise SpiralDesignError("readout too short for the requested dt")
    return max(1, math.ceil(math.pi * matrix_size ** 2 / (2.0 * (n_samp - 1))))


def make_spiral(matrix_size, fov_cm, readout_len_s, n_interleaves=None,
                dt_s=DEFAULT_DT_S):
    """Build a uniform-density Archimedean spiral trajectory.

    Per interleaf: k(u) = k_max * u * exp(i * 2*pi*n_turns * u), u in [0, 1]
    over the readout, with n_turns = matrix_size / (2 * n_interleaves) so the
    combined radial pitch is exactly 1/FOV. n_interleaves defaults to the
    smallest fully-sampled (Nyquist) count for the requested readout.
    """
    if matrix_size <= 0 or fov_cm <= 0 or readout_len_s <= 0 or dt_s <= 0:
        raise SpiralDesignError("matrix_size, fov, readout length and dt must be positive")
    n_samp = int(round(readout_len_s / dt_s))
    if n_samp < 2:
        raise SpiralDesignError("readout too short for the requested dt")
    n_min = min_interleaves(matrix_size, readout_len_s, dt_s)
    if n_interleaves is None:
        n_interleaves = n_min
    n_interleaves = int(n_interleaves)
    if n_interleaves < 1:
        raise SpiralDesignError("n_interleaves must be >= 1")
    if n_interleaves < n_min:
        raise SpiralDesignError(
            f"{n_interleaves} interleaves undersample the k-space edge "
            f"(spacing > 1/FOV); need >= {n_min} for matrix {matrix_size} "
            f"at readout {readout_len_s * 1e3:.3f} ms")

    k_max = matrix_size / (2.0 * fov_cm)
    n_turns = matrix_size / (2.0 * n_interleaves)
    t_single = np.arange(n_samp) * dt_s
    u = np.arange(n_samp) / (n_samp - 1)  # last sample lands exactly on k_max
    theta0 = 2.0 * np.pi * n_turns * u
    radius = k_max * u

    kx = np.empty(n_samp * n_interleaves)
    ky = np.empty(n_samp * n_interleaves)
    for j in range(n_interleaves):
        rot = 2.0 * np.pi * j / n_interleaves
        kx[j * n_samp:(j + 1) * n_samp] = radius * np.cos(theta0 + rot)
        ky[j * n_samp:(j + 1) * n_samp] = radius * np.sin(theta0 + rot)
    t = np.tile(t_single, n_interleaves)

    return SpiralTrajectory(kx=kx, ky=ky, t=t, readout_len=readout_len_s,
                            n_interleaves=n_interleaves, fov=float(fov_cm),
                            matrix_size=int(matrix_size), dt=float(dt_s))


def trajectory_to_tensor(traj):
    """Export as an N x 3 real array (kx, ky, t) for SPDB storage."""
    return np.stack([traj.kx, traj.ky, traj.t], axis=1)
