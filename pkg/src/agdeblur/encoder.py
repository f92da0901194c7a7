"""Physics core: discrete-object forward model with off-resonance, its
adjoint, CG least-squares reconstruction, and field-map synthesis/augmentation.

The signal model treats the image as a sum of point emitters,

    s(t_m) = sum_n m(x_n) * exp(-i 2 pi f(x_n) t_m) * exp(-i 2 pi k_m . x_n),

with pixel coordinates x_n at (n + 1/2)/N - 1/2 in FOV units and k in
cycles/FOV inside the phase (trajectories store cycles/cm; the FOV factor is
applied here). Everything is direct summation: at <= 64x64 with ~8K samples
exactness beats speed, and the cached encoding matrix doubles as its own
oracle. The zero-field matrix is cached when it fits in 512 MB, otherwise
applied in row chunks on the fly.
"""

from dataclasses import dataclass

import numpy as np

FIELD_MAP_LIMIT_HZ = 1000.0  # sanity bound for 1.5 T vocal-tract imaging
ALPHA_RANGE = (0.0, 3.15)
BETA_RANGE_HZ = (-200.0, 200.0)
MATRIX_CACHE_LIMIT_BYTES = 512 << 20
_CHUNK_BYTES = 64 << 20


class DimensionMismatchError(ValueError):
    pass


class ValidationError(ValueError):
    pass


class DivergenceError(RuntimeError):
    def __init__(self, iteration, message):
        super().__init__(message)
        self.iteration = iteration


@dataclass(frozen=True)
class AugmentationParams:
    """Field-map augmentation f' = alpha * f + beta."""

    alpha: float
    beta: float

    def __post_init__(self):
        if not (ALPHA_RANGE[0] <= self.alpha <= ALPHA_RANGE[1]):
            raise ValidationError(f"alpha {self.alpha} outside {ALPHA_RANGE}")
        if not (BETA_RANGE_HZ[0] <= self.beta <= BETA_RANGE_HZ[1]):
            raise ValidationError(f"beta {self.beta} Hz outside {BETA_RANGE_HZ}")


@dataclass
class KspaceData:
    """Complex k-space samples aligned 1:1 with a trajectory."""

    samples: np.ndarray
    traj: object

    def __post_init__(self):
        if self.samples.size != self.traj.n_samples:
            raise DimensionMismatchError(
                f"{self.samples.size} samples vs trajectory with {self.traj.n_samples}")


def check_field_map(f):
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 2:
        raise ValidationError("field map must be 2D")
    if not np.all(np.isfinite(f)):
        raise ValidationError("field map has non-finite entries")
    if np.max(np.abs(f)) > FIELD_MAP_LIMIT_HZ:
        raise ValidationError(
            f"|field map| exceeds {FIELD_MAP_LIMIT_HZ} Hz sanity bound")
    return f


def augment_field_map(f, params):
    """Per-pixel f' = alpha * f + beta, clamped to the +-1000 Hz sanity bound."""
    f = check_field_map(f)
    out = params.alpha * f + params.beta
    return np.clip(out, -FIELD_MAP_LIMIT_HZ, FIELD_MAP_LIMIT_HZ)


def grid_coords(h, w):
    """Pixel-center coordinates in FOV units: (n + 1/2)/N - 1/2 per axis.
    Returns (y, x) with y indexing rows."""
    y = (np.arange(h) + 0.5) / h - 0.5
    x = (np.arange(w) + 0.5) / w - 0.5
    return y, x


def _flat_coords(shape):
    h, w = shape
    y, x = grid_coords(h, w)
    yy, xx = np.meshgrid(y, x, indexing="ij")
    return yy.ravel(), xx.ravel()


_matrix_cache = {}


def _zero_field_matrix(traj, shape):
    """Cached N x P zero-field encoding matrix, or None if it exceeds the
    memory budget. LRU of 2 entries."""
    n, p = traj.n_samples, shape[0] * shape[1]
    if n * p * 16 > MATRIX_CACHE_LIMIT_BYTES:
        return None
    key = (traj.cache_key(), shape)
    if key in _matrix_cache:
        e = _matrix_cache.pop(key)
        _matrix_cache[key] = e  # refresh LRU position
        return e
    yy, xx = _flat_coords(shape)
    kxf = traj.kx * traj.fov  # cycles/FOV
    kyf = traj.ky * traj.fov
    e = np.empty((n, p), dtype=np.complex128)
    rows = max(1, _CHUNK_BYTES // (p * 16))
    for i in range(0, n, rows):
        sl = slice(i, min(i + rows, n))
        phase = np.outer(kxf[sl], xx)
        phase += np.outer(kyf[sl], yy)
        np.exp(-2j * np.pi * phase, out=e[sl])
    while len(_matrix_cache) >= 2:
        _matrix_cache.pop(next(iter(_matrix_cache)))
    _matrix_cache[key] = e
    return e


def _field_row_factor(traj, f_flat):
    """exp(-i 2 pi t f) for the unique per-interleaf time axis; row m of the
    full factor is row (m mod samples_per_interleaf)."""
    t_single = traj.t[:traj.samples_per_interleaf]
    return np.exp(-2j * np.pi * np.outer(t_single, f_flat))


def _is_zero_field(fieldmap):
    return fieldmap is None or not np.any(fieldmap)


class EncodingOperator:
    """A_f: image -> k-space for one trajectory and (optional) field map.

    Materializes the field-aware matrix when it fits in the memory budget,
    otherwise applies chunk-by-chunk. Reductions are plain fixed-order BLAS
    calls, so results are reproducible for a fixed thread count.
    """

    def __init__(self, traj, shape, fieldmap=None):
        self.traj = traj
        self.shape = shape
        if fieldmap is not None:
            fieldmap = check_field_map(fieldmap)
            if fieldmap.shape != tuple(shape):
                raise DimensionMismatchError(
                    f"field map {fieldmap.shape} vs image {tuple(shape)}")
        self.fieldmap = None if _is_zero_field(fieldmap) else fieldmap
        self._e0 = _zero_field_matrix(traj, shape)
        self._e = None
        if self._e0 is not None:
            if self.fieldmap is None:
                self._e = self._e0
            else:
                fac = _field_row_factor(traj, self.fieldmap.ravel())
                nsi = traj.samples_per_interleaf
                tidx = np.arange(traj.n_samples) % nsi
                self._e = self._e0 * fac[tidx]

    def _chunks(self):
        n, p = self.traj.n_samples, self.shape[0] * self.shape[1]
        yy, xx = _flat_coords(self.shape)
        kxf = self.traj.kx * self.traj.fov
        kyf = self.traj.ky * self.traj.fov
        f_flat = None if self.fieldmap is None else self.fieldmap.ravel()
        rows = max(1, _CHUNK_BYTES // (p * 16))
        for i in range(0, n, rows):
            sl = slice(i, min(i + rows, n))
            phase = np.outer(kxf[sl], xx)
            phase += np.outer(kyf[sl], yy)
            if f_flat is not None:
                phase += np.outer(self.traj.t[sl], f_flat)
            yield sl, np.exp(-2j * np.pi * phase)

    def apply(self, m_flat):
        if self._e is not None:
            return self._e @ m_flat
        out = np.empty(self.traj.n_samples, dtype=np.complex128)
        for sl, e in self._chunks():
            out[sl] = e @ m_flat
        return out

    def apply_adjoint(self, s):
        # conj(E^T conj(s)) avoids materializing E.conj()
        if self._e is not None:
            return np.conj(self._e.T @ np.conj(s))
        acc = np.zeros(self.shape[0] * self.shape[1], dtype=np.complex128)
        for sl, e in self._chunks():
            acc += e.T @ np.conj(s[sl])
        return np.conj(acc)


def forward(img, fieldmap, traj):
    """Simulate spiral k-space data from an image and a field map (None or
    all-zero for on-resonance). Linear in the image."""
    img = np.asarray(img, dtype=np.complex128)
    if img.ndim != 2:
        raise DimensionMismatchError("image must be 2D")
    if fieldmap is not None and np.asarray(fieldmap).shape != img.shape:
        raise DimensionMismatchError(
            f"field map {np.asarray(fieldmap).shape} vs image {img.shape}")
    if _is_zero_field(fieldmap):
        op = EncodingOperator(traj, img.shape, None)
        return KspaceData(op.apply(img.ravel()), traj)
    fieldmap = check_field_map(fieldmap)
    e0 = _zero_field_matrix(traj, img.shape)
    if e0 is None:
        op = EncodingOperator(traj, img.shape, fieldmap)
        return KspaceData(op.apply(img.ravel()), traj)
    # reuse the cached zero-field matrix; field factor applied per row chunk
    m = img.ravel()
    fac = _field_row_factor(traj, fieldmap.ravel())
    nsi = traj.samples_per_interleaf
    n = traj.n_samples
    out = np.empty(n, dtype=np.complex128)
    rows = max(1, _CHUNK_BYTES // (m.size * 16))
    for i in range(0, n, rows):
        sl = slice(i, min(i + rows, n))
        out[sl] = (e0[sl] * fac[np.arange(sl.start, sl.stop) % nsi]) @ m
    return KspaceData(out, traj)


def density_weights(traj):
    """Ramp density compensation: w proportional to |k|, k=0 samples get half
    the first nonzero weight, normalized to sum 1 (unit-gain point response)."""
    r = np.hypot(traj.kx, traj.ky)
    w = r.copy()
    nz = r > 1e-12 * max(traj.k_max, 1.0)
    if np.any(nz):
        w[~nz] = 0.5 * np.min(r[nz])
    else:
        w[:] = 1.0
    return w / np.sum(w)


def adjoint(ksp, demod_hz=0.0, dcf=True):
    """Density-weighted adjoint (conjugate-phase basis image) at a single
    demodulation frequency. dcf=False uses unit weights (adjoint-test mode)."""
    traj = ksp.traj
    shape = _infer_shape(traj)
    s = ksp.samples
    if demod_hz:
        s = s * np.exp(2j * np.pi * demod_hz * traj.t)
    if dcf:
        s = s * density_weights(traj)
    op = EncodingOperator(traj, shape, None)
    return op.apply_adjoint(s).reshape(shape)


def _infer_shape(traj):
    return (traj.matrix_size, traj.matrix_size)


def cg_recon(ksp, fieldmap, iters=30, tol=1e-8, residual_history=None):
    """Least-squares image estimate via CGLS on the normal equations of the
    field-aware forward model. fieldmap None / all-zero reconstructs while
    ignoring off-resonance, which defines the blurred input image.

    Stops at `iters` iterations or when the relative data residual drops below
    `tol`. Raises DivergenceError if the residual grows 10x above its start.
    If residual_history is a list, the data residual norm is appended once per
    completed iteration.
    """
    if iters < 1:
        raise ValidationError("iters must be >= 1")
    traj = ksp.traj
    shape = _infer_shape(traj)
    op = EncodingOperator(traj, shape, fieldmap)
    s = ksp.samples
    s_norm = np.linalg.norm(s)
    if s_norm == 0:
        return np.zeros(shape, dtype=np.complex128)

    x = np.zeros(shape[0] * shape[1], dtype=np.complex128)
    r = s.copy()
    g = op.apply_adjoint(r)
    p = g.copy()
    gamma = np.vdot(g, g).real
    r0 = s_norm
    for it in range(iters):
        if gamma == 0:
            break
        q = op.apply(p)
        qq = np.vdot(q, q).real
        if qq == 0:
            break
        alpha = gamma / qq
        x += alpha * p
        r -= alpha * q
        rn = np.linalg.norm(r)
        if residual_history is not None:
            residual_history.append(rn)
        if rn > 10.0 * r0:
            raise DivergenceError(it, f"CG residual grew 10x at iteration {it}")
        if rn / s_norm < tol:
            break
        g = op.apply_adjoint(r)
        gamma_new = np.vdot(g, g).real
        p = g + (gamma_new / gamma) * p
        gamma = gamma_new
    return x.reshape(shape)


def poly_field_map(h, w, coeffs, peak_hz=150.0):
    """Second-order 2D polynomial field map over [-1, 1]^2 scaled so its
    maximum magnitude equals peak_hz (zero coefficients give a zero map)."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.size != 6:
        raise ValidationError("need 6 coefficients: 1, x, y, x^2, xy, y^2")
    y = np.linspace(-1.0, 1.0, h)
    x = np.linspace(-1.0, 1.0, w)
    yy, xx = np.meshgrid(y, x, indexing="ij")
    f = (coeffs[0] + coeffs[1] * xx + coeffs[2] * yy
         + coeffs[3] * xx ** 2 + coeffs[4] * xx * yy + coeffs[5] * yy ** 2)
    m = np.max(np.abs(f))
    if m > 0:
        f = f * (peak_hz / m)
    return f


def make_synthetic_field_map(h, w, rng, style="smooth-poly", boundary_mask=None):
    """Synthesize a field map. "smooth-poly" is a random second-order
    polynomial scaled to +-150 Hz; "boundary-weighted" adds Gaussian bumps
    (sigma 2-5 px, amplitude +-100 Hz) at air-tissue boundary pixels of a
    companion phantom. Output clamped to +-350 Hz pre-augmentation."""
    if style not in ("smooth-poly", "boundary-weighted"):
        raise ValidationError(f"unknown field-map style {style!r}")
    coeffs = rng.uniform_array(6, -1.0, 1.0)
    f = poly_field_map(h, w, coeffs)
    if style == "boundary-weighted":
        if boundary_mask is None:
            raise ValidationError("boundary-weighted style needs a boundary mask")
        centers = np.flatnonzero(np.asarray(boundary_mask).ravel())
        if centers.size:
            yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
            n_bumps = 3 + rng.randint(6)
            for _ in range(n_bumps):
                c = centers[rng.randint(centers.size)]
                cy, cx = divmod(int(c), w)
                amp = rng.uniform(-100.0, 100.0)
                sigma = rng.uniform(2.0, 5.0)
                d2 = (yy - cy) ** 2 + (xx - cx) ** 2
                f = f + amp * np.exp(-d2 / (2.0 * sigma ** 2))
    return np.clip(f, -350.0, 350.0)
