"""Core array plumbing: the SPDB file container, complex<->channel views, and a
deterministic seedable RNG used for every random draw in the project.

Arrays are plain numpy ndarrays. Internal arithmetic is double precision;
on-disk payloads are binary32 (real) or interleaved binary32 pairs (complex).
"""

import hashlib
import math
import struct

import numpy as np

MAGIC = b"SPDB"
VERSION = 1
DTYPE_REAL = 0
DTYPE_COMPLEX = 1
MAX_NDIM = 4
_MAX_PAYLOAD_BYTES = 1 << 40
_MASK64 = 0xFFFFFFFFFFFFFFFF


class SpdbError(Exception):
    """Base class for SPDB container errors."""


class BadMagicError(SpdbError):
    pass


class TruncatedPayloadError(SpdbError):
    pass


class ExtentOverflowError(SpdbError):
    pass


class UnsupportedHeaderError(SpdbError):
    """Unknown version, dtype code, ndim, or nonzero reserved byte."""


def save_tensor(path, arr):
    """Write a real or complex array (ndim 1..4) as an SPDB file.

    Real data is stored as binary32, complex as interleaved binary32 pairs,
    row-major, little-endian.
    """
    arr = np.asarray(arr)
    if arr.ndim < 1 or arr.ndim > MAX_NDIM:
        raise UnsupportedHeaderError(f"ndim {arr.ndim} outside 1..{MAX_NDIM}")
    for e in arr.shape:
        if e > 0xFFFFFFFF:
            raise ExtentOverflowError(f"extent {e} exceeds uint32")
    if np.iscomplexobj(arr):
        dtype_code = DTYPE_COMPLEX
        payload = np.ascontiguousarray(arr, dtype="<c8").tobytes()
    else:
        dtype_code = DTYPE_REAL
        payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    header = MAGIC + bytes([VERSION, dtype_code, arr.ndim, 0])
    header += b"".join(struct.pack("<I", e) for e in arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def load_tensor(path):
    """Read an SPDB file. Returns float64 (real) or complex128 (complex);
    values are exactly the stored binary32 payload, so save/load round-trips
    are bit-exact for binary32 data."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise TruncatedPayloadError(f"file shorter than header: {len(raw)} bytes")
    if raw[:4] != MAGIC:
        raise BadMagicError(f"bad magic {raw[:4]!r}")
    version, dtype_code, ndim, reserved = raw[4], raw[5], raw[6], raw[7]
    if version != VERSION:
        raise UnsupportedHeaderError(f"unsupported version {version}")
    if dtype_code not in (DTYPE_REAL, DTYPE_COMPLEX):
        raise UnsupportedHeaderError(f"unknown dtype code {dtype_code}")
    if ndim < 1 or ndim > MAX_NDIM:
        raise UnsupportedHeaderError(f"ndim {ndim} outside 1..{MAX_NDIM}")
    if reserved != 0:
        raise UnsupportedHeaderError(f"reserved byte is {reserved}, expected 0")
    off = 8
    if len(raw) < off + 4 * ndim:
        raise TruncatedPayloadError("header extents truncated")
    shape = struct.unpack(f"<{ndim}I", raw[off:off + 4 * ndim])
    off += 4 * ndim
    n = math.prod(shape)
    itemsize = 8 if dtype_code == DTYPE_COMPLEX else 4
    if n * itemsize > _MAX_PAYLOAD_BYTES:
        raise ExtentOverflowError(
            f"extents {shape} imply a {n * itemsize}-byte payload")
    if len(raw) - off < n * itemsize:
        raise TruncatedPayloadError(
            f"payload holds {len(raw) - off} bytes, need {n * itemsize}")
    if dtype_code == DTYPE_COMPLEX:
        flat = np.frombuffer(raw, dtype="<c8", count=n, offset=off)
        return flat.reshape(shape).astype(np.complex128)
    flat = np.frombuffer(raw, dtype="<f4", count=n, offset=off)
    return flat.reshape(shape).astype(np.float64)


def complex_to_channels(img):
    """Complex HxW image -> real HxWx2 tensor (channel 0 real, channel 1 imag)."""
    img = np.asarray(img)
    return np.stack([img.real.astype(np.float64), img.imag.astype(np.float64)], axis=-1)


def channels_to_complex(t):
    """Real HxWx2 tensor -> complex HxW image. Inverse of complex_to_channels."""
    t = np.asarray(t)
    if t.shape[-1] != 2:
        raise ValueError(f"expected last extent 2, got {t.shape[-1]}")
    return t[..., 0] + 1j * t[..., 1]


def _splitmix64_next(z):
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    out = z
    out = ((out ^ (out >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    out = ((out ^ (out >> 27)) * 0x94D049BB133111EB) & _MASK64
    out ^= out >> 31
    return z, out


def _rotl(x, k):
    return ((x << k) | (x >> (64 - k))) & _MASK64


class Rng:
    """xoshiro256** 1.0, state filled by SplitMix64 from a 64-bit seed.

    The algorithm is fixed: identical seeds yield identical streams across
    platforms and releases. One instance per worker; not thread-safe.
    """

    ALGORITHM = "xoshiro256** 1.0 (SplitMix64-seeded)"

    def __init__(self, seed):
        self.seed = int(seed) & _MASK64
        z = self.seed
        s = []
        for _ in range(4):
            z, v = _splitmix64_next(z)
            s.append(v)
        if not any(s):
            s[0] = 1
        self._s = s
        self._spare_normal = None

    def next_u64(self):
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def random(self):
        """Uniform float64 in [0, 1)."""
        return (self.next_u64() >> 11) * (2.0 ** -53)

    def uniform(self, lo=0.0, hi=1.0):
        return lo + (hi - lo) * self.random()

    def uniform_array(self, shape, lo=0.0, hi=1.0):
        n = int(np.prod(shape))
        vals = [self.random() for _ in range(n)]
        return lo + (hi - lo) * np.array(vals).reshape(shape)

    def normal(self, mu=0.0, sigma=1.0):
        if self._spare_normal is not None:
            z = self._spare_normal
            self._spare_normal = None
        else:
            u1 = 1.0 - self.random()  # (0, 1], keeps log finite
            u2 = self.random()
            r = math.sqrt(-2.0 * math.log(u1))
            z = r * math.cos(2.0 * math.pi * u2)
            self._spare_normal = r * math.sin(2.0 * math.pi * u2)
        return mu + sigma * z

    def normal_array(self, shape, mu=0.0, sigma=1.0):
        n = int(np.prod(shape))
        vals = [self.normal(mu, sigma) for _ in range(n)]
        return np.array(vals).reshape(shape)

    def randint(self, n):
        """Uniform integer in [0, n). Plain modulo; bias is negligible for the
        small n used here and the mapping is part of the stable contract."""
        if n <= 0:
            raise ValueError("n must be positive")
        return self.next_u64() % n

    def choice(self, seq):
        return seq[self.randint(len(seq))]

    def shuffle(self, items):
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]

    def spawn(self, purpose):
        """Child Rng with a seed derived by stable hashing of (seed, purpose)."""
        return Rng(derive_seed(self.seed, purpose))

    def get_state(self):
        return tuple(self._s) + (1 if self._spare_normal is not None else 0,
                                 self._spare_normal or 0.0)

    def set_state(self, state):
        self._s = [int(v) & _MASK64 for v in state[:4]]
        self._spare_normal = float(state[5]) if state[4] else None


def derive_seed(root_seed, purpose):
    """Stable 64-bit sub-seed from a root seed and a purpose string."""
    h = hashlib.sha256()
    h.update(struct.pack("<Q", int(root_seed) & _MASK64))
    h.update(purpose.encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "little")
