"""Synthetic vocal-tract-like phantoms and the dataset synthesis pipeline.

A phantom is a handful of smooth random blobs (harmonically deformed
ellipses) with piecewise-constant magnitude, carved by one elongated
low-intensity airway channel, under a smooth random phase. Its field map is
boundary-weighted: a smooth polynomial plus Gaussian bumps at air-tissue
boundary pixels, where off-resonance artifacts concentrate.

Dataset synthesis draws per-frame augmentation (alpha, beta) and readout
length, simulates spiral k-space with the augmented map, and reconstructs the
blurred input by ignoring the map. Subject groups are split disjointly into
train/val/test roles.
"""

import json
import math
import os
from dataclasses import dataclass, asdict

import numpy as np
from scipy import ndimage

from . import encoder, spiral, tensors

TISSUE_THRESHOLD = 0.15
AIRWAY_LEVEL = 0.05
SMOOTH_SIGMA_PX = 1.0


def bandlimit(img, sigma=SMOOTH_SIGMA_PX):
    """Gaussian low-pass applied as an exact spectral multiplier.

    Acquired ground truth is inherently band-limited; a truncated spatial
    kernel would leave spectral sidelobes, so the transfer function is applied
    in the Fourier domain instead.
    """
    h, w = img.shape
    ky = np.fft.fftfreq(h) * 2.0 * math.pi
    kx = np.fft.fftfreq(w) * 2.0 * math.pi
    om2 = ky[:, None] ** 2 + kx[None, :] ** 2
    out = np.fft.ifft2(np.fft.fft2(img) * np.exp(-0.5 * sigma ** 2 * om2))
    return out if np.iscomplexobj(img) else out.real


class DatasetError(ValueError):
    pass


@dataclass
class Phantom:
    image: np.ndarray          # complex (H, W)
    tissue_mask: np.ndarray    # bool (H, W)
    boundary_mask: np.ndarray  # bool (H, W)
    fieldmap: np.ndarray       # float Hz (H, W)


def _blob_mask(h, w, rng):
    """One smoothly deformed ellipse as a boolean mask."""
    cy = rng.uniform(0.2, 0.8) * h
    cx = rng.uniform(0.2, 0.8) * w
    r0 = rng.uniform(0.10, 0.28) * min(h, w)
    aspect = rng.uniform(0.6, 1.6)
    tilt = rng.uniform(0.0, math.pi)
    harm = [(m, rng.uniform(-0.2, 0.2) / m, rng.uniform(0, 2 * math.pi))
            for m in (2, 3, 4)]
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    dy, dx = yy - cy, xx - cx
    ry = dy * math.cos(tilt) - dx * math.sin(tilt)
    rx = (dy * math.sin(tilt) + dx * math.cos(tilt)) / aspect
    dist = np.hypot(ry, rx)
    theta = np.arctan2(ry, rx)
    radius = r0 * (1.0 + sum(a * np.cos(m * theta + p) for m, a, p in harm))
    return dist <= radius


def _airway_mask(h, w, rng):
    """Elongated low-intensity channel: a quadratic curve of random width."""
    x0 = rng.uniform(0.25, 0.75) * w
    x1 = rng.uniform(0.25, 0.75) * w
    xc = rng.uniform(0.1, 0.9) * w
    width = rng.uniform(1.2, 2.8)
    mask = np.zeros((h, w), dtype=bool)
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    ts = np.linspace(0.0, 1.0, 4 * h)
    cy = ts * (h - 1)
    cx = (1 - ts) ** 2 * x0 + 2 * ts * (1 - ts) * xc + ts ** 2 * x1
    for py, px in zip(cy, cx):
        mask |= (yy - py) ** 2 + (xx - px) ** 2 <= width ** 2
    return mask


def make_phantom(h, w, rng):
    """Deterministic phantom from an Rng stream. Tissue fill is forced into
    [0.2, 0.8] by regeneration from the same stream."""
    for _ in range(64):
        mag = np.zeros((h, w))
        n_blobs = 3 + rng.randint(6)
        for _ in range(n_blobs):
            level = rng.uniform(0.3, 1.0)
            mag[_blob_mask(h, w, rng)] = level
        mag[_airway_mask(h, w, rng)] *= AIRWAY_LEVEL
        tissue = mag > TISSUE_THRESHOLD
        fill = tissue.mean()
        if 0.2 <= fill <= 0.8:
            break
    else:
        raise DatasetError("could not generate a phantom with sane tissue fill")

    struct = np.ones((3, 3), dtype=bool)
    boundary = ndimage.binary_dilation(tissue, struct) & ~ndimage.binary_erosion(
        tissue, struct)
    phase = encoder.poly_field_map(h, w, rng.uniform_array(6, -1.0, 1.0),
                                   peak_hz=1.0)
    phase = phase * (math.pi / 4.0) * rng.uniform(0.3, 1.0)
    image = bandlimit(mag * np.exp(1j * phase))
    fmap = encoder.make_synthetic_field_map(h, w, rng, "boundary-weighted",
                                            boundary_mask=boundary)
    return Phantom(image=image, tissue_mask=tissue, boundary_mask=boundary,
                   fieldmap=fmap)


@dataclass
class TrajConfig:
    fov_cm: float = 20.0
    dt_s: float = spiral.DEFAULT_DT_S
    n_interleaves: int | None = None  # None = smallest fully-sampled count


def synth_pair(phantom, readout_len_s, aug, traj_cfg=None, cg_iters=30,
               cg_tol=1e-4):
    """(blurred input, ground truth, augmented field map) for one frame.

    The blurred input is the reconstruction that ignores off-resonance:
    cg_recon(forward(truth, f'), fieldmap=None).
    """
    if traj_cfg is None:
        traj_cfg = TrajConfig()
    truth = phantom.image
    h, w = truth.shape
    if h != w:
        raise DatasetError("phantoms must be square for spiral synthesis")
    fmap = encoder.augment_field_map(phantom.fieldmap, aug)
    traj = spiral.make_spiral(h, traj_cfg.fov_cm, readout_len_s,
                              traj_cfg.n_interleaves, traj_cfg.dt_s)
    ksp = encoder.forward(truth, fmap, traj)
    blurred = encoder.cg_recon(ksp, None, iters=cg_iters, tol=cg_tol)
    return blurred, truth, fmap


@dataclass
class DatasetConfig:
    n_groups: int = 12
    frames_per_group: int = 50
    height: int = 64
    width: int = 64
    fov_cm: float = 20.0
    dt_s: float = spiral.DEFAULT_DT_S
    readouts: tuple = spiral.READOUT_LENGTHS_S
    alpha_range: tuple = encoder.ALPHA_RANGE
    beta_range: tuple = encoder.BETA_RANGE_HZ
    cg_iters: int = 30
    cg_tol: float = 1e-4
    noise_std: float = 0.0  # optional additive complex k-space noise, off by default
    seed: int = 0


@dataclass
class DatasetEntry:
    id: str
    role: str
    group: int
    readout_len_s: float
    alpha: float
    beta: float
    input_path: str
    target_path: str
    fmap_path: str
    ksp_path: str
    traj_path: str


def split_roles(n_groups):
    """Disjoint group split, roughly 70/15/15 with at least one group each."""
    if n_groups < 3:
        raise DatasetError(f"need >= 3 subject groups for a split, got {n_groups}")
    n_test = max(1, round(0.15 * n_groups))
    n_val = max(1, round(0.15 * n_groups))
    n_train = n_groups - n_val - n_test
    roles = {}
    for g in range(n_groups):
        if g < n_train:
            roles[g] = "train"
        elif g < n_train + n_val:
            roles[g] = "val"
        else:
            roles[g] = "test"
    return roles


def plan_entries(config):
    """Draw all per-frame randomness up front; returns (entries, phantom seeds).
    Every draw comes from an entry-keyed sub-stream, so the plan is independent
    of generation order."""
    root = tensors.Rng(config.seed)
    roles = split_roles(config.n_groups)
    entries = []
    for g in range(config.n_groups):
        role = roles[g]
        for fidx in range(config.frames_per_group):
            eid = f"g{g:03d}_f{fidx:03d}"
            draw = root.spawn(f"draw/{eid}")
            alpha = draw.uniform(*config.alpha_range)
            beta = draw.uniform(*config.beta_range)
            readout = config.readouts[draw.randint(len(config.readouts))]
            base = os.path.join(role, f"g{g:03d}", f"f{fidx:03d}")
            entries.append(DatasetEntry(
                id=eid, role=role, group=g, readout_len_s=float(readout),
                alpha=float(alpha), beta=float(beta),
                input_path=base + ".input.spdb",
                target_path=base + ".target.spdb",
                fmap_path=base + ".fmap.spdb",
                ksp_path=base + ".ksp.spdb",
                traj_path=base + ".traj.spdb"))
    return entries


def build_dataset(config, out_dir, progress=None):
    """Generate all frames and write SPDB files plus a JSON manifest.

    Frames are synthesized in readout-length order to keep the encoding-matrix
    cache warm; outputs are deterministic per entry regardless of order.
    """
    entries = plan_entries(config)
    root = tensors.Rng(config.seed)
    traj_cfg = TrajConfig(fov_cm=config.fov_cm, dt_s=config.dt_s)
    os.makedirs(out_dir, exist_ok=True)
    for entry in sorted(entries, key=lambda e: (e.readout_len_s, e.id)):
        prng = root.spawn(f"phantom/{entry.id}")
        phantom = make_phantom(config.height, config.width, prng)
        aug = encoder.AugmentationParams(alpha=entry.alpha, beta=entry.beta)
        fmap = encoder.augment_field_map(phantom.fieldmap, aug)
        traj = spiral.make_spiral(config.height, traj_cfg.fov_cm,
                                  entry.readout_len_s, traj_cfg.n_interleaves,
                                  traj_cfg.dt_s)
        ksp = encoder.forward(phantom.image, fmap, traj)
        if config.noise_std > 0:
            nrng = root.spawn(f"noise/{entry.id}")
            noise = (nrng.normal_array(ksp.samples.shape)
                     + 1j * nrng.normal_array(ksp.samples.shape))
            ksp.samples = ksp.samples + config.noise_std * noise
        blurred = encoder.cg_recon(ksp, None, iters=config.cg_iters,
                                   tol=config.cg_tol)
        for rel, arr in ((entry.input_path, blurred),
                         (entry.target_path, phantom.image),
                         (entry.fmap_path, fmap),
                         (entry.ksp_path, ksp.samples),
                         (entry.traj_path, spiral.trajectory_to_tensor(traj))):
            path = os.path.join(out_dir, rel)
            os.makedirs(os.path.dirname(path), exist_ok=True)
            tensors.save_tensor(path, arr)
        if progress is not None:
            progress(entry)
    manifest = {"seed": config.seed, "config": asdict(config),
                "entries": [asdict(e) for e in entries]}
    manifest["config"]["readouts"] = list(manifest["config"]["readouts"])
    manifest["config"]["alpha_range"] = list(manifest["config"]["alpha_range"])
    manifest["config"]["beta_range"] = list(manifest["config"]["beta_range"])
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def load_manifest(path):
    with open(path) as fh:
        return json.load(fh)


def manifest_entries(manifest, role=None):
    out = [DatasetEntry(**e) for e in manifest["entries"]]
    if role is not None:
        out = [e for e in out if e.role == role]
    return out
