"""Image-quality metrics (PSNR, SSIM, HFEN) on magnitude images, plus the
report container rendered as JSON and an aligned-column text table.

Conventions: every metric works on magnitude images after per-pair
normalization by max|ref|. SSIM uses an 11x11 Gaussian window (sigma 1.5,
K1=0.01, K2=0.03) with dynamic range 1 after normalization; HFEN uses a 15x15
Laplacian-of-Gaussian kernel (sigma 1.5) and is normalized by the filtered
reference.
"""

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import convolve2d

PSNR_CAP_DB = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
HFEN_KERNEL = 15
HFEN_SIGMA = 1.5


class UndefinedMetricError(ValueError):
    pass


def _norm_pair(ref, test):
    ref = np.abs(np.asarray(ref))
    test = np.abs(np.asarray(test))
    if ref.shape != test.shape:
        raise ValueError(f"shape mismatch {ref.shape} vs {test.shape}")
    peak = ref.max()
    if peak > 0:
        ref = ref / peak
        test = test / peak
    return ref, test


def psnr(ref, test):
    """10*log10(peak^2 / MSE) on magnitude images, peak = max|ref|.
    Identical images report the cap value (99 dB)."""
    r, t = _norm_pair(ref, test)
    mse = np.mean((r - t) ** 2)
    if mse == 0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(1.0 / mse))


def _gaussian_window(size, sigma):
    half = (size - 1) / 2.0
    ax = np.arange(size) - half
    g = np.exp(-ax ** 2 / (2.0 * sigma ** 2))
    win = np.outer(g, g)
    return win / win.sum()


def ssim(ref, test):
    """Mean local SSIM over the valid (fully-windowed) region."""
    r, t = _norm_pair(ref, test)
    win = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    mu_r = convolve2d(r, win, mode="valid")
    mu_t = convolve2d(t, win, mode="valid")
    s_rr = convolve2d(r * r, win, mode="valid") - mu_r ** 2
    s_tt = convolve2d(t * t, win, mode="valid") - mu_t ** 2
    s_rt = convolve2d(r * t, win, mode="valid") - mu_r * mu_t
    num = (2 * mu_r * mu_t + c1) * (2 * s_rt + c2)
    den = (mu_r ** 2 + mu_t ** 2 + c1) * (s_rr + s_tt + c2)
    return float(np.mean(num / den))


def log_kernel(size=HFEN_KERNEL, sigma=HFEN_SIGMA):
    """Zero-mean Laplacian-of-Gaussian kernel."""
    half = (size - 1) / 2.0
    ax = np.arange(size) - half
    yy, xx = np.meshgrid(ax, ax, indexing="ij")
    r2 = xx ** 2 + yy ** 2
    g = np.exp(-r2 / (2.0 * sigma ** 2))
    g /= g.sum()
    k = g * (r2 - 2.0 * sigma ** 2) / sigma ** 4
    return k - k.mean()


def hfen(ref, test):
    """||LoG(test) - LoG(ref)||_2 / ||LoG(ref)||_2 on magnitude images."""
    r, t = _norm_pair(ref, test)
    if r.max() == r.min():
        raise UndefinedMetricError("HFEN undefined: constant reference image")
    k = log_kernel()
    lr = convolve2d(r, k, mode="same", boundary="fill")
    lt = convolve2d(t, k, mode="same", boundary="fill")
    denom = np.linalg.norm(lr)
    if denom == 0:
        raise UndefinedMetricError("HFEN undefined: constant reference image")
    return float(np.linalg.norm(lt - lr) / denom)


def frame_metrics(ref, test):
    """All three metrics for one frame, plus the identical-pair flag."""
    r, t = _norm_pair(ref, test)
    identical = bool(np.array_equal(r, t))
    return {
        "psnr_db": float(psnr(ref, test)),
        "ssim": ssim(ref, test),
        "hfen": hfen(ref, test),
        "identical": identical,
    }


@dataclass
class QualityReport:
    """Per-frame metrics plus aggregates for one method/readout combination."""

    method: str
    readout_len_s: float | None = None
    frames: list = field(default_factory=list)  # dicts from frame_metrics (+id)
    seconds_per_frame: float | None = None
    params: int | None = None
    filter_sizes: tuple | None = None

    def add_frame(self, frame_id, ref, test):
        m = frame_metrics(ref, test)
        m["id"] = frame_id
        self.frames.append(m)
        return m

    def aggregate(self):
        if not self.frames:
            raise ValueError("no frames in report")
        out = {}
        for key in ("psnr_db", "ssim", "hfen"):
            vals = np.array([f[key] for f in self.frames])
            out[f"{key}_mean"] = float(vals.mean())
            out[f"{key}_std"] = float(vals.std())
        return out

    def to_dict(self):
        d = {
            "method": self.method,
            "readout_len_s": self.readout_len_s,
            "seconds_per_frame": self.seconds_per_frame,
            "params": self.params,
            "filter_sizes": list(self.filter_sizes) if self.filter_sizes else None,
            "n_frames": len(self.frames),
            "aggregate": self.aggregate(),
            "frames": self.frames,
        }
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def render_table(reports):
    """Aligned-column comparison table (HFEN shown x100, display only)."""
    header = ("Architecture", "(f1,f2)", "Params", "PSNR", "SSIM", "HFEN(x100)")
    rows = [header]
    for rep in reports:
        agg = rep.aggregate()
        fs = "-"
        if rep.filter_sizes:
            fs = f"({rep.filter_sizes[0]},{rep.filter_sizes[1]})"
        rows.append((
            rep.method,
            fs,
            str(rep.params) if rep.params is not None else "-",
            f"{agg['psnr_db_mean']:.2f}",
            f"{agg['ssim_mean']:.3f}",
            f"{agg['hfen_mean'] * 100:.3f}",
        ))
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = []
    for i, row in enumerate(rows):
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"
