"""Unsupervised fusion-quality metrics and dataset-level evaluation.

The metric literature carries several variants per name; the exact
definitions pinned here are recorded in ``METRIC_VARIANTS`` and embedded in
every report so numbers stay comparable across runs:

- EN: Shannon entropy (bits) of the 256-bin histogram of round(p*255).
- SD: population standard deviation on the 0-255 scale.
- SF: sqrt(RF^2 + CF^2), RMS of horizontal/vertical first differences, 0-255.
- MI: MI(fused; a) + MI(fused; b) in bits from 256-bin joint histograms.
- SCD: CC(fused - b, a) + CC(fused - a, b); degenerate terms score 0.
- VIF: four-scale pixel-domain visual information fidelity (sigma_n^2 = 2 on
  the 0-255 scale), averaged over the two source references.
- Qabf: Sobel edge-transfer quality with sigmoid preservation factors
  normalized so perfect transfer scores ~1, weighted by source edge strength.
- SSIM: mean local SSIM, 11x11 Gaussian window (sigma 1.5), C1=(0.01)^2,
  C2=(0.03)^2 on the [0,1] range, averaged over the two source references.
"""

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import convolve2d

from . import __version__ as _pkg_version
from .data import Image, load_image, _list_rasters
from .errors import DegenerateInputError, EmptyDatasetError, PairingError, ShapeError

METRIC_NAMES = ("en", "sd", "sf", "mi", "scd", "vif", "qabf", "ssim")

METRIC_VARIANTS = {
    "en": "shannon entropy, 256 bins of round(255*p), log2",
    "sd": "population std * 255",
    "sf": "sqrt(mean(dh^2) + mean(dv^2)) * 255, first differences",
    "mi": "MI(f;a)+MI(f;b), 256-bin joint histogram, log2",
    "scd": "CC(f-b, a) + CC(f-a, b), degenerate term -> 0",
    "vif": "pixel-domain 4-scale VIF, sigma_n^2=2 (0-255 scale), mean of two refs",
    "qabf": "sobel strength/orientation transfer, sigmoid factors "
    "(0.9999,19,0.5)/(0.9995,22,0.5), edge-strength weighted",
    "ssim": "gaussian 11x11 sigma=1.5, C1=1e-4, C2=9e-4, L=1, mean of two refs",
}


def _pixels(img):
    if isinstance(img, Image):
        arr = img.pixels
    else:
        arr = np.asarray(img)
    if arr.ndim != 2:
        raise ShapeError(f"metric input must be 2-D, got shape {arr.shape}")
    return arr.astype(np.float64)


def _check_triple(fused, a, b):
    f, xa, xb = _pixels(fused), _pixels(a), _pixels(b)
    if not (f.shape == xa.shape == xb.shape):
        raise ShapeError(
            f"metric inputs must share a shape: {f.shape}, {xa.shape}, {xb.shape}"
        )
    return f, xa, xb


def _histogram_256(arr):
    levels = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.int64)
    return np.bincount(levels.ravel(), minlength=256).astype(np.float64)


def entropy(img):
    """Shannon entropy (bits) of the 256-bin intensity histogram."""
    counts = _histogram_256(_pixels(img))
    p = counts / counts.sum()
    nz = p[p > 0]
    return float(-(nz * np.log2(nz)).sum())


def std_dev(img):
    """Population standard deviation of intensities on the 0-255 scale."""
    return float(_pixels(img).std() * 255.0)


def spatial_frequency(img):
    """sqrt(RF^2 + CF^2) from RMS first differences, 0-255 scale."""
    arr = _pixels(img)
    if arr.shape[0] < 2 or arr.shape[1] < 2:
        raise DegenerateInputError("spatial frequency needs at least 2x2 pixels")
    rf2 = np.mean((arr[:, 1:] - arr[:, :-1]) ** 2)
    cf2 = np.mean((arr[1:, :] - arr[:-1, :]) ** 2)
    return float(np.sqrt(rf2 + cf2) * 255.0)


def _mutual_information_pair(x, y):
    levels_x = np.clip(np.rint(x * 255.0), 0, 255).astype(np.int64).ravel()
    levels_y = np.clip(np.rint(y * 255.0), 0, 255).astype(np.int64).ravel()
    joint = np.zeros((256, 256), dtype=np.float64)
    np.add.at(joint, (levels_x, levels_y), 1.0)
    joint /= joint.sum()
    px = joint.sum(axis=1)
    py = joint.sum(axis=0)
    nz = joint > 0
    return float(
        (joint[nz] * np.log2(joint[nz] / (np.outer(px, py)[nz]))).sum()
    )


def mutual_information(fused, a, b):
    """MI(fused; a) + MI(fused; b) in bits."""
    f, xa, xb = _check_triple(fused, a, b)
    return _mutual_information_pair(f, xa) + _mutual_information_pair(f, xb)


def _safe_cc(x, y):
    xc = x - x.mean()
    yc = y - y.mean()
    den = np.sqrt((xc * xc).sum() * (yc * yc).sum())
    if den == 0.0:
        return None
    return float((xc * yc).sum() / den)


def scd(fused, a, b):
    """Sum of correlations of differences; a degenerate term contributes 0."""
    f, xa, xb = _check_triple(fused, a, b)
    term1 = _safe_cc(f - xb, xa)
    term2 = _safe_cc(f - xa, xb)
    return (term1 or 0.0) + (term2 or 0.0)


def _vif_single(ref, dist):
    """Pixel-domain VIF of dist against one reference, both on 0-255 scale."""
    sigma_nsq = 2.0
    eps = 1e-10
    num = 0.0
    den = 0.0
    for scale in range(1, 5):
        n = 2 ** (4 - scale + 1) + 1
        sd = n / 5.0
        half = (n - 1) / 2.0
        yy, xx = np.ogrid[-half : half + 1, -half : half + 1]
        win = np.exp(-(xx * xx + yy * yy) / (2.0 * sd * sd))
        win /= win.sum()

        if scale > 1:
            if min(ref.shape) < n:
                raise DegenerateInputError(
                    f"image too small for 4-scale VIF at scale {scale}"
                )
            ref = convolve2d(ref, win, mode="valid")[::2, ::2]
            dist = convolve2d(dist, win, mode="valid")[::2, ::2]
        if min(ref.shape) < n:
            raise DegenerateInputError(f"image too small for 4-scale VIF at scale {scale}")

        mu1 = convolve2d(ref, win, mode="valid")
        mu2 = convolve2d(dist, win, mode="valid")
        sigma1_sq = convolve2d(ref * ref, win, mode="valid") - mu1 * mu1
        sigma2_sq = convolve2d(dist * dist, win, mode="valid") - mu2 * mu2
        sigma12 = convolve2d(ref * dist, win, mode="valid") - mu1 * mu2
        sigma1_sq = np.maximum(sigma1_sq, 0.0)
        sigma2_sq = np.maximum(sigma2_sq, 0.0)

        g = sigma12 / (sigma1_sq + eps)
        sv_sq = sigma2_sq - g * sigma12

        g[sigma1_sq < eps] = 0.0
        sv_sq[sigma1_sq < eps] = sigma2_sq[sigma1_sq < eps]
        sigma1_sq[sigma1_sq < eps] = 0.0
        g[sigma2_sq < eps] = 0.0
        sv_sq[sigma2_sq < eps] = 0.0
        sv_sq[g < 0] = sigma2_sq[g < 0]
        g[g < 0] = 0.0
        sv_sq[sv_sq <= eps] = eps

        num += np.log10(1.0 + g * g * sigma1_sq / (sv_sq + sigma_nsq)).sum()
        den += np.log10(1.0 + sigma1_sq / sigma_nsq).sum()

    if den == 0.0:
        # Reference carries no information at all; identical images are
        # trivially faithful.
        return 1.0
    return float(num / den)


def vif(fused, a, b):
    """Four-scale pixel-domain VIF, averaged over the two source references."""
    f, xa, xb = _check_triple(fused, a, b)
    f, xa, xb = f * 255.0, xa * 255.0, xb * 255.0
    return 0.5 * (_vif_single(xa, f) + _vif_single(xb, f))


_QABF_SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
_QABF_SOBEL_Y = np.array([[1, 2, 1], [0, 0, 0], [-1, -2, -1]], dtype=np.float64)


def _edge_strength_orientation(arr):
    from scipy.ndimage import convolve

    gx = convolve(arr, _QABF_SOBEL_X, mode="reflect")
    gy = convolve(arr, _QABF_SOBEL_Y, mode="reflect")
    strength = np.sqrt(gx * gx + gy * gy)
    orientation = np.arctan2(gy, gx)
    return strength, orientation


def _preservation(g_src, a_src, g_fused, a_fused):
    big = np.maximum(g_src, g_fused)
    ratio = np.where(big > 0, np.minimum(g_src, g_fused) / np.where(big > 0, big, 1.0), 1.0)
    delta = np.abs(a_src - a_fused) % np.pi
    # Orientation is modulo pi (a flipped gradient is the same edge).
    delta = np.minimum(delta, np.pi - delta)
    align = 1.0 - delta / (np.pi / 2.0)
    qg = 0.9999 / (1.0 + np.exp(-19.0 * (ratio - 0.5)))
    qa = 0.9995 / (1.0 + np.exp(-22.0 * (align - 0.5)))
    return qg * qa


def qabf(fused, a, b):
    """Edge-transfer quality in [0, 1], weighted by source edge strength."""
    f, xa, xb = _check_triple(fused, a, b)
    gf, af = _edge_strength_orientation(f)
    ga, aa = _edge_strength_orientation(xa)
    gb, ab = _edge_strength_orientation(xb)
    qaf = _preservation(ga, aa, gf, af)
    qbf = _preservation(gb, ab, gf, af)
    weight_sum = (ga + gb).sum()
    # Guard against summation residue on constant inputs.
    if weight_sum <= 1e-8:
        return 0.0
    return float((qaf * ga + qbf * gb).sum() / weight_sum)


def ssim(x, y):
    """Mean local SSIM with an 11x11 Gaussian window (sigma 1.5) on [0, 1] data."""
    xa, ya = _pixels(x), _pixels(y)
    if xa.shape != ya.shape:
        raise ShapeError(f"ssim inputs differ in shape: {xa.shape} vs {ya.shape}")
    if min(xa.shape) < 11:
        raise DegenerateInputError("ssim needs at least 11x11 pixels")
    c1, c2 = 0.01**2, 0.03**2
    coords = np.arange(11, dtype=np.float64) - 5.0
    g = np.exp(-(coords**2) / (2.0 * 1.5**2))
    win = np.outer(g, g)
    win /= win.sum()

    def blur(t):
        return convolve2d(t, win, mode="valid")

    mu_x, mu_y = blur(xa), blur(ya)
    sig_x = blur(xa * xa) - mu_x * mu_x
    sig_y = blur(ya * ya) - mu_y * mu_y
    sig_xy = blur(xa * ya) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sig_xy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (sig_x + sig_y + c2)
    return float((num / den).mean())


def compute_metrics(fused, a, b):
    """All eight metrics for one fused/source triple."""
    return {
        "en": entropy(fused),
        "sd": std_dev(fused),
        "sf": spatial_frequency(fused),
        "mi": mutual_information(fused, a, b),
        "scd": scd(fused, a, b),
        "vif": vif(fused, a, b),
        "qabf": qabf(fused, a, b),
        "ssim": 0.5 * (ssim(fused, a) + ssim(fused, b)),
    }


@dataclass
class MetricReport:
    """Aggregate metric scores plus per-image rows and provenance header."""

    en: float
    sd: float
    sf: float
    mi: float
    scd: float
    vif: float
    qabf: float
    ssim: float
    per_image: list = field(default_factory=list)
    header: dict = field(default_factory=dict)

    @property
    def aggregate(self):
        return {name: getattr(self, name) for name in METRIC_NAMES}

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["name", *METRIC_NAMES])
            for row in self.per_image:
                writer.writerow([row["name"]] + [f"{row[m]:.6f}" for m in METRIC_NAMES])
            writer.writerow(["mean"] + [f"{self.aggregate[m]:.6f}" for m in METRIC_NAMES])

    def write_json(self, path):
        payload = {
            "header": self.header,
            "aggregate": self.aggregate,
            "per_image": self.per_image,
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")


def evaluate(fused_dir, a_dir, b_dir):
    """Score a directory of fused images against matched source directories."""
    names_f = _list_rasters(fused_dir)
    names_a = _list_rasters(a_dir)
    names_b = _list_rasters(b_dir)
    if not names_f:
        raise EmptyDatasetError(f"no fused images under {fused_dir}")
    if names_f != names_a or names_f != names_b:
        raise PairingError(
            "fused/a/b directories must contain identical filenames; "
            f"got {len(names_f)}/{len(names_a)}/{len(names_b)} entries"
        )
    rows = []
    for name in names_f:
        fused = load_image(os.path.join(fused_dir, name))
        img_a = load_image(os.path.join(a_dir, name))
        img_b = load_image(os.path.join(b_dir, name))
        row = {"name": name}
        row.update(compute_metrics(fused, img_a, img_b))
        rows.append(row)
    aggregate = {
        m: float(np.mean([row[m] for row in rows])) for m in METRIC_NAMES
    }
    header = {"artifact_version": _pkg_version, "metric_variants": METRIC_VARIANTS}
    return MetricReport(per_image=rows, header=header, **aggregate)
