"""Fourier shell correlation, aligned pose errors and mirror (handedness) algebra."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .spectral import (
    FreqGrid2D, GaussianPhantom, check_rotation, fftn_centered, phantom_ft,
    phantom_projection_real, phantom_volume_ft, slice_coords, voxel_slice_interp,
    continuous_to_dft, ifft2_centered,
)

MIRROR = np.diag([1.0, 1.0, -1.0])


# -- FSC -------------------------------------------------------------------
@dataclass
class FscCurve:
    shell_freqs: np.ndarray
    correlations: np.ndarray
    pixel_size: float
    side: int
    empty_shells: list = field(default_factory=list)

    def to_csv(self, path, comment: str | None = None) -> None:
        with open(path, "w", newline="") as fh:
            if comment:
                fh.write(f"# {comment}\n")
            w = csv.writer(fh)
            w.writerow(["shell_index", "freq_inv_angstrom", "correlation"])
            for i, (f, c) in enumerate(zip(self.shell_freqs, self.correlations)):
                w.writerow([i, repr(float(f)), repr(float(c))])


def _shell_index(side: int) -> np.ndarray:
    s = np.arange(side) - side // 2
    z, y, x = np.meshgrid(s, s, s, indexing="ij")
    return np.rint(np.sqrt(x * x + y * y + z * z)).astype(int)


def fsc_from_spectra(fa: np.ndarray, fb: np.ndarray, pixel_size: float) -> FscCurve:
    if fa.shape != fb.shape or fa.ndim != 3:
        raise ValueError(f"fsc: shapes differ or are not 3D: {fa.shape} vs {fb.shape}")
    L = fa.shape[0]
    shells = _shell_index(L).ravel()
    n = L // 2
    keep = shells < n
    sh = shells[keep]
    a, b = fa.ravel()[keep], fb.ravel()[keep]
    cross = np.bincount(sh, (a * b.conj()).real, minlength=n)
    pa = np.bincount(sh, np.abs(a) ** 2, minlength=n)
    pb = np.bincount(sh, np.abs(b) ** 2, minlength=n)
    denom = np.sqrt(pa * pb)
    empty = [int(i) for i in np.flatnonzero(denom == 0)]
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.where(denom > 0, cross / np.where(denom > 0, denom, 1), 0.0)
    freqs = np.arange(n) / (L * pixel_size)
    return FscCurve(freqs, corr, pixel_size, L, empty)


def fsc(vol_a: np.ndarray, vol_b: np.ndarray, pixel_size: float) -> FscCurve:
    """Per-shell Re(sum A conj(B)) / sqrt(sum|A|^2 sum|B|^2), shells of unit width up to L/2 - 1."""
    if vol_a.shape != vol_b.shape:
        raise ValueError(f"fsc: shapes differ: {vol_a.shape} vs {vol_b.shape}")
    return fsc_from_spectra(fftn_centered(vol_a), fftn_centered(vol_b), pixel_size)


@dataclass(frozen=True)
class Resolution:
    pixels: float
    angstrom: float
    saturated: bool


def resolution_at(curve: FscCurve, cutoff: float = 0.5) -> Resolution:
    """First crossing below ``cutoff`` (linear interpolation), as L / shell."""
    c = np.asarray(curve.correlations)
    if len(c) == 0:
        raise ValueError("empty FSC curve")
    L = curve.side
    below = np.flatnonzero(c < cutoff)
    if len(below) == 0:
        return Resolution(2.0, 2.0 * curve.pixel_size, True)
    s = int(below[0])
    if s == 0:
        shell = 0.0
    else:
        c0, c1 = c[s - 1], c[s]
        shell = (s - 1) + (c0 - cutoff) / (c0 - c1)
    if shell <= 0:
        return Resolution(math.inf, math.inf, False)
    px = max(L / shell, 2.0)
    return Resolution(px, px * curve.pixel_size, px == 2.0)


# -- rotations ---------------------------------------------------------------
def _rz(t: float) -> np.ndarray:
    c, s = math.cos(t), math.sin(t)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _ry(t: float) -> np.ndarray:
    c, s = math.cos(t), math.sin(t)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def euler_zyz(alpha: float, beta: float, gamma: float) -> np.ndarray:
    """Proper Euler rotation R_z(alpha) R_y(beta) R_z(gamma)."""
    return _rz(alpha) @ _ry(beta) @ _rz(gamma)


def zyz_angles(R: np.ndarray) -> tuple[float, float, float]:
    """Inverse of :func:`euler_zyz` with beta in [0, pi]."""
    beta = math.acos(max(-1.0, min(1.0, R[2, 2])))
    if abs(math.sin(beta)) < 1e-12:
        # gimbal lock: only alpha + gamma (or alpha - gamma) is defined
        return math.atan2(R[1, 0], R[0, 0]), beta, 0.0
    alpha = math.atan2(R[1, 2], R[0, 2])
    gamma = math.atan2(R[2, 1], -R[2, 0])
    return alpha, beta, gamma


def mirror_rotation(alpha: float, beta: float, gamma: float) -> tuple[np.ndarray, float]:
    """R~ = R_(alpha+pi, beta, gamma+pi) and the residual max|F R - R~ F|."""
    R = euler_zyz(alpha, beta, gamma)
    Rt = euler_zyz(alpha + math.pi, beta, gamma + math.pi)
    return Rt, float(np.abs(MIRROR @ R - Rt @ MIRROR).max())


def mirror_matrix(R: np.ndarray) -> np.ndarray:
    """F R F for a single matrix or a stack (..., 3, 3)."""
    return MIRROR @ np.asarray(R) @ MIRROR


def mirror_projection_check(phantom: GaussianPhantom, R: np.ndarray, grid: FreqGrid2D) -> float:
    """max|Q_mirror(R~) - Q(R)| with both projections from the analytic oracle."""
    a = phantom_projection_real(phantom, R, grid)
    b = phantom_projection_real(phantom.mirrored(), mirror_matrix(R), grid)
    return float(np.abs(a - b).max())


def mirror_projection_check_voxel(phantom: GaussianPhantom, R: np.ndarray, grid: FreqGrid2D,
                                  oversample: int = 3) -> float:
    """Relative max deviation when the mirrored projection goes through voxel interpolation.

    The mirrored phantom's spectrum is sampled on an ``oversample``-times finer
    cube (a zero-padded box), sliced at R~ by trilinear interpolation and
    compared with the analytic projection of the original phantom at R.
    """
    L, apix = grid.side, grid.pixel_size
    cube = phantom_volume_ft(phantom.mirrored(), oversample * L, apix)
    # back to continuous-FT units so the slice can share the 2D scaling
    cube = cube / continuous_to_dft(oversample * L, apix, ndim=3)
    spec = voxel_slice_interp(cube, mirror_matrix(R), grid)
    img = ifft2_centered(spec * continuous_to_dft(L, apix)).real
    ref = phantom_projection_real(phantom, R, grid)
    return float(np.abs(img - ref).max() / np.abs(ref).max())


@dataclass
class RotationAlignment:
    G: np.ndarray
    hand: str
    errors: np.ndarray

    @property
    def median(self) -> float:
        return float(np.median(self.errors))


def _procrustes(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    M = np.einsum("nij,nkj->ik", pred, gt)
    if np.linalg.matrix_rank(M, tol=1e-10 * max(np.abs(M).max(), 1e-300)) < 2:
        raise ValueError("align_rotations: degenerate covariance (rank < 2)")
    U, _, Vt = np.linalg.svd(M)
    d = np.sign(np.linalg.det(U @ Vt))
    return U @ np.diag([1.0, 1.0, d]) @ Vt


def align_rotations(pred, gt) -> RotationAlignment:
    """Global rotation G (and hand) minimising sum ||R_pred - G R_gt'||_F^2.

    R_gt' is either R_gt or its mirror F R_gt F; the alignment with the lower
    median error wins. Per-image error is the squared Frobenius norm.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 3 or len(pred) == 0:
        raise ValueError(f"align_rotations: need equal-length stacks, got {pred.shape}, {gt.shape}")
    best = None
    for hand, ref in (("same", gt), ("mirrored", mirror_matrix(gt))):
        G = _procrustes(pred, ref)
        err = ((pred - G @ ref) ** 2).sum(axis=(1, 2))
        cand = RotationAlignment(G, hand, err)
        if best is None or cand.median < best.median:
            best = cand
    return best


# -- translations ------------------------------------------------------------
@dataclass(frozen=True)
class TranslationError:
    mse_px2: float
    mse_a2: float
    label: str = "raw"


def translation_error(pred, gt, pixel_size: float) -> TranslationError:
    """Mean of ||t_pred - t_gt||^2 with no offset fitted, in A^2 and px^2."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"translation_error: shapes differ {pred.shape} vs {gt.shape}")
    mse = float(((pred - gt) ** 2).sum(axis=-1).mean())
    return TranslationError(mse / pixel_size ** 2, mse)


def fit_volume_shift(pred_t, gt_t, gt_rot_aligned) -> np.ndarray:
    """3D shift d of the reconstruction explaining t_gt - t_pred = (R^T d)_xy.

    ``gt_rot_aligned`` are the ground-truth rotations expressed in the
    reconstruction's frame (G R_gt, or G F R_gt F for the mirrored hand).
    """
    R = np.asarray(gt_rot_aligned, dtype=np.float64)
    A = np.swapaxes(R, 1, 2)[:, :2, :].reshape(-1, 3)
    b = (np.asarray(gt_t) - np.asarray(pred_t)).reshape(-1)
    d, *_ = np.linalg.lstsq(A, b, rcond=None)
    return d


def translation_error_fitted(pred, gt, gt_rot_aligned, pixel_size: float) -> TranslationError:
    """Translation error after removing the best global 3D volume shift."""
    d = fit_volume_shift(pred, gt, gt_rot_aligned)
    R = np.asarray(gt_rot_aligned, dtype=np.float64)
    shifted = np.asarray(pred) + np.einsum("nji,j->ni", R, d)[:, :2]
    e = translation_error(shifted, gt, pixel_size)
    return TranslationError(e.mse_px2, e.mse_a2, "fitted-shift")
