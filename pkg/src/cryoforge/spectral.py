"""Fourier conventions, frequency grids and analytic Gaussian-blob phantoms.

Conventions used throughout the package:

* Images are indexed ``img[y, x]`` and volumes ``vol[z, y, x]``.
* Transforms are unitary (``norm="ortho"``) with the DC bin at index L/2 along
  every axis, so L must be even.
* The bins at index 0 (frequency -L/2) have no Hermitian partner on the grid.
  They are treated as out of band: simulated spectra zero them and losses
  ignore them.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

ROTATION_TOL = 1e-6


def _check_even(n: int) -> None:
    if n % 2:
        raise ValueError(f"side length must be even, got {n}")


def fft2_centered(image: np.ndarray) -> np.ndarray:
    """Unitary 2D FFT with DC at (L/2, L/2). Works on stacks (..., L, L)."""
    _check_even(image.shape[-1])
    _check_even(image.shape[-2])
    axes = (-2, -1)
    return np.fft.fftshift(np.fft.fft2(np.fft.ifftshift(image, axes=axes), norm="ortho"),
                           axes=axes)


def ifft2_centered(spectrum: np.ndarray) -> np.ndarray:
    """Inverse of :func:`fft2_centered`; returns a complex array."""
    _check_even(spectrum.shape[-1])
    _check_even(spectrum.shape[-2])
    axes = (-2, -1)
    return np.fft.fftshift(np.fft.ifft2(np.fft.ifftshift(spectrum, axes=axes), norm="ortho"),
                           axes=axes)


def fftn_centered(vol: np.ndarray) -> np.ndarray:
    for n in vol.shape:
        _check_even(n)
    return np.fft.fftshift(np.fft.fftn(np.fft.ifftshift(vol), norm="ortho"))


def ifftn_centered(spectrum: np.ndarray) -> np.ndarray:
    for n in spectrum.shape:
        _check_even(n)
    return np.fft.fftshift(np.fft.ifftn(np.fft.ifftshift(spectrum), norm="ortho"))


def centered_freqs(side: int, pixel_size: float) -> np.ndarray:
    """s / (L * pixel_size) for s in [-L/2, L/2)."""
    _check_even(side)
    return (np.arange(side) - side // 2) / (side * pixel_size)


@dataclass(frozen=True)
class FreqGrid2D:
    side: int
    pixel_size: float
    coords: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        f = centered_freqs(self.side, self.pixel_size)
        kx, ky = np.meshgrid(f, f)
        object.__setattr__(self, "coords", np.stack([kx, ky], axis=-1))

    @property
    def nyquist(self) -> float:
        return 0.5 / self.pixel_size

    def radius(self) -> np.ndarray:
        return np.hypot(self.coords[..., 0], self.coords[..., 1])


def band_mask(side: int, ndim: int = 2) -> np.ndarray:
    """True on bins whose negated index also lies on the grid (all but index 0 planes)."""
    _check_even(side)
    m = np.ones((side,) * ndim, dtype=bool)
    for ax in range(ndim):
        idx = [slice(None)] * ndim
        idx[ax] = 0
        m[tuple(idx)] = False
    return m


def negate_index(side: int) -> np.ndarray:
    """Index map i -> (L - i) mod L, i.e. k -> -k on a centered axis."""
    return (side - np.arange(side)) % side


def check_rotation(R: np.ndarray, tol: float = ROTATION_TOL) -> None:
    R = np.asarray(R, dtype=np.float64)
    if R.shape[-2:] != (3, 3):
        raise ValueError(f"rotation must be 3x3, got shape {R.shape}")
    eye = np.eye(3)
    ortho = np.abs(np.swapaxes(R, -1, -2) @ R - eye).max()
    det = np.linalg.det(R)
    if ortho > tol or np.abs(det - 1).max() > tol:
        raise ValueError(f"not a rotation (|R^T R - I|={ortho:.2e}, det={np.ravel(det)[0]:.6f})")


def slice_coords(R: np.ndarray, grid: FreqGrid2D) -> np.ndarray:
    """3D frequencies R @ [kx, ky, 0] for every bin; shape (L, L, 3)."""
    check_rotation(R)
    return grid.coords @ np.asarray(R, dtype=np.float64)[:, :2].T


@dataclass(frozen=True)
class GaussianPhantom:
    """Sum of isotropic Gaussians a * exp(-|r - mu|^2 / (2 s^2)), lengths in Angstrom."""

    amplitudes: np.ndarray
    centers: np.ndarray
    widths: np.ndarray

    def __post_init__(self):
        a = np.atleast_1d(np.asarray(self.amplitudes, dtype=np.float64))
        c = np.atleast_2d(np.asarray(self.centers, dtype=np.float64))
        s = np.atleast_1d(np.asarray(self.widths, dtype=np.float64))
        if len(a) == 0:
            raise ValueError("phantom needs at least one blob")
        if c.shape != (len(a), 3) or s.shape != a.shape:
            raise ValueError("blob arrays have inconsistent lengths")
        if np.any(s <= 0):
            raise ValueError("blob widths must be positive")
        object.__setattr__(self, "amplitudes", a)
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "widths", s)

    @property
    def n_blobs(self) -> int:
        return len(self.amplitudes)

    def mass(self) -> float:
        """Integral of the volume over R^3."""
        return float(np.sum(self.amplitudes * (2 * np.pi * self.widths ** 2) ** 1.5))

    def mirrored(self) -> "GaussianPhantom":
        """The phantom reflected through the z = 0 plane, V(x, y, -z)."""
        return GaussianPhantom(self.amplitudes, self.centers * [1, 1, -1], self.widths)

    def to_dict(self) -> dict:
        return {"amplitudes": self.amplitudes.tolist(), "centers": self.centers.tolist(),
                "widths": self.widths.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianPhantom":
        return cls(d["amplitudes"], d["centers"], d["widths"])


DEFAULT_PHANTOM_SEED = 20220707


def default_phantom(side: int, pixel_size: float, n_blobs: int = 8,
                    seed: int = DEFAULT_PHANTOM_SEED) -> GaussianPhantom:
    """Asymmetric blob cluster scaled to the box.

    Centers are uniform in a ball of radius 0.25 * L * pixel_size (inside the
    0.6 * L * pixel_size sphere) and widths are (2-3) * L / 64 pixels: 2-3 px at
    L = 64, where both the real-space tails and the spectrum beyond Nyquist are
    below double-precision relevance, and proportionally finer at smaller boxes
    so the spectrum keeps signal out to Nyquist.
    """
    rng = np.random.default_rng(seed)
    dirs = rng.normal(size=(n_blobs, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    radii = 0.25 * side * pixel_size * rng.uniform(size=n_blobs) ** (1 / 3)
    centers = dirs * radii[:, None]
    widths = rng.uniform(2.0, 3.0, size=n_blobs) * (side / 64) * pixel_size
    amps = rng.uniform(0.5, 1.5, size=n_blobs)
    return GaussianPhantom(amps, centers, widths)


def phantom_ft(p: GaussianPhantom, points: np.ndarray) -> np.ndarray:
    """Closed-form continuous Fourier transform at frequencies ``points`` (..., 3), in 1/A."""
    points = np.asarray(points, dtype=np.float64)
    if not np.all(np.isfinite(points)):
        raise ValueError("phantom_ft: non-finite frequency coordinates")
    k2 = np.einsum("...i,...i->...", points, points)
    out = np.zeros(points.shape[:-1], dtype=np.complex128)
    for a, mu, s in zip(p.amplitudes, p.centers, p.widths):
        mag = a * (2 * np.pi * s * s) ** 1.5 * np.exp(-2 * np.pi ** 2 * s * s * k2)
        out += mag * np.exp(-2j * np.pi * (points @ mu))
    return out


def phantom_real(p: GaussianPhantom, side: int, pixel_size: float) -> np.ndarray:
    """Phantom sampled on the centered voxel grid, indexed [z, y, x]."""
    x = (np.arange(side) - side // 2) * pixel_size
    z, y, xx = np.meshgrid(x, x, x, indexing="ij")
    vol = np.zeros((side,) * 3)
    for a, mu, s in zip(p.amplitudes, p.centers, p.widths):
        r2 = (xx - mu[0]) ** 2 + (y - mu[1]) ** 2 + (z - mu[2]) ** 2
        vol += a * np.exp(-r2 / (2 * s * s))
    return vol


def phantom_projection_real(p: GaussianPhantom, R: np.ndarray, grid: FreqGrid2D) -> np.ndarray:
    """Line integral along z of V(R [x, y, z]) sampled on the pixel grid.

    Each blob projects to a 2D Gaussian centred on the xy part of R^T mu.
    """
    check_rotation(R)
    R = np.asarray(R, dtype=np.float64)
    L, apix = grid.side, grid.pixel_size
    x = (np.arange(L) - L // 2) * apix
    X, Y = np.meshgrid(x, x)
    img = np.zeros((L, L))
    for a, mu, s in zip(p.amplitudes, p.centers, p.widths):
        m = R.T @ mu
        img += a * np.sqrt(2 * np.pi) * s * np.exp(
            -((X - m[0]) ** 2 + (Y - m[1]) ** 2) / (2 * s * s))
    return img


def continuous_to_dft(side: int, pixel_size: float, ndim: int = 2) -> float:
    """Factor mapping a sampled continuous FT onto the unitary centered DFT of the samples."""
    return 1.0 / (side ** (ndim / 2) * pixel_size ** ndim)


def phantom_slice_image(p: GaussianPhantom, R: np.ndarray, grid: FreqGrid2D) -> np.ndarray:
    """Real-space projection obtained through the Fourier-slice route."""
    spec = phantom_ft(p, slice_coords(R, grid)) * continuous_to_dft(grid.side, grid.pixel_size)
    return ifft2_centered(spec).real


def phantom_volume_ft(p: GaussianPhantom, side: int, pixel_size: float) -> np.ndarray:
    """Phantom spectrum on the centered 3D DFT grid (unitary scaling), out-of-band bins zeroed."""
    f = centered_freqs(side, pixel_size)
    kz, ky, kx = np.meshgrid(f, f, f, indexing="ij")
    spec = phantom_ft(p, np.stack([kx, ky, kz], axis=-1))
    spec *= continuous_to_dft(side, pixel_size, ndim=3)
    return spec * band_mask(side, 3)


def phantom_volume(p: GaussianPhantom, side: int, pixel_size: float) -> np.ndarray:
    """Band-limited voxel rendering: inverse DFT of the sampled analytic spectrum."""
    return ifftn_centered(phantom_volume_ft(p, side, pixel_size)).real


def voxel_slice_interp(volume_ft: np.ndarray, R: np.ndarray, grid: FreqGrid2D) -> np.ndarray:
    """Trilinear sample of a centered cubic spectrum [kz, ky, kx] on the slice R.

    Points outside the symmetric cube [1, L-1]^3 evaluate to 0, so a Hermitian
    spectrum gives a Hermitian slice (the unpaired index-0 planes never contribute).
    """
    if volume_ft.ndim != 3 or len(set(volume_ft.shape)) != 1:
        raise ValueError(f"voxel_slice_interp: spectrum must be cubic, got {volume_ft.shape}")
    L = volume_ft.shape[0]
    _check_even(L)
    pts = slice_coords(R, grid) * (L * grid.pixel_size) + L // 2  # fractional [x, y, z] indices
    inside = np.all((pts >= 1) & (pts <= L - 1), axis=-1)
    pts = np.where(inside[..., None], pts, 0)
    base = np.minimum(np.floor(pts).astype(int), L - 2)
    frac = pts - base
    out = np.zeros(pts.shape[:-1], dtype=volume_ft.dtype)
    for dz in (0, 1):
        for dy in (0, 1):
            for dx in (0, 1):
                w = ((frac[..., 0] if dx else 1 - frac[..., 0])
                     * (frac[..., 1] if dy else 1 - frac[..., 1])
                     * (frac[..., 2] if dz else 1 - frac[..., 2]))
                out += w * volume_ft[base[..., 2] + dz, base[..., 1] + dy, base[..., 0] + dx]
    return np.where(inside, out, 0)


def random_rotations(n: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-uniform rotations via normalized Gaussian quaternions."""
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return Rotation.from_quat(q).as_matrix()
