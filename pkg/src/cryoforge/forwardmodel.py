"""Image formation in Fourier space: CTF, phase-shift translation, noise."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import constants

from . import diffcore as dc
from .diffcore import ComplexPair, Tensor
from .spectral import FreqGrid2D, check_rotation


def electron_wavelength(voltage_kv: float) -> float:
    """Relativistic electron wavelength in Angstrom."""
    v = voltage_kv * 1e3
    m, e, c, h = (constants.m_e, constants.e, constants.c, constants.h)
    return 1e10 * h / np.sqrt(2 * m * e * v * (1 + e * v / (2 * m * c * c)))


@dataclass(frozen=True)
class CtfParams:
    defocus_u: float
    defocus_v: float
    astigmatism_angle: float = 0.0
    voltage_kv: float = 300.0
    spherical_aberration_mm: float = 2.7
    amplitude_contrast: float = 0.1

    def __post_init__(self):
        if not (self.defocus_u > 0 and self.defocus_v > 0):
            raise ValueError("defocus values must be positive")
        if not 0 <= self.amplitude_contrast < 1:
            raise ValueError("amplitude_contrast must lie in [0, 1)")
        if self.voltage_kv <= 0:
            raise ValueError("voltage must be positive")


@dataclass(frozen=True)
class Pose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        check_rotation(R)
        if t.shape != (2,):
            raise ValueError(f"translation must be a 2-vector, got {t.shape}")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)


def ctf_eval(params: CtfParams, grid: FreqGrid2D) -> np.ndarray:
    """Weak-phase CTF with amplitude contrast, negative contrast near DC."""
    return ctf_eval_batch([params], grid)[0]


def ctf_eval_batch(params: list[CtfParams], grid: FreqGrid2D) -> np.ndarray:
    kx, ky = grid.coords[..., 0], grid.coords[..., 1]
    k2 = kx * kx + ky * ky
    theta = np.arctan2(ky, kx)
    du = np.array([p.defocus_u for p in params])[:, None, None]
    dv = np.array([p.defocus_v for p in params])[:, None, None]
    ang = np.array([p.astigmatism_angle for p in params])[:, None, None]
    lam = np.array([electron_wavelength(p.voltage_kv) for p in params])[:, None, None]
    cs = np.array([p.spherical_aberration_mm for p in params])[:, None, None] * 1e7
    w = np.array([p.amplitude_contrast for p in params])[:, None, None]
    defocus = 0.5 * (du + dv) + 0.5 * (du - dv) * np.cos(2 * (theta - ang))
    chi = np.pi * lam * defocus * k2 - 0.5 * np.pi * cs * lam ** 3 * k2 * k2 + np.arcsin(w)
    return -np.sin(chi)


def translate_phase(t, grid: FreqGrid2D) -> np.ndarray:
    """exp(-2 pi i k . t) on the grid, t in Angstrom."""
    t = np.asarray(t, dtype=np.float64)
    if not np.all(np.isfinite(t)):
        raise ValueError("translation must be finite")
    return np.exp(-2j * np.pi * (grid.coords @ t))


def synthesize(slice_: ComplexPair, ctf, t, kcoords: np.ndarray) -> ComplexPair:
    """T_t * C * slice, elementwise.

    ``slice_`` has shape (B, *S) (or S), ``ctf`` broadcasts against it, ``t`` is
    (B, 2) (or (2,)) in Angstrom, and ``kcoords`` is (*S, 2) in 1/A. Gradients
    flow to ``slice_`` and ``t``.
    """
    t = dc.as_tensor(t)
    kcoords = np.asarray(kcoords)
    spatial = kcoords.shape[:-1]
    if slice_.shape[-len(spatial):] != spatial:
        raise dc.ShapeError("synthesize", slice_.shape, kcoords.shape)
    batched = t.ndim == 2
    t2 = t if batched else dc.reshape(t, (1, 2))
    kflat = kcoords.reshape(-1, 2)
    phase = dc.matmul(t2, Tensor(-2 * np.pi * kflat.T))
    out_shape = ((t2.shape[0],) if batched else ()) + spatial
    phase = dc.reshape(phase, out_shape)
    shift = ComplexPair(dc.cos(phase), dc.sin(phase))
    ctf = dc.as_tensor(ctf)
    return shift * (slice_ * ctf)


def add_noise_snr(image: np.ndarray, snr_db, rng: np.random.Generator) -> np.ndarray:
    """Add white Gaussian noise with variance Var(image) / 10^(snr_db / 10).

    ``snr_db`` of None or +inf disables noise.
    """
    if snr_db is None or np.isposinf(snr_db):
        return image.copy()
    var = float(np.var(image))
    if var == 0:
        raise ValueError("add_noise_snr: image has zero variance")
    sigma = np.sqrt(var / 10 ** (snr_db / 10))
    return image + rng.normal(scale=sigma, size=image.shape)
