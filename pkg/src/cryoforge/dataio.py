"""Synthetic particle datasets, the on-disk dataset layout, and MRC2014 volumes."""
from __future__ import annotations

import csv
import dataclasses
import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .forwardmodel import CtfParams, Pose, add_noise_snr, ctf_eval_batch
from .metrics import euler_zyz
from .spectral import (
    FreqGrid2D, GaussianPhantom, band_mask, continuous_to_dft, default_phantom,
    fftn_centered, ifft2_centered, phantom_ft, phantom_volume, random_rotations,
    voxel_slice_interp,
)

FORMAT_VERSION = 1
LEAKAGE_TOL = 1e-6


class DataError(Exception):
    """Malformed or inconsistent dataset / volume file."""


# -- rotation sampling -------------------------------------------------------
def sample_rotation_uniform(rng: np.random.Generator) -> np.ndarray:
    return random_rotations(1, rng)[0]


def sample_rotation_restricted(rng: np.random.Generator) -> np.ndarray:
    """ZYZ rotation with alpha in [-pi/2, pi/2], Haar-distributed beta, gamma in [-pi, pi]."""
    alpha = rng.uniform(-math.pi / 2, math.pi / 2)
    beta = math.acos(rng.uniform(-1.0, 1.0))
    gamma = rng.uniform(-math.pi, math.pi)
    return euler_zyz(alpha, beta, gamma)


# -- dataset description ---------------------------------------------------------
@dataclass
class DatasetSpec:
    n_particles: int = 2000
    side: int = 32
    pixel_size: float = 6.0
    phantom: object = None  # GaussianPhantom, None for the default, or "mrc:PATH"
    shift_sigma: float = 5.0
    snr_db: float | None = None
    defocus_lognormal: tuple = (math.log(10000.0), 0.25)
    astigmatism_sigma: float = 300.0
    voltage_kv: float = 300.0
    cs_mm: float = 2.7
    amplitude_contrast: float = 0.1
    seed: int = 0
    inplane_range: str = "full"

    def __post_init__(self):
        if self.n_particles < 1:
            raise ValueError("n_particles must be >= 1")
        if self.side % 2:
            raise ValueError("side must be even")
        if self.shift_sigma < 0:
            raise ValueError("shift_sigma must be >= 0")
        if self.inplane_range not in ("full", "half"):
            raise ValueError("inplane_range must be 'full' or 'half'")
        self.defocus_lognormal = tuple(self.defocus_lognormal)

    def resolved_phantom(self) -> GaussianPhantom | None:
        if self.phantom is None:
            return default_phantom(self.side, self.pixel_size)
        if isinstance(self.phantom, GaussianPhantom):
            return self.phantom
        return None

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        ph = self.resolved_phantom()
        d["phantom"] = ph.to_dict() if ph is not None else self.phantom
        d["defocus_lognormal"] = list(self.defocus_lognormal)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "DatasetSpec":
        d = dict(d)
        if isinstance(d.get("phantom"), dict):
            d["phantom"] = GaussianPhantom.from_dict(d["phantom"])
        return cls(**d)


@dataclass
class ParticleDataset:
    images: np.ndarray
    ctfs: list
    spec: DatasetSpec
    gt_poses: list | None = None
    _ctf_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        n = len(self.images)
        if self.images.ndim != 3 or self.images.shape[1] != self.images.shape[2]:
            raise DataError(f"image stack must be N x L x L, got {self.images.shape}")
        if len(self.ctfs) != n:
            raise DataError(f"{len(self.ctfs)} CTF rows for {n} images")
        if self.gt_poses is not None and len(self.gt_poses) != n:
            raise DataError(f"{len(self.gt_poses)} poses for {n} images")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def side(self) -> int:
        return self.images.shape[1]

    @property
    def pixel_size(self) -> float:
        return self.spec.pixel_size

    @property
    def grid(self) -> FreqGrid2D:
        return FreqGrid2D(self.side, self.pixel_size)

    def ctf_array(self) -> np.ndarray:
        if "all" not in self._ctf_cache:
            self._ctf_cache["all"] = ctf_eval_batch(self.ctfs, self.grid)
        return self._ctf_cache["all"]

    def gt_rotations(self) -> np.ndarray:
        return np.stack([p.rotation for p in self.gt_poses])

    def gt_translations(self) -> np.ndarray:
        return np.stack([p.translation for p in self.gt_poses])

    def subset(self, index) -> "ParticleDataset":
        index = np.asarray(index)
        poses = None if self.gt_poses is None else [self.gt_poses[i] for i in index]
        return ParticleDataset(self.images[index], [self.ctfs[i] for i in index], self.spec, poses)

    def gt_volume(self) -> np.ndarray | None:
        """Band-limited ground-truth volume on the dataset's voxel grid."""
        ph = self.spec.resolved_phantom()
        if ph is not None:
            return phantom_volume(ph, self.side, self.pixel_size)
        if isinstance(self.spec.phantom, str) and self.spec.phantom.startswith("mrc:"):
            return mrc_read(self.spec.phantom[4:])[0].astype(np.float64)
        return None


def _particle_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def _mrc_slicer(path: str, side: int, pixel_size: float, oversample: int = 2):
    vol, apix = mrc_read(path)
    if vol.shape != (side,) * 3:
        raise DataError(f"{path}: volume is {vol.shape}, dataset side is {side}")
    if not math.isclose(apix, pixel_size, rel_tol=1e-4):
        raise DataError(f"{path}: pixel size {apix} differs from dataset pixel size {pixel_size}")
    pad = (oversample - 1) * side // 2
    big = np.pad(vol.astype(np.float64), pad)
    # continuous-FT units, matching phantom_ft
    cube = fftn_centered(big) / continuous_to_dft(big.shape[0], pixel_size, ndim=3)
    grid = FreqGrid2D(side, pixel_size)
    return lambda R: voxel_slice_interp(cube, R, grid)


def generate_dataset(spec: DatasetSpec, rotations: np.ndarray | None = None) -> ParticleDataset:
    """Simulate particles through the Fourier-space image formation model.

    ``rotations`` overrides pose sampling (debug hook); translations and CTFs
    are still drawn from the spec.
    """
    L, apix = spec.side, spec.pixel_size
    grid = FreqGrid2D(L, apix)
    mask = band_mask(L)
    phantom = spec.resolved_phantom()
    if phantom is not None:
        def central_slice(R):
            return phantom_ft(phantom, grid.coords @ R[:, :2].T)
    elif isinstance(spec.phantom, str) and spec.phantom.startswith("mrc:"):
        central_slice = _mrc_slicer(spec.phantom[4:], L, apix)
    else:
        raise ValueError(f"unsupported phantom {spec.phantom!r}")
    scale = continuous_to_dft(L, apix)
    mu_ln, sigma_ln = spec.defocus_lognormal
    images = np.empty((spec.n_particles, L, L), dtype=np.float32)
    ctfs, poses = [], []
    for i in range(spec.n_particles):
        rng = _particle_rng(spec.seed, i)
        if rotations is not None:
            R = np.asarray(rotations[i], dtype=np.float64)
        elif spec.inplane_range == "half":
            R = sample_rotation_restricted(rng)
        else:
            R = sample_rotation_uniform(rng)
        t = rng.normal(scale=spec.shift_sigma, size=2) if spec.shift_sigma > 0 else np.zeros(2)
        mean_def = math.exp(rng.normal(mu_ln, sigma_ln))
        half_astig = 0.5 * rng.normal(scale=spec.astigmatism_sigma)
        du = max(mean_def + half_astig, 1.0)
        dv = max(mean_def - half_astig, 1.0)
        ctf = CtfParams(du, dv, rng.uniform(-math.pi, math.pi), spec.voltage_kv, spec.cs_mm,
                        spec.amplitude_contrast)
        spectrum = central_slice(R) * scale
        spectrum *= ctf_eval_batch([ctf], grid)[0]
        spectrum *= np.exp(-2j * np.pi * (grid.coords @ t))
        spectrum *= mask
        img = ifft2_centered(spectrum)
        leak = np.abs(img.imag).max() / max(np.abs(img.real).max(), 1e-300)
        if leak > LEAKAGE_TOL:
            raise DataError(f"particle {i}: imaginary leakage {leak:.2e} after inverse FFT")
        images[i] = add_noise_snr(img.real, spec.snr_db, rng)
        ctfs.append(ctf)
        poses.append(Pose(R, t))
    return ParticleDataset(images, ctfs, spec, poses)


# -- dataset directory ---------------------------------------------------------
_CTF_FIELDS = ["defocus_u", "defocus_v", "astigmatism_angle", "voltage_kv",
               "spherical_aberration_mm", "amplitude_contrast"]
ROT_DRIFT_FIX = 1e-6
ROT_DRIFT_REJECT = 1e-3


def dataset_save(ds: ParticleDataset, path, comment: str | None = None) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {"format_version": FORMAT_VERSION, "n_particles": len(ds), "side": ds.side,
            "has_gt_poses": ds.gt_poses is not None, "spec": ds.spec.to_json()}
    (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    ds.images.astype("<f4").tofile(path / "particles.f32")
    with open(path / "ctf.csv", "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh)
        w.writerow(_CTF_FIELDS)
        for c in ds.ctfs:
            w.writerow([repr(float(getattr(c, f))) for f in _CTF_FIELDS])
    if ds.gt_poses is not None:
        with open(path / "gt_poses.csv", "w", newline="") as fh:
            if comment:
                fh.write(f"# {comment}\n")
            w = csv.writer(fh)
            w.writerow([f"r{i}{j}" for i in range(3) for j in range(3)] + ["tx", "ty"])
            for p in ds.gt_poses:
                w.writerow([repr(float(v)) for v in p.rotation.ravel()]
                           + [repr(float(v)) for v in p.translation])


def _read_csv_rows(path: Path) -> list[list[str]]:
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(line for line in fh if not line.startswith("#"))]
    return rows[1:]


def _fix_rotation(R: np.ndarray, where: str) -> np.ndarray:
    drift = np.abs(R.T @ R - np.eye(3)).max()
    if drift > ROT_DRIFT_REJECT or np.linalg.det(R) <= 0:
        raise DataError(f"{where}: rotation drift {drift:.2e} exceeds {ROT_DRIFT_REJECT}")
    if drift > ROT_DRIFT_FIX:
        U, _, Vt = np.linalg.svd(R)
        R = U @ Vt
    return R


def dataset_load(path) -> ParticleDataset:
    path = Path(path)
    meta_path = path / "meta.json"
    try:
        meta = json.loads(meta_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{meta_path}: {exc}") from exc
    if meta.get("format_version") != FORMAT_VERSION:
        raise DataError(f"{meta_path}: format version {meta.get('format_version')}, "
                        f"expected {FORMAT_VERSION}")
    n, L = int(meta["n_particles"]), int(meta["side"])
    spec = DatasetSpec.from_json(meta["spec"])
    stack_path = path / "particles.f32"
    expected = n * L * L * 4
    actual = stack_path.stat().st_size if stack_path.exists() else 0
    if actual != expected:
        raise DataError(f"{stack_path}: expected {expected} bytes, found {actual}")
    images = np.fromfile(stack_path, dtype="<f4").reshape(n, L, L).astype(np.float32)
    rows = _read_csv_rows(path / "ctf.csv")
    if len(rows) != n:
        raise DataError(f"{path / 'ctf.csv'}: {len(rows)} rows, expected {n}")
    ctfs = [CtfParams(*map(float, r)) for r in rows]
    poses = None
    if meta.get("has_gt_poses"):
        rows = _read_csv_rows(path / "gt_poses.csv")
        if len(rows) != n:
            raise DataError(f"{path / 'gt_poses.csv'}: {len(rows)} rows, expected {n}")
        poses = []
        for i, r in enumerate(rows):
            vals = np.array([float(v) for v in r])
            R = _fix_rotation(vals[:9].reshape(3, 3), f"{path / 'gt_poses.csv'} row {i}")
            poses.append(Pose(R, vals[9:11]))
    return ParticleDataset(images, ctfs, spec, poses)


# -- MRC2014 (mode 2 only) -----------------------------------------------------
_MRC_HEADER = 1024


def mrc_write(volume: np.ndarray, pixel_size: float, path) -> None:
    """Write a float32 volume indexed [z, y, x] as a little-endian MRC2014 file."""
    vol = np.asarray(volume)
    if vol.ndim != 3:
        raise ValueError(f"mrc_write: need a 3D volume, got {vol.shape}")
    if not np.all(np.isfinite(vol)):
        raise ValueError("mrc_write: volume contains non-finite values")
    data = vol.astype("<f4")
    nz, ny, nx = data.shape
    header = bytearray(_MRC_HEADER)
    struct.pack_into("<3i", header, 0, nx, ny, nz)
    struct.pack_into("<i", header, 12, 2)                       # mode
    struct.pack_into("<3i", header, 16, 0, 0, 0)                # nxstart..
    struct.pack_into("<3i", header, 28, nx, ny, nz)             # mx, my, mz
    struct.pack_into("<3f", header, 40, nx * pixel_size, ny * pixel_size, nz * pixel_size)
    struct.pack_into("<3f", header, 52, 90.0, 90.0, 90.0)
    struct.pack_into("<3i", header, 64, 1, 2, 3)                # mapc, mapr, maps
    struct.pack_into("<3f", header, 76, float(data.min()), float(data.max()),
                     float(data.mean(dtype=np.float64)))
    struct.pack_into("<i", header, 88, 1)                       # ispg
    struct.pack_into("<i", header, 92, 0)                       # nsymbt
    struct.pack_into("<4s", header, 104, b"MRCO")               # exttyp
    struct.pack_into("<i", header, 108, 20140)                  # nversion
    struct.pack_into("<3f", header, 196, 0.0, 0.0, 0.0)         # origin
    header[208:212] = b"MAP "
    header[212:216] = bytes([0x44, 0x44, 0x00, 0x00])           # little-endian stamp
    struct.pack_into("<f", header, 216, float(data.std(dtype=np.float64)))
    struct.pack_into("<i", header, 220, 0)                      # nlabl
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(data.tobytes())
    os.replace(tmp, path)


def mrc_header(path) -> dict:
    with open(path, "rb") as fh:
        raw = fh.read(_MRC_HEADER)
    if len(raw) < _MRC_HEADER:
        raise DataError(f"{path}: truncated header ({len(raw)} bytes)")
    nx, ny, nz, mode = struct.unpack_from("<4i", raw, 0)
    return {
        "nx": nx, "ny": ny, "nz": nz, "mode": mode,
        "nxstart": struct.unpack_from("<3i", raw, 16),
        "mx": struct.unpack_from("<3i", raw, 28),
        "cella": struct.unpack_from("<3f", raw, 40),
        "cellb": struct.unpack_from("<3f", raw, 52),
        "mapcrs": struct.unpack_from("<3i", raw, 64),
        "dmin": struct.unpack_from("<f", raw, 76)[0],
        "dmax": struct.unpack_from("<f", raw, 80)[0],
        "dmean": struct.unpack_from("<f", raw, 84)[0],
        "ispg": struct.unpack_from("<i", raw, 88)[0],
        "nsymbt": struct.unpack_from("<i", raw, 92)[0],
        "exttyp": raw[104:108],
        "nversion": struct.unpack_from("<i", raw, 108)[0],
        "origin": struct.unpack_from("<3f", raw, 196),
        "map": raw[208:212],
        "machst": raw[212:216],
        "rms": struct.unpack_from("<f", raw, 216)[0],
        "nlabl": struct.unpack_from("<i", raw, 220)[0],
    }


def mrc_read(path) -> tuple[np.ndarray, float]:
    """Read a mode-2 little-endian MRC2014 volume; returns ([z, y, x] float32, pixel size)."""
    h = mrc_header(path)
    if h["map"] != b"MAP ":
        raise DataError(f"{path}: field 'map' is {h['map']!r}, expected b'MAP '")
    if h["machst"][0] != 0x44:
        raise DataError(f"{path}: field 'machst' {h['machst']!r} is not little-endian")
    if h["mode"] != 2:
        raise DataError(f"{path}: field 'mode' is {h['mode']}, only mode 2 is supported")
    if tuple(h["mapcrs"]) != (1, 2, 3):
        raise DataError(f"{path}: field 'mapc/mapr/maps' is {h['mapcrs']}, expected (1, 2, 3)")
    nx, ny, nz = h["nx"], h["ny"], h["nz"]
    offset = _MRC_HEADER + max(h["nsymbt"], 0)
    count = nx * ny * nz
    with open(path, "rb") as fh:
        fh.seek(offset)
        buf = fh.read(count * 4)
    if len(buf) != count * 4:
        raise DataError(f"{path}: expected {count * 4} data bytes, found {len(buf)}")
    data = np.frombuffer(buf, dtype="<f4").reshape(nz, ny, nx).astype(np.float32)
    pixel = h["cella"][0] / h["mx"][0] if h["mx"][0] else 1.0
    return data, float(pixel)
