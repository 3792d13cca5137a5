"""Implicit Fourier-space volumes: FourierNet, SIREN and positional-encoding MLP.

Every representation maps a frequency k (1/A) to a complex value and is
Hermitian by construction: the networks are only ever evaluated on a
canonical half-space and the other half is filled in by conjugation.

Outputs are in continuous Fourier-transform units (density * A^3), the same
units as :func:`cryoforge.spectral.phantom_ft`.
"""
from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import ComplexPair, Tensor
from .spectral import (
    FreqGrid2D, band_mask, centered_freqs, check_rotation, continuous_to_dft,
    fft2_centered, ifft2_centered, ifftn_centered,
)

KINDS = ("fouriernet", "siren", "pe_mlp", "voxel")
DEFAULT_LAYERS = {"fouriernet": (2, 3), "siren": (4,), "pe_mlp": (4,)}
DEFAULT_PE_FREQS = 6
EXP_CLAMP = 20.0
LEAKAGE_TOL = 1e-5
CHECKPOINT_MAGIC = b"CFIV"
CHECKPOINT_VERSION = 1


class LeakageError(RuntimeError):
    """An extracted volume has a non-negligible imaginary part."""


@dataclass
class ImplicitVolume:
    kind: str
    hidden_width: int
    layer_counts: tuple
    coord_scale: float
    params: list = field(repr=False)
    layer_map: list = field(repr=False)
    in_dim: int = 3
    omega0: float = 30.0
    pe_freqs: int = 0
    output_scale: float = 1.0  # fixed multiplier so the networks work at O(1)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown kind {self.kind!r}")
        self.layer_counts = tuple(int(n) for n in self.layer_counts)
        expected = param_count(self.kind, self.hidden_width, self.layer_counts, self.in_dim,
                               self.pe_freqs)
        if self.n_params != expected:
            raise ValueError(f"{self.kind}: {self.n_params} parameters, layer map says {expected}")

    @property
    def n_params(self) -> int:
        return int(sum(p.size for p in self.params))

    def flat(self) -> np.ndarray:
        return np.concatenate([p.data.ravel().astype(np.float64) for p in self.params])

    def load_flat(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec)
        if vec.size != self.n_params:
            raise ValueError(f"expected {self.n_params} values, got {vec.size}")
        off = 0
        for p in self.params:
            p.data = vec[off:off + p.size].reshape(p.shape).astype(p.data.dtype)
            off += p.size

    def copy(self) -> "ImplicitVolume":
        params = [Tensor(p.data.copy(), requires_grad=p.requires_grad) for p in self.params]
        return ImplicitVolume(self.kind, self.hidden_width, self.layer_counts, self.coord_scale,
                              params, list(self.layer_map), self.in_dim, self.omega0,
                              self.pe_freqs, self.output_scale)

    def header(self) -> dict:
        return {"kind": self.kind, "hidden_width": self.hidden_width,
                "layer_counts": list(self.layer_counts), "coord_scale": self.coord_scale,
                "in_dim": self.in_dim, "omega0": self.omega0, "pe_freqs": self.pe_freqs,
                "output_scale": self.output_scale}


# -- parameter bookkeeping ---------------------------------------------------
def _branch_shapes(n_in: int, width: int, hidden: int, n_out: int = 2) -> list[tuple]:
    dims = [n_in] + [width] * (hidden + 1) + [n_out]
    shapes = []
    for a, b in zip(dims[:-1], dims[1:]):
        shapes += [(a, b), (b,)]
    return shapes


def _input_width(kind: str, in_dim: int, pe_freqs: int) -> int:
    return in_dim * (1 + 2 * pe_freqs) if kind == "pe_mlp" else in_dim


def layer_map(kind: str, width: int, layer_counts, in_dim: int = 3,
              pe_freqs: int = 0) -> list[tuple[str, tuple]]:
    """(name, shape) for every parameter array, in storage order."""
    if kind == "voxel":
        return [("voxel.re", (width,) * in_dim), ("voxel.im", (width,) * in_dim)]
    n_in = _input_width(kind, in_dim, pe_freqs)
    names = ["A", "B"] if kind == "fouriernet" else ["net"]
    if len(layer_counts) != len(names):
        raise ValueError(f"{kind} needs {len(names)} layer counts, got {tuple(layer_counts)}")
    out = []
    for name, hidden in zip(names, layer_counts):
        for i, shape in enumerate(_branch_shapes(n_in, width, hidden)):
            out.append((f"{name}.{i // 2}.{'weight' if i % 2 == 0 else 'bias'}", shape))
    return out


def param_count(kind: str, width: int, layer_counts, in_dim: int = 3, pe_freqs: int = 0,
                bias: bool = True) -> int:
    total = 0
    for name, shape in layer_map(kind, width, layer_counts, in_dim, pe_freqs):
        if bias or not name.endswith("bias"):
            total += math.prod(shape)
    return total


def match_budget(kind: str, target: int, in_dim: int = 3, tol: float = 0.02,
                 layer_counts=None, pe_freqs: int = DEFAULT_PE_FREQS) -> tuple[int, tuple]:
    """Width (and depth, if needed) whose analytic parameter count is within ``tol`` of ``target``.

    The default depth is tried first; other depths are searched only when no
    integer width lands in the band.
    """
    if kind == "voxel":
        raise ValueError("voxel volumes have no width budget")
    pe = pe_freqs if kind == "pe_mlp" else 0
    base = tuple(layer_counts or DEFAULT_LAYERS[kind])
    candidates = [base]
    for extra in range(-2, 5):
        c = tuple(max(1, n + extra) for n in base)
        if c not in candidates:
            candidates.append(c)
    best = None
    for counts in candidates:
        # the count is quadratic in width: a W^2 + b W + c
        c0 = param_count(kind, 0, counts, in_dim, pe)
        c1 = param_count(kind, 1, counts, in_dim, pe) - c0
        c2 = param_count(kind, 2, counts, in_dim, pe) - c0
        qa = (c2 - 2 * c1) / 2
        qb = c1 - qa
        w = (-qb + math.sqrt(qb * qb + 4 * qa * (target - c0))) / (2 * qa)
        for width in {max(1, math.floor(w)), max(1, math.ceil(w))}:
            n = param_count(kind, width, counts, in_dim, pe)
            err = abs(n - target) / target
            if best is None or err < best[0]:
                best = (err, width, counts)
        if best[0] <= tol:
            return best[1], best[2]
    raise ValueError(f"no {kind} configuration within {tol:.0%} of {target} parameters")


# -- construction ------------------------------------------------------------
def make_volume(kind: str, hidden_width: int = 256, layer_counts=None, pixel_size: float = 1.0,
                in_dim: int = 3, seed: int = 0, zero_output: bool = True,
                exp_bias: float = 0.0, omega0: float = 30.0,
                pe_freqs: int = DEFAULT_PE_FREQS, output_scale: float = 1.0) -> ImplicitVolume:
    """Build a freshly initialised representation.

    Sinusoidal layers follow the usual SIREN initialisation. With
    ``zero_output`` the final layer of every branch starts at zero, except the
    exp branch's bias which is set to ``exp_bias`` (so FourierNet starts from
    an identically zero field whose magnitude branch is pre-scaled).
    """
    if kind not in KINDS:
        raise ValueError(f"unknown kind {kind!r}")
    rng = np.random.default_rng(seed)
    coord_scale = 2.0 * pixel_size
    if kind == "voxel":
        shapes = layer_map(kind, hidden_width, (), in_dim)
        params = [Tensor(np.zeros(s), requires_grad=True) for _, s in shapes]
        return ImplicitVolume(kind, hidden_width, (), coord_scale, params, shapes, in_dim, omega0,
                              0, output_scale)
    counts = tuple(layer_counts or DEFAULT_LAYERS[kind])
    pe = pe_freqs if kind == "pe_mlp" else 0
    shapes = layer_map(kind, hidden_width, counts, in_dim, pe)
    params = []
    for name, shape in shapes:
        branch, layer, what = name.split(".")
        layer = int(layer)
        n_in = shape[0] if what == "weight" else None
        last = layer == (counts[0 if branch in ("A", "net") else 1] + 1)
        if what == "weight":
            if last and zero_output:
                arr = np.zeros(shape)
            elif kind == "pe_mlp":
                arr = rng.normal(scale=math.sqrt(2.0 / n_in), size=shape)
            elif layer == 0:
                arr = rng.uniform(-1.0 / n_in, 1.0 / n_in, size=shape)
            else:
                bound = math.sqrt(6.0 / n_in) / omega0
                arr = rng.uniform(-bound, bound, size=shape)
        else:
            fan_in = dict(shapes)[f"{branch}.{layer}.weight"][0]
            if last and zero_output:
                arr = np.full(shape, exp_bias if branch == "A" else 0.0)
            elif kind == "pe_mlp":
                arr = np.zeros(shape)
            else:
                bound = 1.0 / math.sqrt(fan_in) / (omega0 if layer else 1.0)
                arr = rng.uniform(-bound, bound, size=shape)
        params.append(Tensor(arr, requires_grad=True))
    return ImplicitVolume(kind, hidden_width, counts, coord_scale, params, shapes, in_dim,
                          omega0, pe, output_scale)


def randomize(vol: ImplicitVolume, seed: int = 0, scale: float = 1.0) -> ImplicitVolume:
    """Copy of ``vol`` with every parameter redrawn (final layers included)."""
    rng = np.random.default_rng(seed)
    out = vol.copy()
    for p in out.params:
        fan = p.shape[0] if p.ndim == 2 else max(p.size, 1)
        p.data = (rng.normal(size=p.shape) * scale / math.sqrt(fan)).astype(p.data.dtype)
    return out


# -- evaluation --------------------------------------------------------------
def _canonical_signs(k: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sign that maps each point into the canonical half-space, and the imaginary-part factor.

    Canonical means k_x > 0, or k_x = 0 and k_y > 0, or k_x = k_y = 0 and
    k_z > 0 (lexicographic tie-break). The origin keeps sign +1 and has its
    imaginary part forced to zero so that V(0) is real.
    """
    sign = np.zeros(k.shape[:-1])
    for axis in range(k.shape[-1]):
        c = k[..., axis]
        undecided = sign == 0
        sign[undecided & (c > 0)] = 1.0
        sign[undecided & (c < 0)] = -1.0
    im_factor = sign.copy()
    sign[sign == 0] = 1.0
    return sign, im_factor


def _sin_branch(x: Tensor, params: list, omega0: float) -> Tensor:
    n = len(params) // 2
    for i in range(n - 1):
        x = dc.sin(dc.mul(dc.linear(x, params[2 * i], params[2 * i + 1]), omega0))
    return dc.linear(x, params[-2], params[-1])


def _relu_branch(x: Tensor, params: list) -> Tensor:
    n = len(params) // 2
    for i in range(n - 1):
        x = dc.relu(dc.linear(x, params[2 * i], params[2 * i + 1]))
    return dc.linear(x, params[-2], params[-1])


def _positional(x: Tensor, n_freqs: int) -> Tensor:
    feats = [x]
    for j in range(n_freqs):
        arg = dc.mul(x, math.pi * 2.0 ** j)
        feats += [dc.sin(arg), dc.cos(arg)]
    return dc.concat(feats, axis=-1)


def _voxel_eval(vol: ImplicitVolume, x: np.ndarray) -> Tensor:
    """Trilinear lookup; differentiable in the voxel values only."""
    M = vol.hidden_width
    pts = x * (M / 2) + M / 2
    base = np.clip(np.floor(pts).astype(int), 0, M - 2)
    frac = pts - base
    inside = np.all((pts >= 0) & (pts <= M - 1), axis=-1)
    flat_re = dc.reshape(vol.params[0], (-1,))
    flat_im = dc.reshape(vol.params[1], (-1,))
    outs = []
    for flat in (flat_re, flat_im):
        acc = None
        for corner in range(2 ** vol.in_dim):
            offs = [(corner >> a) & 1 for a in range(vol.in_dim)]
            w = np.ones(x.shape[:-1])
            idx = np.zeros(x.shape[:-1], dtype=int)
            for a, o in enumerate(offs):
                w = w * (frac[..., a] if o else 1 - frac[..., a])
            # cube indexed [z, y, x] for 3D, [y, x] for 2D
            for a in range(vol.in_dim):
                idx = idx * M + (base[..., vol.in_dim - 1 - a] + offs[vol.in_dim - 1 - a])
            term = dc.mul(dc.take(flat, idx.ravel(), 0), (w * inside).ravel())
            acc = term if acc is None else dc.add(acc, term)
        outs.append(dc.reshape(acc, x.shape[:-1]))
    return dc.stack(outs, axis=-1)


def evaluate(vol: ImplicitVolume, points) -> ComplexPair:
    """Hermitian-symmetrised field at ``points`` (..., in_dim) in 1/A.

    ``points`` may be a Tensor, in which case gradients flow back to the
    coordinates as well as to the parameters.
    """
    points = dc.as_tensor(points)
    if points.shape[-1] != vol.in_dim:
        raise dc.ShapeError(f"{vol.kind}_eval", points.shape, (vol.in_dim,))
    sign, im_factor = _canonical_signs(points.data)
    lead = points.shape[:-1]
    x = dc.mul(points, (sign * vol.coord_scale)[..., None])
    x = dc.reshape(x, (-1, vol.in_dim))
    if vol.kind == "fouriernet":
        na = 2 * (vol.layer_counts[0] + 2)
        a = _sin_branch(x, vol.params[:na], vol.omega0)
        b = _sin_branch(x, vol.params[na:], vol.omega0)
        out = dc.mul(dc.exp(dc.clip_max(a, EXP_CLAMP)), b)
    elif vol.kind == "siren":
        out = _sin_branch(x, vol.params, vol.omega0)
    elif vol.kind == "pe_mlp":
        out = _relu_branch(_positional(x, vol.pe_freqs), vol.params)
    else:
        out = _voxel_eval(vol, x.data)
    re = dc.mul(dc.reshape(out[:, 0], lead), vol.output_scale)
    im = dc.mul(dc.reshape(out[:, 1], lead), im_factor * vol.output_scale)
    return ComplexPair(re, im)


def _check_kind(vol: ImplicitVolume, kind: str) -> None:
    if vol.kind != kind:
        raise ValueError(f"expected a {kind} volume, got {vol.kind}")


def fouriernet_eval(vol: ImplicitVolume, points) -> ComplexPair:
    _check_kind(vol, "fouriernet")
    return evaluate(vol, points)


def siren_eval(vol: ImplicitVolume, points) -> ComplexPair:
    _check_kind(vol, "siren")
    return evaluate(vol, points)


def pemlp_eval(vol: ImplicitVolume, points) -> ComplexPair:
    _check_kind(vol, "pe_mlp")
    return evaluate(vol, points)


def rotated_points(R, kcoords: np.ndarray) -> Tensor:
    """k_2d -> R [k_x, k_y, 0]^T for one rotation (3, 3) or a batch (B, 3, 3).

    Returns (..., P, 3) for ``kcoords`` of shape (P, 2). Differentiable in R.
    """
    R = dc.as_tensor(R)
    cols = dc.swap_last(R[..., :, :2])                 # (..., 2, 3)
    return dc.matmul(Tensor(np.asarray(kcoords)), cols)


def slice_query(vol: ImplicitVolume, R, grid: FreqGrid2D) -> ComplexPair:
    """Central slice of ``vol`` at rotation(s) R on the image's frequency grid."""
    Rd = R.data if isinstance(R, Tensor) else np.asarray(R)
    for Ri in Rd.reshape(-1, 3, 3):
        check_rotation(Ri)
    L = grid.side
    pts = rotated_points(R, grid.coords.reshape(-1, 2))
    out = evaluate(vol, pts)
    return out.reshape(Rd.shape[:-2] + (L, L))


def _volume_points(side: int, pixel_size: float) -> np.ndarray:
    f = centered_freqs(side, pixel_size)
    z, y, x = np.meshgrid(f, f, f, indexing="ij")
    return np.stack([x, y, z], axis=-1)


def evaluate_grid(vol: ImplicitVolume, side: int, pixel_size: float,
                  chunk: int = 16384) -> np.ndarray:
    """Complex field on the centered side^3 grid (continuous-FT units), indexed [kz, ky, kx]."""
    pts = _volume_points(side, pixel_size).reshape(-1, 3)
    out = np.empty(len(pts), dtype=np.complex128)
    with dc.no_grad():
        for s in range(0, len(pts), chunk):
            out[s:s + chunk] = evaluate(vol, pts[s:s + chunk]).numpy()
    return out.reshape(side, side, side)


def _extract_complex(vol: ImplicitVolume, side: int, pixel_size: float) -> np.ndarray:
    if side % 2:
        raise ValueError(f"side must be even, got {side}")
    spec = evaluate_grid(vol, side, pixel_size) * band_mask(side, 3)
    spec *= continuous_to_dft(side, pixel_size, ndim=3)
    return ifftn_centered(spec)


def _leakage(v: np.ndarray) -> float:
    leak = np.abs(v.imag).max()
    return float(leak / max(np.abs(v.real).max(), 1e-300)) if leak > 0 else 0.0


def imaginary_leakage(vol: ImplicitVolume, side: int, pixel_size: float) -> float:
    """max|imag| / max|real| of the inverse transform of the sampled field."""
    return _leakage(_extract_complex(vol, side, pixel_size))


def extract_volume(vol: ImplicitVolume, side: int, pixel_size: float) -> np.ndarray:
    """Real-space density on a side^3 grid (indexed [z, y, x]).

    The index-0 planes (the unpaired -Nyquist frequency) are dropped before
    the inverse transform so that Hermitian symmetry holds on the whole grid.
    """
    v = _extract_complex(vol, side, pixel_size)
    leak = _leakage(v)
    if leak > LEAKAGE_TOL:
        raise LeakageError(f"imaginary leakage {leak:.2e} exceeds {LEAKAGE_TOL}")
    return v.real


# -- checkpoint ------------------------------------------------------------------
def volume_to_bytes(vol: ImplicitVolume) -> bytes:
    """CFIV | u32 version | u32 header length | JSON header | float64 LE parameters."""
    header = json.dumps(vol.header(), sort_keys=True).encode()
    return (CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(header)) + header
            + vol.flat().astype("<f8").tobytes())


def volume_from_bytes(buf: bytes, offset: int = 0) -> tuple[ImplicitVolume, int]:
    if buf[offset:offset + 4] != CHECKPOINT_MAGIC:
        raise ValueError("not a volume checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", buf, offset + 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"volume checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    start = offset + 12
    h = json.loads(buf[start:start + hlen].decode())
    vol = make_volume(h["kind"], h["hidden_width"], tuple(h["layer_counts"]) or None,
                      in_dim=h["in_dim"], omega0=h["omega0"], pe_freqs=h["pe_freqs"] or 0,
                      output_scale=h["output_scale"])
    vol.coord_scale = h["coord_scale"]
    n = vol.n_params
    pstart = start + hlen
    if len(buf) < pstart + 8 * n:
        raise ValueError(f"volume checkpoint truncated: need {pstart + 8 * n} bytes, have {len(buf)}")
    data = np.frombuffer(buf, dtype="<f8", count=n, offset=pstart)
    vol.load_flat(data)
    return vol, pstart + 8 * n


def save_volume(vol: ImplicitVolume, path) -> None:
    tmp = f"{os.fspath(path)}.tmp"
    Path(tmp).write_bytes(volume_to_bytes(vol))
    os.replace(tmp, path)


def load_volume(path) -> ImplicitVolume:
    return volume_from_bytes(Path(path).read_bytes())[0]


# -- 2D regression benchmark -------------------------------------------------------
@dataclass
class Fit2dResult:
    model: ImplicitVolume
    loss_trace: np.ndarray
    spectrum_mse: float
    image_mse: float
    image: np.ndarray


def _hermitian_residual(spec: np.ndarray) -> float:
    L = spec.shape[0]
    inner = spec[1:, 1:]
    mirrored = np.conj(inner[::-1, ::-1])
    scale = max(np.abs(inner).max(), 1e-300)
    return float(np.abs(inner - mirrored).max() / scale) if L > 1 else 0.0


def builtin_target(side: int = 64, seed: int = 3) -> np.ndarray:
    """High-dynamic-range test image: Gaussian blobs from sub-pixel to several pixels wide.

    Its spectrum spans well over four orders of magnitude inside the band.
    """
    rng = np.random.default_rng(seed)
    c = np.arange(side) - side // 2
    y, x = np.meshgrid(c, c, indexing="ij")
    img = np.zeros((side, side))
    for _ in range(12):
        mu = rng.uniform(-0.3 * side, 0.3 * side, size=2)
        s = rng.uniform(0.6, 4.0)
        a = rng.uniform(0.5, 1.5)
        img += a * np.exp(-((x - mu[0]) ** 2 + (y - mu[1]) ** 2) / (2 * s * s))
    return img


def dynamic_range(spectrum: np.ndarray) -> float:
    """log10 of max / min spectral magnitude over the in-band grid."""
    mag = np.abs(spectrum[band_mask(spectrum.shape[0])])
    return float(np.log10(mag.max() / max(mag.min(), 1e-300)))


def fit2d(target_spectrum: np.ndarray, kind: str, param_budget: int, iters: int,
          lr: float = 1e-4, seed: int = 0, batch: int | None = None,
          width: int | None = None, layer_counts=None, log_every: int = 1) -> Fit2dResult:
    """Regress a 2D representation onto a Hermitian L x L centered spectrum.

    Coordinates are pixel frequencies scaled so that Nyquist maps to 1. The
    loss is the mean squared complex error over the in-band grid; ``batch``
    draws a random subset of frequencies per step.
    """
    spec = np.asarray(target_spectrum)
    L = spec.shape[0]
    if spec.shape != (L, L) or L % 2:
        raise ValueError(f"target must be an even L x L spectrum, got {spec.shape}")
    if _hermitian_residual(spec) > 1e-8:
        raise ValueError("target spectrum is not Hermitian")
    if width is None:
        width, layer_counts = match_budget(kind, param_budget, in_dim=2, layer_counts=layer_counts)
    mask = band_mask(L)
    grid = FreqGrid2D(L, 1.0)
    pts = grid.coords[mask]
    # canonical half only: the other half is the conjugate and contributes equally
    sign, im_factor = _canonical_signs(pts)
    half = (sign > 0) & ~((im_factor == 0))
    keep = half | np.all(pts == 0, axis=-1)
    weight = np.where(np.all(pts[keep] == 0, axis=-1), 1.0, 2.0) / mask.sum()
    pts_h = pts[keep]
    tgt = spec[mask][keep]
    rms = float(max(np.sqrt(np.mean(np.abs(tgt) ** 2)), 1e-12))
    model = make_volume(kind, width, layer_counts, pixel_size=1.0, in_dim=2, seed=seed,
                        output_scale=rms)
    opt = dc.Adam(model.params, lr=lr)
    rng = np.random.default_rng(seed)
    trace = []
    t_re, t_im = tgt.real, tgt.imag
    for it in range(iters):
        idx = rng.choice(len(pts_h), batch, replace=False) if batch else slice(None)
        out = evaluate(model, pts_h[idx])
        w = weight[idx] * (len(pts_h) / len(pts_h[idx]))
        loss = dc.tsum(dc.mul(dc.add(dc.power(dc.sub(out.re, t_re[idx]), 2),
                                     dc.power(dc.sub(out.im, t_im[idx]), 2)), w))
        opt.zero_grad()
        loss.backward()
        opt.step()
        if it % log_every == 0:
            trace.append(loss.item())
    with dc.no_grad():
        full = np.zeros((L, L), dtype=np.complex128)
        full[mask] = evaluate(model, pts).numpy()
    spectrum_mse = float(np.mean(np.abs(full[mask] - spec[mask]) ** 2))
    image = ifft2_centered(full).real
    truth = ifft2_centered(spec * mask).real
    return Fit2dResult(model, np.array(trace), spectrum_mse,
                       float(np.mean((image - truth) ** 2)), image)


def fit2d_image(image: np.ndarray, kind: str, param_budget: int, iters: int, **kw) -> Fit2dResult:
    return fit2d(fft2_centered(image) * band_mask(image.shape[0]), kind, param_budget, iters, **kw)
