"""Amortized pose encoder: low-pass filter bank, conv feature extractor, pose heads."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import convolve1d

from . import diffcore as dc
from .diffcore import Tensor

ENCODER_MAGIC = b"CFEN"
ENCODER_VERSION = 1


@dataclass
class EncoderConfig:
    input_side: int = 32
    filter_sigmas: tuple = (1.0, 2.5, 5.0)
    conv_channels: tuple = (32, 64, 128, 256)
    fc_width: int = 256
    translation_range: float = 15.0  # A, bound of the tanh translation head

    def __post_init__(self):
        self.filter_sigmas = tuple(float(s) for s in self.filter_sigmas)
        self.conv_channels = tuple(int(c) for c in self.conv_channels)
        if any(s <= 0 for s in self.filter_sigmas):
            raise ValueError("filter sigmas must be positive")
        if not self.conv_channels:
            raise ValueError("need at least one conv block")
        if self.input_side % (2 ** len(self.conv_channels)):
            raise ValueError(f"input side {self.input_side} does not survive "
                             f"{len(self.conv_channels)} 2x2 poolings")
        if self.translation_range <= 0:
            raise ValueError("translation_range must be positive")

    @property
    def n_filters(self) -> int:
        return 1 + len(self.filter_sigmas)


def gaussian_kernel(sigma: float) -> np.ndarray:
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    r = math.ceil(3 * sigma)
    x = np.arange(-r, r + 1)
    k = np.exp(-x * x / (2 * sigma * sigma))
    return k / k.sum()


def gaussian_filter_bank(image: np.ndarray, sigmas) -> np.ndarray:
    """Identity channel followed by one normalized Gaussian low-pass per sigma.

    Works on a single L x L image or a stack (..., L, L); zero padding.
    """
    image = np.asarray(image)
    chans = [image]
    for s in sigmas:
        k = gaussian_kernel(s)
        y = convolve1d(image, k, axis=-1, mode="constant")
        chans.append(convolve1d(y, k, axis=-2, mode="constant"))
    return np.stack(chans, axis=-3)


def standardize(images: np.ndarray) -> np.ndarray:
    """Per-image zero mean and unit variance (constant images only get centred)."""
    x = np.asarray(images, dtype=np.float64)
    mu = x.mean(axis=(-2, -1), keepdims=True)
    sd = x.std(axis=(-2, -1), keepdims=True)
    return (x - mu) / np.where(sd > 0, sd, 1.0)


def _cross(a: list, b: list) -> list:
    return [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]


def s2s2_to_rotation(v) -> Tensor:
    """Gram-Schmidt map from a 6-vector (or batch (B, 6)) to a rotation whose columns are
    normalize(v1), normalize(v2 - (v2 . c1) c1) and their cross product."""
    v = dc.as_tensor(v)
    if v.shape[-1] != 6:
        raise dc.ShapeError("s2s2_to_rotation", v.shape, (6,))
    a1, a2 = v.data[..., :3], v.data[..., 3:]
    n1 = np.linalg.norm(a1, axis=-1)
    n2 = np.linalg.norm(a2, axis=-1)
    if np.any(n1 == 0) or np.any(n2 == 0):
        raise ValueError("s2s2_to_rotation: zero input vector")
    cosang = np.abs(np.einsum("...i,...i->...", a1, a2)) / (n1 * n2)
    if np.any(1 - cosang < 1e-12):
        raise ValueError("s2s2_to_rotation: parallel input vectors")
    x = [v[..., i] for i in range(6)]
    inv1 = dc.power(x[0] * x[0] + x[1] * x[1] + x[2] * x[2], -0.5)
    c1 = [x[i] * inv1 for i in range(3)]
    d = x[3] * c1[0] + x[4] * c1[1] + x[5] * c1[2]
    u = [x[3 + i] - d * c1[i] for i in range(3)]
    inv2 = dc.power(u[0] * u[0] + u[1] * u[1] + u[2] * u[2], -0.5)
    c2 = [u[i] * inv2 for i in range(3)]
    c3 = _cross(c1, c2)
    rows = [dc.stack([c1[i], c2[i], c3[i]], axis=-1) for i in range(3)]
    return dc.stack(rows, axis=-2)


class PoseEncoder:
    """Image -> (rotation, translation) network with explicit parameter tensors."""

    def __init__(self, config: EncoderConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        self.names: list[str] = []
        self.params: list[Tensor] = []
        c_in = config.n_filters
        for i, c_out in enumerate(config.conv_channels):
            fan = c_in * 9
            self._add(f"conv{i}.weight", rng.normal(scale=math.sqrt(2 / fan), size=(c_out, c_in, 3, 3)))
            self._add(f"conv{i}.bias", np.zeros(c_out))
            c_in = c_out
        w = config.fc_width
        self._add("fc.weight", rng.normal(scale=math.sqrt(2 / c_in), size=(c_in, w)))
        self._add("fc.bias", np.zeros(w))
        self._add("rot.weight", rng.normal(scale=math.sqrt(1 / w), size=(w, 6)))
        self._add("rot.bias", np.zeros(6))
        self._add("trans.weight", rng.normal(scale=0.1 * math.sqrt(1 / w), size=(w, 2)))
        self._add("trans.bias", np.zeros(2))

    def _add(self, name: str, arr: np.ndarray) -> None:
        self.names.append(name)
        self.params.append(Tensor(arr, requires_grad=True))

    def __getitem__(self, name: str) -> Tensor:
        return self.params[self.names.index(name)]

    @property
    def n_params(self) -> int:
        return int(sum(p.size for p in self.params))

    def flat(self) -> np.ndarray:
        return np.concatenate([p.data.ravel().astype(np.float64) for p in self.params])

    def load_flat(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec)
        if vec.size != self.n_params:
            raise ValueError(f"expected {self.n_params} encoder values, got {vec.size}")
        off = 0
        for p in self.params:
            p.data = vec[off:off + p.size].reshape(p.shape).astype(p.data.dtype)
            off += p.size

    def preprocess(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images)
        L = self.config.input_side
        if images.shape[-2:] != (L, L):
            raise dc.ShapeError("encode", images.shape, (L, L))
        return gaussian_filter_bank(standardize(images), self.config.filter_sigmas)

    def features(self, bank: np.ndarray) -> Tensor:
        h = Tensor(bank)
        for i in range(len(self.config.conv_channels)):
            h = dc.conv2d(h, self[f"conv{i}.weight"], self[f"conv{i}.bias"])
            h = dc.maxpool2x2(dc.relu(h))
        h = dc.mean(h, axis=(2, 3))
        return dc.relu(dc.linear(h, self["fc.weight"], self["fc.bias"]))

    def encode_batch(self, images: np.ndarray) -> tuple[Tensor, Tensor]:
        """(B, L, L) images -> rotations (B, 3, 3) and translations (B, 2) in A."""
        images = np.asarray(images)
        if images.ndim != 3:
            raise dc.ShapeError("encode_batch", images.shape, ("B", "L", "L"))
        h = self.features(self.preprocess(images))
        R = s2s2_to_rotation(dc.linear(h, self["rot.weight"], self["rot.bias"]))
        t = dc.mul(dc.tanh(dc.linear(h, self["trans.weight"], self["trans.bias"])),
                   self.config.translation_range)
        return R, t

    def to_bytes(self) -> bytes:
        header = json.dumps(asdict(self.config), sort_keys=True).encode()
        return (ENCODER_MAGIC + struct.pack("<II", ENCODER_VERSION, len(header)) + header
                + self.flat().astype("<f8").tobytes())

    @classmethod
    def from_bytes(cls, buf: bytes, offset: int = 0) -> tuple["PoseEncoder", int]:
        if buf[offset:offset + 4] != ENCODER_MAGIC:
            raise ValueError("not an encoder checkpoint (bad magic)")
        version, hlen = struct.unpack_from("<II", buf, offset + 4)
        if version != ENCODER_VERSION:
            raise ValueError(f"encoder checkpoint version {version}, expected {ENCODER_VERSION}")
        start = offset + 12
        cfg = EncoderConfig(**json.loads(buf[start:start + hlen].decode()))
        enc = cls(cfg)
        n = enc.n_params
        if len(buf) < start + hlen + 8 * n:
            raise ValueError("encoder checkpoint truncated")
        data = np.frombuffer(buf, dtype="<f8", count=n, offset=start + hlen)
        enc.load_flat(data)
        return enc, start + hlen + 8 * n


def encode(image: np.ndarray, config: EncoderConfig, params: PoseEncoder) -> tuple[np.ndarray, np.ndarray]:
    """Single image -> (3x3 rotation, translation in A), no gradient tape."""
    if params.config != config:
        raise ValueError("encoder parameters were built for a different config")
    with dc.no_grad():
        R, t = params.encode_batch(np.asarray(image)[None])
    return R.data[0].astype(np.float64), t.data[0].astype(np.float64)
