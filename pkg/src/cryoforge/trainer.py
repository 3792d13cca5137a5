"""Symmetric loss, pose bookkeeping and the joint encoder/volume training loop."""
from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .dataio import ParticleDataset
from .diffcore import ComplexPair, Tensor
from .forwardmodel import Pose, synthesize
from .implicitvol import ImplicitVolume, evaluate, rotated_points, volume_from_bytes, volume_to_bytes
from .metrics import (
    MIRROR, align_rotations, fit_volume_shift, fsc, resolution_at, translation_error_fitted,
)
from .poseencoder import PoseEncoder
from .spectral import (
    FreqGrid2D, band_mask, centered_freqs, continuous_to_dft, fft2_centered, ifftn_centered,
    negate_index,
)

RZ_PI = np.diag([-1.0, -1.0, 1.0])
CHECKPOINT_MAGIC = b"CFCK"
CHECKPOINT_VERSION = 1
METRIC_COLUMNS = ["iter", "loss", "fsc_resolution_px", "rot_err_median", "trans_err_mean",
                  "wall_seconds"]


class NumericalAbort(RuntimeError):
    """Training produced a non-finite loss; ``checkpoint`` holds the pre-step state."""

    def __init__(self, iteration: int, checkpoint: str | None):
        self.iteration = iteration
        self.checkpoint = checkpoint
        where = f"; diagnostic checkpoint at {checkpoint}" if checkpoint else ""
        super().__init__(f"non-finite loss at iteration {iteration}{where}")


# -- in-plane pi rotation ------------------------------------------------------
def rot180(x: np.ndarray) -> np.ndarray:
    """In-plane rotation by pi about the DC pixel (L/2, L/2): index i -> (L - i) mod L.

    Applied to a centered spectrum the same map sends k to -k. It is an
    involution on the last two axes.
    """
    x = np.asarray(x)
    L = x.shape[-1]
    if x.shape[-2] != L or L % 2:
        raise ValueError(f"rot180 needs an even square grid, got {x.shape}")
    idx = negate_index(L)
    return x[..., idx, :][..., :, idx]


def resolve_pose(predicted: Pose, branch: str) -> Pose:
    """Pose of the original image given the pose predicted on the winning branch."""
    if branch == "original":
        return predicted
    if branch != "rotated":
        raise ValueError(f"branch must be 'original' or 'rotated', got {branch!r}")
    return Pose(predicted.rotation @ RZ_PI, -predicted.translation)


# -- spectral sampling of the loss -----------------------------------------------
@dataclass
class SpectralSampler:
    """Frequencies entering the loss: the in-band disk |k| < L/2, one half-plane only.

    For real images the residual at -k equals the one at k, so the other half
    is accounted for with weight 2 (the DC term has weight 1).
    """
    grid: FreqGrid2D
    index: np.ndarray = field(init=False)
    kcoords: np.ndarray = field(init=False)
    weights: np.ndarray = field(init=False)

    def __post_init__(self):
        L = self.grid.side
        c = np.arange(L) - L // 2
        y, x = np.meshgrid(c, c, indexing="ij")
        disk = (x * x + y * y < (L // 2) ** 2) & band_mask(L)
        half = (y > 0) | ((y == 0) & (x >= 0))
        self.index = np.flatnonzero((disk & half).ravel())
        self.kcoords = self.grid.coords.reshape(-1, 2)[self.index]
        dc_pt = (x.ravel()[self.index] == 0) & (y.ravel()[self.index] == 0)
        self.weights = np.where(dc_pt, 1.0, 2.0)

    def take(self, arr: np.ndarray) -> np.ndarray:
        """Gather sampled frequencies from (..., L, L) arrays."""
        return arr.reshape(arr.shape[:-2] + (-1,))[..., self.index]


@dataclass
class PreparedData:
    """Per-dataset quantities computed once: sampled spectra and CTFs, the encoder's view."""
    sampler: SpectralSampler
    spectra: np.ndarray       # (N, P) complex, DFT units
    ctf: np.ndarray           # (N, P)
    images: np.ndarray        # (N, L, L)
    image_scale: float        # continuous-FT to DFT units for one image

    @classmethod
    def from_dataset(cls, ds: ParticleDataset) -> "PreparedData":
        sampler = SpectralSampler(ds.grid)
        spectra = sampler.take(fft2_centered(ds.images.astype(np.float64)))
        return cls(sampler, spectra, sampler.take(ds.ctf_array()), ds.images,
                   continuous_to_dft(ds.side, ds.pixel_size))

    def amplitude_scale(self) -> float:
        """RMS sampled spectral amplitude in continuous-FT units."""
        return float(np.sqrt(np.mean(np.abs(self.spectra) ** 2)) / self.image_scale)


def render(vol: ImplicitVolume, R, t, ctf: np.ndarray, kcoords: np.ndarray,
           image_scale: float) -> ComplexPair:
    """Predicted image spectra (B, P) at poses (R, t) for the sampled frequencies."""
    slices = evaluate(vol, rotated_points(R, kcoords))
    return synthesize(slices, ctf * image_scale, t, kcoords)


def _residuals(pred: ComplexPair, target: np.ndarray, weights: np.ndarray) -> Tensor:
    dre = dc.sub(pred.re, target.real)
    dim = dc.sub(pred.im, target.imag)
    return dc.tsum(dc.mul(dc.add(dc.mul(dre, dre), dc.mul(dim, dim)), weights), axis=-1)


@dataclass
class SymmetricLossOutput:
    loss: Tensor
    branch_won: np.ndarray           # True where the rotated branch won
    per_image_residuals: np.ndarray  # (B, 2): original, rotated
    rotations: np.ndarray            # raw predictions of the winning branch
    translations: np.ndarray


def symmetric_loss(images: np.ndarray, spectra: np.ndarray, ctf: np.ndarray,
                   encoder: PoseEncoder, vol: ImplicitVolume, sampler: SpectralSampler,
                   image_scale: float, mode: str = "symmetric") -> SymmetricLossOutput:
    """Sum over images of min(residual(Y), residual(rot180 Y)).

    Both branches are first evaluated without a tape; the graph is then built
    for the winning branch of each image only, so losing branches contribute
    exactly nothing to the gradients. ``mode='plain_l2'`` keeps the original
    branch everywhere. ``spectra`` and ``ctf`` are sampled with ``sampler``.
    """
    if mode not in ("symmetric", "plain_l2"):
        raise ValueError(f"unknown loss mode {mode!r}")
    images = np.asarray(images)
    B = len(images)
    if spectra.shape != (B, len(sampler.index)) or ctf.shape != spectra.shape:
        raise dc.ShapeError("symmetric_loss", images.shape, spectra.shape, ctf.shape)
    w = sampler.weights
    k = sampler.kcoords
    # rot180 sends k -> -k; for a real image Y(-k) = conj(Y(k)) on the sampled half-plane
    rot_spectra = np.conj(spectra)
    rot_images = rot180(images)
    res = np.zeros((B, 2))
    if mode == "symmetric":
        with dc.no_grad():
            for j, (imgs, tgt) in enumerate(((images, spectra), (rot_images, rot_spectra))):
                R, t = encoder.encode_batch(imgs)
                res[:, j] = _residuals(render(vol, R, t, ctf, k, image_scale), tgt, w).data
        won = res[:, 1] < res[:, 0]
    else:
        won = np.zeros(B, dtype=bool)
    chosen = np.where(won[:, None, None], rot_images, images)
    target = np.where(won[:, None], rot_spectra, spectra)
    R, t = encoder.encode_batch(chosen)
    r = _residuals(render(vol, R, t, ctf, k, image_scale), target, w)
    if mode == "plain_l2":
        res[:, 0] = r.data
        res[:, 1] = np.nan
    return SymmetricLossOutput(dc.tsum(r), won, res, R.data.astype(np.float64),
                               t.data.astype(np.float64))


# -- configuration -------------------------------------------------------------
@dataclass
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 1e-4
    max_iters: int = 1000
    seed: int = 0
    eval_every: int = 500
    loss_mode: str = "symmetric"
    eval_subset: int = 500
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")
        if self.loss_mode not in ("symmetric", "plain_l2"):
            raise ValueError(f"unknown loss mode {self.loss_mode!r}")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


class EpochSampler:
    """Seeded batches drawn without replacement within each epoch (remainder dropped)."""

    def __init__(self, n: int, batch_size: int, seed: int):
        if n < 1:
            raise ValueError("dataset is empty")
        self.n, self.batch = n, min(batch_size, n)
        self.rng = np.random.default_rng(seed)
        self.perm = self.rng.permutation(n)
        self.pos = 0

    def next(self) -> np.ndarray:
        if self.pos + self.batch > self.n:
            self.perm = self.rng.permutation(self.n)
            self.pos = 0
        out = self.perm[self.pos:self.pos + self.batch]
        self.pos += self.batch
        return out


# -- evaluation ------------------------------------------------------------------
@dataclass
class PoseEvaluation:
    poses: list
    branch_won: np.ndarray
    seconds: float

    @property
    def throughput(self) -> float:
        return len(self.poses) / self.seconds if self.seconds > 0 else math.inf

    def rotations(self) -> np.ndarray:
        return np.stack([p.rotation for p in self.poses])

    def translations(self) -> np.ndarray:
        return np.stack([p.translation for p in self.poses])


def evaluate_poses(dataset: ParticleDataset, encoder: PoseEncoder, vol: ImplicitVolume,
                   indices=None, chunk: int = 64, prepared: PreparedData | None = None,
                   mode: str = "symmetric") -> PoseEvaluation:
    """Resolved poses for every image: the branch with the smaller residual wins."""
    prep = prepared or PreparedData.from_dataset(dataset)
    idx = np.arange(len(dataset)) if indices is None else np.asarray(indices)
    start = time.perf_counter()
    poses, won = [], []
    with dc.no_grad():
        for s in range(0, len(idx), chunk):
            b = idx[s:s + chunk]
            out = symmetric_loss(prep.images[b], prep.spectra[b], prep.ctf[b], encoder, vol,
                                 prep.sampler, prep.image_scale, mode)
            for R, t, w in zip(out.rotations, out.translations, out.branch_won):
                U, _, Vt = np.linalg.svd(R)  # float32 round-off
                poses.append(resolve_pose(Pose(U @ Vt, t), "rotated" if w else "original"))
            won.append(out.branch_won)
    won = np.concatenate(won) if won else np.zeros(0, dtype=bool)
    return PoseEvaluation(poses, won, time.perf_counter() - start)


def aligned_volume(vol: ImplicitVolume, side: int, pixel_size: float, M: np.ndarray,
                   shift: np.ndarray, chunk: int = 16384) -> np.ndarray:
    """Real-space volume of q -> V(M q) exp(2 pi i (M q) . shift), i.e. the reconstruction
    expressed in the reference frame given the frame map M and 3D shift."""
    f = centered_freqs(side, pixel_size)
    z, y, x = np.meshgrid(f, f, f, indexing="ij")
    q = np.stack([x, y, z], axis=-1).reshape(-1, 3)
    p = q @ np.asarray(M).T
    out = np.empty(len(p), dtype=np.complex128)
    with dc.no_grad():
        for s in range(0, len(p), chunk):
            out[s:s + chunk] = evaluate(vol, p[s:s + chunk]).numpy()
    out *= np.exp(2j * np.pi * (p @ np.asarray(shift, dtype=np.float64)))
    spec = out.reshape(side, side, side) * band_mask(side, 3)
    return ifftn_centered(spec * continuous_to_dft(side, pixel_size, ndim=3)).real


@dataclass
class EvalMetrics:
    fsc_resolution_px: float
    rot_err_median: float
    trans_err_mean: float
    hand: str
    frame: np.ndarray
    shift: np.ndarray
    fsc_curve: object = None

    def row(self) -> dict:
        return {"fsc_resolution_px": self.fsc_resolution_px, "rot_err_median": self.rot_err_median,
                "trans_err_mean": self.trans_err_mean}


def compute_metrics(dataset: ParticleDataset, encoder: PoseEncoder, vol: ImplicitVolume,
                    subset: int | None = None, prepared: PreparedData | None = None,
                    gt_volume: np.ndarray | None = None, mode: str = "symmetric") -> EvalMetrics:
    """FSC-0.5 resolution against ground truth plus aligned pose errors.

    Poses come from :func:`evaluate_poses` on the first ``subset`` images. The
    global rotation and hand found by pose alignment, and the 3D shift fitted
    to the translations, put the reconstruction in the ground-truth frame
    before the FSC.
    """
    if dataset.gt_poses is None:
        raise ValueError("dataset has no ground-truth poses")
    n = len(dataset) if not subset else min(subset, len(dataset))
    ev = evaluate_poses(dataset, encoder, vol, np.arange(n), prepared=prepared, mode=mode)
    gt_R = dataset.gt_rotations()[:n]
    gt_t = dataset.gt_translations()[:n]
    al = align_rotations(ev.rotations(), gt_R)
    frame = al.G @ MIRROR if al.hand == "mirrored" else al.G
    ref = gt_R if al.hand == "same" else MIRROR @ gt_R @ MIRROR
    aligned_gt = al.G @ ref
    shift = fit_volume_shift(ev.translations(), gt_t, aligned_gt)
    terr = translation_error_fitted(ev.translations(), gt_t, aligned_gt, dataset.pixel_size)
    gt_vol = dataset.gt_volume() if gt_volume is None else gt_volume
    rec = aligned_volume(vol, dataset.side, dataset.pixel_size, frame, shift)
    curve = fsc(rec, gt_vol, dataset.pixel_size)
    return EvalMetrics(resolution_at(curve, 0.5).pixels, al.median, terr.mse_a2, al.hand, frame,
                       shift, curve)


# -- checkpoints -------------------------------------------------------------------
def checkpoint_bytes(iteration: int, config: TrainConfig, rng_state: dict,
                     encoder: PoseEncoder, vol: ImplicitVolume, extra: dict | None = None) -> bytes:
    header = {"iteration": iteration, "config_hash": config.digest(), "config": asdict(config),
              "rng_state": rng_state, **(extra or {})}
    h = json.dumps(header, sort_keys=True, default=int).encode()
    return (CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(h)) + h
            + encoder.to_bytes() + volume_to_bytes(vol))


def write_checkpoint(path, payload: bytes) -> str:
    path = os.fspath(path)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)
    return path


@dataclass
class Checkpoint:
    header: dict
    encoder: PoseEncoder
    volume: ImplicitVolume

    @property
    def iteration(self) -> int:
        return int(self.header["iteration"])

    @property
    def config(self) -> TrainConfig:
        return TrainConfig(**self.header["config"])


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a training checkpoint")
    version, hlen = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    header = json.loads(buf[12:12 + hlen].decode())
    enc, off = PoseEncoder.from_bytes(buf, 12 + hlen)
    vol, _ = volume_from_bytes(buf, off)
    return Checkpoint(header, enc, vol)


# -- training loop -------------------------------------------------------------------
@dataclass
class TrainResult:
    encoder: PoseEncoder
    volume: ImplicitVolume
    trace: list
    iterations: int
    losses: np.ndarray
    final_metrics: EvalMetrics | None = None


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


class MetricsWriter:
    """Append-only CSV with a provenance comment and a header row."""

    def __init__(self, path, comment: str | None = None):
        self.path = os.fspath(path)
        with open(self.path, "w", newline="") as fh:
            if comment:
                fh.write(f"# {comment}\n")
            csv.writer(fh).writerow(METRIC_COLUMNS)

    def append(self, row: dict) -> None:
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([_fmt(row.get(c)) for c in METRIC_COLUMNS])


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(line for line in fh if not line.startswith("#")))
    return [{k: (float(v) if v not in ("", None) else None) for k, v in r.items()} for r in rows]


def train(dataset: ParticleDataset, encoder: PoseEncoder, vol: ImplicitVolume,
          config: TrainConfig, run_dir=None, comment: str | None = None,
          log=None, eval_fn=None) -> TrainResult:
    """Joint Adam optimisation of encoder and volume on the chosen loss.

    Metrics are logged every ``eval_every`` iterations and after the last
    one; ``run_dir`` (optional) receives metrics.csv and checkpoints.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    prep = PreparedData.from_dataset(dataset)
    params = encoder.params + vol.params
    opt = dc.Adam(params, lr=config.learning_rate)
    sampler = EpochSampler(len(dataset), config.batch_size, config.seed)
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir:
        run_dir.mkdir(parents=True, exist_ok=True)
    writer = MetricsWriter(run_dir / "metrics.csv", comment) if run_dir else None
    has_gt = dataset.gt_poses is not None
    gt_vol = dataset.gt_volume() if has_gt else None
    trace: list[dict] = []
    losses = []
    t0 = time.perf_counter()
    window: list[float] = []
    last = None

    def metrics_row(it: int) -> dict:
        nonlocal last
        row = {"iter": it, "loss": float(np.mean(window)) if window else None,
               "wall_seconds": time.perf_counter() - t0}
        if has_gt:
            fn = eval_fn or compute_metrics
            last = fn(dataset, encoder, vol, config.eval_subset, prep, gt_vol, config.loss_mode)
            row.update(last.row())
        return row

    def emit(row: dict) -> None:
        trace.append(row)
        if writer:
            writer.append(row)
        if log:
            log(row)

    def snapshot(it: int) -> bytes:
        return checkpoint_bytes(it, config, sampler.rng.bit_generator.state, encoder, vol,
                                {"sampler_pos": sampler.pos})

    emit(metrics_row(0))
    for it in range(config.max_iters):
        b = sampler.next()
        out = symmetric_loss(prep.images[b], prep.spectra[b], prep.ctf[b], encoder, vol,
                             prep.sampler, prep.image_scale, config.loss_mode)
        value = out.loss.item()
        if not math.isfinite(value):
            path = None
            if run_dir:
                path = write_checkpoint(run_dir / "nan_abort.ckpt", snapshot(it))
            raise NumericalAbort(it, path)
        opt.zero_grad()
        out.loss.backward()
        opt.step()
        per_image = value / len(b)
        losses.append(per_image)
        window.append(per_image)
        done = it + 1
        if done % config.eval_every == 0 or done == config.max_iters:
            emit(metrics_row(done))
            window = []
        if run_dir and config.checkpoint_every and done % config.checkpoint_every == 0:
            write_checkpoint(run_dir / "checkpoint.ckpt", snapshot(done))
    if run_dir:
        write_checkpoint(run_dir / "checkpoint.ckpt", snapshot(config.max_iters))
    return TrainResult(encoder, vol, trace, config.max_iters, np.array(losses), last)


def default_volume_for(prep: PreparedData, kind: str, width: int, pixel_size: float,
                       seed: int = 0, layer_counts=None) -> ImplicitVolume:
    """Volume sized for a dataset: outputs scaled to the data's spectral amplitude."""
    from .implicitvol import make_volume
    return make_volume(kind, width, layer_counts, pixel_size=pixel_size, seed=seed,
                       output_scale=prep.amplitude_scale())
