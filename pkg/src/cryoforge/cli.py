"""Command-line entry point: simulate, train, eval, fit2d."""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .dataio import DataError, DatasetSpec, dataset_load, dataset_save, generate_dataset, mrc_write
from .implicitvol import (
    builtin_target, dynamic_range, extract_volume, fit2d, make_volume, match_budget,
)
from .metrics import MIRROR, align_rotations, fit_volume_shift, fsc, resolution_at
from .poseencoder import EncoderConfig, PoseEncoder
from .spectral import band_mask, fft2_centered, ifft2_centered
from .trainer import (
    NumericalAbort, PreparedData, TrainConfig, aligned_volume, compute_metrics, evaluate_poses,
    load_checkpoint, train,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    """Invalid flag combination; the message names the offending flag."""


# -- manifests ---------------------------------------------------------------
def _jsonable(v):
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, (np.integer, np.floating, np.bool_)):
        return v.item()
    return v


def manifest_hash(command: str, config: dict) -> str:
    blob = json.dumps({"command": command, "config": config, "version": __version__},
                      sort_keys=True, default=_jsonable)
    return hashlib.sha1(blob.encode()).hexdigest()


class RunManifest:
    def __init__(self, command: str, config: dict, seed, out_dir: Path):
        self.command = command
        self.config = {k: _jsonable(v) for k, v in config.items()}
        self.seed = seed
        self.out_dir = out_dir
        self.hash = manifest_hash(command, self.config)
        self.started = datetime.now(timezone.utc).isoformat()
        self.outputs: list[str] = []

    @property
    def comment(self) -> str:
        return f"manifest {self.hash}"

    def add(self, path) -> Path:
        self.outputs.append(os.path.relpath(path, self.out_dir))
        return Path(path)

    def write(self) -> None:
        doc = {"command": self.command, "config": self.config, "seed": self.seed,
               "artifact_hash": self.hash, "version": __version__,
               "started": self.started, "finished": datetime.now(timezone.utc).isoformat(),
               "outputs": sorted(self.outputs)}
        (self.out_dir / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True))


def _write_csv(path, header, rows, comment) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# {comment}\n")
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _line_plot(path, series: dict, xlabel: str, ylabel: str, title: str, logy=False) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    fig, ax = plt.subplots(figsize=(5, 3.5), dpi=100)
    for label, (x, y) in series.items():
        ax.plot(x, y, label=label)
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    if len(series) > 1:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def _image_plot(path, images: dict) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    fig, axes = plt.subplots(1, len(images), figsize=(3 * len(images), 3), dpi=100)
    for ax, (label, img) in zip(np.atleast_1d(axes), images.items()):
        ax.imshow(img, cmap="gray")
        ax.set_title(label)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def _prepare_out(path: str, dry_run: bool) -> Path:
    out = Path(path)
    if not dry_run:
        out.mkdir(parents=True, exist_ok=True)
    return out


def _print_config(command: str, config: dict) -> None:
    print(json.dumps({"command": command, "config": config}, indent=2, sort_keys=True,
                     default=_jsonable))


# -- simulate --------------------------------------------------------------------
def _parse_snr(v: str):
    if v.lower() in ("off", "none", "inf"):
        return None
    try:
        return float(v)
    except ValueError:
        raise argparse.ArgumentTypeError(f"--snr-db expects a number or 'off', got {v!r}")


def cmd_simulate(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    if args.size < 4 or args.size % 2:
        raise UsageError("--size must be an even integer >= 4")
    if args.apix <= 0:
        raise UsageError("--apix must be positive")
    if args.shift_sigma < 0:
        raise UsageError("--shift-sigma must be >= 0")
    phantom = None
    if args.phantom != "default":
        if not args.phantom.startswith("mrc:"):
            raise UsageError("--phantom must be 'default' or 'mrc:PATH'")
        phantom = args.phantom
    spec = DatasetSpec(n_particles=args.n, side=args.size, pixel_size=args.apix, phantom=phantom,
                       shift_sigma=args.shift_sigma, snr_db=args.snr_db, seed=args.seed,
                       inplane_range=args.inplane)
    config = {"n": args.n, "size": args.size, "apix": args.apix, "snr_db": args.snr_db,
              "shift_sigma": args.shift_sigma, "seed": args.seed, "inplane": args.inplane,
              "phantom": args.phantom}
    if args.dry_run:
        _print_config("simulate", config)
        return EXIT_OK
    out = _prepare_out(args.out, False)
    man = RunManifest("simulate", config, args.seed, out)
    ds = generate_dataset(spec)
    dataset_save(ds, out, comment=man.comment)
    for name in ("meta.json", "particles.f32", "ctf.csv", "gt_poses.csv"):
        man.add(out / name)
    gt = ds.gt_volume()
    if gt is not None:
        mrc_write(gt, spec.pixel_size, man.add(out / "gt_volume.mrc"))
    man.write()
    print(f"wrote {len(ds)} particles to {out}")
    return EXIT_OK


# -- train ---------------------------------------------------------------------
def _split(n: int, half: str) -> np.ndarray:
    idx = np.arange(n)
    if half == "a":
        return idx[0::2]
    if half == "b":
        return idx[1::2]
    return idx


def _channels(text: str) -> tuple:
    try:
        vals = tuple(int(c) for c in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not vals or any(v < 1 for v in vals):
        raise argparse.ArgumentTypeError(f"channel counts must be positive, got {text!r}")
    return vals


REP_KIND = {"fouriernet": "fouriernet", "siren": "siren", "pe_mlp": "pe_mlp"}


def build_models(args, ds, prep: PreparedData):
    kind = REP_KIND[args.rep]
    if args.budget:
        width, counts = match_budget(kind, args.budget)
    elif args.width:
        width, counts = args.width, None
    else:
        width, counts = match_budget(kind, DEFAULT_VOLUME_BUDGET)
    vol = make_volume(kind, width, counts, pixel_size=ds.pixel_size, seed=args.seed,
                      output_scale=prep.amplitude_scale())
    shift_sigma = ds.spec.shift_sigma if ds.spec.shift_sigma > 0 else ds.pixel_size
    enc_cfg = EncoderConfig(input_side=ds.side, conv_channels=args.conv_channels,
                            fc_width=args.fc_width, translation_range=3 * shift_sigma)
    return PoseEncoder(enc_cfg, seed=args.seed), vol


DEFAULT_VOLUME_BUDGET = 21000


def cmd_train(args) -> int:
    if args.iters < 0:
        raise UsageError("--iters must be >= 0")
    if args.batch < 1:
        raise UsageError("--batch must be >= 1")
    if not args.lr > 0:
        raise UsageError("--lr must be positive")
    if args.width and args.budget:
        raise UsageError("--width and --budget are mutually exclusive")
    loss_mode = "symmetric" if args.loss == "symmetric" else "plain_l2"
    config = {"data": os.path.abspath(args.data), "loss": args.loss, "rep": args.rep,
              "iters": args.iters, "batch": args.batch, "lr": args.lr, "seed": args.seed,
              "half": args.half, "width": args.width, "budget": args.budget,
              "conv_channels": list(args.conv_channels), "fc_width": args.fc_width,
              "eval_every": args.eval_every, "eval_subset": args.eval_subset}
    if args.dry_run:
        _print_config("train", config)
        return EXIT_OK
    ds = dataset_load(args.data)
    ds = ds.subset(_split(len(ds), args.half))
    out = _prepare_out(args.out, False)
    man = RunManifest("train", config, args.seed, out)
    prep = PreparedData.from_dataset(ds)
    enc, vol = build_models(args, ds, prep)
    tcfg = TrainConfig(batch_size=args.batch, learning_rate=args.lr, max_iters=args.iters,
                       seed=args.seed, eval_every=args.eval_every, loss_mode=loss_mode,
                       eval_subset=args.eval_subset, checkpoint_every=args.eval_every)

    def log(row):
        parts = [f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}"
                 for k, v in row.items() if v is not None]
        print(" ".join(parts), flush=True)

    try:
        res = train(ds, enc, vol, tcfg, run_dir=out, comment=man.comment, log=log)
    except NumericalAbort as exc:
        if exc.checkpoint:
            man.add(exc.checkpoint)
        man.write()
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    man.add(out / "metrics.csv")
    man.add(out / "checkpoint.ckpt")
    _write_csv(man.add(out / "loss.csv"), ["iter", "loss"],
               [[i + 1, repr(float(v))] for i, v in enumerate(res.losses)], man.comment)
    if len(res.losses):
        _line_plot(man.add(out / "loss.png"), {"loss": (np.arange(1, len(res.losses) + 1),
                                                        res.losses)},
                   "iteration", "loss per image", "training loss", logy=True)
    rows = [r for r in res.trace if r.get("fsc_resolution_px") is not None]
    if rows:
        _line_plot(man.add(out / "resolution.png"),
                   {"FSC-0.5": ([r["iter"] for r in rows], [r["fsc_resolution_px"] for r in rows])},
                   "iteration", "resolution (px)", "resolution vs ground truth")
    mrc_write(extract_volume(res.volume, ds.side, ds.pixel_size).astype(np.float32),
              ds.pixel_size, man.add(out / "volume.mrc"))
    man.write()
    return EXIT_OK


# -- eval ----------------------------------------------------------------------
def cmd_eval(args) -> int:
    if bool(args.ckpt) == bool(args.half_ckpts):
        raise UsageError("give exactly one of --ckpt or --half-ckpts")
    config = {"ckpt": args.ckpt, "half_ckpts": args.half_ckpts, "data": args.data,
              "subset": args.subset}
    if args.dry_run:
        _print_config("eval", config)
        return EXIT_OK
    out = _prepare_out(args.out, False)
    man = RunManifest("eval", config, None, out)
    if args.ckpt:
        result = _eval_gt(args, out, man)
    else:
        result = _eval_halves(args, out, man)
    # wall-clock numbers go to their own file so metrics.json stays reproducible
    timing = {"pose_throughput_per_s": result.pop("pose_throughput_per_s")}
    for name, doc in (("metrics.json", result), ("timing.json", timing)):
        man.add(out / name).write_text(json.dumps(doc, indent=2, sort_keys=True, default=_jsonable))
    man.write()
    print(json.dumps({**result, **timing}, sort_keys=True, default=_jsonable))
    return EXIT_OK


def _run_manifest_half(ckpt_path: str) -> str:
    man = Path(ckpt_path).parent / "manifest.json"
    if man.exists():
        return json.loads(man.read_text())["config"].get("half", "all")
    return "all"


def _load_for_eval(ckpt_path: str, data_path: str):
    ck = load_checkpoint(ckpt_path)
    ds = dataset_load(data_path)
    return ck, ds.subset(_split(len(ds), _run_manifest_half(ckpt_path)))


def _eval_gt(args, out: Path, man: RunManifest) -> dict:
    ck, ds = _load_for_eval(args.ckpt, args.data)
    if ds.gt_poses is None:
        raise DataError(f"{args.data}: no ground-truth poses for gt-mode evaluation")
    cfg = ck.config
    subset = args.subset if args.subset is not None else cfg.eval_subset
    prep = PreparedData.from_dataset(ds)
    m = compute_metrics(ds, ck.encoder, ck.volume, subset, prep, mode=cfg.loss_mode)
    ev = evaluate_poses(ds, ck.encoder, ck.volume, prepared=prep, mode=cfg.loss_mode)
    m.fsc_curve.to_csv(man.add(out / "fsc.csv"), man.comment)
    _write_pose_csv(man.add(out / "poses.csv"), ev, man.comment)
    res = resolution_at(m.fsc_curve, 0.5)
    return {"mode": "gt", "iteration": ck.iteration, "fsc_resolution_px": m.fsc_resolution_px,
            "fsc_resolution_angstrom": res.angstrom, "resolution_saturated": res.saturated,
            "rot_err_median": m.rot_err_median, "trans_err_mean": m.trans_err_mean,
            "hand": m.hand, "n_images": len(ds), "metric_subset": subset,
            "pose_throughput_per_s": ev.throughput}


def _write_pose_csv(path, ev, comment) -> None:
    rows = []
    for i, (p, w) in enumerate(zip(ev.poses, ev.branch_won)):
        rows.append([i] + [repr(float(v)) for v in p.rotation.ravel()]
                    + [repr(float(v)) for v in p.translation] + ["rotated" if w else "original"])
    header = ["index"] + [f"r{i}{j}" for i in range(3) for j in range(3)] + ["tx", "ty", "branch"]
    _write_csv(path, header, rows, comment)


def _eval_halves(args, out: Path, man: RunManifest) -> dict:
    ck_a = load_checkpoint(args.half_ckpts[0])
    ck_b = load_checkpoint(args.half_ckpts[1])
    ds = dataset_load(args.data)
    prep = PreparedData.from_dataset(ds)
    ev_a = evaluate_poses(ds, ck_a.encoder, ck_a.volume, prepared=prep, mode=ck_a.config.loss_mode)
    ev_b = evaluate_poses(ds, ck_b.encoder, ck_b.volume, prepared=prep, mode=ck_b.config.loss_mode)
    # express half B in half A's frame: R_b ~ G R_a (or its mirror)
    al = align_rotations(ev_b.rotations(), ev_a.rotations())
    ref = ev_a.rotations() if al.hand == "same" else MIRROR @ ev_a.rotations() @ MIRROR
    aligned = al.G @ ref
    shift = fit_volume_shift(ev_b.translations(), ev_a.translations(), aligned)
    frame = al.G @ MIRROR if al.hand == "mirrored" else al.G
    vol_a = extract_volume(ck_a.volume, ds.side, ds.pixel_size)
    vol_b = aligned_volume(ck_b.volume, ds.side, ds.pixel_size, frame, shift)
    curve = fsc(vol_a, vol_b, ds.pixel_size)
    curve.to_csv(man.add(out / "fsc.csv"), man.comment)
    res = resolution_at(curve, 0.143)
    return {"mode": "half", "fsc_resolution_px": res.pixels, "fsc_resolution_angstrom": res.angstrom,
            "resolution_saturated": res.saturated, "cutoff": 0.143,
            "half_alignment_median": al.median, "hand": al.hand,
            "pose_throughput_per_s": 0.5 * (ev_a.throughput + ev_b.throughput)}


# -- fit2d ---------------------------------------------------------------------
def _read_image(path: str) -> np.ndarray:
    from PIL import Image
    try:
        with Image.open(path) as im:
            img = np.asarray(im.convert("F"), dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise DataError(f"{path}: cannot read image ({exc})") from exc
    side = min(img.shape)
    side -= side % 2
    if side < 4:
        raise DataError(f"{path}: image too small")
    return img[:side, :side]


def cmd_fit2d(args) -> int:
    if args.budget < 100:
        raise UsageError("--budget must be >= 100")
    if args.iters < 0:
        raise UsageError("--iters must be >= 0")
    config = {"image": args.image, "budget": args.budget, "iters": args.iters, "lr": args.lr,
              "seed": args.seed, "size": args.size}
    if args.dry_run:
        _print_config("fit2d", config)
        return EXIT_OK
    img = _read_image(args.image) if args.image else builtin_target(args.size)
    out = _prepare_out(args.out, False)
    man = RunManifest("fit2d", config, args.seed, out)
    target = fft2_centered(img) * band_mask(img.shape[0])
    results = {}
    for kind in ("fouriernet", "siren"):
        results[kind] = fit2d(target, kind, args.budget, args.iters, lr=args.lr, seed=args.seed)
    rows = [[kind, r.model.n_params, r.model.hidden_width, "-".join(map(str, r.model.layer_counts)),
             repr(r.spectrum_mse), repr(r.image_mse)] for kind, r in results.items()]
    _write_csv(man.add(out / "comparison.csv"),
               ["kind", "n_params", "width", "layers", "spectrum_mse", "image_mse"], rows,
               man.comment)
    n = max(len(r.loss_trace) for r in results.values())
    trace_rows = [[i] + [repr(float(r.loss_trace[i])) if i < len(r.loss_trace) else ""
                         for r in results.values()] for i in range(n)]
    _write_csv(man.add(out / "loss_traces.csv"), ["iter"] + list(results), trace_rows, man.comment)
    if n:
        _line_plot(man.add(out / "loss_traces.png"),
                   {k: (np.arange(len(r.loss_trace)), r.loss_trace) for k, r in results.items()},
                   "iteration", "spectrum loss", "2D fit", logy=True)
    truth = ifft2_centered(target).real
    _image_plot(man.add(out / "reconstructions.png"),
                {"target": truth, **{k: r.image for k, r in results.items()}})
    for k, r in results.items():
        np.save(man.add(out / f"{k}_image.npy"), r.image)
    man.write()
    print(json.dumps({k: {"n_params": r.model.n_params, "image_mse": r.image_mse,
                          "spectrum_mse": r.spectrum_mse} for k, r in results.items()},
                     sort_keys=True))
    print(f"target dynamic range: {dynamic_range(target):.2f} decades")
    return EXIT_OK


# -- parser --------------------------------------------------------------------
class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cryoforge", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="generate a synthetic particle dataset")
    s.add_argument("--out", required=True, help="output dataset directory")
    s.add_argument("--n", type=int, default=2000, help="number of particles")
    s.add_argument("--size", type=int, default=32, help="box side L (even)")
    s.add_argument("--apix", type=float, default=6.0, help="pixel size (A)")
    s.add_argument("--snr-db", type=_parse_snr, default=None, help="SNR in dB, or 'off'")
    s.add_argument("--shift-sigma", type=float, default=5.0, help="translation std (A)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--inplane", choices=("full", "half"), default="full")
    s.add_argument("--phantom", default="default", help="'default' or mrc:PATH")
    s.add_argument("--dry-run", action="store_true", help="print the resolved config only")
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", help="joint encoder/volume training")
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--loss", choices=("symmetric", "l2"), default="symmetric")
    t.add_argument("--rep", choices=tuple(REP_KIND), default="fouriernet")
    t.add_argument("--iters", type=int, default=20000)
    t.add_argument("--batch", type=int, default=32)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--half", choices=("a", "b", "all"), default="all")
    t.add_argument("--width", type=int, default=None, help="hidden width of the volume network")
    t.add_argument("--budget", type=int, default=None, help="match this parameter count")
    t.add_argument("--conv-channels", type=_channels, default=(16, 32, 64, 128))
    t.add_argument("--fc-width", type=int, default=256)
    t.add_argument("--eval-every", type=int, default=1000)
    t.add_argument("--eval-subset", type=int, default=500)
    t.add_argument("--dry-run", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint (gt mode) or two half runs")
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--ckpt", help="checkpoint for ground-truth evaluation")
    e.add_argument("--half-ckpts", nargs=2, metavar=("A", "B"), help="two half-set checkpoints")
    e.add_argument("--subset", type=int, default=None,
                   help="images used for the metrics (default: the training run's setting)")
    e.add_argument("--dry-run", action="store_true")
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("fit2d", help="2D FourierNet vs SIREN regression benchmark")
    f.add_argument("--out", required=True)
    f.add_argument("--image", default=None, help="grayscale PNG/PGM; built-in target if omitted")
    f.add_argument("--size", type=int, default=64, help="side of the built-in target")
    f.add_argument("--budget", type=int, default=300000)
    f.add_argument("--iters", type=int, default=1000)
    f.add_argument("--lr", type=float, default=1e-4)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--dry-run", action="store_true")
    f.set_defaults(func=cmd_fit2d)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"cryoforge: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, ValueError) as exc:
        print(f"cryoforge: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalAbort as exc:
        print(f"cryoforge: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
