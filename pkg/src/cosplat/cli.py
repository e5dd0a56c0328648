"""Batch experiment runner: scene generation, training, co-adaptation and
color-variance evaluation, image metrics, and ablation sweeps.

Commands: gen, train, ca, cv, metrics, sweep, render. Every command is
deterministic under its explicit seed; every CSV starts with a provenance
comment line (tool version, reconstructed command, seed) and reruns are
byte-identical. Figures are written next to each CSV.

Exit codes: 0 ok, 2 I/O error, 3 numeric divergence, 64 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import __version__
from .coadaptation import ca_score, cv_score, effective_drop_ratio
from .core import GaussianCloud
from .metrics import depth_metrics, psnr, ssim
from .plots import (
    save_heatmap,
    save_sweep_lines,
    save_training_curves,
    save_view_bars,
)
from .regularizers import test_time_opacity_scale
from .renderer import render
from .scene import (
    CameraRig,
    CloudFormatError,
    SceneSpec,
    load_cloud,
    load_image,
    load_manifest,
    make_rig,
    make_scene,
    perturb_cloud,
    random_init_cloud,
    render_dataset,
    save_cloud,
    save_image,
    save_manifest,
    split_views,
)
from .trainer import DivergenceError, TrainConfig, train

EXIT_OK = 0
EXIT_IO = 2
EXIT_DIVERGED = 3
EXIT_USAGE = 64

# Config keys beyond TrainConfig: initialization and split control.
EXTRA_CONFIG_KEYS = {
    "init_mode": "random",        # random | perturbed-gt
    "init_count": 150,
    "sh_degree": 0,
    "n_train": 3,
    "split_protocol": "every-kth",
}
TRAIN_CONFIG_KEYS = tuple(f.name for f in dataclasses.fields(TrainConfig))
VALID_CONFIG_KEYS = tuple(TRAIN_CONFIG_KEYS) + tuple(EXTRA_CONFIG_KEYS)

SWEEP_KINDS = ("views", "dropout", "sigma", "strategy", "sh-degree")


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _provenance(argv: List[str], seed) -> str:
    return f"# cosplat {__version__} | {' '.join(argv)} | seed={seed}"


def _fmt(value) -> str:
    if value is None:
        return "NA"
    if isinstance(value, (float, np.floating)):
        if not np.isfinite(value):
            return "NA"
        return repr(float(value))
    return str(value)


def _write_csv(path: Path, provenance: str, header: List[str], rows) -> None:
    lines = [provenance, ",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n")


def _load_dataset(dataset_dir: Path):
    """(cameras, images, gt_cloud_or_None) from a generated dataset directory."""
    manifest = dataset_dir / "manifest.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest.txt in {dataset_dir}")
    entries = load_manifest(manifest)
    cams, images = [], []
    for rel, cam in entries:
        cams.append(cam)
        images.append(np.asarray(load_image(dataset_dir / rel), dtype=np.float64))
    gt_path = dataset_dir / "gt.cspl"
    gt = load_cloud(gt_path) if gt_path.exists() else None
    return cams, images, gt


def _load_config(path: Optional[Path]):
    """Flat JSON config split into (TrainConfig, extras dict)."""
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {path} is not valid JSON: {exc}")
        if not isinstance(raw, dict):
            raise UsageError(f"config {path} must be a flat JSON object")
    unknown = sorted(set(raw) - set(VALID_CONFIG_KEYS))
    if unknown:
        raise UsageError(
            f"unknown config key(s) {', '.join(unknown)}; "
            f"valid keys: {', '.join(sorted(VALID_CONFIG_KEYS))}"
        )
    extras = dict(EXTRA_CONFIG_KEYS)
    extras.update({k: raw[k] for k in EXTRA_CONFIG_KEYS if k in raw})
    cfg = TrainConfig(**{k: raw[k] for k in TRAIN_CONFIG_KEYS if k in raw})
    return cfg, extras


def _read_split(run_dir: Path):
    split_path = run_dir / "split.txt"
    labels = {}
    if split_path.exists():
        for line in split_path.read_text().splitlines():
            idx, label = line.split()
            labels[int(idx)] = label
    return labels


# ---------------------------------------------------------------------------
# Commands.
# ---------------------------------------------------------------------------

def cmd_gen(args, argv) -> int:
    spec = SceneSpec(
        kind=args.kind, gaussian_count=args.count, extent=args.extent,
        palette=args.palette, seed=args.seed,
    )
    rig = CameraRig(
        kind=args.rig, count=args.views, radius=args.radius,
        jitter_seed=args.seed, width=args.width, height=args.height,
    )
    gt = make_scene(spec)
    cams = make_rig(rig)
    images = render_dataset(gt, cams)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_cloud(out / "gt.cspl", gt)
    entries = []
    for i, (cam, img) in enumerate(zip(cams, images)):
        name = f"view_{i:03d}.pfm"
        save_image(out / name, img)
        save_image(out / f"view_{i:03d}.ppm", img)
        entries.append((name, cam))
    save_manifest(out / "manifest.txt", entries)
    print(f"wrote {len(entries)} views to {out}")
    return EXIT_OK


def _build_init(extras, gt, cams, extent_guess):
    if extras["init_mode"] == "perturbed-gt":
        if gt is None:
            raise UsageError("init_mode perturbed-gt needs gt.cspl in the dataset dir")
        return perturb_cloud(gt, position_sigma=0.05, color_sigma=0.05, seed=13)
    if extras["init_mode"] != "random":
        raise UsageError("init_mode must be 'random' or 'perturbed-gt'")
    return random_init_cloud(
        int(extras["init_count"]), extent_guess, seed=13, sh_degree=int(extras["sh_degree"])
    )


def _run_training(dataset_dir: Path, cfg: TrainConfig, extras, out_dir: Path, argv):
    cams, images, gt = _load_dataset(dataset_dir)
    n_train = int(extras["n_train"])
    if n_train == len(cams):
        train_idx, test_idx = list(range(len(cams))), []
    else:
        train_idx, test_idx = split_views(cams, n_train, extras["split_protocol"])
    train_views = [(cams[i], images[i]) for i in train_idx]
    test_views = [(cams[i], images[i]) for i in test_idx]
    extent = 0.55 * float(np.mean([np.linalg.norm(c.center) for c in cams]))
    init = _build_init(extras, gt, cams, extent)
    run = train(init, train_views, test_views, cfg)

    out_dir.mkdir(parents=True, exist_ok=True)
    save_cloud(out_dir / "checkpoint.cspl", run.cloud)
    resolved = {**dataclasses.asdict(cfg), **extras}
    (out_dir / "resolved_config.json").write_text(
        json.dumps(resolved, indent=2, sort_keys=True) + "\n"
    )
    (out_dir / "split.txt").write_text(
        "\n".join(
            [f"{i} train" for i in train_idx] + [f"{i} test" for i in test_idx]
        ) + "\n"
    )
    header = [
        "iteration", "train_loss", "train_psnr", "test_psnr",
        "train_ca", "test_ca", "gaussian_count",
    ]
    rows = [
        (r.iteration, r.train_loss, r.train_psnr, r.test_psnr,
         r.train_ca, r.test_ca, r.gaussian_count)
        for r in run.log
    ]
    _write_csv(out_dir / "trainlog.csv", _provenance(argv, cfg.seed), header, rows)
    save_training_curves(out_dir / "trainlog.png", run.log)
    return run


def cmd_train(args, argv) -> int:
    cfg, extras = _load_config(args.config)
    run = _run_training(Path(args.dataset), cfg, extras, Path(args.out), argv)
    final = run.log[-1]
    print(
        f"finished {cfg.iterations} iterations: "
        f"train {final.train_psnr:.2f} dB, test {final.test_psnr:.2f} dB"
    )
    return EXIT_OK


def cmd_ca(args, argv) -> int:
    if args.K < 2:
        raise UsageError("--K must be >= 2 (variance needs at least two samples)")
    cloud = load_cloud(args.checkpoint)
    cams, _, _ = _load_dataset(Path(args.dataset))
    labels = _read_split(Path(args.checkpoint).parent)
    drop_ratio = effective_drop_ratio(args.train_p)
    scale = test_time_opacity_scale(args.train_p)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, cam in enumerate(cams):
        rep = ca_score(
            cloud, cam, drop_ratio, K=args.K, threshold=args.threshold,
            seed=args.seed + i, opacity_scale=scale,
        )
        split = labels.get(i, "test")
        rows.append(
            (i, split, rep.ca if rep.defined else None, rep.K, rep.drop_ratio,
             rep.visible_fraction if rep.defined else 0.0, args.seed + i)
        )
        if args.save_maps:
            save_image(out / f"variance_{i:03d}.pfm", rep.variance_map)
            save_heatmap(
                out / f"variance_{i:03d}.png", rep.variance_map,
                title=f"view {i} ({split})", label="pixel variance",
            )
    header = ["view_id", "split", "ca", "K", "drop_ratio", "visible_fraction", "seed"]
    _write_csv(out / "ca.csv", _provenance(argv, args.seed), header, rows)
    save_view_bars(
        out / "ca.png", [r[0] for r in rows], [r[2] for r in rows],
        [r[1] for r in rows], ylabel="CA score",
    )
    print(f"wrote {out / 'ca.csv'}")
    return EXIT_OK


def cmd_cv(args, argv) -> int:
    cloud = load_cloud(args.checkpoint)
    cams, _, _ = _load_dataset(Path(args.dataset))
    labels = _read_split(Path(args.checkpoint).parent)
    scale = test_time_opacity_scale(args.train_p)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, cam in enumerate(cams):
        cv, cv_map, covered = cv_score(cloud, cam, opacity_scale=scale)
        rows.append((i, labels.get(i, "test"), cv, float(covered.mean())))
        if args.save_maps:
            save_image(out / f"cv_{i:03d}.pfm", cv_map)
            save_heatmap(out / f"cv_{i:03d}.png", cv_map, title=f"view {i}", label="CV")
    header = ["view_id", "split", "cv", "covered_fraction"]
    _write_csv(out / "cv.csv", _provenance(argv, "-"), header, rows)
    save_view_bars(
        out / "cv.png", [r[0] for r in rows], [r[2] for r in rows],
        [r[1] for r in rows], ylabel="CV",
    )
    print(f"wrote {out / 'cv.csv'}")
    return EXIT_OK


def cmd_metrics(args, argv) -> int:
    cloud = load_cloud(args.checkpoint)
    cams, images, gt = _load_dataset(Path(args.dataset))
    labels = _read_split(Path(args.checkpoint).parent)
    scale = test_time_opacity_scale(args.train_p)
    rows = []
    for i, (cam, target) in enumerate(zip(cams, images)):
        out_r = render(cloud, cam, opacity_scale=scale)
        row = [i, labels.get(i, "test"), psnr(out_r.color, target), ssim(out_r.color, target)]
        if gt is not None:
            gt_out = render(gt, cam)
            valid = (gt_out.alpha > 0.5) & (out_r.alpha > 0.5) & (gt_out.depth > 0)
            if valid.any():
                dm = depth_metrics(out_r.depth, gt_out.depth, valid)
                row += [dm.absrel, dm.rmse]
            else:
                row += [None, None]
        else:
            row += [None, None]
        rows.append(tuple(row))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    header = ["view_id", "split", "psnr", "ssim", "depth_absrel", "depth_rmse"]
    _write_csv(out / "metrics.csv", _provenance(argv, "-"), header, rows)
    save_view_bars(
        out / "metrics.png", [r[0] for r in rows], [r[2] for r in rows],
        [r[1] for r in rows], ylabel="PSNR (dB)",
    )
    print(f"wrote {out / 'metrics.csv'}")
    return EXIT_OK


def cmd_render(args, argv) -> int:
    cloud = load_cloud(args.checkpoint)
    cams, _, _ = _load_dataset(Path(args.dataset))
    scale = test_time_opacity_scale(args.train_p)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, cam in enumerate(cams):
        result = render(cloud, cam, opacity_scale=scale)
        save_image(out / f"render_{i:03d}.pfm", result.color)
        save_image(out / f"render_{i:03d}.ppm", result.color)
    print(f"wrote {len(cams)} renders to {out}")
    return EXIT_OK


def _parse_grid(kind: str, grid: str):
    items = [g.strip() for g in grid.split(",") if g.strip()]
    if not items:
        raise UsageError("--grid must be a nonempty comma-separated list")
    if kind == "strategy":
        for s in items:
            if s not in ("A", "B", "C"):
                raise UsageError(f"strategy grid entries must be A, B, or C (got {s!r})")
        return items
    try:
        if kind in ("views", "sh-degree"):
            return [int(s) for s in items]
        return [float(s) for s in items]
    except ValueError as exc:
        raise UsageError(f"bad --grid value for kind {kind!r}: {exc}") from None


def _sweep_point(kind: str, value, cfg: TrainConfig, extras):
    cfg = dataclasses.replace(cfg)
    extras = dict(extras)
    if kind == "views":
        extras["n_train"] = int(value)
    elif kind == "dropout":
        cfg = dataclasses.replace(cfg, dropout_p=float(value))
    elif kind == "sigma":
        cfg = dataclasses.replace(cfg, noise_sigma=float(value))
    elif kind == "sh-degree":
        extras["sh_degree"] = int(value)
    elif kind == "strategy":
        # A: plain dropout training; B: averaged stochastic renders at eval;
        # C: scaled rendering (the default evaluation path uses C's scaling).
        cfg = dataclasses.replace(cfg, dropout_p=cfg.dropout_p or 0.2)
        extras["strategy"] = value
    return cfg, extras


def cmd_sweep(args, argv) -> int:
    base_cfg, base_extras = _load_config(args.config)
    grid = _parse_grid(args.kind, args.grid)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = Path(args.dataset)
    rows, failures = [], []
    for value in grid:
        cfg, extras = _sweep_point(args.kind, value, base_cfg, base_extras)
        run_dir = out / f"run_{str(value).replace('.', 'p')}"
        try:
            run = _run_training(dataset, cfg, extras, run_dir, argv)
        except (DivergenceError, FloatingPointError, ValueError) as exc:
            failures.append((value, str(exc)))
            continue
        final = run.log[-1]
        cams, images, _ = _load_dataset(dataset)
        n_train = int(extras["n_train"])
        if n_train == len(cams):
            test_idx = []
        else:
            _, test_idx = split_views(cams, n_train, extras["split_protocol"])
        if args.kind == "strategy":
            from .regularizers import render_with_strategy

            renders = [
                render_with_strategy(run.cloud, cams[i], cfg.dropout_p, value).color
                for i in test_idx
            ]
        else:
            scale = test_time_opacity_scale(cfg.dropout_p)
            renders = [
                render(run.cloud, cams[i], opacity_scale=scale).color for i in test_idx
            ]
        psnr_vals = [psnr(r, images[i]) for r, i in zip(renders, test_idx)]
        ssim_vals = [ssim(r, images[i]) for r, i in zip(renders, test_idx)]
        rows.append(
            (value,
             float(np.mean(psnr_vals)) if psnr_vals else None,
             float(np.mean(ssim_vals)) if ssim_vals else None,
             final.train_ca, final.test_ca, final.gaussian_count)
        )
    header = [args.kind, "test_psnr", "test_ssim", "train_ca", "test_ca", "gaussian_count"]
    _write_csv(out / "sweep.csv", _provenance(argv, base_cfg.seed), header, rows)
    if rows:
        save_sweep_lines(
            out / "sweep.png",
            [r[0] for r in rows],
            {
                "test PSNR (dB)": [r[1] for r in rows],
                "test CA": [r[4] for r in rows],
            },
            xlabel=args.kind,
        )
    if failures:
        for value, msg in failures:
            print(f"sweep point {value} failed: {msg}", file=sys.stderr)
        print(f"{len(failures)} of {len(grid)} sweep points failed", file=sys.stderr)
        return EXIT_DIVERGED
    print(f"wrote {out / 'sweep.csv'} ({len(rows)} rows)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument wiring.
# ---------------------------------------------------------------------------

def _positive_int(value):
    n = int(value)
    if n < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer (got {value})")
    return n


def build_parser() -> _Parser:
    parser = _Parser(prog="cosplat", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"cosplat {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--kind", default="random-blob-field",
                   choices=("textured-plane-stack", "random-blob-field", "checker-box"))
    p.add_argument("--count", type=_positive_int, default=500)
    p.add_argument("--extent", type=float, default=2.0)
    p.add_argument("--palette", default="continuous",
                   choices=("continuous", "grayscale-targets"))
    p.add_argument("--rig", default="arc", choices=("arc", "ring"))
    p.add_argument("--views", type=_positive_int, default=12)
    p.add_argument("--radius", type=float, default=4.0)
    p.add_argument("--width", type=_positive_int, default=32)
    p.add_argument("--height", type=_positive_int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a cloud against a dataset")
    p.add_argument("dataset")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    for name, func in (("ca", cmd_ca), ("cv", cmd_cv), ("metrics", cmd_metrics),
                       ("render", cmd_render)):
        p = sub.add_parser(name, help=f"{name} evaluation of a checkpoint")
        p.add_argument("checkpoint")
        p.add_argument("dataset")
        p.add_argument("--train-p", type=float, default=0.0, dest="train_p",
                       help="dropout probability the checkpoint was trained with")
        p.add_argument("--out", required=True)
        if name == "ca":
            p.add_argument("--K", type=int, default=10)
            p.add_argument("--threshold", type=float, default=0.8)
            p.add_argument("--seed", type=int, default=0)
            p.add_argument("--save-maps", action="store_true")
        if name == "cv":
            p.add_argument("--save-maps", action="store_true")
        p.set_defaults(func=func)

    p = sub.add_parser("sweep", help="grid of training runs")
    p.add_argument("--kind", required=True, choices=SWEEP_KINDS)
    p.add_argument("--dataset", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--grid", required=True,
                   help="comma-separated grid values, e.g. 3,6,12 or 0.0,0.2,0.4")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, argv)
    except UsageError as exc:
        print(f"cosplat: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"cosplat: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, CloudFormatError, FileNotFoundError) as exc:
        print(f"cosplat: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
