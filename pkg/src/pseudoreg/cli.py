"""Command-line workflow: synth -> prepare -> build-dataset -> pretrain -> finetune -> predict -> evaluate."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from importlib import resources
from pathlib import Path

import numpy as np

log = logging.getLogger("pseudoreg")

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3, 4


class ValidationError(ValueError):
    pass


def _require(path: str | Path, kind: str = "file") -> Path:
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"{kind} not found: {p}")
    return p


def _write_json(path, obj) -> None:
    from .raster import atomic_write_text
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def preset_names() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("pseudoreg.presets").iterdir() if p.name.endswith(".json"))


def load_config(args):
    from .train import TrainConfig, apply_overrides
    if args.config and args.preset:
        raise ValidationError("give either --config or --preset, not both")
    if args.preset:
        if args.preset not in preset_names():
            raise ValidationError(f"unknown preset {args.preset!r}; available: {', '.join(preset_names())}")
        text = resources.files("pseudoreg.presets").joinpath(args.preset + ".json").read_text()
        cfg = TrainConfig.from_dict(json.loads(text))
    elif args.config:
        cfg = TrainConfig.load(_require(args.config, "config file"))
    else:
        cfg = TrainConfig()
    overrides = {k: v for k, v in vars(args).items() if k in OVERRIDES and v is not None}
    return apply_overrides(cfg, overrides) if overrides else cfg


OVERRIDES = {
    "stage": str, "model": str, "finetune_objective": str, "batch_size": int, "lr": float, "beta1": float,
    "epochs": int, "in_channels": int, "depth": int, "base_channels": int, "encoder": str, "norm": str,
    "discriminator": str, "disc_norm": str, "ndf": int, "seed": int, "alpha": float, "gamma": float,
    "delta": float, "gan_kind": str,
}


def _add_overrides(p):
    g = p.add_argument_group("config overrides (mirror TrainConfig / LossConfig fields)")
    for name, typ in OVERRIDES.items():
        g.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None)
    g.add_argument("--no-augment", dest="augment", action="store_false", default=None)


# -- commands -----------------------------------------------------------------

def cmd_synth(args):
    from .synthgen import SynthSpec, generate_scene, write_scene
    spec = SynthSpec(seed=args.seed, height=args.height, width=args.width, coverage=args.coverage,
                     pseudo_bias=args.bias, pseudo_noise=args.noise, n_plots=args.plots,
                     n_scenes=args.scenes, looks=args.looks, cell_size=args.cell_size)
    paths = write_scene(generate_scene(spec), args.out)
    log.info("wrote synthetic scene to %s (%s)", args.out, ", ".join(p.name for p in paths.values()))


def cmd_prepare_targets(args):
    from .geodata import (ImputedTargetSet, coverage_filter, impute_true_targets, merge_multipolygons,
                          read_plots, read_polygons)
    from .raster import RasterGrid, load_raster, save_raster
    polygons = read_polygons(_require(args.polygons, "polygon file"))
    plots = read_plots(_require(args.plots, "plot file")) if args.plots else []
    if args.grid_from:
        grid = load_raster(_require(args.grid_from, "raster")).grid
    elif args.grid:
        ox, oy, cs, w, h = args.grid
        grid = RasterGrid(ox, oy, cs, int(w), int(h))
    else:
        raise ValidationError("need --grid-from RASTER or --grid OX OY CELL W H")
    table = merge_multipolygons(polygons, grid)
    target, m_pt = coverage_filter(table, grid, args.threshold, density=args.density)
    ts = impute_true_targets(ImputedTargetSet.from_pseudo(target, m_pt), plots)
    save_raster(ts.to_raster(), args.out)
    log.info("targets: %d pseudo cells, %d plot cells, %d rejected polygons, %d skipped plots",
             int(ts.m_pt.sum()), int(ts.m_gr.sum()), len(table.rejected), len(ts.skipped))


def cmd_prepare_features(args):
    from .raster import load_raster, save_raster
    from .sarfeat import IntensityStack, scene_features, temporal_stats
    stack = IntensityStack.from_raster(load_raster(_require(args.intensity, "raster")), args.scale)
    if args.mode == "temporal":
        out = temporal_stats(stack)
    else:
        out = scene_features(stack, args.scene_index)
    if not np.isfinite(out.data).all():
        raise ValidationError("features contain non-finite values (zero intensities?)")
    save_raster(out, args.out)


def _load_stack(features_path, targets_path):
    from .dataset import SceneStack
    from .raster import load_raster
    return SceneStack.from_rasters(load_raster(_require(features_path, "raster")),
                                   load_raster(_require(targets_path, "raster")))


def cmd_build_dataset(args):
    from .dataset import build_dataset, write_manifest
    stack = _load_stack(args.features, args.targets)
    plan = build_dataset(stack, args.superpatch, seed=args.seed, augment=not args.no_augment,
                         size=args.size, k_folds=args.folds)
    meta = {
        "features": str(Path(args.features).resolve()),
        "targets": str(Path(args.targets).resolve()),
        "superpatch": list(args.superpatch),
        "seed": args.seed,
        "n_superpatches": len(plan.superpatches),
        "test_superpatches": [[s.y0, s.x0] for s in plan.test],
        "folds": plan.folds.folds if plan.folds else [],
    }
    write_manifest(args.out, plan.refs, meta)
    log.info("dataset: %d superpatches, %d test, %d train patches, %d test patches", len(plan.superpatches),
             len(plan.test), len(plan.by_role("train")), len(plan.by_role("test")))


def _training_patches(args, augment: bool):
    from .dataset import extract_patches, materialize, read_manifest
    if args.dataset:
        meta, refs = read_manifest(_require(args.dataset, "manifest"))
        stack = _load_stack(meta["features"], meta["targets"])
        refs = [r for r in refs if r.role == "train" and (augment or r.tag == 0)]
        if not refs:
            raise ValidationError("manifest holds no training patches")
        return materialize(refs, stack)
    if args.features and args.targets:
        return extract_patches(_load_stack(args.features, args.targets), overlap=0.5, augment=augment)
    raise ValidationError("need --dataset MANIFEST or both --features and --targets")


def cmd_pretrain(args):
    from .train import pretrain, save_checkpoint
    cfg = load_config(args)
    if cfg.stage != "pretrain":
        raise ValidationError("config stage must be 'pretrain'")
    patches = _training_patches(args, cfg.augment)
    ckpt = pretrain(cfg, patches, log_path=args.log)
    save_checkpoint(ckpt, args.out)


def cmd_finetune(args):
    from .train import finetune, load_checkpoint, save_checkpoint
    cfg = load_config(args)
    if cfg.stage != "finetune":
        raise ValidationError("config stage must be 'finetune'")
    base = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    patches = _training_patches(args, cfg.augment)
    ckpt = finetune(cfg, base, patches, log_path=args.log)
    save_checkpoint(ckpt, args.out)


def cmd_predict(args):
    from .infer import BlendSpec, predict_scene
    from .raster import load_raster, save_raster
    from .train import load_checkpoint
    ckpt = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    features = load_raster(_require(args.features, "raster"))
    pred = predict_scene(ckpt.generator, features, BlendSpec(args.p, args.eps), stride=args.stride)
    save_raster(pred, args.out)


def cmd_evaluate(args):
    from .dataset import cv_folds
    from .geodata import read_plots
    from .infer import cv_evaluate, footprint_means, plot_level_eval, rmse_mae, sample_at_plots
    from .raster import load_raster
    preds = [load_raster(_require(p, "raster")) for p in args.prediction]
    result = {}
    if args.truth:
        truth = load_raster(_require(args.truth, "raster"))
        result["scene"] = rmse_mae(preds[0].data[0], truth.data[0]).to_dict()
    if args.targets:
        t = load_raster(_require(args.targets, "raster")).data
        result["pseudo_targets"] = rmse_mae(preds[0].data[0], t[0], t[1] > 0).to_dict()
        if (t[2] > 0).any():
            result["true_targets"] = rmse_mae(preds[0].data[0], t[0], t[2] > 0).to_dict()
    if args.plots:
        plots = read_plots(_require(args.plots, "plot file"))
        if len(preds) > 1:
            folds = cv_folds(len(plots), len(preds), args.seed)
            result["plots"] = cv_evaluate(preds, plots, folds, args.radius).to_dict()
        elif args.radius:
            result["plots"] = plot_level_eval(preds[0], plots, args.radius).to_dict()
        else:
            est = sample_at_plots(preds[0], plots)
            result["plots"] = rmse_mae(est, [p.value for p in plots]).to_dict()
    if not result:
        raise ValidationError("nothing to evaluate: give --truth, --targets and/or --plots")
    _write_json(args.out, result)


def cmd_gridsearch(args):
    from .dataset import CvSplit, materialize, read_manifest
    from .train import grid_search, load_checkpoint
    cfg = load_config(args)
    grid = json.loads(_require(args.grid, "grid file").read_text())
    meta, refs = read_manifest(_require(args.dataset, "manifest"))
    stack = _load_stack(meta["features"], meta["targets"])
    refs = [r for r in refs if r.role == "train" and r.fold >= 0 and (cfg.augment or r.tag == 0)]
    k = 1 + max((r.fold for r in refs), default=-1)
    if k < 2:
        raise ValidationError("manifest needs at least two CV folds")
    units = [materialize([r for r in refs if r.fold == f], stack) for f in range(k)]
    ckpt = load_checkpoint(_require(args.checkpoint, "checkpoint")) if args.checkpoint else None
    ranking = grid_search(grid, cfg, CvSplit([[f] for f in range(k)]), units, ckpt)
    _write_json(args.out, ranking)
    best = ranking[0]
    log.info("best: %s (mean RMSE %.4g)", best["overrides"], best["mean_rmse"])


def cmd_gradcheck(args):
    from .gradcheck import run_all
    results = run_all(args.samples, args.tol, seed=args.seed)
    for r in results:
        print(r.line(), file=sys.stderr)
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise RuntimeError(f"gradient check failed for: {', '.join(failed)}")


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pseudoreg", description=__doc__)
    ap.add_argument("--threads", type=int, default=1, help="torch threads; 1 forces deterministic mode")
    ap.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scene")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--height", type=int, default=256)
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--cell-size", type=float, default=10.0)
    p.add_argument("--coverage", type=float, default=0.6)
    p.add_argument("--bias", type=float, default=0.0)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--plots", type=int, default=50)
    p.add_argument("--scenes", type=int, default=4)
    p.add_argument("--looks", type=float, default=4.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare-targets", help="rasterise polygons, filter coverage, impute plots")
    p.add_argument("--polygons", required=True)
    p.add_argument("--plots")
    p.add_argument("--grid-from", help="raster whose grid the targets use")
    p.add_argument("--grid", nargs=5, type=float, metavar=("OX", "OY", "CELL", "W", "H"))
    p.add_argument("--threshold", type=float, default=0.40)
    p.add_argument("--density", action="store_true", help="divide merged values by covered area fraction")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prepare_targets)

    p = sub.add_parser("prepare-features", help="dB / NDI / temporal statistics from intensities")
    p.add_argument("--intensity", required=True)
    p.add_argument("--scale", choices=["linear", "decibel"], default="linear")
    p.add_argument("--mode", choices=["temporal", "single"], default="temporal")
    p.add_argument("--scene-index", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prepare_features)

    p = sub.add_parser("build-dataset", help="superpatch split and patch manifest")
    p.add_argument("--features", required=True)
    p.add_argument("--targets", required=True)
    p.add_argument("--superpatch", nargs=2, type=int, metavar=("H", "W"), default=[128, 128])
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_dataset)

    for name, func in (("pretrain", cmd_pretrain), ("finetune", cmd_finetune)):
        p = sub.add_parser(name, help=f"{name} a generator")
        p.add_argument("--config")
        p.add_argument("--preset", help="bundled preset name")
        p.add_argument("--dataset", help="manifest from build-dataset")
        p.add_argument("--features")
        p.add_argument("--targets")
        if name == "finetune":
            p.add_argument("--checkpoint", required=True)
        p.add_argument("--log", help="per-epoch CSV log")
        p.add_argument("--out", required=True)
        _add_overrides(p)
        p.set_defaults(func=func)

    p = sub.add_parser("predict", help="blended wall-to-wall prediction")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--p", type=float, default=5.0)
    p.add_argument("--eps", type=float, default=1e-6)
    p.add_argument("--stride", type=int, default=32)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="RMSE/MAE metrics as JSON")
    p.add_argument("--prediction", nargs="+", required=True, help="one raster, or one per CV fold")
    p.add_argument("--truth")
    p.add_argument("--targets")
    p.add_argument("--plots")
    p.add_argument("--radius", type=float, help="plot footprint radius for area-weighted comparison")
    p.add_argument("--seed", type=int, default=0, help="fold seed when several predictions are given")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gridsearch", help="k-fold CV over a hyperparameter grid")
    p.add_argument("--config")
    p.add_argument("--preset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--grid", required=True, help="JSON {field: [values]} or list of override dicts")
    p.add_argument("--checkpoint", help="pretrained checkpoint for fine-tuning grids")
    p.add_argument("--out", required=True)
    _add_overrides(p)
    p.set_defaults(func=cmd_gridsearch)

    p = sub.add_parser("gradcheck", help="finite-difference checks of all layers and losses")
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return ap


def configure_runtime(threads: int) -> None:
    import torch
    if threads < 1:
        raise ValidationError("--threads must be >= 1")
    torch.set_num_threads(threads)
    if threads == 1:
        torch.use_deterministic_algorithms(True)


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=args.log_level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    from .raster import RasterFormatError
    try:
        configure_runtime(args.threads)
        args.func(args)
    except (ValidationError, RasterFormatError, FileNotFoundError, ValueError, TypeError, KeyError) as err:
        log.error("%s", err)
        return EXIT_VALIDATION
    except Exception as err:  # noqa: BLE001
        log.error("%s: %s", type(err).__name__, err)
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
