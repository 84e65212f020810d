"""Command line entry point: ``dc3do <command> [-c config.yaml] [--set key=value ...]``.

Exit codes: 0 on success, 1 when the config, arguments, or inputs are
invalid, 2 when a command fails while running.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .geom import ParseError

log = logging.getLogger("dc3do")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    """Bad arguments or inputs; reported with exit code 1."""


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2) + "\n")


def _write_rows(path: Path, rows: list[dict]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def _data_dir(args, cfg) -> Path:
    path = Path(args.data) if getattr(args, "data", None) else cfg.out / "data"
    if not (path / "manifest.json").is_file():
        raise UsageError(f"dataset not found: {path} (run gen-data first or pass --data)")
    return path


def _load_model(path):
    from .train import load_checkpoint

    path = Path(path)
    if not path.is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def cmd_gen_data(args, cfg) -> dict:
    from .pipeline import gen_data

    data_dir = gen_data(cfg)
    n = sum(1 for _ in data_dir.glob("*/*.xyz"))
    log.info("wrote %d clouds to %s", n, data_dir)
    return {"data_dir": str(data_dir), "n_files": n}


def cmd_train(args, cfg) -> dict:
    from . import pipeline
    from .plotting import plot_loss
    from .train import save_checkpoint, write_loss_csv

    data_dir = _data_dir(args, cfg)
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    if args.pathway == "image":
        size = args.size or cfg.views.size
        data = pipeline.load_dataset(data_dir, "train", cfg.views.train_objects_per_class, cfg.dataset.classes)
        model, trace = pipeline.train_image_model(cfg, data, size)
        ckpt = out / f"image_S{size}.ckpt"
        loss_csv = out / f"loss_image_S{size}.csv"
        append = False
    else:
        resume = _load_model(args.resume) if args.resume else None
        data = pipeline.load_dataset(data_dir, "train", cfg.dataset.train_per_class, cfg.dataset.classes)
        model, trace = pipeline.train_point_model(cfg, data, resume=resume)
        ckpt = out / "model.ckpt"
        loss_csv = out / "loss.csv"
        append = resume is not None and loss_csv.exists()
    save_checkpoint(model, ckpt)
    write_loss_csv(trace, loss_csv, append=append)
    plot_loss(trace, loss_csv.with_suffix(".png"))
    log.info("step %d, final loss %.4f, checkpoint %s", model.step, trace[-1][1], ckpt)
    return {"checkpoint": str(ckpt), "loss_csv": str(loss_csv), "step": model.step,
            "initial_loss": trace[0][1], "final_loss": trace[-1][1]}


def cmd_classify(args, cfg) -> dict:
    from . import pipeline

    model = _load_model(args.checkpoint)
    pipeline._check_model_matches(model, pipeline.point_dims(cfg), cfg, "checkpoint")
    out = cfg.out / "classify"
    out.mkdir(parents=True, exist_ok=True)
    results = []
    for item in args.inputs:
        path = Path(item)
        cloud = pipeline.prepare_points(path, cfg.dataset.n_points, pipeline.object_seed(cfg, path.name))
        rec = pipeline.classify_cloud(model, cloud, cfg, path.name)
        rec["input"] = str(path)
        results.append(rec)
        _write_json(out / f"{path.stem}.json", rec)
    print(json.dumps(results if len(results) > 1 else results[0], indent=2))
    return {"n_inputs": len(results)}


def cmd_eval(args, cfg) -> dict:
    from . import pipeline
    from .plotting import plot_accuracy, plot_confusion

    model = _load_model(args.checkpoint)
    pipeline._check_model_matches(model, pipeline.point_dims(cfg), cfg, "checkpoint")
    data = pipeline.load_dataset(_data_dir(args, cfg), "test", cfg.dataset.test_per_class, cfg.dataset.classes)
    report, records = pipeline.evaluate_points(cfg, model, data)
    out = cfg.out / "eval"
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "report.csv")
    report.write_json(out / "report.json")
    with (out / "objects.jsonl").open("w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    plot_accuracy(report, out / "accuracy.png")
    if report.confusion is not None:
        names = [report.class_names[c] for c in sorted(report.class_names)]
        plot_confusion(report.confusion, names, out / "confusion.png")
    for row in report.rows():
        log.info("%s", row)
    return {"report": str(out / "report.csv"), "mean_accuracy": report.mean_accuracy,
            "multiclass_mean": report.multiclass_mean}


def cmd_render(args, cfg) -> dict:
    from . import pipeline
    from .plotting import plot_views
    from .views import write_pgm

    size = args.size or cfg.views.size
    cams = pipeline.view_cameras(cfg, size)
    out = cfg.out / "render"
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for item in args.inputs:
        path = Path(item)
        cloud = pipeline.prepare_points(path, cfg.dataset.n_points, pipeline.object_seed(cfg, path.name))
        images = pipeline.render_object(cloud, cams, cfg)
        for img in images:
            target = out / f"{path.stem}_az{img.camera.azimuth:06.2f}.pgm"
            write_pgm(img, target)
            written.append(str(target))
        plot_views([img.pixels for img in images], out / f"{path.stem}_views.png",
                   titles=[f"az {img.camera.azimuth:g}" for img in images])
    log.info("wrote %d depth images to %s", len(written), out)
    return {"files": written}


def cmd_ablate_views(args, cfg) -> dict:
    from . import pipeline
    from .plotting import plot_ablation

    data_dir = _data_dir(args, cfg)
    v = cfg.views
    train_data = pipeline.load_dataset(data_dir, "train", v.train_objects_per_class, cfg.dataset.classes)
    test_data = pipeline.load_dataset(data_dir, "test", v.eval_objects_per_class, cfg.dataset.classes)
    out = cfg.out / "ablation"
    out.mkdir(parents=True, exist_ok=True)
    ckpt_dir = Path(args.checkpoint_dir) if args.checkpoint_dir else None
    if ckpt_dir is not None and not ckpt_dir.is_dir():
        raise UsageError(f"checkpoint directory not found: {ckpt_dir}")
    rows = pipeline.ablate_views(cfg, train_data, test_data, checkpoint_dir=ckpt_dir, save_dir=out)
    _write_rows(out / "ablation.csv", rows)
    plot_ablation(rows, out / "ablation.png")
    return {"ablation_csv": str(out / "ablation.csv"), "rows": rows}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "classify": cmd_classify,
    "eval": cmd_eval,
    "render": cmd_render,
    "ablate-views": cmd_ablate_views,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="YAML or JSON experiment config")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. --set train.steps=500 (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="dc3do", description="Diffusion-based zero-shot 3D shape classification.")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[common], help="write the procedural dataset")

    p = sub.add_parser("train", parents=[common], help="train a point or depth-image model")
    p.add_argument("--data", help="dataset directory (default: <output_dir>/data)")
    p.add_argument("--resume", help="checkpoint to continue training from")
    p.add_argument("--pathway", choices=("point", "image"), default="point")
    p.add_argument("--size", type=int, help="image size for --pathway image")

    p = sub.add_parser("classify", parents=[common], help="classify point cloud or mesh files")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("inputs", nargs="+", help=".xyz, .ply, or .off files")

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the held-out split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")

    p = sub.add_parser("render", parents=[common], help="render depth views to PGM files")
    p.add_argument("--size", type=int)
    p.add_argument("inputs", nargs="+")

    p = sub.add_parser("ablate-views", parents=[common], help="image size x view count grid")
    p.add_argument("--data")
    p.add_argument("--checkpoint-dir", help="reuse image_S<size>.ckpt files found here")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, args.set)
        if args.command == "ablate-views" and (not cfg.views.grid_sizes or not cfg.views.grid_views):
            raise ConfigError("empty ablation grid")
        if getattr(args, "size", None) is not None:
            from .views import MIN_SIZE

            if args.size < MIN_SIZE:
                raise UsageError(f"--size must be >= {MIN_SIZE}")
        summary = COMMANDS[args.command](args, cfg)
        from .pipeline import write_run_manifest

        write_run_manifest(cfg, args.command, cfg.out, summary=summary)
    except (ConfigError, UsageError, ParseError, FileNotFoundError) as err:
        log.error("%s", err)
        return EXIT_INVALID
    except ValueError as err:
        # raised by input validation deeper in the library
        log.error("%s", err)
        return EXIT_INVALID
    except Exception as err:  # noqa: BLE001
        log.error("%s: %s", type(err).__name__, err)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
