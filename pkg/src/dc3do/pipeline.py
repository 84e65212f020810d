"""Experiment steps behind the CLI: data generation, training, evaluation, view ablation.

Model class indices are positions in ``dataset.classes``; the generator
labels themselves only appear in file names and the manifest.
"""

from __future__ import annotations

import json
import logging
import platform
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .classify import ClassificationResult, classify_adaptive, classify_latent, classify_multiview
from .classify import image_vector
from .config import ConfigError, ExperimentConfig
from .geom import CLASS_NAMES, farthest_point_sample, gen_shape, load_points, normalize, parse_off, sample_surface, write_xyz
from .metrics import EvalReport
from .nets import DiffusionModel, ModelDims, complement_label, create_model, fit_latent_stats
from .rng import derive_seed
from .schedule import make_schedule
from .train import TrainConfig, load_checkpoint, train
from .views import camera_ring, frontal_subset, render_depth

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"


def class_names(cfg: ExperimentConfig) -> dict[int, str]:
    return {i: CLASS_NAMES[label] for i, label in enumerate(cfg.dataset.classes)}


def write_run_manifest(cfg: ExperimentConfig, command: str, out_dir: Path, **extra) -> Path:
    """Record what is needed to replay a command: config, its hash, seeds, versions."""
    out_dir.mkdir(parents=True, exist_ok=True)
    record = {
        "command": command,
        "argv": sys.argv,
        "config_sha256": cfg.digest(),
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "versions": {"dc3do": __version__, "python": platform.python_version(), "numpy": np.__version__},
        **extra,
    }
    path = out_dir / f"run_manifest.{command}.json"
    path.write_text(json.dumps(record, indent=2, default=str) + "\n")
    return path


# ---------------------------------------------------------------- data


def shape_seed(cfg: ExperimentConfig, split: str, label: int, index: int) -> int:
    return derive_seed(cfg.seed, "shape", split, label, index) >> 1


def gen_data(cfg: ExperimentConfig, data_dir: Path | None = None) -> Path:
    """Write the procedural train/test clouds as .xyz files plus a manifest."""
    data_dir = Path(data_dir) if data_dir is not None else cfg.out / "data"
    rows = []
    for split, count in (("train", cfg.dataset.train_per_class), ("test", cfg.dataset.test_per_class)):
        (data_dir / split).mkdir(parents=True, exist_ok=True)
        for ci, label in enumerate(cfg.dataset.classes):
            for i in range(count):
                seed = shape_seed(cfg, split, label, i)
                name = f"{split}/{CLASS_NAMES[label]}_{i:04d}.xyz"
                (data_dir / name).write_text(write_xyz(gen_shape(label, seed, cfg.dataset.n_points)))
                rows.append({"file": name, "label": label, "class_index": ci, "seed": seed, "split": split})
    manifest = {
        "classes": cfg.dataset.classes,
        "class_names": [CLASS_NAMES[c] for c in cfg.dataset.classes],
        "n_points": cfg.dataset.n_points,
        "rows": rows,
    }
    (data_dir / MANIFEST).write_text(json.dumps(manifest, indent=1) + "\n")
    return data_dir


@dataclass
class Dataset:
    clouds: np.ndarray  # (B, N, 3)
    labels: np.ndarray  # class indices
    ids: list[str]


def load_dataset(data_dir, split: str, per_class: int | None = None, classes=None) -> Dataset:
    data_dir = Path(data_dir)
    path = data_dir / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    manifest = json.loads(path.read_text())
    if classes is not None and list(manifest["classes"]) != list(classes):
        raise ConfigError(f"dataset classes {manifest['classes']} do not match config {list(classes)}")
    taken: dict[int, int] = {}
    clouds, labels, ids = [], [], []
    for row in manifest["rows"]:
        if row["split"] != split:
            continue
        ci = row["class_index"]
        if per_class is not None and taken.get(ci, 0) >= per_class:
            continue
        taken[ci] = taken.get(ci, 0) + 1
        clouds.append(load_points(data_dir / row["file"]))
        labels.append(ci)
        ids.append(row["file"])
    if not clouds:
        raise ConfigError(f"dataset at {data_dir} has no {split!r} objects")
    return Dataset(np.stack(clouds), np.array(labels, dtype=np.int64), ids)


def prepare_points(path, n_points: int, seed: int) -> np.ndarray:
    """Load any supported file as a normalized cloud of at most ``n_points`` points."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"cannot read input file {path}")
    if path.suffix.lower() == ".off":
        points = sample_surface(parse_off(path.read_bytes()), n_points, seed)
    else:
        points = load_points(path)
        if len(points) == 0:
            raise ValueError(f"{path}: empty point cloud")
        if len(points) > n_points:
            points = farthest_point_sample(points, n_points, seed)
    return normalize(points)


# ---------------------------------------------------------------- point pathway


def point_dims(cfg: ExperimentConfig) -> ModelDims:
    m = cfg.model
    return ModelDims(d_z=m.d_z, hidden=m.hidden, n_classes=len(cfg.dataset.classes), T=cfg.schedule.T,
                     enc_hidden=m.enc_hidden, complements=m.complements, d_e=m.d_e, d_t=m.d_t)


def train_config(cfg: ExperimentConfig, **changes) -> TrainConfig:
    t = cfg.train
    kwargs = dict(steps=t.steps, batch_size=t.batch_size, learning_rate=t.learning_rate, beta1=t.beta1,
                  beta2=t.beta2, adam_eps=t.adam_eps, weight_decay=t.weight_decay, seed=derive_seed(cfg.seed, "train"),
                  log_every=t.log_every, complement_prob=t.complement_prob, train_encoder=t.encoder_mode == "joint",
                  lr_decay=t.lr_decay)
    kwargs.update(changes)
    return TrainConfig(**kwargs)


def _check_model_matches(model: DiffusionModel, dims: ModelDims, cfg: ExperimentConfig, what: str) -> None:
    if model.dims != dims:
        raise ConfigError(f"{what} dimensions {model.dims} do not match the config {dims}")
    s = cfg.schedule
    if (model.schedule.T, model.schedule.beta_min, model.schedule.beta_max) != (s.T, s.beta_min, s.beta_max):
        raise ConfigError(f"{what} noise schedule does not match the config")


def train_point_model(cfg: ExperimentConfig, data: Dataset, resume: DiffusionModel | None = None, callback=None):
    """Train (or continue training) the point-cloud model. Returns ``(model, trace)``."""
    dims = point_dims(cfg)
    if resume is not None:
        _check_model_matches(resume, dims, cfg, "checkpoint")
        model = resume
    else:
        sched = make_schedule(cfg.schedule.T, cfg.schedule.beta_min, cfg.schedule.beta_max)
        model = create_model(dims, sched, derive_seed(cfg.seed, "model") >> 1)
        fit_latent_stats(model.params, data.clouds)
    tc = train_config(cfg)
    if tc.train_encoder:
        trace = train(model, tc, data.labels, clouds=data.clouds, callback=callback)
    else:
        trace = train(model, tc, data.labels, latents=model.encode(data.clouds), callback=callback)
    return model, trace


def classify_latent_with_config(model, z0, candidates, cfg: ExperimentConfig, seed: int) -> ClassificationResult:
    c = cfg.classify
    if c.adaptive:
        return classify_adaptive(model, z0, candidates, c.adaptive, seed, model.schedule, prior=c.prior)
    return classify_latent(model, z0, candidates, c.n_trials, seed, model.schedule, prior=c.prior)


def multiclass_candidates(cfg: ExperimentConfig) -> list[int]:
    n = len(cfg.dataset.classes)
    cands = cfg.classify.candidates if cfg.classify.candidates is not None else list(range(n))
    if len(cands) < 2:
        raise ConfigError("need at least two candidate classes")
    if any(not 0 <= c < n for c in cands):
        raise ConfigError(f"candidates must be class indices in [0, {n})")
    return [int(c) for c in cands]


def object_seed(cfg: ExperimentConfig, object_id: str) -> int:
    return derive_seed(cfg.seed, "classify", object_id) >> 1


def classify_cloud(model: DiffusionModel, cloud, cfg: ExperimentConfig, object_id: str) -> dict:
    """JSON-ready record for one cloud (multiclass over the configured candidates)."""
    start = time.perf_counter()
    seed = object_seed(cfg, object_id)
    z0 = model.encode(cloud)
    result = classify_latent_with_config(model, z0, multiclass_candidates(cfg), cfg, seed)
    names = class_names(cfg)
    return {
        "object_id": object_id,
        **result.to_dict(),
        "predicted_name": names.get(result.predicted),
        "seed": seed,
        "seconds": time.perf_counter() - start,
    }


def evaluate_points(cfg: ExperimentConfig, model: DiffusionModel, data: Dataset):
    """Multiclass and/or one-vs-rest evaluation. Returns ``(report, records)``."""
    n = len(cfg.dataset.classes)
    mode = cfg.classify.mode
    if mode in ("binary", "both") and not model.dims.complements:
        raise ConfigError("one-vs-rest evaluation needs a model trained with complement labels")
    candidates = multiclass_candidates(cfg)
    records, multi_preds, binary_preds, times = [], [], [], []
    for cloud, label, oid in zip(data.clouds, data.labels, data.ids):
        label = int(label)
        seed = object_seed(cfg, oid)
        start = time.perf_counter()
        z0 = model.encode(cloud)
        rec = {"object_id": oid, "label": label}
        if mode in ("multiclass", "both"):
            res = classify_latent_with_config(model, z0, candidates, cfg, seed)
            multi_preds.append(res.predicted)
            rec.update(res.to_dict())
        if mode in ("binary", "both"):
            pair = [label, complement_label(label, n)]
            res = classify_latent_with_config(model, z0, pair, cfg, seed)
            binary_preds.append(res.predicted)
            rec["binary"] = res.to_dict()
        times.append(time.perf_counter() - start)
        rec["seconds"] = times[-1]
        records.append(rec)
    labels = [int(y) for y in data.labels]
    if mode == "multiclass":
        binary_preds = [p if p == y else -1 for p, y in zip(multi_preds, labels)]
        # one-vs-rest column falls back to the multiclass hit rate
    report = EvalReport.build(labels, binary_preds, multi_preds or None, n_classes=n, class_names=class_names(cfg), times=times)
    return report, records


# ---------------------------------------------------------------- view pathway


def view_cameras(cfg: ExperimentConfig, size: int):
    v = cfg.views
    cams = camera_ring(v.n_views, v.elevation, size)
    if v.frontal_only:
        cams = frontal_subset(cams) or cams
    return cams


def render_object(points, cams, cfg: ExperimentConfig):
    radius = None if cfg.views.point_radius is None else cfg.views.point_radius * cams[0].size / 64
    return [render_depth(points, cam, point_radius=radius) for cam in cams]


def image_dims(cfg: ExperimentConfig, size: int) -> ModelDims:
    m = cfg.model
    return ModelDims(d_z=size * size, hidden=cfg.views.hidden, n_classes=len(cfg.dataset.classes), T=cfg.schedule.T,
                     enc_hidden=0, complements=m.complements, d_e=m.d_e, d_t=m.d_t)


def train_image_model(cfg: ExperimentConfig, data: Dataset, size: int, callback=None):
    """Depth-image denoiser for one resolution, trained on every view of every object."""
    cams = view_cameras(cfg, size)
    vectors, labels = [], []
    for cloud, label in zip(data.clouds, data.labels):
        for img in render_object(cloud, cams, cfg):
            vectors.append(image_vector(img.pixels))
            labels.append(label)
    sched = make_schedule(cfg.schedule.T, cfg.schedule.beta_min, cfg.schedule.beta_max)
    model = create_model(image_dims(cfg, size), sched, derive_seed(cfg.seed, "image-model", size) >> 1)
    v = cfg.views
    tc = train_config(cfg, steps=v.train_steps, batch_size=v.batch_size, learning_rate=v.learning_rate,
                      lr_decay=v.lr_decay, seed=derive_seed(cfg.seed, "image-train", size), train_encoder=False)
    trace = train(model, tc, np.array(labels), latents=np.array(vectors), callback=callback)
    return model, trace


def evaluate_views(cfg: ExperimentConfig, model2d: DiffusionModel, data: Dataset, n_views: int | None = None,
                   candidates=None):
    """Majority-vote accuracy and total wall time (render + classify) over ``data``."""
    size = int(round(np.sqrt(model2d.dims.d_z)))
    cams = view_cameras(cfg, size)
    if n_views is not None:
        cams = cams[:n_views]
    candidates = multiclass_candidates(cfg) if candidates is None else candidates
    hits, records = 0, []
    start = time.perf_counter()
    for cloud, label, oid in zip(data.clouds, data.labels, data.ids):
        views = render_object(cloud, cams, cfg)
        vote = classify_multiview(model2d, views, candidates, cfg.views.n_trials, object_seed(cfg, oid), model2d.schedule)
        hits += vote.final == int(label)
        records.append({"object_id": oid, "label": int(label), **vote.to_dict()})
    seconds = time.perf_counter() - start
    return hits / len(data.labels), seconds, records


def ablate_views(cfg: ExperimentConfig, train_data: Dataset, test_data: Dataset, checkpoint_dir=None, save_dir=None):
    """Accuracy and wall time over the (image size x view count) grid.

    A model per size is loaded from ``checkpoint_dir/image_S{size}.ckpt``
    when present, otherwise trained and (if ``save_dir``) saved there.
    """
    from .train import save_checkpoint

    v = cfg.views
    if not v.grid_sizes or not v.grid_views:
        raise ConfigError("empty ablation grid")
    rows = []
    for size in sorted(v.grid_sizes):
        path = Path(checkpoint_dir) / f"image_S{size}.ckpt" if checkpoint_dir else None
        if path is not None and path.exists():
            model = load_checkpoint(path)
            _check_model_matches(model, image_dims(cfg, size), cfg, str(path))
        else:
            model, _ = train_image_model(cfg, train_data, size)
            if save_dir is not None:
                save_checkpoint(model, Path(save_dir) / f"image_S{size}.ckpt")
        for n in sorted(v.grid_views):
            acc, seconds, _ = evaluate_views(cfg, model, test_data, n_views=n)
            rows.append({"size": size, "n_views": n, "accuracy": acc, "seconds": seconds,
                         "seconds_per_object": seconds / len(test_data.labels)})
            log.info("S=%d n=%d accuracy=%.3f time=%.2fs", size, n, acc, seconds)
    return rows
