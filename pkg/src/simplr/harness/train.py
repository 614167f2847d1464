"""Training loop, prediction extraction and evaluation."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from ..data import (
    STUFF_CLASSES,
    THING_CLASSES,
    VOID,
    SceneConfig,
    SceneRecord,
    batches,
    generate_scene,
    large_scale_jitter,
    scene_targets,
)
from ..model import ModelConfig, forward, init_params, load_checkpoint, panoptic_merge, save_checkpoint
from ..model.config import ConfigError, coerce_field, parse_key_values
from ..numerics import NonFiniteError, adamw_step, clip_grad_norm, lr_at, no_grad
from ..objective import LossWeights, composite_loss
from .metrics import Detection, GroundTruth, MetricReport, Segment, average_precision, panoptic_quality

LOG_TERMS = ("cls", "l1", "giou", "focal", "dice")


class TrainingAborted(RuntimeError):
    pass


@dataclass(frozen=True)
class RunConfig:
    task: str = "detect"
    model: ModelConfig = field(default_factory=ModelConfig)
    train_start: int = 0
    train_count: int = 200
    val_start: int = 100_000
    val_count: int = 50
    steps: int = 2000
    batch_size: int = 4
    lr: float = 1e-3
    warmup: int = 250
    milestones: tuple[float, ...] = (0.9, 0.95)
    weight_decay: float = 1e-4
    clip: float = 1.0
    jitter: bool = False
    jitter_min: float = 0.1
    jitter_max: float = 2.0
    seed: int = 0
    checkpoint_every: int = 500

    def __post_init__(self):
        if self.task not in ("detect", "instance", "panoptic"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.steps <= self.warmup:
            raise ConfigError(f"steps ({self.steps}) must exceed warmup ({self.warmup})")
        if self.batch_size < 1 or self.train_count < self.batch_size:
            raise ConfigError(f"need batch size >= 1 and at least one batch of scenes, got "
                              f"{self.batch_size} / {self.train_count}")
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        classes = len(THING_CLASSES) + (len(STUFF_CLASSES) if self.task == "panoptic" else 0)
        if self.model.task != self.task or self.model.num_classes != classes:
            object.__setattr__(self, "model", replace(self.model, task=self.task, num_classes=classes))

    @property
    def train_seeds(self) -> range:
        return range(self.train_start, self.train_start + self.train_count)

    @property
    def val_seeds(self) -> range:
        return range(self.val_start, self.val_start + self.val_count)

    def with_(self, **changes) -> "RunConfig":
        model_changes = {k[len("model."):]: v for k, v in changes.items() if k.startswith("model.")}
        run_changes = {k: v for k, v in changes.items() if not k.startswith("model.")}
        model = run_changes.pop("model", self.model)
        if model_changes:
            model = replace(model, **model_changes)
        return replace(self, model=model, **run_changes)

    # -- text form -----------------------------------------------------------------------------
    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            if f.name == "model":
                continue
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(repr(v) for v in value)
            lines.append(f"{f.name}={value}")
        lines += [f"model.{line}" for line in self.model.to_text().splitlines()]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        values = parse_key_values(text)
        model_kv = {k[len("model."):]: v for k, v in values.items() if k.startswith("model.")}
        run_kv = {k: v for k, v in values.items() if not k.startswith("model.")}
        names = {f.name: f for f in fields(cls)}
        unknown = set(run_kv) - set(names)
        if unknown:
            raise ConfigError(f"unknown run config keys: {', '.join(sorted(unknown))}")
        defaults = cls()
        kwargs = {}
        for key, text_value in run_kv.items():
            kwargs[key] = _coerce(getattr(defaults, key), key, text_value)
        model_unknown = set(model_kv) - {f.name for f in fields(ModelConfig)}
        if model_unknown:
            raise ConfigError(f"unknown model config keys: {', '.join(sorted(model_unknown))}")
        model = ModelConfig(**{k: coerce_field(k, v) for k, v in model_kv.items()})
        return cls(model=model, **kwargs)


def _coerce(default, key: str, text: str):
    try:
        if isinstance(default, bool):
            if text.lower() not in ("true", "false"):
                raise ValueError(text)
            return text.lower() == "true"
        if isinstance(default, tuple):
            return tuple(float(v) for v in text.split(",") if v.strip())
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r}") from exc


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

def make_scenes(seeds, scene_cfg: SceneConfig | None = None) -> list[SceneRecord]:
    return [generate_scene(int(s), scene_cfg) for s in seeds]


def mask_size(cfg: ModelConfig) -> int:
    return 2 * cfg.feature_grid


def targets_for(scene: SceneRecord, cfg: ModelConfig):
    if cfg.task == "detect":
        return scene_targets(scene)
    return scene_targets(scene, mask_size(cfg), panoptic=cfg.task == "panoptic")


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    params: dict
    log: list[dict]
    checkpoint: Path | None
    aborted: bool = False
    seconds: float = 0.0


def _loss_for_batch(scenes, run: RunConfig, params, weights, rng):
    total = None
    terms = {t: 0.0 for t in LOG_TERMS}
    for scene in scenes:
        if run.jitter:
            scene = large_scale_jitter(scene, rng, (run.jitter_min, run.jitter_max))
        out = forward(scene.image, run.model, params)
        loss, report = composite_loss(out, targets_for(scene, run.model), weights, task=run.task)
        for name, value in report.weighted.items():
            terms[name] += value / len(scenes)
        total = loss if total is None else total + loss
    return total * (1.0 / len(scenes)), terms


def train(run: RunConfig, out_dir=None, scenes: list[SceneRecord] | None = None, log_every: int = 0,
          progress=None, stop_after: int | None = None) -> TrainResult:
    """Deterministic AdamW training under ``run.seed``; writes CSV log and checkpoints to ``out_dir``.

    ``stop_after`` ends the run early while keeping the full run's schedule,
    so its log is a prefix of the full log.
    """
    start = time.perf_counter()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "run.cfg").write_text(run.to_text())
    params = init_params(run.model, run.seed)
    plist = list(params.values())
    weights = LossWeights.for_task(run.task)
    scenes = scenes if scenes is not None else make_scenes(run.train_seeds)
    batch_rng, jitter_rng = (np.random.Generator(np.random.PCG64(s)) for s in
                             np.random.SeedSequence(run.seed).spawn(2))
    stream = batches(scenes, run.batch_size, batch_rng)
    log: list[dict] = []
    ckpt = out / "checkpoint.splr" if out is not None else None
    last_good: Path | None = None
    log_fh = open(out / "train_log.csv", "w", newline="") if out is not None else None
    writer = None
    aborted = False
    try:
        if log_fh is not None:
            writer = csv.writer(log_fh)
            writer.writerow(["step", "lr", "loss", *LOG_TERMS, "grad_norm"])
        for step in range(run.steps if stop_after is None else min(stop_after, run.steps)):
            lr = lr_at(step, run.steps, run.lr, warmup=run.warmup, milestones=run.milestones)
            try:
                loss, terms = _loss_for_batch(next(stream), run, params, weights, jitter_rng)
                value = loss.item()
                if not math.isfinite(value):
                    raise NonFiniteError(f"loss is {value}")
                loss.backward()
                for p in plist:
                    if p.grad is not None and not np.all(np.isfinite(p.grad)):
                        raise NonFiniteError(f"gradient of {p.name} is non-finite")
            except NonFiniteError as exc:
                aborted = True
                if writer is not None:
                    writer.writerow([step, f"{lr:.9g}", "nan", *["" for _ in LOG_TERMS], ""])
                if progress:
                    progress(f"step {step}: aborting on non-finite value ({exc}); last good checkpoint kept")
                break
            norm = clip_grad_norm(plist, run.clip)
            adamw_step(plist, lr, weight_decay=run.weight_decay, step_index=step + 1)
            row = {"step": step, "lr": lr, "loss": value, **terms, "grad_norm": norm}
            log.append(row)
            if writer is not None:
                writer.writerow([step, f"{lr:.9g}", repr(value), *[repr(terms[t]) for t in LOG_TERMS], repr(norm)])
            if progress and log_every and (step % log_every == 0 or step == run.steps - 1):
                progress(f"step {step:5d} lr {lr:.2e} loss {value:.4f}")
            if ckpt is not None and run.checkpoint_every and (step + 1) % run.checkpoint_every == 0:
                save_checkpoint(params, run.model, ckpt)
                last_good = ckpt
        if ckpt is not None and not aborted:
            save_checkpoint(params, run.model, ckpt)
            last_good = ckpt
    finally:
        if log_fh is not None:
            log_fh.close()
    return TrainResult(params, log, last_good, aborted, time.perf_counter() - start)


def moving_average(values, window: int = 20) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if values.size < window:
        raise ValueError(f"need at least {window} values for a {window}-step moving average")
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode="valid")


def read_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: float(v) if v not in ("", "nan") else float("nan") for k, v in row.items()}
                for row in csv.DictReader(fh)]


# ---------------------------------------------------------------------------
# prediction and evaluation
# ---------------------------------------------------------------------------

@dataclass
class ScenePrediction:
    detections: list[Detection]
    segments: list[Segment] = field(default_factory=list)


def _upsample_logits(masks: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize [k, h, w] logits to [k, size, size] at texel centres."""
    k, h, w = masks.shape
    grid = (np.arange(size) + 0.5) / size
    sy = np.clip(grid * h - 0.5, 0, h - 1)
    sx = np.clip(grid * w - 0.5, 0, w - 1)
    y0, x0 = np.floor(sy).astype(int), np.floor(sx).astype(int)
    y1, x1 = np.minimum(y0 + 1, h - 1), np.minimum(x0 + 1, w - 1)
    fy, fx = (sy - y0)[None, :, None], (sx - x0)[None, None, :]
    top = masks[:, y0][:, :, x0] * (1 - fx) + masks[:, y0][:, :, x1] * fx
    bottom = masks[:, y1][:, :, x0] * (1 - fx) + masks[:, y1][:, :, x1] * fx
    return top * (1 - fy) + bottom * fy


def predict(scene: SceneRecord, cfg: ModelConfig, params, image_id: int = 0, max_detections: int = 100,
            traces: dict | None = None) -> ScenePrediction:
    with no_grad():
        out = forward(scene.image, cfg, params, traces)
    final = out.final
    probs = 1.0 / (1.0 + np.exp(-final.logits.data))
    boxes = final.boxes.data
    h, w = scene.shape
    full_masks = None
    if final.masks is not None:
        full_masks = _upsample_logits(final.masks.data, h) > 0
    thing_ids = range(len(THING_CLASSES))
    flat = [(probs[q, c], q, c) for q in range(probs.shape[0]) for c in thing_ids]
    flat.sort(key=lambda item: (-item[0], item[1], item[2]))
    dets = [Detection(image_id, c, float(s), boxes[q].copy(), None if full_masks is None else full_masks[q])
            for s, q, c in flat[:max_detections]]
    segments = []
    if cfg.task == "panoptic":
        merged = panoptic_merge(final.masks, final.logits)
        scale = h // merged.segments.shape[0]
        owner = np.repeat(np.repeat(merged.segments, scale, axis=0), scale, axis=1)
        for q, c in sorted(merged.segment_classes.items()):
            segments.append(Segment(c, owner == q))
    return ScenePrediction(dets, segments)


def ground_truth_segments(scene: SceneRecord) -> list[Segment]:
    segs = [Segment(i.class_id, i.mask) for i in scene.instances]
    for sid in range(len(STUFF_CLASSES)):
        region = scene.stuff == sid
        if region.any():
            segs.append(Segment(len(THING_CLASSES) + sid, region))
    return segs


def ground_truth_as_prediction(scene: SceneRecord, image_id: int = 0) -> ScenePrediction:
    dets = [Detection(image_id, i.class_id, 1.0, i.box.copy(), i.mask) for i in scene.instances]
    return ScenePrediction(dets, ground_truth_segments(scene))


def evaluate_predictions(preds: list[ScenePrediction], scenes: list[SceneRecord], task: str) -> MetricReport:
    if task not in ("detect", "instance", "panoptic"):
        raise ConfigError(f"unknown task {task!r}")
    dets = [d for p in preds for d in p.detections]
    truths = [GroundTruth(i, inst.class_id, inst.box, inst.mask) for i, s in enumerate(scenes) for inst in s.instances]
    size = scenes[0].shape if scenes else (64, 64)
    values = dict(
        ap50=average_precision(dets, truths, 0.5, image_size=size),
        ap75=average_precision(dets, truths, 0.75, image_size=size),
        ap_small=average_precision(dets, truths, 0.5, bucket="small", image_size=size),
        ap_medium=average_precision(dets, truths, 0.5, bucket="medium", image_size=size),
        ap_large=average_precision(dets, truths, 0.5, bucket="large", image_size=size),
    )
    if task != "detect" and all(d.mask is not None for d in dets):
        values["mask_ap50"] = average_precision(dets, truths, 0.5, use_masks=True, image_size=size)
    if task == "panoptic":
        voids = [s.stuff == VOID for s in scenes]
        values["pq"], values["pq_th"], values["pq_st"] = panoptic_quality(
            [p.segments for p in preds], [ground_truth_segments(s) for s in scenes],
            set(range(len(THING_CLASSES))), voids)
    return MetricReport(**{k: float(np.clip(v, 0.0, 1.0)) for k, v in values.items()})


def evaluate(params, cfg: ModelConfig, scenes: list[SceneRecord]) -> MetricReport:
    preds = [predict(s, cfg, params, i) for i, s in enumerate(scenes)]
    return evaluate_predictions(preds, scenes, cfg.task)


def evaluate_checkpoint(path, scenes: list[SceneRecord], task: str | None = None) -> MetricReport:
    params, cfg = load_checkpoint(path)
    if task is not None and task != cfg.task:
        raise ConfigError(f"checkpoint was trained for task {cfg.task!r}, not {task!r}")
    return evaluate(params, cfg, scenes)


__all__ = [
    "RunConfig", "ScenePrediction", "TrainResult", "TrainingAborted", "evaluate", "evaluate_checkpoint",
    "evaluate_predictions", "ground_truth_as_prediction", "make_scenes", "moving_average", "predict", "read_log",
    "targets_for", "train",
]
