"""Synthetic scenes of flat shapes over a sky/ground background.

Each scene is rendered from a seed: a horizon splits the canvas into two
stuff regions, then up to ``max_instances`` rectangles, ellipses and
triangles are painted in creation order.  Ground truth is the visible part
of each shape (later shapes occlude earlier ones), its tight box, and a
per-texel stuff map.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .numerics import make_rng, read_container, write_container
from .numerics.container import ContainerFormatError

THING_CLASSES = ("rect", "ellipse", "triangle")
STUFF_CLASSES = ("sky", "ground")
THING = -1  # stuff-map value under a visible instance
VOID = -2  # stuff-map value in augmentation padding

SMALL_AREA = 64
MEDIUM_AREA = 256
SIZE_BUCKETS = ("small", "medium", "large")

# class-tinted palettes keep the toy task learnable in a short schedule
_THING_HUES = np.array([[0.85, 0.25, 0.2], [0.25, 0.8, 0.3], [0.95, 0.85, 0.2]])
_STUFF_COLORS = np.array([[0.45, 0.6, 0.85], [0.45, 0.35, 0.25]])


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    height: int = 64
    width: int = 64
    max_instances: int = 5
    min_size: float = 4.0  # box side range in pixels, log-uniform
    max_size: float = 40.0
    overlap_limit: float = 0.5  # max fraction of an earlier visible mask a new shape may cover
    noise: float = 0.02
    attempts: int = 100

    def __post_init__(self):
        if self.max_instances < 1:
            raise DatasetError(f"max_instances must be >= 1, got {self.max_instances}")
        if not 0 < self.min_size <= self.max_size:
            raise DatasetError(f"bad size range [{self.min_size}, {self.max_size}]")
        if not 0 <= self.overlap_limit < 1:
            raise DatasetError(f"overlap limit must be in [0, 1), got {self.overlap_limit}")


@dataclass
class Instance:
    class_id: int
    box: np.ndarray  # normalized cx, cy, w, h
    mask: np.ndarray  # bool [H, W]

    @property
    def area(self) -> int:
        return int(self.mask.sum())


@dataclass
class SceneRecord:
    image: np.ndarray  # [H, W, 3] in [0, 1]
    instances: list[Instance]
    stuff: np.ndarray  # int [H, W]: stuff id, THING or VOID
    seed: int = -1

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape[:2]

    def labels(self) -> np.ndarray:
        return np.array([i.class_id for i in self.instances], dtype=np.int64)

    def boxes(self) -> np.ndarray:
        return np.array([i.box for i in self.instances], dtype=np.float64).reshape(-1, 4)

    def masks(self) -> np.ndarray:
        h, w = self.shape
        return np.array([i.mask for i in self.instances], dtype=bool).reshape(-1, h, w)


def size_bucket(area: float) -> str:
    if area < SMALL_AREA:
        return "small"
    if area < MEDIUM_AREA:
        return "medium"
    return "large"


def tight_box(mask: np.ndarray) -> np.ndarray:
    """Normalized cx, cy, w, h of the texel-aligned bounding box of a non-empty mask."""
    h, w = mask.shape
    rows = np.nonzero(mask.any(axis=1))[0]
    cols = np.nonzero(mask.any(axis=0))[0]
    if rows.size == 0:
        raise DatasetError("tight box of an empty mask")
    x0, x1 = cols[0], cols[-1] + 1
    y0, y1 = rows[0], rows[-1] + 1
    return np.array([(x0 + x1) / 2 / w, (y0 + y1) / 2 / h, (x1 - x0) / w, (y1 - y0) / h])


# ---------------------------------------------------------------------------
# rasterization (texel centres, no anti-aliasing)
# ---------------------------------------------------------------------------

def _centres(h: int, w: int):
    ys, xs = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    return xs, ys


def rasterize(class_id: int, box_px: np.ndarray, h: int, w: int, apex: float = 0.5) -> np.ndarray:
    """Shape mask for a pixel box [x0, y0, x1, y1]."""
    xs, ys = _centres(h, w)
    x0, y0, x1, y1 = box_px
    if THING_CLASSES[class_id] == "rect":
        return (xs >= x0) & (xs < x1) & (ys >= y0) & (ys < y1)
    if THING_CLASSES[class_id] == "ellipse":
        cx, cy, rx, ry = (x0 + x1) / 2, (y0 + y1) / 2, (x1 - x0) / 2, (y1 - y0) / 2
        return ((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2 <= 1.0
    # triangle: flat base along the bottom edge, apex on the top edge
    verts = np.array([[x0, y1], [x1, y1], [x0 + apex * (x1 - x0), y0]])
    inside = np.ones((h, w), dtype=bool)
    for i in range(3):
        (ax, ay), (bx, by) = verts[i], verts[(i + 1) % 3]
        cross = (bx - ax) * (ys - ay) - (by - ay) * (xs - ax)
        inside &= cross <= 0  # vertices run clockwise in image coordinates
    return inside


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def generate_scene(seed: int, config: SceneConfig | None = None) -> SceneRecord:
    cfg = config or SceneConfig()
    rng = make_rng(seed)
    h, w = cfg.height, cfg.width

    # stuff: sloped horizon, sky above
    horizon = rng.uniform(0.3, 0.7) * h
    slope = rng.uniform(-0.3, 0.3)
    xs, ys = _centres(h, w)
    stuff = np.where(ys < horizon + slope * (xs - w / 2), 0, 1).astype(np.int64)
    stuff_tint = _STUFF_COLORS + rng.uniform(-0.08, 0.08, size=(2, 3))
    image = stuff_tint[stuff]

    n_target = int(rng.integers(1, cfg.max_instances + 1))
    shapes: list[tuple[int, np.ndarray, np.ndarray]] = []  # (class, full mask, colour)
    visible: list[np.ndarray] = []
    log_lo, log_hi = np.log(cfg.min_size), np.log(cfg.max_size)
    for _ in range(n_target):
        for _attempt in range(cfg.attempts):
            class_id = int(rng.integers(len(THING_CLASSES)))
            side = np.exp(rng.uniform(log_lo, log_hi))
            aspect = np.exp(rng.uniform(np.log(0.6), np.log(1.6)))
            bw = min(side * np.sqrt(aspect), w)
            bh = min(side / np.sqrt(aspect), h)
            x0 = rng.uniform(0, w - bw)
            y0 = rng.uniform(0, h - bh)
            apex = rng.uniform(0.2, 0.8)
            colour = np.clip(_THING_HUES[class_id] + rng.uniform(-0.12, 0.12, size=3), 0, 1)
            mask = rasterize(class_id, np.array([x0, y0, x0 + bw, y0 + bh]), h, w, apex)
            if not mask.any():
                continue
            if any((vis & mask).sum() > cfg.overlap_limit * vis.sum() for vis in visible):
                continue
            visible = [vis & ~mask for vis in visible] + [mask]
            shapes.append((class_id, mask, colour))
            break

    instances = []
    for (class_id, mask, colour), vis in zip(shapes, visible):
        image = np.where(mask[..., None], colour, image)
        if vis.any():
            instances.append(Instance(class_id, tight_box(vis), vis))
    if cfg.noise > 0:
        image = image + rng.normal(0.0, cfg.noise, size=image.shape)
    image = np.clip(image, 0.0, 1.0)
    covered = np.zeros((h, w), dtype=bool)
    for inst in instances:
        covered |= inst.mask
    stuff = np.where(covered, THING, stuff)
    return SceneRecord(image, instances, stuff, seed)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def _resize_bilinear(image: np.ndarray, nh: int, nw: int) -> np.ndarray:
    h, w = image.shape[:2]
    sy = np.clip((np.arange(nh) + 0.5) * h / nh - 0.5, 0, h - 1)
    sx = np.clip((np.arange(nw) + 0.5) * w / nw - 0.5, 0, w - 1)
    y0 = np.floor(sy).astype(int)
    x0 = np.floor(sx).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (sy - y0)[:, None, None]
    fx = (sx - x0)[None, :, None]
    top = image[y0][:, x0] * (1 - fx) + image[y0][:, x1] * fx
    bottom = image[y1][:, x0] * (1 - fx) + image[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


def _resize_nearest(arr: np.ndarray, nh: int, nw: int) -> np.ndarray:
    h, w = arr.shape[:2]
    iy = np.minimum(((np.arange(nh) + 0.5) * h / nh).astype(int), h - 1)
    ix = np.minimum(((np.arange(nw) + 0.5) * w / nw).astype(int), w - 1)
    return arr[iy][:, ix]


def _place(arr: np.ndarray, h: int, w: int, oy: int, ox: int, fill) -> np.ndarray:
    """Put ``arr`` on an h x w canvas with its top-left at (oy, ox); negative offsets crop."""
    out = np.full((h, w) + arr.shape[2:], fill, dtype=arr.dtype)
    sy0, sx0 = max(0, -oy), max(0, -ox)
    dy0, dx0 = max(0, oy), max(0, ox)
    ny = min(arr.shape[0] - sy0, h - dy0)
    nx = min(arr.shape[1] - sx0, w - dx0)
    if ny > 0 and nx > 0:
        out[dy0:dy0 + ny, dx0:dx0 + nx] = arr[sy0:sy0 + ny, sx0:sx0 + nx]
    return out


def large_scale_jitter(scene: SceneRecord, rng: np.random.Generator | None = None,
                       scale_range: tuple[float, float] = (0.1, 2.0), *, scale: float | None = None,
                       offset: tuple[int, int] | None = None) -> SceneRecord:
    """Resize by a uniform factor, then crop or pad back to the original extent.

    Padding is black with VOID stuff.  Without an explicit ``offset`` the
    resized image is placed at a uniformly random position.  Boxes are the
    tight boxes of the transformed masks; instances cropped away are dropped.
    """
    h, w = scene.shape
    if scale is None:
        if rng is None:
            raise ValueError("large_scale_jitter needs an rng or an explicit scale")
        scale = float(rng.uniform(*scale_range))
    nh, nw = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
    if offset is None:
        if rng is None:
            raise ValueError("large_scale_jitter needs an rng or an explicit offset")
        oy = int(rng.integers(min(0, h - nh), max(0, h - nh) + 1))
        ox = int(rng.integers(min(0, w - nw), max(0, w - nw) + 1))
    else:
        oy, ox = offset
    image = _place(_resize_bilinear(scene.image, nh, nw), h, w, oy, ox, 0.0)
    stuff = _place(_resize_nearest(scene.stuff, nh, nw), h, w, oy, ox, VOID)
    instances = []
    for inst in scene.instances:
        mask = _place(_resize_nearest(inst.mask, nh, nw), h, w, oy, ox, False)
        if mask.any():
            instances.append(Instance(inst.class_id, tight_box(mask), mask))
    # texels of dropped instances revert to void rather than pretend to be stuff
    covered = np.zeros((h, w), dtype=bool)
    for inst in instances:
        covered |= inst.mask
    stuff = np.where((stuff == THING) & ~covered, VOID, stuff)
    return SceneRecord(image, instances, stuff, scene.seed)


# ---------------------------------------------------------------------------
# training targets and batching
# ---------------------------------------------------------------------------

def downsample_mask(mask: np.ndarray, size: int) -> np.ndarray:
    """Area-average a square-tiled binary mask to size x size and threshold at 1/2."""
    h, w = mask.shape
    if h % size or w % size:
        raise DatasetError(f"mask {h}x{w} does not tile into {size}x{size}")
    pooled = mask.reshape(size, h // size, size, w // size).mean(axis=(1, 3))
    return (pooled >= 0.5).astype(np.float64)


def scene_targets(scene: SceneRecord, mask_size: int | None = None, panoptic: bool = False):
    """Targets for the objective; panoptic adds one segment per stuff class present."""
    from .objective import Targets

    labels = list(scene.labels())
    boxes = list(scene.boxes())
    masks = [i.mask for i in scene.instances]
    if panoptic:
        for sid in range(len(STUFF_CLASSES)):
            region = scene.stuff == sid
            if region.any():
                labels.append(len(THING_CLASSES) + sid)
                boxes.append(tight_box(region))
                masks.append(region)
    mask_arr = None
    if mask_size is not None:
        mask_arr = np.array([downsample_mask(m, mask_size) for m in masks]).reshape(-1, mask_size, mask_size)
    return Targets(np.array(labels, dtype=np.int64), np.array(boxes).reshape(-1, 4), mask_arr)


@dataclass
class Batch:
    images: np.ndarray  # [B, H, W, 3]
    scenes: list[SceneRecord]
    valid: np.ndarray  # [B, max_instances] bool
    labels: np.ndarray  # [B, max_instances], -1 padded
    boxes: np.ndarray  # [B, max_instances, 4], zero padded


def collate(scenes: list[SceneRecord]) -> Batch:
    if not scenes:
        raise DatasetError("cannot collate an empty batch")
    shapes = {s.shape for s in scenes}
    if len(shapes) != 1:
        raise DatasetError(f"scenes have differing extents {sorted(shapes)}")
    n = max(1, max(len(s.instances) for s in scenes))
    valid = np.zeros((len(scenes), n), dtype=bool)
    labels = np.full((len(scenes), n), -1, dtype=np.int64)
    boxes = np.zeros((len(scenes), n, 4))
    for b, s in enumerate(scenes):
        k = len(s.instances)
        valid[b, :k] = True
        labels[b, :k] = s.labels()
        boxes[b, :k] = s.boxes()
    return Batch(np.stack([s.image for s in scenes]), scenes, valid, labels, boxes)


def batches(scenes: list[SceneRecord], batch_size: int, rng: np.random.Generator):
    """Endless shuffled batches; each epoch is a fresh permutation."""
    if batch_size < 1:
        raise DatasetError(f"batch size must be >= 1, got {batch_size}")
    while True:
        order = rng.permutation(len(scenes))
        for start in range(0, len(order) - batch_size + 1, batch_size):
            yield [scenes[i] for i in order[start:start + batch_size]]


# ---------------------------------------------------------------------------
# export / import
# ---------------------------------------------------------------------------

def manifest_path(path) -> Path:
    return Path(str(path) + ".manifest")


def _manifest(scenes: list[SceneRecord]) -> str:
    lines = [f"scenes={len(scenes)}",
             "thing_classes=" + ",".join(THING_CLASSES),
             "stuff_classes=" + ",".join(STUFF_CLASSES)]
    for i, s in enumerate(scenes):
        lines.append(f"scene.{i}.seed={s.seed}")
        lines.append(f"scene.{i}.instances={len(s.instances)}")
        for j, inst in enumerate(s.instances):
            box = ",".join(repr(float(v)) for v in inst.box)
            lines.append(f"scene.{i}.instance.{j}={THING_CLASSES[inst.class_id]},{box}")
    return "\n".join(lines) + "\n"


def export_dataset(scenes_or_seeds, path, config: SceneConfig | None = None) -> None:
    """Write scenes (or the scenes generated from seeds) to a container plus manifest."""
    scenes = [s if isinstance(s, SceneRecord) else generate_scene(int(s), config) for s in scenes_or_seeds]
    records: dict[str, np.ndarray] = {}
    for i, s in enumerate(scenes):
        records[f"scene/{i}/image"] = s.image.astype(np.float32)
        records[f"scene/{i}/stuff"] = s.stuff.astype(np.float32)
        for j, inst in enumerate(s.instances):
            records[f"scene/{i}/mask/{j}"] = inst.mask.astype(np.float32)
    write_container(path, records)
    manifest_path(path).write_text(_manifest(scenes))


def _parse_manifest(text: str) -> dict[str, str]:
    from .model.config import parse_key_values

    return parse_key_values(text)


def import_dataset(path) -> list[SceneRecord]:
    mpath = manifest_path(path)
    if not mpath.exists():
        raise DatasetError(f"missing dataset manifest {mpath}")
    try:
        records = read_container(path)
    except ContainerFormatError as exc:
        raise DatasetError(f"corrupt dataset file {path}: {exc}") from exc
    meta = _parse_manifest(mpath.read_text())

    def need(key: str) -> np.ndarray:
        if key not in records:
            raise DatasetError(f"dataset is missing record {key!r}")
        return records[key]

    scenes = []
    for i in range(int(meta["scenes"])):
        image = need(f"scene/{i}/image").astype(np.float64)
        stuff = need(f"scene/{i}/stuff").astype(np.int64)
        instances = []
        for j in range(int(meta[f"scene.{i}.instances"])):
            name, *box = meta[f"scene.{i}.instance.{j}"].split(",")
            mask = need(f"scene/{i}/mask/{j}") > 0.5
            instances.append(Instance(THING_CLASSES.index(name), np.array([float(v) for v in box]), mask))
        scenes.append(SceneRecord(image, instances, stuff, int(meta[f"scene.{i}.seed"])))
    return scenes


def storage_roundtrip(scene: SceneRecord) -> SceneRecord:
    """The scene as it reads back from a dataset file (image stored as f32)."""
    return replace(scene, image=scene.image.astype(np.float32).astype(np.float64),
                   instances=[replace(i) for i in scene.instances])


def bucket_counts(scenes: list[SceneRecord]) -> dict[str, int]:
    counts = {b: 0 for b in SIZE_BUCKETS}
    for s in scenes:
        for inst in s.instances:
            counts[size_bucket(inst.area)] += 1
    return counts


__all__ = [
    "Batch", "DatasetError", "Instance", "SceneConfig", "SceneRecord", "STUFF_CLASSES", "THING_CLASSES",
    "SIZE_BUCKETS", "batches", "bucket_counts", "collate", "downsample_mask", "export_dataset",
    "generate_scene", "import_dataset", "large_scale_jitter", "rasterize", "scene_targets", "size_bucket",
    "storage_roundtrip", "tight_box",
]
