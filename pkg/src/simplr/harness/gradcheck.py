"""Registered finite-difference suites covering ops, attention blocks, the model and the losses.

A suite builds a scalar function and its leaves from a seeded generator.
It passes when every coordinate with a nonzero analytic gradient has
relative error below the tolerance and every coordinate whose analytic
gradient is exactly flat shows only round-off in its central difference.
Coordinates whose one-sided slopes disagree even at a 100x smaller step sit
on a kink (bilinear texel lines, clamps); they are counted, excluded from
the relative check, and fail the suite if they exceed 5% of its coordinates.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..attention import (
    AnchorSet,
    AttentionConfig,
    adaptive_scale_attention,
    box_attention,
    fixed_scale_attention,
    init_box_attention,
    init_masked_instance_attention,
    init_self_attention,
    masked_instance_attention,
    self_attention,
)
from ..data import SceneConfig, generate_scene, scene_targets
from ..model import ModelConfig, backbone_forward, decoder_forward, forward, init_params
from ..numerics import Tensor, gradient_errors, ops, split_flat, split_kinks
from ..objective import composite_loss, dice_loss, focal_loss, giou_loss
from ..model.outputs import DetectionOutput, LayerPrediction

SCOPES = ("ops", "attention", "model", "loss")
TOLERANCE = 1e-4
FLAT_NOISE = 1e-7  # bound on |central difference| where the analytic gradient is exactly zero
MAX_KINK_FRACTION = 0.05

Builder = Callable[[np.random.Generator], tuple[Callable[[], Tensor], list[Tensor]]]


@dataclass(frozen=True)
class Suite:
    scope: str
    name: str
    build: Builder
    max_coords: int | None = None


@dataclass
class SuiteResult:
    scope: str
    name: str
    worst_relative: float
    worst_flat: float
    coordinates: int
    kinks: int
    seconds: float
    passed: bool
    error: str = ""


REGISTRY: list[Suite] = []


def register(scope: str, name: str, max_coords: int | None = None):
    if scope not in SCOPES:
        raise ValueError(f"unknown gradcheck scope {scope!r}")

    def wrap(build: Builder) -> Builder:
        REGISTRY.append(Suite(scope, name, build, max_coords))
        return build

    return wrap


def _leaf(rng, *shape, scale=1.0):
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def _away(rng, *shape, gap=0.1):
    """Values bounded away from zero so kinks at the origin are never straddled."""
    x = rng.normal(size=shape)
    return Tensor(np.sign(x) * (gap + np.abs(x)), requires_grad=True)


def _projector(seed: int = 99):
    cache: dict = {}

    def project(out: Tensor) -> Tensor:
        if "w" not in cache:
            cache["w"] = np.random.default_rng(seed).normal(size=out.shape)
        return (out * cache["w"]).sum()

    return project


def _unary(name: str, op, make_input):
    def build(rng):
        x = make_input(rng)
        project = _projector()
        return (lambda: project(op(x))), [x]

    register("ops", name)(build)


def _randomize(params, rng, scale=0.2):
    for p in params.values():
        p.data[...] = rng.normal(0.0, scale, size=p.shape)
    return params


# -- ops ----------------------------------------------------------------------------------------

_unary("neg", ops.neg, lambda r: _leaf(r, 3, 4))
_unary("exp", ops.exp, lambda r: _leaf(r, 3, 4))
_unary("log", ops.log, lambda r: Tensor(r.uniform(0.5, 2.0, (3, 4)), requires_grad=True))
_unary("sqrt", ops.sqrt, lambda r: Tensor(r.uniform(0.5, 2.0, (3, 4)), requires_grad=True))
_unary("square", ops.square, lambda r: _leaf(r, 3, 4))
_unary("abs", ops.abs, lambda r: _away(r, 3, 4))
_unary("sigmoid", ops.sigmoid, lambda r: _leaf(r, 3, 4, scale=3.0))
_unary("softplus", ops.softplus, lambda r: _leaf(r, 3, 4, scale=3.0))
_unary("relu", ops.relu, lambda r: _away(r, 3, 4))
_unary("gelu", ops.gelu, lambda r: _leaf(r, 3, 4, scale=2.0))
_unary("clamp_min", lambda x: ops.clamp_min(x, 0.05), lambda r: _away(r, 3, 4, gap=0.2))
_unary("sum", lambda x: ops.sum(x, axis=1, keepdims=True), lambda r: _leaf(r, 3, 4))
_unary("mean", lambda x: ops.mean(x, axis=0), lambda r: _leaf(r, 3, 4))
_unary("reshape", lambda x: ops.reshape(x, (4, 3)), lambda r: _leaf(r, 3, 4))
_unary("transpose", lambda x: ops.transpose(x, (2, 0, 1)), lambda r: _leaf(r, 2, 3, 4))
_unary("index", lambda x: ops.index(x, (np.array([0, 2, 0]), slice(1, 3))), lambda r: _leaf(r, 3, 4))
_unary("softmax", lambda x: ops.softmax(x, axis=-1), lambda r: _leaf(r, 3, 5))


def _binary(name: str, op, make_a, make_b):
    def build(rng):
        a, b = make_a(rng), make_b(rng)
        project = _projector()
        return (lambda: project(op(a, b))), [a, b]

    register("ops", name)(build)


_binary("add", ops.add, lambda r: _leaf(r, 3, 4), lambda r: _leaf(r, 4))
_binary("sub", ops.sub, lambda r: _leaf(r, 3, 1), lambda r: _leaf(r, 3, 4))
_binary("mul", ops.mul, lambda r: _leaf(r, 3, 4), lambda r: _leaf(r, 3, 4))
_binary("div", ops.div, lambda r: _leaf(r, 3, 4), lambda r: _away(r, 3, 4, gap=0.5))
_binary("matmul", ops.matmul, lambda r: _leaf(r, 2, 3, 4), lambda r: _leaf(r, 4, 5))
_binary("concat", lambda a, b: ops.concat([a, b], axis=1), lambda r: _leaf(r, 3, 2), lambda r: _leaf(r, 3, 4))
_binary("stack", lambda a, b: ops.stack([a, b], axis=1), lambda r: _leaf(r, 3, 4), lambda r: _leaf(r, 3, 4))


def _separated_pair(rng):
    a = rng.normal(size=(3, 4))
    b = a + np.sign(rng.normal(size=(3, 4))) * rng.uniform(0.1, 1.0, size=(3, 4))
    return Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)


for _name, _op in (("maximum", ops.maximum), ("minimum", ops.minimum)):
    def _build(rng, _op=_op):
        a, b = _separated_pair(rng)
        project = _projector()
        return (lambda: project(_op(a, b))), [a, b]

    register("ops", _name)(_build)


@register("ops", "linear")
def _linear(rng):
    x, w, b = _leaf(rng, 5, 4), _leaf(rng, 4, 3), _leaf(rng, 3)
    project = _projector()
    return (lambda: project(ops.linear(x, w, b))), [x, w, b]


@register("ops", "layer_norm")
def _layer_norm(rng):
    x, g, b = _leaf(rng, 5, 6), _leaf(rng, 6), _leaf(rng, 6)
    project = _projector()
    return (lambda: project(ops.layer_norm(x, g, b))), [x, g, b]


@register("ops", "group_norm")
def _group_norm(rng):
    x, g, b = _leaf(rng, 3, 4, 6), _leaf(rng, 6), _leaf(rng, 6)
    project = _projector()
    return (lambda: project(ops.group_norm(x, 2, g, b))), [x, g, b]


@register("ops", "conv2d_patchify")
def _conv(rng):
    x, k, b = _leaf(rng, 4, 6, 3), _leaf(rng, 2, 2, 3, 5), _leaf(rng, 5)
    project = _projector()
    return (lambda: project(ops.conv2d_patchify(x, k, b))), [x, k, b]


@register("ops", "deconv2x")
def _deconv(rng):
    x, k, b = _leaf(rng, 3, 2, 4), _leaf(rng, 2, 2, 4, 3), _leaf(rng, 3)
    project = _projector()
    return (lambda: project(ops.deconv2x(x, k, b))), [x, k, b]


@register("ops", "bilinear_sample")
def _bilinear(rng):
    fmap = _leaf(rng, 5, 6, 3)
    points = Tensor(rng.uniform(0.05, 0.95, size=(7, 2)), requires_grad=True)
    project = _projector()
    return (lambda: project(ops.bilinear_sample(fmap, points))), [fmap, points]


# -- attention ----------------------------------------------------------------------------------

def _attention_inputs(rng, d=8):
    fmap = _leaf(rng, 5, 6, d)
    queries = _leaf(rng, 3, d)
    positions = rng.uniform(0.2, 0.8, size=(3, 2))
    windows = np.concatenate([positions, rng.uniform(0.3, 0.5, size=(3, 2))], axis=1)
    return fmap, queries, positions, windows


@register("attention", "box_attention", max_coords=12)
def _box(rng):
    fmap, queries, _, windows = _attention_inputs(rng)
    cfg = AttentionConfig(dim=8, heads=2)
    params = _randomize(init_box_attention(rng, cfg), rng)
    project = _projector()
    return (lambda: project(box_attention(fmap, queries, windows, cfg, params))), [fmap, queries, *params.values()]


@register("attention", "fixed_scale_attention", max_coords=12)
def _fixed(rng):
    fmap, queries, positions, _ = _attention_inputs(rng)
    cfg = AttentionConfig(dim=8, heads=2, scales=2)
    params = _randomize(init_box_attention(rng, cfg), rng)
    anchors = AnchorSet(16, 2, 64)
    project = _projector()
    return ((lambda: project(fixed_scale_attention(fmap, queries, positions, anchors, cfg, params))),
            [fmap, queries, *params.values()])


@register("attention", "adaptive_scale_attention", max_coords=12)
def _adaptive(rng):
    fmap, queries, positions, _ = _attention_inputs(rng)
    cfg = AttentionConfig(dim=8, heads=2, scales=2)
    params = _randomize(init_box_attention(rng, cfg, "adaptive"), rng)
    anchors = AnchorSet(16, 2, 64)
    project = _projector()
    return ((lambda: project(adaptive_scale_attention(fmap, queries, positions, anchors, cfg, params)[0])),
            [fmap, queries, *params.values()])


@register("attention", "masked_instance_attention", max_coords=12)
def _masked(rng):
    fmap, queries, _, windows = _attention_inputs(rng)
    cfg = AttentionConfig(dim=8, heads=2, grid=4)
    params = _randomize(init_masked_instance_attention(rng, cfg), rng)
    prev = rng.normal(size=(3, 8, 8))
    project = _projector()
    return ((lambda: project(masked_instance_attention(fmap, queries, windows, prev, cfg, params))),
            [fmap, queries, *params.values()])


@register("attention", "self_attention", max_coords=24)
def _self(rng):
    cfg = AttentionConfig(dim=8, heads=2)
    params = _randomize(init_self_attention(rng, cfg), rng)
    queries = _leaf(rng, 3, 8)
    project = _projector()
    return (lambda: project(self_attention(queries, cfg, params))), [queries, *params.values()]


# -- model --------------------------------------------------------------------------------------

TINY_MODEL = dict(image_size=16, patch_size=4, backbone_dim=8, backbone_heads=2, backbone_depth=2,
                  global_blocks=(2,), window=2, encoder_dim=8, decoder_dim=8, heads=2, feature_stride=4,
                  num_queries=5, encoder_layers=1, decoder_layers=2, scales=2, anchor_base=2.0, decoder_grid=4)


def _jittered(cfg, rng, scale=0.05):
    params = init_params(cfg, int(rng.integers(1 << 31)))
    for p in params.values():
        p.data += rng.normal(0.0, scale, p.shape)
    return params


@register("model", "backbone_2_blocks", max_coords=6)
def _backbone(rng):
    cfg = ModelConfig(**TINY_MODEL)
    params = _jittered(cfg, rng)
    image = generate_scene(int(rng.integers(1000)), SceneConfig(height=16, width=16, min_size=3, max_size=10)).image
    project = _projector()
    leaves = [p for n, p in params.items() if n.startswith("backbone.")]
    return (lambda: project(backbone_forward(image, cfg, params))), leaves


@register("model", "decoder_2_layers", max_coords=6)
def _decoder(rng):
    cfg = ModelConfig(task="instance", **TINY_MODEL)
    params = _jittered(cfg, rng)
    queries, memory, pixel = _leaf(rng, 5, 8), _leaf(rng, 4, 4, 8), _leaf(rng, 8, 8, 8)
    windows = np.column_stack([rng.uniform(0.3, 0.7, (5, 2)), rng.uniform(0.2, 0.4, (5, 2))])
    frozen: dict = {}
    project_boxes, project_masks = _projector(1), _projector(2)

    def fn():
        layers = decoder_forward(queries, memory, windows, cfg, params, pixel, frozen=frozen)
        return project_boxes(layers[-1].boxes) + project_masks(layers[-1].masks) * 0.1 + layers[0].logits.sum()

    leaves = [queries, memory, pixel] + [p for n, p in params.items() if n.startswith(("decoder.", "head."))]
    return fn, leaves


def _end_to_end(cfg: ModelConfig, rng, scene_cfg: SceneConfig | None, mask_size: int | None):
    params = _jittered(cfg, rng)
    scene = generate_scene(int(rng.integers(1000)), scene_cfg)
    targets = scene_targets(scene, mask_size, panoptic=cfg.task == "panoptic")
    frozen: dict = {}

    def fn():
        return composite_loss(forward(scene.image, cfg, params, frozen=frozen), targets, task=cfg.task)[0]

    return fn, list(params.values())


@register("model", "tiny_end_to_end_instance", max_coords=3)
def _tiny_e2e(rng):
    scene_cfg = SceneConfig(height=16, width=16, min_size=3, max_size=10, max_instances=2)
    return _end_to_end(ModelConfig(task="instance", **TINY_MODEL), rng, scene_cfg, 8)


@register("model", "femto_end_to_end_detect", max_coords=2)
def _femto_e2e(rng):
    return _end_to_end(ModelConfig.femto(), rng, None, None)


# -- loss ---------------------------------------------------------------------------------------

@register("loss", "focal")
def _focal(rng):
    x = _leaf(rng, 4, 5, scale=2.0)
    y = (rng.random((4, 5)) < 0.3).astype(float)
    return (lambda: focal_loss(x, y)), [x]


@register("loss", "dice")
def _dice(rng):
    x = _leaf(rng, 3, 4, 4)
    y = (rng.random((3, 4, 4)) < 0.4).astype(float)
    return (lambda: dice_loss(x, y)), [x]


@register("loss", "giou")
def _giou(rng):
    centres = rng.uniform(0.3, 0.7, (4, 2))
    a = Tensor(np.column_stack([centres, rng.uniform(0.1, 0.3, (4, 2))]), requires_grad=True)
    b = np.column_stack([centres + rng.normal(0, 0.05, (4, 2)), rng.uniform(0.1, 0.3, (4, 2))])
    return (lambda: ops.sum(giou_loss(a, b, fmt="cxcywh"))), [a]


def _prediction(rng, k, classes, hw):
    boxes = Tensor(np.column_stack([rng.uniform(0.2, 0.8, (k, 2)), rng.uniform(0.1, 0.3, (k, 2))]),
                   requires_grad=True)
    return LayerPrediction(boxes, _leaf(rng, k, classes), _leaf(rng, k, hw, hw))


@register("loss", "composite", max_coords=30)
def _composite(rng):
    from ..objective import Targets

    preds = [_prediction(rng, 4, 3, 4) for _ in range(2)]
    t = 2
    targets = Targets(rng.integers(0, 3, t), np.column_stack([rng.uniform(0.3, 0.7, (t, 2)),
                                                              rng.uniform(0.1, 0.3, (t, 2))]),
                      (rng.random((t, 4, 4)) < 0.5).astype(float))
    out = DetectionOutput(preds)
    leaves = [x for p in preds for x in (p.boxes, p.logits, p.masks)]
    return (lambda: composite_loss(out, targets, task="instance")[0]), leaves


# -- runner -------------------------------------------------------------------------------------

def suites_for(scope: str) -> list[Suite]:
    if scope == "all":
        return list(REGISTRY)
    if scope not in SCOPES:
        raise ValueError(f"unknown gradcheck scope {scope!r}; expected one of {SCOPES + ('all',)}")
    return [s for s in REGISTRY if s.scope == scope]


def run_suite(suite: Suite, seed: int = 0, tolerance: float = TOLERANCE) -> SuiteResult:
    start = time.perf_counter()
    rng = np.random.default_rng([seed, len(suite.name)] + [ord(c) for c in suite.name])
    try:
        fn, leaves = suite.build(rng)
        records = gradient_errors(lambda *_: fn(), leaves, max_coords=suite.max_coords, rng=rng, robust=True)
    except Exception as exc:  # a crashing suite is a failing suite
        return SuiteResult(suite.scope, suite.name, float("inf"), float("inf"), 0, 0,
                           time.perf_counter() - start, False, f"{type(exc).__name__}: {exc}")
    smooth, kinks = split_kinks(records)
    live, flat = split_flat(smooth)
    worst = max((r.relative for r in live), default=0.0)
    worst_flat = max((abs(r.numeric) for r in flat), default=0.0)
    too_kinky = len(kinks) > MAX_KINK_FRACTION * len(records)
    passed = bool(live) and worst < tolerance and worst_flat < FLAT_NOISE and not too_kinky
    error = "" if live else "no coordinate with a nonzero gradient"
    if too_kinky:
        error = f"{len(kinks)} of {len(records)} coordinates on kinks"
    return SuiteResult(suite.scope, suite.name, worst, worst_flat, len(records), len(kinks),
                       time.perf_counter() - start, passed, error)


def run_suites(scope: str = "all", seed: int = 0, tolerance: float = TOLERANCE, suites: list[Suite] | None = None,
               progress=None) -> list[SuiteResult]:
    results = []
    for suite in suites if suites is not None else suites_for(scope):
        result = run_suite(suite, seed, tolerance)
        results.append(result)
        if progress:
            progress(format_result(result))
    return results


def format_result(r: SuiteResult) -> str:
    status = "PASS" if r.passed else "FAIL"
    note = f"  ({r.error})" if r.error else ""
    return (f"{status}  {r.scope:<9} {r.name:<28} rel {r.worst_relative:.2e}  flat {r.worst_flat:.1e}  "
            f"n={r.coordinates:<4d} kinks={r.kinks:<2d} {r.seconds:6.2f}s{note}")


def write_results(results: list[SuiteResult], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scope", "suite", "worst_relative", "worst_flat_abs", "coordinates", "kinks", "seconds",
                         "passed", "error"])
        for r in results:
            writer.writerow([r.scope, r.name, f"{r.worst_relative:.6e}", f"{r.worst_flat:.6e}", r.coordinates,
                             r.kinks, f"{r.seconds:.3f}", int(r.passed), r.error])


__all__ = ["REGISTRY", "SCOPES", "Suite", "SuiteResult", "format_result", "register", "run_suite", "run_suites",
           "suites_for", "write_results"]
