"""End-to-end acceptance checks, one test per criterion, at their stated tolerances.

The terminal summary prints one PASS/FAIL line per criterion.
"""

from __future__ import annotations

import functools
import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE
from simplr.attention import (
    AnchorSet,
    AttentionConfig,
    adaptive_scale_attention,
    bin_index,
    box_attention,
    fixed_scale_attention,
    head_scale_assignment,
    init_box_attention,
    init_masked_instance_attention,
    masked_instance_attention,
)
from simplr.data import export_dataset, generate_scene, import_dataset, manifest_path, storage_roundtrip
from simplr.harness import gradcheck as gc
from simplr.harness.ablate import ablate, directional_findings, grid_cells
from simplr.harness.metrics import Detection, GroundTruth, average_precision
from simplr.harness.profile import profile_scales, small_object_check, write_profile
from simplr.harness.train import RunConfig, evaluate, make_scenes, moving_average, train
from simplr.model import ModelConfig, forward, init_params, load_checkpoint, panoptic_merge, save_checkpoint
from simplr.model.outputs import DetectionOutput, LayerPrediction
from simplr.numerics import Tensor, bilinear_sample, no_grad
from simplr.numerics.rng import make_rng
from simplr.objective import LossWeights, Targets, composite_loss, focal_loss, hungarian_match
from simplr.oracle import oracle_ap, oracle_assignment, oracle_attention, oracle_bilinear, oracle_panoptic_merge

# Held-out AP@0.5 floor for the toy training run.  The reference run with the
# default RunConfig (seed 0) reached 0.530; the floor sits just under it.
AP50_FLOOR = 0.5
TRAIN_BUDGET_S = 30 * 60
GRADCHECK_BUDGET_S = 5 * 60


def criterion(number: int):
    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                detail = fn(*args, **kwargs) or ""
            except BaseException as exc:
                first = (str(exc).strip().splitlines() or [""])[0]
                ACCEPTANCE[number] = (False, f"{type(exc).__name__}: {first[:160]}")
                raise
            ACCEPTANCE[number] = (True, detail)
            print(f"criterion {number}: PASS  {detail}")
        return wrapper
    return deco


def np_params(params):
    return {k: v.data for k, v in params.items()}


def randomize(params, rng, scale=0.3):
    for p in params.values():
        p.data[...] = rng.normal(0.0, scale, size=p.shape)
    return params


# -- 1: gradient integrity -------------------------------------------------------------------

@criterion(1)
def test_criterion_1_gradient_integrity():
    start = time.perf_counter()
    results = gc.run_suites("all")
    elapsed = time.perf_counter() - start
    failed = [gc.format_result(r) for r in results if not r.passed]
    assert not failed, failed
    worst = max(r.worst_relative for r in results)
    assert worst < gc.TOLERANCE
    assert elapsed < GRADCHECK_BUDGET_S, f"{elapsed:.0f}s"
    return f"{len(results)} suites, worst relative error {worst:.2e}, {elapsed:.0f}s"


# -- 2: oracle equivalence -------------------------------------------------------------------

@criterion(2)
def test_criterion_2_oracle_equivalence():
    rng = make_rng(20)
    # bilinear sampler
    fmap = rng.normal(size=(7, 9, 4))
    pts = rng.uniform(-0.1, 1.1, size=(200, 2))
    got = bilinear_sample(Tensor(fmap), Tensor(pts)).data
    np.testing.assert_allclose(got, [oracle_bilinear(fmap, p) for p in pts], rtol=0, atol=1e-9)

    # the four attention mechanisms, one query at a time
    d = 8
    fmap = rng.normal(size=(6, 7, d))
    min_size = (1 / 7, 1 / 6)
    for _ in range(5):
        q = rng.normal(size=(1, d))
        pos = rng.uniform(0.15, 0.85, size=(1, 2))
        win = np.concatenate([pos, rng.uniform(0.15, 0.4, size=(1, 2))], axis=1)
        cfg = AttentionConfig(dim=d, heads=2)
        p = randomize(init_box_attention(rng, cfg), rng)
        out = box_attention(Tensor(fmap), Tensor(q), win, cfg, p).data[0]
        ref = oracle_attention(q[0], fmap, np_params(p), "box", window=win[0], heads=2, min_size=min_size)
        np.testing.assert_allclose(out, ref, rtol=0, atol=1e-9)

        anchors = AnchorSet(4, 2, 64)
        cfg = AttentionConfig(dim=d, heads=4, scales=2)
        p = randomize(init_box_attention(rng, cfg), rng)
        out = fixed_scale_attention(Tensor(fmap), Tensor(q), pos, anchors, cfg, p).data[0]
        ref = oracle_attention(q[0], fmap, np_params(p), "fixed", position=pos[0], anchor_sizes=anchors.sizes,
                               heads=4, min_size=min_size)
        np.testing.assert_allclose(out, ref, rtol=0, atol=1e-9)

        anchors = AnchorSet(4, 3, 64)
        cfg = AttentionConfig(dim=d, heads=2, scales=3)
        p = randomize(init_box_attention(rng, cfg, mechanism="adaptive"), rng)
        out = adaptive_scale_attention(Tensor(fmap), Tensor(q), pos, anchors, cfg, p)[0].data[0]
        ref = oracle_attention(q[0], fmap, np_params(p), "adaptive", position=pos[0], anchor_sizes=anchors.sizes,
                               lam=cfg.lam, heads=2, min_size=min_size)
        np.testing.assert_allclose(out, ref, rtol=0, atol=1e-9)

        cfg = AttentionConfig(dim=d, heads=2, grid=6)
        p = randomize(init_masked_instance_attention(rng, cfg), rng)
        prev = rng.normal(size=(1, 10, 10))
        out = masked_instance_attention(Tensor(fmap), Tensor(q), win, prev, cfg, p).data[0]
        ref = oracle_attention(q[0], fmap, np_params(p), "masked", window=win[0], heads=2, grid=6,
                               prev_mask=prev[0], min_size=min_size)
        np.testing.assert_allclose(out, ref, rtol=0, atol=1e-9)

    # Hungarian matcher, n <= 7, 100 instances (half of them heavily tied)
    for i in range(100):
        k = int(rng.integers(1, 8))
        t = int(rng.integers(0, k + 1))
        cost = rng.normal(size=(k, t)) if i % 2 else rng.integers(0, 3, size=(k, t)).astype(float)
        r = hungarian_match(cost)
        pairs, total = oracle_assignment(cost)
        assert r.pairs == pairs
        assert abs(r.total - total) <= 1e-9

    # panoptic merge
    for _ in range(10):
        masks, logits = rng.normal(0, 2, (6, 10, 10)), rng.normal(size=(6, 5))
        got = panoptic_merge(masks, logits, min_area=8).segments
        want = oracle_panoptic_merge(1 / (1 + np.exp(-masks)), 1 / (1 + np.exp(-logits)), min_area=8)
        np.testing.assert_array_equal(got, want)

    # AP (interpolation path: 1e-6)
    for _ in range(50):
        truths = [GroundTruth(int(rng.integers(3)), int(rng.integers(2)),
                              np.concatenate([rng.uniform(0.2, 0.8, 2), rng.uniform(0.05, 0.4, 2)]))
                  for _ in range(int(rng.integers(1, 8)))]
        dets = []
        for _ in range(int(rng.integers(0, 10))):
            g = truths[int(rng.integers(len(truths)))]
            box = g.box + rng.normal(0, 0.04, 4)
            box[2:] = np.abs(box[2:]) + 0.01
            dets.append(Detection(g.image, g.class_id, float(rng.random()), box))
        for thr in (0.5, 0.75):
            got = average_precision(dets, truths, thr)
            want = oracle_ap([(d.image, d.class_id, d.score, d.box) for d in dets],
                             [(g.image, g.class_id, g.box) for g in truths], thr)
            assert abs(got - want) <= 1e-6
    return "sampler, 4 attention mechanisms, matcher x100, panoptic merge, AP x100"


# -- 3: degenerate reductions ----------------------------------------------------------------

@criterion(3)
def test_criterion_3_degenerate_reductions():
    rng = make_rng(30)
    d = 8
    fmap = rng.normal(size=(6, 7, d))
    queries = rng.normal(size=(4, d))
    pos = rng.uniform(0.15, 0.85, size=(4, 2))

    anchors = AnchorSet(10, 1, 64)
    box_cfg = AttentionConfig(dim=d, heads=2)
    ada_cfg = AttentionConfig(dim=d, heads=2, scales=1, temperature_denominator=1.0)
    box_p = randomize(init_box_attention(rng, box_cfg), rng)
    ada_p = init_box_attention(rng, ada_cfg, mechanism="adaptive")
    for k, v in box_p.items():
        ada_p[k].data[...] = v.data
    ada_p["scale.w"].data[...] = rng.normal(size=ada_p["scale.w"].shape)
    windows = np.concatenate([pos, np.full((4, 2), anchors.sizes[0])], axis=1)
    a = adaptive_scale_attention(Tensor(fmap), Tensor(queries), pos, anchors, ada_cfg, ada_p)[0].data
    b = box_attention(Tensor(fmap), Tensor(queries), windows, box_cfg, box_p).data
    adaptive_gap = float(np.max(np.abs(a - b)))
    assert adaptive_gap <= 1e-6

    anchors = AnchorSet(8, 1, 64)
    cfg = AttentionConfig(dim=d, heads=2, scales=1)
    p = randomize(init_box_attention(rng, cfg), rng)
    windows = np.concatenate([pos, np.full((4, 2), anchors.sizes[0])], axis=1)
    a = fixed_scale_attention(Tensor(fmap), Tensor(queries), pos, anchors, cfg, p).data
    b = box_attention(Tensor(fmap), Tensor(queries), windows, cfg, p).data
    fixed_gap = float(np.max(np.abs(a - b)))
    assert fixed_gap <= 1e-12

    x = rng.normal(0, 4, size=500)
    y = (rng.random(500) < 0.4).astype(float)
    bce = y * np.logaddexp(0.0, -x) + (1 - y) * np.logaddexp(0.0, x)
    focal_gap = abs(focal_loss(x, y, alpha=None, gamma=0.0).item() - bce.mean())
    assert focal_gap <= 1e-9
    return f"adaptive-box {adaptive_gap:.1e}, fixed-box {fixed_gap:.1e}, focal-BCE {focal_gap:.1e}"


# -- 4: mechanism invariants -----------------------------------------------------------------

def _quadrant_logits(windows, size=32):
    logits = -np.ones((len(windows), size, size))
    ys, xs = np.meshgrid((np.arange(size) + 0.5) / size, (np.arange(size) + 0.5) / size, indexing="ij")
    for q, (cx, cy, _, _) in enumerate(windows):
        logits[q][(xs < cx) & (ys < cy)] = 1.0
    return logits


@criterion(4)
def test_criterion_4_mechanism_invariants():
    rng = make_rng(40)
    d = 8
    fmap = rng.normal(size=(16, 16, d))
    queries = rng.normal(size=(3, d))
    pos = rng.uniform(0.2, 0.8, size=(3, 2))
    windows = np.concatenate([pos, rng.uniform(0.2, 0.5, size=(3, 2))], axis=1)

    # weights sum to one over their support
    trace: dict = {}
    cfg = AttentionConfig(dim=d, heads=2)
    box_attention(Tensor(fmap), Tensor(queries), windows, cfg, randomize(init_box_attention(rng, cfg), rng),
                  trace=trace)
    np.testing.assert_allclose(trace["grid_weights"].sum(-1), 1.0, rtol=0, atol=1e-9)
    trace = {}
    acfg = AttentionConfig(dim=d, heads=2, scales=3)
    adaptive_scale_attention(Tensor(fmap), Tensor(queries), pos, AnchorSet(4, 3, 64), acfg,
                             randomize(init_box_attention(rng, acfg, mechanism="adaptive"), rng), trace=trace)
    np.testing.assert_allclose(trace["scale_weights"].sum(-1), 1.0, rtol=0, atol=1e-9)
    np.testing.assert_allclose(trace["grid_weights"].sum(-1), 1.0, rtol=0, atol=1e-9)

    # masking: zero weight outside kept bins and invariance to masked texels
    mcfg = AttentionConfig(dim=d, heads=2, grid=14)
    mp = randomize(init_masked_instance_attention(rng, mcfg), rng)
    mp["offset.w"].data[...] = 0.0
    mp["offset.b"].data[...] = 0.0
    full = np.array([[0.5, 0.5, 1.0, 1.0]])
    prev = _quadrant_logits(full)
    trace = {}
    a = masked_instance_attention(Tensor(fmap), Tensor(queries[:1]), full, prev, mcfg, mp, trace=trace).data
    w = trace["grid_weights"]
    assert np.all(w[..., bin_index(14) != 0] == 0.0)
    np.testing.assert_allclose(w.sum(-1), 1.0, rtol=0, atol=1e-9)
    perturbed = fmap.copy()
    perturbed[9:, :] += rng.normal(size=perturbed[9:, :].shape) * 10
    perturbed[:, 9:] += rng.normal(size=perturbed[:, 9:].shape) * 10
    b = masked_instance_attention(Tensor(perturbed), Tensor(queries[:1]), full, prev, mcfg, mp).data
    drift = float(np.max(np.abs(a - b)))
    assert drift <= 1e-12

    # round-robin: exactly n/m heads per scale whenever m divides n
    pairs = 0
    for n in range(1, 17):
        for m in range(1, n + 1):
            if n % m == 0:
                assert np.bincount(head_scale_assignment(n, m), minlength=m).tolist() == [n // m] * m
                pairs += 1

    # refined displacement at scale j is the raw offset times size_j * 2^j / lambda, before clamping
    anchors = AnchorSet(4, 4, 64)
    tcfg = AttentionConfig(dim=d, heads=2, scales=4, share_scale_offsets=True, min_size_texels=0.0)
    tp = randomize(init_box_attention(rng, tcfg, mechanism="adaptive"), rng, scale=0.05)
    trace = {}
    adaptive_scale_attention(Tensor(fmap), Tensor(queries), pos, anchors, tcfg, tp, trace=trace)
    raw = (queries @ tp["offset.w"].data + tp["offset.b"].data).reshape(3, 2, 4)
    temps = tcfg.temperatures()
    np.testing.assert_allclose(temps, 2.0 ** np.arange(4) / tcfg.lam, rtol=0, atol=0)
    for j, size in enumerate(anchors.sizes):
        disp = trace["windows"][:, :, j, :2] - pos[:, None, :]
        np.testing.assert_allclose(disp, raw[..., :2] * size * temps[j], rtol=1e-12, atol=1e-15)
    return f"masked drift {drift:.1e}, round-robin over {pairs} (n, m) pairs"


# -- 5 and 7: toy training and the scale profile of its checkpoint --------------------------

@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("femto_train")
    run = RunConfig()
    result = train(run, out)
    report = evaluate(result.params, run.model, make_scenes(run.val_seeds))
    return run, out, result, report


@criterion(5)
def test_criterion_5_toy_training(trained):
    run, out, result, report = trained
    assert run.steps == 2000 and run.train_count == 200 and run.val_count == 50 and run.model == ModelConfig()
    assert not result.aborted and len(result.log) == run.steps
    losses = [r["loss"] for r in result.log]
    ma = moving_average(losses, 20)
    assert ma[-1] < ma[0], (ma[0], ma[-1])
    assert report.ap50 > AP50_FLOOR, report.ap50
    assert result.seconds <= TRAIN_BUDGET_S, result.seconds
    # same seed, same schedule: the first 200 steps reproduce bit for bit
    again = train(run, stop_after=200)
    assert [r["loss"] for r in again.log] == losses[:200]
    assert [r["grad_norm"] for r in again.log] == [r["grad_norm"] for r in result.log[:200]]
    return (f"loss MA {ma[0]:.3f} -> {ma[-1]:.3f}, AP@0.5 {report.ap50:.3f} > {AP50_FLOOR}, "
            f"{result.seconds:.0f}s, 200-step rerun bit-identical")


@criterion(7)
def test_criterion_7_scale_profile(trained, tmp_path):
    run, out, result, _ = trained
    params, cfg = load_checkpoint(out / "checkpoint.splr")
    profile = profile_scales(params, cfg, make_scenes(run.val_seeds))
    assert sum(profile.counts.values()) > 0
    for bucket, hist in profile.histograms.items():
        if profile.counts[bucket]:
            assert abs(hist.sum() - 1.0) <= 1e-6
    paths = write_profile(profile, tmp_path, draw=False)
    assert paths["csv"].exists() and paths["script"].exists()
    ok, message = small_object_check(profile)  # soft: logged, never fatal
    print(message)
    verdict = {True: "agrees", False: "disagrees", None: "not decidable"}[ok]
    return f"rows normalized; soft check {verdict}: {message}"


# -- 6: ablation grids -----------------------------------------------------------------------

ABLATION_RUN = RunConfig(task="instance", steps=30, warmup=5, batch_size=2, train_count=20, val_count=10,
                         checkpoint_every=0)
GRIDS = {"mechanism": 3, "m=2,4,6": 3, "s": 3, "feature_scale=1/4,1/8,1/16": 3}


@criterion(6)
def test_criterion_6_ablation_grids(tmp_path):
    notes = []
    for spec, rows in GRIDS.items():
        cells = ablate(ABLATION_RUN, spec, tmp_path / spec.split("=")[0], draw=False)
        assert len(cells) == rows
        assert all(c.status == "ok" for c in cells), [(c.setting, c.reason) for c in cells]
        assert all(0 <= c.ap_box <= 1 and 0 <= c.ap_mask <= 1 for c in cells)
        notes += directional_findings(cells)[:1]
    assert [c.setting for c in grid_cells("mechanism")] == [
        "mechanism=base", "mechanism=fixed", "mechanism=adaptive"]
    again = ablate(ABLATION_RUN, "mechanism", tmp_path / "mechanism_again", draw=False)
    first = (tmp_path / "mechanism" / "ablation.csv").read_text()
    second = (tmp_path / "mechanism_again" / "ablation.csv").read_text()
    assert first == second and len(again) == 3
    print("\n".join(notes))
    return f"{sum(GRIDS.values())} cells completed, mechanism grid deterministic; {notes[0]}"


# -- 8: loss recipe ---------------------------------------------------------------------------

@criterion(8)
def test_criterion_8_loss_recipe():
    for task, cls in (("detect", 2.0), ("instance", 2.0), ("panoptic", 4.0)):
        w = LossWeights.for_task(task)
        assert (w.focal, w.dice, w.l1, w.giou, w.cls) == (5.0, 5.0, 5.0, 2.0, cls)
    rng = np.random.default_rng(8)

    def pred():
        boxes = np.concatenate([rng.uniform(0.3, 0.7, (5, 2)), rng.uniform(0.1, 0.3, (5, 2))], axis=1)
        return LayerPrediction(Tensor(boxes), Tensor(rng.normal(size=(5, 3))), Tensor(rng.normal(size=(5, 6, 6))))

    out = DetectionOutput([pred(), pred()])
    boxes = np.concatenate([rng.uniform(0.3, 0.7, (3, 2)), rng.uniform(0.1, 0.3, (3, 2))], axis=1)
    tgt = Targets(rng.integers(0, 3, 3), boxes, (rng.uniform(size=(3, 6, 6)) > 0.6).astype(float))
    base = LossWeights.for_task("instance")
    loss0, report = composite_loss(out, tgt, base, task="instance", matcher_weights=base)
    for term in ("cls", "l1", "giou", "focal", "dice"):
        bumped = LossWeights(**{**base.as_dict(), term: base.as_dict()[term] + 0.75})
        loss1, _ = composite_loss(out, tgt, bumped, task="instance", matcher_weights=base)
        assert math.isclose(loss1.item() - loss0.item(), 0.75 * report.terms[term], rel_tol=0, abs_tol=1e-10)
    return "weights exact per task; each perturbation moves the loss by delta x term"


# -- 9: serialization -------------------------------------------------------------------------

@criterion(9)
def test_criterion_9_serialization(tmp_path):
    cfg = ModelConfig(task="instance")
    params = init_params(cfg, 9)
    rng = np.random.default_rng(9)
    for p in params.values():
        p.data[...] += rng.normal(0, 0.05, p.shape)
    save_checkpoint(params, cfg, tmp_path / "f64.splr", dtype=np.float64)
    loaded, stored = load_checkpoint(tmp_path / "f64.splr")
    assert stored == cfg and all(np.array_equal(loaded[k].data, p.data) for k, p in params.items())

    save_checkpoint(params, cfg, tmp_path / "f32.splr")
    loaded32, _ = load_checkpoint(tmp_path / "f32.splr", cfg)
    assert all(np.array_equal(loaded32[k].data, p.data.astype(np.float32)) for k, p in params.items())
    save_checkpoint(loaded32, cfg, tmp_path / "again.splr")
    assert (tmp_path / "again.splr").read_bytes() == (tmp_path / "f32.splr").read_bytes()
    image = generate_scene(5).image
    with no_grad():
        a, b = forward(image, cfg, params), forward(image, cfg, loaded32)
    box_gap = float(np.max(np.abs(a.final.boxes.data - b.final.boxes.data)))
    logit_gap = float(np.max(np.abs(a.final.logits.data - b.final.logits.data)))
    assert box_gap <= 1e-4 and logit_gap <= 1e-3

    export_dataset(range(10), tmp_path / "a.splr")
    scenes = import_dataset(tmp_path / "a.splr")
    export_dataset(scenes, tmp_path / "b.splr")
    assert (tmp_path / "a.splr").read_bytes() == (tmp_path / "b.splr").read_bytes()
    assert manifest_path(tmp_path / "a.splr").read_text() == manifest_path(tmp_path / "b.splr").read_text()
    for seed, scene in enumerate(scenes):
        ref = storage_roundtrip(generate_scene(seed))
        assert np.array_equal(scene.image, ref.image) and np.array_equal(scene.stuff, ref.stuff)
        assert all(np.array_equal(x.mask, y.mask) and np.array_equal(x.box, y.box)
                   for x, y in zip(scene.instances, ref.instances))
    return f"bit-exact files; f32 output gaps boxes {box_gap:.1e}, logits {logit_gap:.1e}"
