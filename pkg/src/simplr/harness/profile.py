"""Learned scale distributions of adaptive-scale attention, grouped by object size.

For every ground-truth object matched (by the loss's matcher) to a final
query, the encoder's scale weights at the texel that seeded that query are
averaged over heads and encoder layers.  Rows are then averaged within
each size bucket, giving one distribution over the m anchor sizes per bucket.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..data import SIZE_BUCKETS, SceneRecord, size_bucket
from ..model import ModelConfig, forward
from ..model.config import ConfigError
from ..numerics import no_grad
from ..objective import LossWeights, build_cost_matrix, hungarian_match
from .report import emit_figure, write_csv
from .train import targets_for


class ScaleProfileError(ConfigError):
    pass


@dataclass
class ScaleProfile:
    anchor_sizes: np.ndarray  # pixels
    histograms: dict[str, np.ndarray]  # bucket -> [m], sums to 1
    counts: dict[str, int]

    def modal_anchor(self, bucket: str) -> int | None:
        if self.counts.get(bucket, 0) == 0:
            return None
        return int(np.argmax(self.histograms[bucket]))

    def rows(self) -> list[list]:
        out = []
        for bucket in SIZE_BUCKETS:
            if self.counts[bucket]:
                out.append([bucket, self.counts[bucket], *[f"{v:.9f}" for v in self.histograms[bucket]]])
        return out

    def header(self) -> list[str]:
        return ["bucket", "count", *[f"anchor_{s:g}px" for s in self.anchor_sizes]]


def query_scale_weights(scene: SceneRecord, cfg: ModelConfig, params) -> tuple[list[tuple[int, np.ndarray]], int]:
    """(bucket-tagged scale distributions of matched objects, number of objects) for one scene."""
    traces: dict = {}
    with no_grad():
        out = forward(scene.image, cfg, params, traces)
    per_layer = [t["scale_weights"] for t in traces["encoder"]]  # each [HW, n, m]
    weights = np.mean([w.mean(axis=1) for w in per_layer], axis=0)  # [HW, m]
    targets = targets_for(scene, cfg)
    n_obj = len(scene.instances)
    if n_obj == 0:
        return [], 0
    cost = build_cost_matrix(out.final, targets, LossWeights.for_task(cfg.task), use_masks=cfg.uses_masks)
    match = hungarian_match(cost)
    selected = traces["proposals"].selected
    found = []
    for q, t in match.pairs:
        if t < n_obj:  # stuff segments have no size bucket
            found.append((t, weights[selected[q]]))
    return found, n_obj


def profile_scales(params, cfg: ModelConfig, scenes: list[SceneRecord]) -> ScaleProfile:
    if cfg.mechanism != "adaptive":
        raise ScaleProfileError(f"scale profiling needs adaptive-scale attention; this model uses {cfg.mechanism!r}, "
                                "which learns no per-query scale distribution")
    m = cfg.scales
    sums = {b: np.zeros(m) for b in SIZE_BUCKETS}
    counts = {b: 0 for b in SIZE_BUCKETS}
    for scene in scenes:
        found, _ = query_scale_weights(scene, cfg, params)
        for t, w in found:
            bucket = size_bucket(scene.instances[t].area)
            sums[bucket] += w
            counts[bucket] += 1
    hists = {b: (sums[b] / sums[b].sum() if counts[b] else np.full(m, np.nan)) for b in SIZE_BUCKETS}
    return ScaleProfile(cfg.anchors().sizes * cfg.image_size, hists, counts)


def write_profile(profile: ScaleProfile, out_dir, draw: bool = True) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = write_csv(out / "scale_profile.csv", profile.header(), profile.rows())
    script, png = emit_figure(csv_path, "histogram", "Scale weights by object size", draw=draw)
    paths = {"csv": csv_path, "script": script}
    if png is not None:
        paths["png"] = png
    return paths


def small_object_check(profile: ScaleProfile) -> tuple[bool | None, str]:
    """Soft check: do small objects put their largest mass on the smallest anchor?"""
    mode = profile.modal_anchor("small")
    if mode is None:
        return None, "no matched small objects; check skipped"
    hist = profile.histograms["small"]
    if np.ptp(hist) < 1e-6:
        return None, "small-object scale weights are flat; no preferred anchor"
    sizes = profile.anchor_sizes
    ok = mode == 0
    verdict = "matches" if ok else "differs from"
    return ok, (f"small-object modal anchor is {sizes[mode]:g}px (index {mode}); this {verdict} the expectation "
                f"that small objects favour the smallest anchor ({sizes[0]:g}px)")
