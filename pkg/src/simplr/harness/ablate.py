"""Ablation grids over the scale-aware attention settings.

A grid spec names one or more axes separated by ``;``.  Each axis is
``name`` (default values) or ``name=v1,v2,...``; several axes form their
cartesian product.  Every cell trains from the same seed and step budget.
Cells whose configuration is invalid are kept in the table as skipped.
"""

from __future__ import annotations

import csv
import itertools
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

from ..model.config import ConfigError
from .report import emit_figure, write_csv
from .train import RunConfig, evaluate, make_scenes, train

# axis name -> (model field, default values)
AXES: dict[str, tuple[str, tuple[str, ...]]] = {
    "mechanism": ("mechanism", ("base", "fixed", "adaptive")),
    "s": ("anchor_base", ("2", "4", "8")),
    "m": ("scales", ("2", "4", "6")),
    "lambda": ("temperature_denominator", ("1", "4", "8")),
    "feature_scale": ("feature_stride", ("1/4", "1/8", "1/16")),
}
ALIASES = {"λ": "lambda", "n": "m"}
TABLE_HEADER = ["setting", "status", "reason", "ap_box", "ap_mask", "config"]


class GridError(ValueError):
    pass


def _axis_value(axis: str, text: str):
    try:
        if axis == "mechanism":
            return text
        if axis == "m":
            return int(text)
        if axis == "feature_scale":
            frac = Fraction(text)
            if frac <= 0 or frac.numerator != 1:
                raise ValueError(text)
            return frac.denominator
        return float(text)
    except (ValueError, ZeroDivisionError) as exc:
        raise GridError(f"bad value {text!r} for axis {axis!r}") from exc


def parse_grid(spec: str) -> list[tuple[str, list[tuple[str, object]]]]:
    """[(axis, [(label, field value), ...]), ...] for a grid spec."""
    axes = []
    for part in (p.strip() for p in spec.split(";")):
        if not part:
            continue
        name, sep, values = part.partition("=")
        name = ALIASES.get(name.strip(), name.strip())
        if name not in AXES:
            raise GridError(f"unknown grid axis {name!r}; choose from {', '.join(AXES)}")
        labels = [v.strip() for v in values.split(",") if v.strip()] if sep else list(AXES[name][1])
        if not labels:
            raise GridError(f"axis {name!r} has no values")
        if name in (a for a, _ in axes):
            raise GridError(f"axis {name!r} given twice")
        axes.append((name, [(label, _axis_value(name, label)) for label in labels]))
    if not axes:
        raise GridError("empty grid spec")
    return axes


@dataclass
class Cell:
    setting: str
    changes: dict
    status: str = "pending"
    reason: str = ""
    ap_box: float | None = None
    ap_mask: float | None = None
    config: str = ""

    def row(self) -> list:
        fmt = lambda v: "" if v is None else f"{v:.6f}"  # noqa: E731
        return [self.setting, self.status, self.reason, fmt(self.ap_box), fmt(self.ap_mask), self.config]


def grid_cells(spec: str) -> list[Cell]:
    axes = parse_grid(spec)
    cells = []
    for combo in itertools.product(*[[(name, label, value) for label, value in values] for name, values in axes]):
        setting = " ".join(f"{name}={label}" for name, label, _ in combo)
        changes = {f"model.{AXES[name][0]}": value for name, _, value in combo}
        cells.append(Cell(setting, changes))
    return cells


def _cell_dir(out: Path, index: int) -> Path:
    return out / "cells" / f"{index:02d}"


def _run_cell(run: RunConfig, cell_dir: Path) -> tuple[float, float | None]:
    result = train(run, cell_dir)
    report = evaluate(result.params, run.model, make_scenes(run.val_seeds))
    return report.ap50, (report.mask_ap50 if run.model.uses_masks else None)


def ablate(base: RunConfig, spec: str, out_dir, workers: int = 1, draw: bool = True) -> list[Cell]:
    """Train and score every cell of the grid; writes ``ablation.csv`` plus plot script."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cells = grid_cells(spec)
    pending: list[tuple[int, RunConfig, Path]] = []
    for i, cell in enumerate(cells):
        changes = dict(cell.changes)
        stride = changes.get("model.feature_stride")
        if stride is not None:
            texels = (base.model.image_size // stride) ** 2
            if texels < base.model.num_queries:
                # coarse feature maps at toy image sizes hold fewer texels than queries
                changes["model.num_queries"] = texels
                cell.reason = f"queries capped at {texels} texels"
        try:
            run = base.with_(**changes)
        except ConfigError as exc:
            cell.status, cell.reason = "skipped", str(exc)
            continue
        cell_dir = _cell_dir(out, i)
        cell_dir.mkdir(parents=True, exist_ok=True)
        (cell_dir / "run.cfg").write_text(run.to_text())
        cell.config = str((cell_dir / "run.cfg").relative_to(out))
        pending.append((i, run, cell_dir))
    if workers > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [(i, pool.submit(_run_cell, run, d)) for i, run, d in pending]
            results = [(i, f.result()) for i, f in futures]
    else:
        results = [(i, _run_cell(run, d)) for i, run, d in pending]
    for i, (ap_box, ap_mask) in results:
        cells[i].status, cells[i].ap_box, cells[i].ap_mask = "ok", ap_box, ap_mask
    csv_path = write_csv(out / "ablation.csv", TABLE_HEADER, [c.row() for c in cells])
    emit_figure(csv_path, "ablation", f"Ablation: {spec}", draw=draw)
    return cells


def rerun_cell(out_dir, setting: str) -> tuple[float, float | None]:
    """Re-train one finished cell from the config recorded in its table row."""
    out = Path(out_dir)
    with open(out / "ablation.csv", newline="") as fh:
        rows = {r["setting"]: r for r in csv.DictReader(fh)}
    if setting not in rows or not rows[setting]["config"]:
        raise GridError(f"no runnable cell {setting!r} in {out / 'ablation.csv'}")
    cfg_path = out / rows[setting]["config"]
    run = RunConfig.from_text(cfg_path.read_text())
    return _run_cell(run, cfg_path.parent / "rerun")


def directional_findings(cells: list[Cell]) -> list[str]:
    """Plain-language comparisons worth reporting; never asserted."""
    notes = []
    by = {c.setting: c for c in cells if c.status == "ok"}
    base, adaptive = by.get("mechanism=base"), by.get("mechanism=adaptive")
    if base and adaptive:
        rel = ">=" if adaptive.ap_box >= base.ap_box else "<"
        notes.append(f"adaptive AP box {adaptive.ap_box:.4f} {rel} base {base.ap_box:.4f}")
    done = [c for c in cells if c.status == "ok"]
    if done:
        best = max(done, key=lambda c: c.ap_box)
        notes.append(f"best AP box: {best.setting} ({best.ap_box:.4f})")
    return notes


def worker_count(requested: int | None = None) -> int:
    cap = int(os.environ.get("SIMPLR_THREADS", "1") or 1)
    return max(1, min(requested or cap, cap))
