"""CSV tables, generated plotting scripts and rendered figures."""

from __future__ import annotations

import csv
from pathlib import Path

PLOT_TEMPLATE = '''"""Regenerate {png} from {csv_name}.  Needs matplotlib."""

import csv
import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

here = Path(__file__).resolve().parent
with open(here / "{csv_name}", newline="") as fh:
    rows = list(csv.DictReader(fh))
{body}
out = Path(sys.argv[1]) if len(sys.argv) > 1 else here / "{png}"
fig.tight_layout()
fig.savefig(out, dpi=120)
plt.close(fig)
'''

HISTOGRAM_BODY = '''
scale_cols = [c for c in rows[0] if c.startswith("anchor_")] if rows else []
fig, ax = plt.subplots(figsize=(6, 3.5))
width = 0.8 / max(len(rows), 1)
for k, row in enumerate(rows):
    xs = [i + k * width for i in range(len(scale_cols))]
    ax.bar(xs, [float(row[c]) for c in scale_cols], width, label=f"{{row['bucket']}} (n={{row['count']}})")
ax.set_xticks([i + width * (len(rows) - 1) / 2 for i in range(len(scale_cols))])
ax.set_xticklabels([c.replace("anchor_", "") for c in scale_cols])
ax.set_xlabel("anchor size")
ax.set_ylabel("mean scale weight")
ax.set_title({title!r})
ax.legend()
'''

ABLATION_BODY = '''
done = [r for r in rows if r["status"] == "ok"]
fig, ax = plt.subplots(figsize=(6, 3.5))
labels = [r["setting"] for r in done]
xs = range(len(done))
ax.bar([x - 0.2 for x in xs], [float(r["ap_box"]) for r in done], 0.4, label="AP box @0.5")
ax.bar([x + 0.2 for x in xs], [float(r["ap_mask"]) for r in done], 0.4, label="AP mask @0.5")
ax.set_xticks(list(xs))
ax.set_xticklabels(labels)
ax.set_ylabel("AP")
ax.set_title({title!r})
ax.legend()
'''

LOSS_BODY = '''
fig, ax = plt.subplots(figsize=(6, 3.5))
steps = [int(float(r["step"])) for r in rows if r["loss"] not in ("", "nan")]
for col in ["loss", "cls", "l1", "giou", "focal", "dice"]:
    vals = [float(r[col]) for r in rows if r["loss"] not in ("", "nan")]
    if any(vals):
        ax.plot(steps, vals, label=col, linewidth=1.0 if col != "loss" else 1.8)
ax.set_xlabel("step")
ax.set_ylabel("weighted loss")
ax.set_title({title!r})
ax.legend()
'''

BODIES = {"histogram": HISTOGRAM_BODY, "ablation": ABLATION_BODY, "loss": LOSS_BODY}


def write_csv(path, header: list[str], rows: list[list]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    return path


def write_plot_script(csv_path, kind: str, title: str) -> Path:
    """Emit ``<csv stem>_plot.py`` next to the CSV; running it writes ``<csv stem>.png``."""
    if kind not in BODIES:
        raise ValueError(f"unknown plot kind {kind!r}")
    csv_path = Path(csv_path)
    script = csv_path.with_name(csv_path.stem + "_plot.py")
    body = BODIES[kind].format(title=title)
    script.write_text(PLOT_TEMPLATE.format(csv_name=csv_path.name, png=csv_path.stem + ".png", body=body))
    return script


def render(script_path, png_path=None) -> Path | None:
    """Run a generated script in-process to produce its PNG; None when matplotlib is unavailable."""
    script_path = Path(script_path)
    png = Path(png_path) if png_path is not None else script_path.with_name(
        script_path.name.replace("_plot.py", ".png"))
    try:
        import matplotlib  # noqa: F401
    except ImportError:
        return None
    import runpy
    import sys

    argv = sys.argv
    try:
        sys.argv = [str(script_path), str(png)]
        runpy.run_path(str(script_path), run_name="__main__")
    finally:
        sys.argv = argv
    return png


def emit_figure(csv_path, kind: str, title: str, draw: bool = True) -> tuple[Path, Path | None]:
    script = write_plot_script(csv_path, kind, title)
    return script, render(script) if draw else None
