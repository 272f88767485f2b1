"""Report rendering: markdown tables, image grids, and feature probes.

The grid mirrors the side-by-side presentation used throughout the
package: originals on the top row, counterfactuals below, up to eight
columns. PGM is the contractual grid format; a matplotlib PNG of the
same grid can be rendered next to it.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .phantom import IMAGE_SIZE, measure_features

ALGORITHMS = ("attfind", "eigenfind")
_SEPARATOR = 0.25
_PAD = 2

HEART_DELTA_PX = 1.0
FLUID_DELTA = 0.05


class ReportError(ValueError):
    pass


def load_result_json(path: str | Path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ReportError(f"malformed JSON in {path}: {exc}") from None
    for key in ("algorithm", "n", "n_explained"):
        if key not in data:
            raise ReportError(f"{path}: missing field {key!r}")
    return data


def markdown_report(results: list[dict]) -> str:
    """Table-style comparison: one row per pathology, one column set per algorithm."""
    by_pathology: dict[str, dict[str, dict]] = {}
    for res in results:
        pathology = res.get("pathology") or "-"
        by_pathology.setdefault(pathology, {})[res["algorithm"]] = res

    def pct(res: dict | None) -> str:
        if res is None or not res["n"]:
            return "-"
        return f"{100.0 * res['n_explained'] / res['n']:.1f}%"

    def queries(res: dict | None) -> str:
        return "-" if res is None or "query_count" not in res else str(res["query_count"])

    def wall(res: dict | None) -> str:
        if res is None or res.get("wall_ms") is None:
            return "-"
        return f"{res['wall_ms']:.0f}"

    lines = [
        "| Pathology | AttFind | EigenFind | AttFind queries | EigenFind queries | AttFind wall (ms) | EigenFind wall (ms) |",
        "|---|---|---|---|---|---|---|",
    ]
    for pathology in sorted(by_pathology):
        att = by_pathology[pathology].get("attfind")
        eig = by_pathology[pathology].get("eigenfind")
        lines.append(
            f"| {pathology} | {pct(att)} | {pct(eig)} | {queries(att)} | {queries(eig)} "
            f"| {wall(att)} | {wall(eig)} |"
        )
    return "\n".join(lines) + "\n"


def grid_array(originals: list[np.ndarray], counterfactuals: list[np.ndarray]) -> np.ndarray:
    """Two-row composite (originals over counterfactuals) with separators."""
    if len(originals) != len(counterfactuals) or not originals:
        raise ReportError("need equally many originals and counterfactuals (>= 1)")
    cols = len(originals)
    cell = IMAGE_SIZE
    height = 2 * cell + 3 * _PAD
    width = cols * cell + (cols + 1) * _PAD
    grid = np.full((height, width), _SEPARATOR, dtype=np.float32)
    for c, (top, bot) in enumerate(zip(originals, counterfactuals)):
        x0 = _PAD + c * (cell + _PAD)
        grid[_PAD : _PAD + cell, x0 : x0 + cell] = top.reshape(cell, cell)
        grid[2 * _PAD + cell : 2 * _PAD + 2 * cell, x0 : x0 + cell] = bot.reshape(cell, cell)
    return grid


def render_grid_png(
    originals: list[np.ndarray],
    counterfactuals: list[np.ndarray],
    ids: list[int],
    path: str | Path,
) -> None:
    """Matplotlib rendering of the same grid, saved as a PNG figure."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    cols = len(originals)
    fig, axes = plt.subplots(2, cols, figsize=(1.6 * cols, 3.4), squeeze=False)
    for c in range(cols):
        axes[0][c].imshow(originals[c].reshape(IMAGE_SIZE, IMAGE_SIZE), cmap="gray", vmin=0, vmax=1)
        axes[1][c].imshow(
            counterfactuals[c].reshape(IMAGE_SIZE, IMAGE_SIZE), cmap="gray", vmin=0, vmax=1
        )
        axes[0][c].set_title(f"id {ids[c]}", fontsize=8)
        for r in (0, 1):
            axes[r][c].set_xticks([])
            axes[r][c].set_yticks([])
    axes[0][0].set_ylabel("original", fontsize=8)
    axes[1][0].set_ylabel("counterfactual", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def probe_report(
    result: dict,
    originals_by_id: dict[int, np.ndarray],
    cf_by_id: dict[int, np.ndarray],
    top: int = 3,
) -> dict:
    """Feature-shift fractions for the leading chosen directions.

    For each of the first `top` directions that explained at least one
    image, measures every (original, counterfactual) pair it produced and
    reports the fraction where the heart widened by more than 1 px, the
    fluid level rose by more than 0.05, and a pacemaker newly appeared.
    """
    chosen = [c for c in result.get("chosen_directions", []) if c.get("n_flipped", 0) > 0]
    directions = chosen[:top]
    per_image = result.get("per_image", [])

    out = []
    for direction in directions:
        key = (direction["kind"], direction["index"], direction["sign"])
        pairs = []
        for entry in per_image:
            d = entry["direction"]
            if (d["kind"], d["index"], d["sign"]) != key:
                continue
            image_id = int(entry["id"])
            if image_id not in originals_by_id:
                raise ReportError(f"no original image for id {image_id}")
            if image_id not in cf_by_id:
                raise ReportError(f"no counterfactual image for id {image_id}")
            pairs.append((originals_by_id[image_id], cf_by_id[image_id]))
        heart = fluid = pace = 0
        for orig, cf in pairs:
            f0 = measure_features(orig)
            f1 = measure_features(cf)
            heart += f1.measured_heart_width - f0.measured_heart_width > HEART_DELTA_PX
            fluid += f1.measured_fluid_level - f0.measured_fluid_level > FLUID_DELTA
            pace += f1.pacemaker_detected and not f0.pacemaker_detected
        n = len(pairs)
        out.append(
            {
                "kind": direction["kind"],
                "index": direction["index"],
                "sign": direction["sign"],
                "n_images": n,
                "frac_heart_width_increase": heart / n if n else 0.0,
                "frac_fluid_level_increase": fluid / n if n else 0.0,
                "frac_pacemaker_added": pace / n if n else 0.0,
            }
        )
    return {
        "algorithm": result.get("algorithm"),
        "pathology": result.get("pathology"),
        "directions": out,
    }
