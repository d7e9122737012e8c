"""Assistance-position selection and the score heatmap.

Scores candidate contact faces on the wedge scenario, prints the selection,
and writes the per-face score map both as JSON and as a crude top-view PGM
heatmap image for quick inspection.
"""

import json
from pathlib import Path

import numpy as np

from exposim.aps import select_position
from exposim.harness import Scenario, prepare_request

scenario = Scenario(stride=6, phantom_resolution=(8, 3, 3))
prep = prepare_request(scenario)
best, score_map = select_position(
    prep.world, prep.mesh.surface, prep.world.state(), prep.vis0,
    prep.features, scenario.alpha, scenario.l_min, stride=scenario.stride,
)
scored = [c for c in score_map if c.score is not None]
print(f"evaluated {len(scored)} of {len(score_map)} faces "
      f"(stride {scenario.stride}, visibility + distance constraints)")
print(f"selected face {best.face} at {np.round(best.centroid, 4)} with score {best.score:.3f}")
reasons = {}
for c in score_map:
    if c.reason:
        reasons[c.reason] = reasons.get(c.reason, 0) + 1
print(f"exclusions: {reasons}")

out = Path("runs")
out.mkdir(exist_ok=True)
(out / "aps_map.json").write_text(json.dumps([c.to_json() for c in score_map], indent=1))

# top-view heatmap: splat face scores into a coarse grid over (x, y)
grid = np.full((60, 80), np.nan)
lo = prep.mesh.vertices.min(axis=0)
hi = prep.mesh.vertices.max(axis=0)
for c in scored:
    u = int((c.centroid[0] - lo[0]) / (hi[0] - lo[0]) * 79)
    v = int((c.centroid[1] - lo[1]) / (hi[1] - lo[1]) * 59)
    grid[v, u] = max(grid[v, u], c.score) if np.isfinite(grid[v, u]) else c.score
smin = np.nanmin(grid)
smax = np.nanmax(grid)
img = np.where(np.isnan(grid), 0, (1 + 254 * (grid - smin) / (smax - smin + 1e-30))).astype(int)
with open(out / "aps_heatmap.pgm", "w") as fh:
    fh.write(f"P2\n80 60\n255\n")
    for row in img:
        fh.write(" ".join(str(v) for v in row) + "\n")
print(f"wrote {out / 'aps_map.json'} and {out / 'aps_heatmap.pgm'} "
      f"(scores {smin:.2f}..{smax:.2f})")
