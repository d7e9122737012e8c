"""One full assistance request: selection, visual servoing, expansion ratio.

Runs a shortened closed loop (12 steps instead of the standard 40) so the
demo finishes in about a minute, printing the per-step error block norms and
the final exposure expansion.
"""

import numpy as np

from exposim.harness import Scenario, run_assist_request

scenario = Scenario(steps=12, stride=10)
report = run_assist_request(scenario, outdir="runs")

print(f"assistance face: {report.aps_face} (score {report.aps_score:.3f})")
print(f"steps run: {report.steps}, stop reason: {report.stop_reason}")
print(f"marked-region projected area: {report.area_before} px -> {report.area_after} px")
print(f"expansion ratio rho = {report.rho:.3f} (success means > 1.25): {report.success}")
print(f"wedge-error norm {report.initial_wedge_error_norm:.3f} -> "
      f"{report.final_wedge_error_norm:.3f}")
print(f"timings: { {k: round(v, 1) for k, v in report.timings.items()} }")
print(f"trace written to {report.trace_path}")

trace_lines = open(report.trace_path).read().strip().splitlines()
import json

first = json.loads(trace_lines[0])
last = json.loads(trace_lines[-1])
print(f"\nEE path: p0 {np.round(first['p'], 4)} -> pT {np.round(last['p'], 4)}")
print(f"per-step wall times: {[round(json.loads(l)['wall_time'], 2) for l in trace_lines[:6]]} ...")
