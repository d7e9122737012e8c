import { describe, expect, it } from "vitest";
import { readFileSync } from "node:fs";
import { fileURLToPath } from "node:url";
import { dirname, resolve } from "node:path";

import { WorkbenchScene, scoreToColor } from "../src/scene";
import { CandidateJson, SnapshotMessage } from "../src/protocol";
import { SessionClient } from "../src/session";

const here = dirname(fileURLToPath(import.meta.url));
const log: Record<string, unknown>[] = JSON.parse(
  readFileSync(resolve(here, "fixtures/session_log.json"), "utf-8"),
);

const snapshot = log.find((m) => m.type === "snapshot") as unknown as SnapshotMessage;
const apsAck = log.find(
  (m) => m.type === "ack" && (m as { command?: string }).command === "run_aps",
) as unknown as { payload: { selected: CandidateJson; map: CandidateJson[] } };

describe("score colormap", () => {
  it("orders colors by score (low is blue, high is red)", () => {
    const lo = scoreToColor(0, 0, 1);
    const hi = scoreToColor(1, 0, 1);
    expect(lo.b).toBeGreaterThan(lo.r);
    expect(hi.r).toBeGreaterThan(hi.b);
  });

  it("handles a constant score map without dividing by zero", () => {
    const c = scoreToColor(3, 3, 3);
    expect(Number.isFinite(c.r + c.g + c.b)).toBe(true);
  });
});

describe("heatmap overlay", () => {
  it("max-scored face in the map equals the server selection", () => {
    const scored = apsAck.payload.map.filter((c) => c.score !== null);
    const maxFace = scored.reduce((a, b) => ((a.score ?? -Infinity) >= (b.score ?? -Infinity) ? a : b));
    expect(maxFace.face).toBe(apsAck.payload.selected.face);
  });

  it("colors the selected face white and infeasible faces dark", () => {
    const scene = new WorkbenchScene();
    scene.loadSnapshot(snapshot);
    scene.setHeatmap(apsAck.payload.map, apsAck.payload.selected.face);
    const colors = (scene.tissue!.geometry.getAttribute("color") as { array: ArrayLike<number> }).array;
    const faceColor = (fi: number) => [colors[fi * 9], colors[fi * 9 + 1], colors[fi * 9 + 2]];
    const sel = faceColor(apsAck.payload.selected.face);
    expect(sel[0]).toBeCloseTo(1, 5);
    expect(sel[1]).toBeCloseTo(1, 5);
    expect(sel[2]).toBeCloseTo(1, 5);
    const infeasible = apsAck.payload.map.find((c) => !c.feasible && c.face !== apsAck.payload.selected.face);
    expect(infeasible).toBeDefined();
    const dark = faceColor(infeasible!.face);
    expect(Math.max(...dark)).toBeLessThan(0.3);
  });

  it("single feasible face map still renders a marker color", () => {
    const scene = new WorkbenchScene();
    scene.loadSnapshot(snapshot);
    const onlyFace: CandidateJson = { face: 0, centroid: [0, 0, 0], score: 2.5, feasible: true, reason: null };
    scene.setHeatmap([onlyFace], 0);
    const colors = (scene.tissue!.geometry.getAttribute("color") as { array: ArrayLike<number> }).array;
    expect(colors[0]).toBeCloseTo(1, 5); // selected marker
  });
});

describe("client aps handling", () => {
  it("stores selection and map from the ack", () => {
    const client = new SessionClient();
    client.attach({ send: () => {} });
    for (const message of log) {
      client.handleMessage(JSON.stringify(message));
      if (client.state.selectedFace !== null) break;
    }
    expect(client.state.selectedFace).toBe(apsAck.payload.selected.face);
    expect(client.state.scoreMap).not.toBeNull();
  });
});
