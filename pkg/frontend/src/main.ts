/** Operator console entry point: websocket wiring, render loop, picking,
 * heatmap toggle, and live plots.
 */

import * as THREE from "three";
import { SessionClient } from "./session";
import { WorkbenchScene } from "./scene";
import { SegmentPicker, pickSurfacePoint } from "./picking";
import { buildPanel, showToast } from "./panel";
import { drawSeries, traceSeries } from "./plots";

const canvas = document.getElementById("view") as HTMLCanvasElement;
const panelRoot = document.getElementById("panel") as HTMLElement;
const toastRoot = document.getElementById("toasts") as HTMLElement;
const plotCanvases = ["plot-wedge", "plot-shear", "plot-stretch", "plot-rho"].map(
  (id) => document.getElementById(id) as HTMLCanvasElement,
);
const statusEl = document.getElementById("status") as HTMLElement;

const renderer = new THREE.WebGLRenderer({ canvas, antialias: true });
renderer.setSize(canvas.clientWidth, canvas.clientHeight, false);

const workbench = new WorkbenchScene(canvas.clientWidth / canvas.clientHeight);
const client = new SessionClient();
const picker = new SegmentPicker();

const url = new URL(window.location.href);
const wsUrl = url.searchParams.get("ws") ?? "ws://127.0.0.1:8765/session";
const ws = new WebSocket(wsUrl);
client.state.connection = "connecting";

ws.addEventListener("open", () => client.attach({ send: (text) => ws.send(text) }));
ws.addEventListener("close", () => {
  client.state.connection = "disconnected";
  statusEl.textContent = "disconnected";
});
ws.addEventListener("message", (ev) => {
  try {
    const msg = client.handleMessage(String(ev.data));
    if (msg.type === "snapshot") {
      workbench.loadSnapshot(msg);
      workbench.showSegment(msg.segment);
      workbench.setHeatmap(msg.score_map, null);
    } else if (msg.type === "ack" && msg.command === "set_segment") {
      workbench.showSegment(client.state.segment);
    } else if (msg.type === "ack" && msg.command === "run_aps") {
      workbench.setHeatmap(client.state.scoreMap, client.state.selectedFace);
    } else if (msg.type === "ack" && (msg.command === "mark_dissected" || msg.command === "reset")) {
      picker.clear();
      workbench.showSegment(null);
      workbench.setHeatmap(null, null);
      client.send("snapshot");
    } else if (msg.type === "error") {
      showToast(toastRoot, client.state.lastError ?? "server error");
    }
  } catch (err) {
    showToast(toastRoot, String(err));
  }
});

buildPanel(panelRoot, client);

canvas.addEventListener("pointerdown", (ev) => {
  if (!workbench.tissue || !client.canSend("set_segment")) return;
  const rect = canvas.getBoundingClientRect();
  const ndcX = ((ev.clientX - rect.left) / rect.width) * 2 - 1;
  const ndcY = -(((ev.clientY - rect.top) / rect.height) * 2 - 1);
  const pick = pickSurfacePoint(ndcX, ndcY, workbench.orbitCamera, workbench.tissue);
  if (!pick) {
    showToast(toastRoot, "pick missed the tissue surface");
    return;
  }
  client.state.pendingPicks.push([...pick.point]);
  const payload = picker.addPick(pick);
  if (payload) client.send("set_segment", payload);
});

client.onChange(() => {
  statusEl.textContent =
    `state: ${client.state.protocolState} | request #${client.state.requestIndex}` +
    (client.state.selectedFace !== null ? ` | assist face ${client.state.selectedFace}` : "");
  if (client.state.vertices) workbench.updateVertices(client.state.vertices);
  const series = traceSeries(client.state.tracePoints);
  series.forEach((s, i) => {
    const c = plotCanvases[i];
    if (!c) return;
    const ctx = c.getContext("2d");
    if (ctx) drawSeries(ctx, s, c.width, c.height, s.label === "rho" ? 1.25 : undefined);
  });
});

// simple orbit: drag with right button rotates around the target
let dragging = false;
let last: [number, number] = [0, 0];
const target = new THREE.Vector3(0.03, 0, 0.01);
canvas.addEventListener("contextmenu", (e) => e.preventDefault());
canvas.addEventListener("pointerdown", (ev) => {
  if (ev.button === 2) {
    dragging = true;
    last = [ev.clientX, ev.clientY];
  }
});
window.addEventListener("pointerup", () => (dragging = false));
window.addEventListener("pointermove", (ev) => {
  if (!dragging) return;
  const dx = (ev.clientX - last[0]) * 0.01;
  const dy = (ev.clientY - last[1]) * 0.01;
  last = [ev.clientX, ev.clientY];
  const offset = workbench.orbitCamera.position.clone().sub(target);
  const sph = new THREE.Spherical().setFromVector3(offset);
  sph.theta -= dx;
  sph.phi = Math.min(Math.PI - 0.05, Math.max(0.05, sph.phi - dy));
  workbench.orbitCamera.position.copy(target.clone().add(new THREE.Vector3().setFromSpherical(sph)));
  workbench.orbitCamera.lookAt(target);
});

function animate(): void {
  requestAnimationFrame(animate);
  renderer.render(workbench.scene, workbench.orbitCamera);
}
animate();
