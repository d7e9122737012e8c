/** three.js scene: deforming surface mesh, segment/feature overlays, sensing
 * camera frustum, and the APS heatmap. Rendered positions always equal the
 * latest snapshot/delta payload; no client-side physics.
 */

import * as THREE from "three";
import { CandidateJson, SegmentPayload, SnapshotMessage } from "./protocol";

const INFEASIBLE_COLOR = new THREE.Color(0x3a3a3a);
const BASE_COLOR = new THREE.Color(0xb08a78);
const MARKED_COLOR = new THREE.Color(0x3366dd);
const SKIPPED_COLOR = new THREE.Color(0x6a6a6a);

/** Map a score in [lo, hi] to a perceptually ordered warm colormap. */
export function scoreToColor(score: number, lo: number, hi: number): THREE.Color {
  const t = hi > lo ? (score - lo) / (hi - lo) : 0.5;
  const clamped = Math.min(1, Math.max(0, t));
  // dark blue -> cyan -> yellow -> red
  const stops = [
    [0.05, 0.02, 0.35],
    [0.0, 0.7, 0.85],
    [0.95, 0.9, 0.1],
    [0.85, 0.1, 0.05],
  ];
  const x = clamped * (stops.length - 1);
  const i = Math.min(stops.length - 2, Math.floor(x));
  const f = x - i;
  return new THREE.Color(
    stops[i][0] + f * (stops[i + 1][0] - stops[i][0]),
    stops[i][1] + f * (stops[i + 1][1] - stops[i][1]),
    stops[i][2] + f * (stops[i + 1][2] - stops[i][2]),
  );
}

export class WorkbenchScene {
  scene = new THREE.Scene();
  orbitCamera: THREE.PerspectiveCamera;
  tissue: THREE.Mesh | null = null;
  private geometry: THREE.BufferGeometry | null = null;
  private faces: number[][] = [];
  private marked = new Set<number>();
  private overlay = new THREE.Group();
  private heatmapOn = false;
  private scoreMap: CandidateJson[] | null = null;
  private selectedFace: number | null = null;

  constructor(aspect = 4 / 3) {
    this.orbitCamera = new THREE.PerspectiveCamera(45, aspect, 0.001, 10);
    this.orbitCamera.position.set(0.09, 0.09, 0.09);
    this.orbitCamera.up.set(0, 0, 1);
    this.orbitCamera.lookAt(0.03, 0, 0.01);
    this.scene.add(new THREE.AmbientLight(0xffffff, 0.55));
    const sun = new THREE.DirectionalLight(0xffffff, 1.1);
    sun.position.set(0.2, 0.1, 0.4);
    this.scene.add(sun);
    this.scene.add(this.overlay);
  }

  /** Build (or rebuild) the tissue mesh from a full snapshot. */
  loadSnapshot(snap: SnapshotMessage): void {
    if (this.tissue) {
      this.scene.remove(this.tissue);
      this.geometry?.dispose();
    }
    this.faces = snap.faces;
    this.marked = new Set(snap.segment?.marked ?? snap.marked);
    const geo = new THREE.BufferGeometry();
    const positions = new Float32Array(snap.faces.length * 9);
    const colors = new Float32Array(snap.faces.length * 9);
    geo.setAttribute("position", new THREE.BufferAttribute(positions, 3));
    geo.setAttribute("color", new THREE.BufferAttribute(colors, 3));
    this.geometry = geo;
    const mat = new THREE.MeshLambertMaterial({ vertexColors: true, side: THREE.DoubleSide });
    this.tissue = new THREE.Mesh(geo, mat);
    this.scene.add(this.tissue);
    this.updateVertices(snap.vertices);
    this.drawSensingFrustum(snap);
    this.refreshColors();
  }

  /** Apply current vertex positions (full array; deltas already merged). */
  updateVertices(vertices: number[][]): void {
    if (!this.geometry) return;
    const pos = this.geometry.getAttribute("position") as THREE.BufferAttribute;
    this.faces.forEach((face, fi) => {
      face.forEach((vi, corner) => {
        const v = vertices[vi];
        pos.setXYZ(fi * 3 + corner, v[0], v[1], v[2]);
      });
    });
    pos.needsUpdate = true;
    this.geometry.computeVertexNormals();
  }

  setHeatmap(map: CandidateJson[] | null, selected: number | null): void {
    this.scoreMap = map;
    this.selectedFace = selected;
    this.heatmapOn = map !== null;
    this.refreshColors();
  }

  /** Per-face colors: marked region, heatmap scores, infeasible hatch tone. */
  refreshColors(): void {
    if (!this.geometry) return;
    const colors = this.geometry.getAttribute("color") as THREE.BufferAttribute;
    const byFace = new Map<number, CandidateJson>();
    let lo = Infinity;
    let hi = -Infinity;
    if (this.heatmapOn && this.scoreMap) {
      for (const c of this.scoreMap) {
        byFace.set(c.face, c);
        if (c.score !== null) {
          lo = Math.min(lo, c.score);
          hi = Math.max(hi, c.score);
        }
      }
    }
    for (let fi = 0; fi < this.faces.length; fi++) {
      let color = this.marked.has(fi) ? MARKED_COLOR : BASE_COLOR;
      if (this.heatmapOn) {
        const cand = byFace.get(fi);
        if (cand === undefined || !cand.feasible) color = INFEASIBLE_COLOR;
        else if (cand.score === null) color = SKIPPED_COLOR;
        else color = scoreToColor(cand.score, lo, hi);
        if (fi === this.selectedFace) color = new THREE.Color(0xffffff);
      }
      for (let corner = 0; corner < 3; corner++) {
        colors.setXYZ(fi * 3 + corner, color.r, color.g, color.b);
      }
    }
    colors.needsUpdate = true;
  }

  /** Overlay the picked segment and echoed feature pairs. */
  showSegment(segment: SegmentPayload | null): void {
    this.overlay.clear();
    if (!segment) return;
    const lineMat = new THREE.LineBasicMaterial({ color: 0x00ff66 });
    const seg = new THREE.BufferGeometry().setFromPoints([
      new THREE.Vector3(...(segment.a as [number, number, number])),
      new THREE.Vector3(...(segment.b as [number, number, number])),
    ]);
    this.overlay.add(new THREE.Line(seg, lineMat));
    const dotMat = new THREE.PointsMaterial({ color: 0xffee00, size: 0.0012 });
    const pts: THREE.Vector3[] = [];
    for (const pair of segment.pairs) {
      pts.push(new THREE.Vector3(...(pair.v as [number, number, number])));
      pts.push(new THREE.Vector3(...(pair.w as [number, number, number])));
    }
    const dots = new THREE.BufferGeometry().setFromPoints(pts);
    this.overlay.add(new THREE.Points(dots, dotMat));
  }

  /** Draw the sensing-camera frustum so visibility limits are visible. */
  private drawSensingFrustum(snap: SnapshotMessage): void {
    const cam = snap.camera;
    const sensing = new THREE.PerspectiveCamera(
      (2 * Math.atan(cam.height / (2 * cam.fy)) * 180) / Math.PI,
      cam.width / cam.height,
      0.01,
      0.12,
    );
    const m = new THREE.Matrix4();
    // camera-to-world: columns are right/down/forward; three expects -z forward
    const r = cam.rotation;
    m.set(
      r[0][0], -r[0][1], -r[0][2], cam.position[0],
      r[1][0], -r[1][1], -r[1][2], cam.position[1],
      r[2][0], -r[2][1], -r[2][2], cam.position[2],
      0, 0, 0, 1,
    );
    sensing.matrixAutoUpdate = false;
    sensing.matrix.copy(m);
    sensing.matrixWorld.copy(m);
    sensing.updateProjectionMatrix();
    this.overlay.add(new THREE.CameraHelper(sensing));
  }
}
