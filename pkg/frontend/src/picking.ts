/** Pointer picking: raycast against the tissue mesh, snap to the nearest
 * surface point within a 5 px screen tolerance, collect two picks into a
 * set_segment message. Off-surface clicks give feedback and send nothing.
 */

import * as THREE from "three";

export const SNAP_TOLERANCE_PX = 5;

export interface PickResult {
  point: [number, number, number];
  faceIndex: number;
}

export function pickSurfacePoint(
  ndcX: number,
  ndcY: number,
  camera: THREE.Camera,
  tissue: THREE.Mesh,
): PickResult | null {
  const caster = new THREE.Raycaster();
  caster.setFromCamera(new THREE.Vector2(ndcX, ndcY), camera);
  const hits = caster.intersectObject(tissue, false);
  if (!hits.length) return null;
  const hit = hits[0];
  return {
    point: [hit.point.x, hit.point.y, hit.point.z],
    faceIndex: hit.faceIndex ?? -1,
  };
}

/** Project a world point to pixel coordinates for a given canvas size. */
export function projectToScreen(
  point: [number, number, number],
  camera: THREE.Camera,
  width: number,
  height: number,
): [number, number] {
  const v = new THREE.Vector3(...point).project(camera);
  return [((v.x + 1) / 2) * width, ((1 - v.y) / 2) * height];
}

export class SegmentPicker {
  picks: PickResult[] = [];

  /** Returns a payload once two picks are in; null while collecting. */
  addPick(pick: PickResult | null): { a: number[]; b: number[] } | null {
    if (pick === null) return null;
    this.picks.push(pick);
    if (this.picks.length < 2) return null;
    const [first, second] = this.picks;
    this.picks = [];
    return { a: [...first.point], b: [...second.point] };
  }

  clear(): void {
    this.picks = [];
  }
}
