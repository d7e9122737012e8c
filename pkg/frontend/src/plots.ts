/** Minimal canvas strip charts: one line per error block (wedge, shear,
 * stretch) plus the live expansion-ratio estimate with its 1.25 success
 * threshold.
 */

import { TracePoint } from "./session";

export interface Series {
  label: string;
  color: string;
  values: number[];
}

export function traceSeries(points: TracePoint[]): Series[] {
  return [
    { label: "wedge", color: "#e45756", values: points.map((p) => p.wedge) },
    { label: "shear", color: "#4c78a8", values: points.map((p) => p.shear) },
    { label: "stretch", color: "#f2a900", values: points.map((p) => p.stretch) },
    { label: "rho", color: "#54a24b", values: points.map((p) => p.rho) },
  ];
}

export function drawSeries(
  ctx: CanvasRenderingContext2D,
  series: Series,
  width: number,
  height: number,
  reference?: number,
): void {
  ctx.clearRect(0, 0, width, height);
  ctx.strokeStyle = "#333";
  ctx.strokeRect(0.5, 0.5, width - 1, height - 1);
  const vals = series.values;
  if (!vals.length) return;
  let lo = Math.min(...vals);
  let hi = Math.max(...vals);
  if (reference !== undefined) {
    lo = Math.min(lo, reference);
    hi = Math.max(hi, reference);
  }
  if (hi - lo < 1e-12) {
    lo -= 1;
    hi += 1;
  }
  const toY = (v: number) => height - 4 - ((v - lo) / (hi - lo)) * (height - 8);
  const toX = (i: number) => (vals.length > 1 ? (i / (vals.length - 1)) * (width - 8) + 4 : width / 2);
  if (reference !== undefined) {
    ctx.strokeStyle = "#888";
    ctx.setLineDash([4, 3]);
    ctx.beginPath();
    ctx.moveTo(0, toY(reference));
    ctx.lineTo(width, toY(reference));
    ctx.stroke();
    ctx.setLineDash([]);
  }
  ctx.strokeStyle = series.color;
  ctx.beginPath();
  vals.forEach((v, i) => {
    if (i === 0) ctx.moveTo(toX(i), toY(v));
    else ctx.lineTo(toX(i), toY(v));
  });
  ctx.stroke();
  ctx.fillStyle = series.color;
  ctx.font = "11px sans-serif";
  ctx.fillText(`${series.label}: ${vals[vals.length - 1].toFixed(3)}`, 6, 12);
}
