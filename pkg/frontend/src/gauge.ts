/**
 * Distance-versus-threshold gauge. Pure markup so the verify view can be
 * snapshot-tested; the printed numbers are the raw response values and
 * only the bar geometry is derived locally.
 */
export function gaugeMarkup(distance: number, threshold: number): string {
  const scale = Math.max(distance, threshold, 1e-12) * 1.25;
  const fillPct = Math.min((distance / scale) * 100, 100);
  const markPct = Math.min((threshold / scale) * 100, 100);
  const side = distance < threshold ? "under" : "over";
  return [
    `<div class="gauge" data-side="${side}">`,
    `  <div class="gauge-track">`,
    `    <div class="gauge-fill ${side}" style="width: ${fillPct.toFixed(2)}%"></div>`,
    `    <div class="gauge-mark" style="left: ${markPct.toFixed(2)}%"></div>`,
    `  </div>`,
    `  <div class="gauge-labels">`,
    `    <span class="gauge-distance">distance ${String(distance)}</span>`,
    `    <span class="gauge-threshold">threshold ${String(threshold)}</span>`,
    `  </div>`,
    `</div>`,
  ].join("\n");
}
