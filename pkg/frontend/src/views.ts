/**
 * Render functions for the console tabs. Each one maps a view state to an
 * HTML string with no service calls and no arithmetic on decision values,
 * so tests can assert that what the operator sees is exactly what the
 * service returned.
 */

import { EnrollResponse, HerdResponse, IdentifyResponse,
         VerifyResponse } from "./api.js";
import { gaugeMarkup } from "./gauge.js";

export type RequestFailure =
  | { kind: "api"; status: number; code: string; detail: string }
  | { kind: "network"; message: string };

export type EnrollState =
  | { phase: "idle" }
  | { phase: "busy" }
  | { phase: "enrolled"; response: EnrollResponse; photoUrl: string | null }
  | { phase: "failed"; failure: RequestFailure; photoUrl: string | null };

export type VerifyState =
  | { phase: "idle" }
  | { phase: "busy" }
  | { phase: "decided"; cattleId: string; response: VerifyResponse }
  | { phase: "failed"; failure: RequestFailure };

export type IdentifyState =
  | { phase: "idle" }
  | { phase: "busy" }
  | { phase: "listed"; response: IdentifyResponse }
  | { phase: "failed"; failure: RequestFailure };

/** Retake guidance per pipeline rejection code. */
const REMEDIATION: Record<string, string> = {
  NO_MUZZLE: "Retake the photo with the muzzle centered and filling "
    + "most of the frame.",
  MULTIPLE_MUZZLES: "Retake the photo with a single animal in view.",
  CROP_TOO_SMALL: "Move the camera closer to the muzzle and retake.",
  DECODE_ERROR: "The file is not a readable image; choose a PNG or "
    + "JPEG photo.",
};

export function escapeHtml(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

function failureMarkup(failure: RequestFailure): string {
  if (failure.kind === "network") {
    return [
      `<div class="banner network-failure">`,
      `  <p>Service unreachable: ${escapeHtml(failure.message)}</p>`,
      `  <button type="button" data-action="retry">Retry</button>`,
      `</div>`,
    ].join("\n");
  }
  const hint = REMEDIATION[failure.code];
  const lines = [
    `<div class="banner error" data-code="${escapeHtml(failure.code)}">`,
    `  <p class="error-code">${escapeHtml(failure.code)} `
      + `(HTTP ${failure.status})</p>`,
    `  <p class="error-detail">${escapeHtml(failure.detail)}</p>`,
  ];
  if (hint !== undefined) {
    lines.push(`  <p class="error-hint">${escapeHtml(hint)}</p>`);
  }
  lines.push(`</div>`);
  return lines.join("\n");
}

function photoMarkup(photoUrl: string | null): string {
  if (photoUrl === null) {
    return "";
  }
  return `<img class="photo-preview" src="${escapeHtml(photoUrl)}" `
    + `alt="submitted muzzle photo">`;
}

export function renderEnroll(state: EnrollState): string {
  switch (state.phase) {
    case "idle":
      return `<p class="hint">Pick or capture a muzzle photo, fill in the `
        + `animal's record, and submit.</p>`;
    case "busy":
      return `<p class="busy">Enrolling…</p>`;
    case "enrolled":
      return [
        `<div class="banner success">`,
        `  <p>Enrolled <strong class="enrolled-id">`
          + `${escapeHtml(state.response.cattle_id)}</strong></p>`,
        `  <p class="detail">embedding dimension `
          + `${String(state.response.dim)}</p>`,
        `</div>`,
        photoMarkup(state.photoUrl),
      ].join("\n");
    case "failed":
      return [failureMarkup(state.failure),
              photoMarkup(state.photoUrl)].join("\n");
  }
}

export function renderVerify(state: VerifyState): string {
  switch (state.phase) {
    case "idle":
      return `<p class="hint">Pick or capture a photo and enter the `
        + `claimed cattle id.</p>`;
    case "busy":
      return `<p class="busy">Verifying…</p>`;
    case "decided": {
      const r = state.response;
      const verdict = r.match ? "match" : "no-match";
      const label = r.match ? "MATCH" : "NO MATCH";
      return [
        `<div class="banner decision ${verdict}">`,
        `  <p class="verdict">${label}: `
          + `<strong>${escapeHtml(state.cattleId)}</strong></p>`,
        `</div>`,
        gaugeMarkup(r.distance, r.threshold),
      ].join("\n");
    }
    case "failed":
      return failureMarkup(state.failure);
  }
}

export function renderIdentify(state: IdentifyState): string {
  switch (state.phase) {
    case "idle":
      return `<p class="hint">Pick or capture a photo to rank the herd `
        + `by embedding distance.</p>`;
    case "busy":
      return `<p class="busy">Identifying…</p>`;
    case "listed": {
      const r = state.response;
      const rows = r.candidates.map((c, i) => [
        `    <tr>`,
        `      <td>${i + 1}</td>`,
        `      <td class="candidate-id">${escapeHtml(c.id)}</td>`,
        `      <td class="candidate-distance">${String(c.distance)}</td>`,
        `    </tr>`,
      ].join("\n"));
      return [
        `<p class="identify-match">best candidate within threshold: `
          + `${r.match ? "yes" : "no"}</p>`,
        `<table class="candidates">`,
        `  <thead><tr><th>#</th><th>cattle id</th><th>distance</th>`
          + `</tr></thead>`,
        `  <tbody>`,
        ...rows,
        `  </tbody>`,
        `</table>`,
      ].join("\n");
    }
    case "failed":
      return failureMarkup(state.failure);
  }
}

export function renderHerd(herd: HerdResponse | null): string {
  if (herd === null) {
    return `<p class="hint">Herd not loaded.</p>`;
  }
  if (herd.count === 0) {
    return `<p class="hint">No animals enrolled yet.</p>`;
  }
  const rows = herd.cattle.map((rec) => {
    const fields = Object.entries(rec.metadata)
      .map(([key, value]) =>
        `${escapeHtml(key)}: ${escapeHtml(String(value))}`)
      .join(", ");
    return [
      `    <tr>`,
      `      <td class="herd-id">${escapeHtml(rec.cattle_id)}</td>`,
      `      <td>${escapeHtml(rec.enrolled_at)}</td>`,
      `      <td>${fields}</td>`,
      `    </tr>`,
    ].join("\n");
  });
  return [
    `<p class="herd-count">${String(herd.count)} enrolled</p>`,
    `<table class="herd">`,
    `  <thead><tr><th>cattle id</th><th>enrolled at</th><th>record</th>`
      + `</tr></thead>`,
    `  <tbody>`,
    ...rows,
    `  </tbody>`,
    `</table>`,
  ].join("\n");
}
