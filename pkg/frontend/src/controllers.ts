/**
 * Tab submission flows. Each controller runs one service call, folds the
 * outcome into a view state, and records it on the session. The DOM layer
 * and the end-to-end tests drive these directly, so the browser wiring
 * stays free of decision logic.
 */

import { ApiError, EnrollMetadata, NetworkError } from "./api.js";
import { ConsoleSession } from "./session.js";
import { EnrollState, IdentifyState, RequestFailure,
         VerifyState } from "./views.js";

function toFailure(err: unknown): RequestFailure {
  if (err instanceof ApiError) {
    return { kind: "api", status: err.status, code: err.code,
             detail: err.detail };
  }
  if (err instanceof NetworkError) {
    return { kind: "network", message: err.message };
  }
  throw err;
}

async function refreshHerdQuietly(session: ConsoleSession): Promise<void> {
  try {
    await session.refreshHerd();
  } catch (err) {
    console.error("herd refresh failed:", err);
  }
}

export async function submitEnroll(
    session: ConsoleSession, image: Blob, cattleId: string,
    metadata: EnrollMetadata,
    photoUrl: string | null = null): Promise<EnrollState> {
  let state: EnrollState;
  try {
    const response = await session.client.enroll(image, cattleId, metadata);
    state = { phase: "enrolled", response, photoUrl };
    await refreshHerdQuietly(session);
  } catch (err) {
    state = { phase: "failed", failure: toFailure(err), photoUrl };
  }
  session.recordResult({ tab: "enroll", state });
  return state;
}

export async function submitVerify(
    session: ConsoleSession, image: Blob,
    cattleId: string): Promise<VerifyState> {
  let state: VerifyState;
  try {
    const response = await session.client.verify(image, cattleId);
    state = { phase: "decided", cattleId, response };
  } catch (err) {
    state = { phase: "failed", failure: toFailure(err) };
  }
  session.recordResult({ tab: "verify", state });
  return state;
}

export async function submitIdentify(
    session: ConsoleSession, image: Blob, k: number): Promise<IdentifyState> {
  let state: IdentifyState;
  try {
    const response = await session.client.identify(image, k);
    state = { phase: "listed", response };
  } catch (err) {
    state = { phase: "failed", failure: toFailure(err) };
  }
  session.recordResult({ tab: "identify", state });
  return state;
}
