import { HerdResponse, ServiceClient } from "./api.js";
import { EnrollState, IdentifyState, VerifyState } from "./views.js";

export type PipelineResult =
  | { tab: "enroll"; state: EnrollState }
  | { tab: "verify"; state: VerifyState }
  | { tab: "identify"; state: IdentifyState };

/**
 * One operator's console state: the service address, the outcome of the
 * most recent pipeline call, and a cached herd summary. Everything here
 * is copied out of service responses; embeddings never reach the client
 * and nothing is persisted locally.
 */
export class ConsoleSession {
  readonly client: ServiceClient;
  lastResult: PipelineResult | null = null;
  herd: HerdResponse | null = null;

  constructor(client: ServiceClient) {
    this.client = client;
  }

  get baseUrl(): string {
    return this.client.baseUrl;
  }

  recordResult(result: PipelineResult): void {
    this.lastResult = result;
  }

  async refreshHerd(): Promise<HerdResponse> {
    this.herd = await this.client.herd();
    return this.herd;
  }
}
