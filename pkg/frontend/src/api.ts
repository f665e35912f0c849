/**
 * Typed client for the muzzleid service HTTP API.
 *
 * Every value the console displays comes out of one of these response
 * shapes. The client does no post-processing beyond JSON decoding, so a
 * rendered number can always be traced to a response field.
 */

export interface EnrollResponse {
  cattle_id: string;
  dim: number;
}

export interface VerifyResponse {
  match: boolean;
  distance: number;
  threshold: number;
}

export interface IdentifyCandidate {
  id: string;
  distance: number;
}

export interface IdentifyResponse {
  candidates: IdentifyCandidate[];
  match: boolean;
}

export interface HerdRecord {
  cattle_id: string;
  metadata: Record<string, string>;
  enrolled_at: string;
}

export interface HerdResponse {
  cattle: HerdRecord[];
  count: number;
}

export interface HealthResponse {
  status: string;
  gallery_size: number;
  dim: number;
}

export interface EnrollMetadata {
  breed?: string;
  gender?: string;
  date_of_birth?: string;
  disease_history?: string;
  vaccine_history?: string;
  extras?: Record<string, string>;
}

/** Service rejection: HTTP status plus the body's code and detail. */
export class ApiError extends Error {
  readonly status: number;
  readonly code: string;
  readonly detail: string;

  constructor(status: number, code: string, detail: string) {
    super(`${code}: ${detail}`);
    this.name = "ApiError";
    this.status = status;
    this.code = code;
    this.detail = detail;
  }
}

/** Transport failure before any response arrived (service down, DNS). */
export class NetworkError extends Error {
  constructor(cause: unknown) {
    super(cause instanceof Error ? cause.message : String(cause));
    this.name = "NetworkError";
  }
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

async function decode<T>(response: Response): Promise<T> {
  const body = await response.json();
  if (!response.ok) {
    throw new ApiError(response.status, body.code ?? "UNKNOWN",
                       body.detail ?? "");
  }
  return body as T;
}

export class ServiceClient {
  readonly baseUrl: string;
  private readonly fetchImpl: FetchLike;

  constructor(baseUrl: string, fetchImpl?: FetchLike) {
    this.baseUrl = baseUrl.replace(/\/+$/, "");
    this.fetchImpl = fetchImpl ?? ((url, init) => fetch(url, init));
  }

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    let response: Response;
    try {
      response = await this.fetchImpl(`${this.baseUrl}${path}`, init);
    } catch (err) {
      throw new NetworkError(err);
    }
    return decode<T>(response);
  }

  enroll(image: Blob, cattleId: string,
         metadata: EnrollMetadata = {}): Promise<EnrollResponse> {
    const form = new FormData();
    form.append("image", image, "muzzle.png");
    form.append("cattle_id", cattleId);
    const { extras, ...named } = metadata;
    for (const [key, value] of Object.entries(named)) {
      if (value !== undefined && value !== "") {
        form.append(key, value);
      }
    }
    if (extras && Object.keys(extras).length > 0) {
      form.append("extras", JSON.stringify(extras));
    }
    return this.request<EnrollResponse>("/api/v1/cattle/enroll",
                                        { method: "POST", body: form });
  }

  verify(image: Blob, cattleId: string): Promise<VerifyResponse> {
    const form = new FormData();
    form.append("image", image, "muzzle.png");
    form.append("cattle_id", cattleId);
    return this.request<VerifyResponse>("/api/v1/cattle/verify",
                                        { method: "POST", body: form });
  }

  identify(image: Blob, k: number): Promise<IdentifyResponse> {
    const form = new FormData();
    form.append("image", image, "muzzle.png");
    form.append("k", String(k));
    return this.request<IdentifyResponse>("/api/v1/cattle/identify",
                                          { method: "POST", body: form });
  }

  herd(): Promise<HerdResponse> {
    return this.request<HerdResponse>("/api/v1/cattle");
  }

  getAnimal(cattleId: string): Promise<HerdRecord> {
    const encoded = encodeURIComponent(cattleId);
    return this.request<HerdRecord>(`/api/v1/cattle/${encoded}`);
  }

  health(): Promise<HealthResponse> {
    return this.request<HealthResponse>("/healthz");
  }
}
