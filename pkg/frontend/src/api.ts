// Thin typed client over the v1 HTTP schema. The fetch implementation is
// injectable so tests run against a mock server.

import {
  ApiError,
  CounterfactualRequest,
  CounterfactualResponse,
  ModelInfo,
  ObservationsPage,
  SchemaError,
  counterfactualResponseSchema,
  modelInfoSchema,
  observationsPageSchema,
} from "./types";

export type FetchLike = (
  url: string,
  init?: { method?: string; headers?: Record<string, string>; body?: string },
) => Promise<{
  ok: boolean;
  status: number;
  json(): Promise<unknown>;
}>;

export class ApiClient {
  constructor(
    private baseUrl: string,
    private fetchImpl: FetchLike,
  ) {}

  private async getJson(path: string): Promise<unknown> {
    const response = await this.fetchImpl(this.baseUrl + path);
    if (!response.ok) {
      throw new ApiError(response.status, await errorDetail(response));
    }
    return response.json();
  }

  async getModelInfo(): Promise<ModelInfo> {
    const raw = await this.getJson("/model/info");
    const parsed = modelInfoSchema.safeParse(raw);
    if (!parsed.success) {
      throw new SchemaError("/model/info", parsed.error.message);
    }
    return parsed.data;
  }

  async getObservations(page: number, pageSize: number): Promise<ObservationsPage> {
    const raw = await this.getJson(
      `/observations?page=${page}&page_size=${pageSize}`,
    );
    const parsed = observationsPageSchema.safeParse(raw);
    if (!parsed.success) {
      throw new SchemaError("/observations", parsed.error.message);
    }
    return parsed.data;
  }

  async postCounterfactual(
    request: CounterfactualRequest,
  ): Promise<CounterfactualResponse> {
    const response = await this.fetchImpl(this.baseUrl + "/counterfactual", {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(request),
    });
    if (!response.ok) {
      throw new ApiError(response.status, await errorDetail(response));
    }
    const parsed = counterfactualResponseSchema.safeParse(await response.json());
    if (!parsed.success) {
      throw new SchemaError("/counterfactual", parsed.error.message);
    }
    return parsed.data;
  }
}

async function errorDetail(response: {
  json(): Promise<unknown>;
}): Promise<{ error: string; variable?: string | null } | null> {
  try {
    const body = (await response.json()) as { detail?: unknown };
    const detail = body?.detail;
    if (typeof detail === "string") {
      return { error: detail };
    }
    if (detail && typeof detail === "object" && "error" in detail) {
      return detail as { error: string; variable?: string | null };
    }
    return null;
  } catch {
    return null;
  }
}
