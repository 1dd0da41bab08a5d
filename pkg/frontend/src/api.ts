// Thin client for the rating service. Every request and response body can be
// captured through the recorder hook, which the tests use to prove that no
// source information ever crosses the wire to a rater.

export interface CriterionInfo {
  id: string;
  kind: "ordinal" | "binary";
  description: string;
}

export interface QueueItemInfo {
  id: string;
  render: string;
  done: boolean;
}

export interface SessionPayload {
  session: string;
  observer: string;
  include_image: boolean;
  range: [number, number];
  criteria: CriterionInfo[];
  items: QueueItemInfo[];
}

export interface TrafficEntry {
  method: string;
  url: string;
  requestBody: string | null;
  responseBody: string;
}

export type TrafficRecorder = (entry: TrafficEntry) => void;

export interface Credentials {
  baseUrl: string;
  sessionId: string;
  observer: string;
  token: string;
}

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

export class SegexApi {
  constructor(
    private readonly credentials: Credentials,
    private readonly recorder?: TrafficRecorder,
  ) {}

  private auth(): string {
    const { observer, token } = this.credentials;
    return `observer=${encodeURIComponent(observer)}&token=${encodeURIComponent(token)}`;
  }

  private async request(method: string, path: string, body?: unknown): Promise<string> {
    const url = `${this.credentials.baseUrl}${path}`;
    const requestBody = body === undefined ? null : JSON.stringify(body);
    const response = await fetch(url, {
      method,
      body: requestBody ?? undefined,
      headers: requestBody ? { "Content-Type": "application/json" } : undefined,
    });
    const responseBody = await response.text();
    this.recorder?.({ method, url, requestBody, responseBody });
    if (!response.ok) {
      let message = `request failed with ${response.status}`;
      try {
        message = JSON.parse(responseBody).error ?? message;
      } catch {
        // keep the generic message
      }
      throw new ApiError(response.status, message);
    }
    return responseBody;
  }

  async loadSession(): Promise<SessionPayload> {
    const raw = await this.request(
      "GET",
      `/api/session/${this.credentials.sessionId}?${this.auth()}`,
    );
    return JSON.parse(raw) as SessionPayload;
  }

  renderUrl(item: QueueItemInfo, view: "overlay" | "image" | "mask"): string {
    return `${this.credentials.baseUrl}${item.render}?${this.auth()}&view=${view}`;
  }

  async submitRating(itemId: string, scores: Record<string, number>): Promise<void> {
    await this.request("POST", `/api/session/${this.credentials.sessionId}/rating`, {
      observer: this.credentials.observer,
      token: this.credentials.token,
      item: itemId,
      scores,
    });
  }
}
