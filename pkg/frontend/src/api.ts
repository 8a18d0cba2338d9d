/** Typed client for the tutoring service JSON API.
 *
 * All calls go through the same-origin proxy mounted under /app/api/v1, which
 * holds the real bearer token server-side. The browser never attaches
 * credentials of its own.
 */

export interface Course {
  course_id: string;
  title: string;
  created_at: string;
  material_counts: Record<string, number>;
}

export interface CitationRef {
  title: string;
  seq: number;
}

export interface AnswerView {
  text: string;
  route: string;
  citations: CitationRef[];
  fallback_used: boolean;
}

export interface AnswerMeta {
  route?: string;
  citations?: CitationRef[];
  fallback_used?: boolean;
}

export interface TranscriptTurn {
  role: "user" | "assistant";
  text: string;
  answer_meta?: AnswerMeta;
}

export interface SessionView {
  session_id: string;
  course_id: string;
  created_at: string;
  transcript: TranscriptTurn[];
}

/** The service is up but shedding load; retry after the given delay. */
export class ServiceBusy extends Error {
  constructor(public readonly retryAfterSeconds: number) {
    super(`the tutor is busy; retry in ${retryAfterSeconds}s`);
    this.name = "ServiceBusy";
  }
}

/** Any other failed request, including network-level failures (status 0). */
export class RequestFailed extends Error {
  constructor(public readonly status: number, message: string) {
    super(message);
    this.name = "RequestFailed";
  }
}

type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class TutorClient {
  constructor(
    private readonly base: string = "/app/api/v1",
    private readonly fetchImpl: FetchLike = (input, init) => fetch(input, init),
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    let response: Response;
    try {
      response = await this.fetchImpl(this.base + path, init);
    } catch (err) {
      throw new RequestFailed(0, `network error: ${String(err)}`);
    }
    if (response.status === 503) {
      const header = response.headers.get("Retry-After");
      const seconds = header ? Number.parseInt(header, 10) : 5;
      throw new ServiceBusy(Number.isFinite(seconds) && seconds > 0 ? seconds : 5);
    }
    if (!response.ok) {
      let detail = response.statusText || `request failed (${response.status})`;
      try {
        const body = await response.json();
        if (body && typeof body.detail === "string") {
          detail = body.detail;
        }
      } catch {
        // non-JSON error body; keep the status text
      }
      throw new RequestFailed(response.status, detail);
    }
    return (await response.json()) as T;
  }

  private post<T>(path: string, payload: unknown): Promise<T> {
    return this.request<T>(path, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(payload),
    });
  }

  listCourses(): Promise<Course[]> {
    return this.request<Course[]>("/courses");
  }

  createSession(courseId: string): Promise<SessionView> {
    return this.post<SessionView>("/sessions", { course_id: courseId });
  }

  getSession(sessionId: string): Promise<SessionView> {
    return this.request<SessionView>(`/sessions/${encodeURIComponent(sessionId)}`);
  }

  async ask(sessionId: string, text: string): Promise<AnswerView> {
    const body = await this.post<{ answer: AnswerView }>(
      `/sessions/${encodeURIComponent(sessionId)}/questions`,
      { text },
    );
    return body.answer;
  }
}
