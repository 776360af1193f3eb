/** Typed client for the annotation HTTP API. */

export interface VolumeInfo {
  id: string;
  shape: number[];
  spacing: number[];
  n_slices: number;
  intensity_min: number;
  intensity_max: number;
}

export interface GridInfo {
  slice_index: number;
  patch_size: number;
  offsets: [number, number][];
  slice_shape: [number, number];
  empty: boolean;
}

export interface TagState {
  volume_id: string;
  slice: number;
  tags: number[];
  version: number;
}

export interface SessionInfo {
  session_id: string;
  volume_id: string;
  rater_id: string;
}

export interface Progress {
  session_id: string;
  volume_id: string;
  slices_annotated: number;
  n_slices: number;
  complete: boolean;
  cursor: number;
}

/** Thrown by putTags when the server has a newer version of the slice. */
export class ConflictError extends Error {
  constructor(
    public currentVersion: number,
    public currentTags: number[],
  ) {
    super(`tag version conflict; server is at version ${currentVersion}`);
  }
}

export class ApiError extends Error {
  constructor(
    public status: number,
    message: string,
  ) {
    super(message);
  }
}

type FetchLike = typeof fetch;

export class ApiClient {
  constructor(
    private baseUrl: string,
    private token: string | null = null,
    private fetchImpl: FetchLike = fetch,
  ) {}

  private headers(extra: Record<string, string> = {}): Record<string, string> {
    const h: Record<string, string> = { ...extra };
    if (this.token) h["Authorization"] = `Bearer ${this.token}`;
    return h;
  }

  private async request(path: string, init: RequestInit = {}): Promise<Response> {
    const r = await this.fetchImpl(`${this.baseUrl}${path}`, {
      ...init,
      headers: this.headers((init.headers as Record<string, string>) ?? {}),
    });
    return r;
  }

  async listVolumes(): Promise<VolumeInfo[]> {
    const r = await this.request("/api/volumes");
    if (!r.ok) throw new ApiError(r.status, "cannot list volumes");
    return r.json();
  }

  slicePngUrl(volumeId: string, slice: number, win?: { min: number; max: number }): string {
    const base = `${this.baseUrl}/api/volumes/${volumeId}/slices/${slice}.png`;
    if (!win) return base;
    return `${base}?min=${encodeURIComponent(win.min)}&max=${encodeURIComponent(win.max)}`;
  }

  async getGrid(volumeId: string, slice: number): Promise<GridInfo> {
    const r = await this.request(`/api/volumes/${volumeId}/slices/${slice}/grid`);
    if (!r.ok) throw new ApiError(r.status, `cannot fetch grid for slice ${slice}`);
    return r.json();
  }

  async getTags(volumeId: string, slice: number): Promise<TagState> {
    const r = await this.request(`/api/volumes/${volumeId}/slices/${slice}/tags`);
    if (!r.ok) throw new ApiError(r.status, `cannot fetch tags for slice ${slice}`);
    return r.json();
  }

  async putTags(
    volumeId: string,
    slice: number,
    cells: number[],
    version: number,
    session?: string,
  ): Promise<TagState> {
    const qs = session ? `?session=${encodeURIComponent(session)}` : "";
    const r = await this.request(`/api/volumes/${volumeId}/slices/${slice}/tags${qs}`, {
      method: "PUT",
      headers: { "Content-Type": "application/json", "If-Match": String(version) },
      body: JSON.stringify({ tags: [...cells].sort((a, b) => a - b) }),
    });
    if (r.status === 409) {
      const body = await r.json();
      const detail = body.detail ?? {};
      throw new ConflictError(detail.current_version ?? -1, detail.current_tags ?? []);
    }
    if (!r.ok) throw new ApiError(r.status, `cannot save tags for slice ${slice}`);
    return r.json();
  }

  async createSession(volumeId: string, raterId: string): Promise<SessionInfo> {
    const r = await this.request("/api/sessions", {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ volume_id: volumeId, rater_id: raterId }),
    });
    if (!r.ok) throw new ApiError(r.status, "cannot create session");
    return r.json();
  }

  async progress(sessionId: string): Promise<Progress> {
    const r = await this.request(`/api/sessions/${sessionId}/progress`);
    if (!r.ok) throw new ApiError(r.status, "cannot fetch progress");
    return r.json();
  }
}
