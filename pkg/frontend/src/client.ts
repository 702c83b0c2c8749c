// Streaming viewer session: /info handshake, pose stream over the
// websocket (throttled, last-write-wins), source-panel queries, and
// full-quality captures. Transports are injectable for tests.

import {
  RenderRequest,
  ServiceInfo,
  SourceInfo,
  StreamFrame,
  decodeFrame,
  encodeRequest,
} from './protocol.js';

export type Status = 'idle' | 'connecting' | 'connected' | 'error';

export interface WebSocketLike {
  binaryType: string;
  onopen: ((ev: unknown) => void) | null;
  onmessage: ((ev: { data: unknown }) => void) | null;
  onclose: ((ev: unknown) => void) | null;
  onerror: ((ev: unknown) => void) | null;
  send(data: string): void;
  close(): void;
}

export interface ClientOptions {
  wsFactory?: (url: string) => WebSocketLike;
  fetchFn?: typeof fetch;
  now?: () => number;
  schedule?: (fn: () => void, ms: number) => void;
  minSendIntervalMs?: number; // 100 ms = at most 10 poses per second
}

export class ViewerClient {
  status: Status = 'idle';
  info: ServiceInfo | null = null;
  lastFrameId = 0;
  lastSentId = 0;
  lastError: string | null = null;

  onFrame: ((frame: StreamFrame) => void) | null = null;
  onStatus: ((status: Status) => void) | null = null;

  private ws: WebSocketLike | null = null;
  private readonly wsFactory: (url: string) => WebSocketLike;
  private readonly fetchFn: typeof fetch;
  private readonly now: () => number;
  private readonly schedule: (fn: () => void, ms: number) => void;
  private readonly minInterval: number;
  private lastSendTime = -Infinity;
  private pending: RenderRequest | null = null;
  private flushScheduled = false;

  constructor(readonly baseUrl: string, opts: ClientOptions = {}) {
    this.wsFactory = opts.wsFactory ?? ((url) => new WebSocket(url) as unknown as WebSocketLike);
    this.fetchFn = opts.fetchFn ?? fetch.bind(globalThis);
    this.now = opts.now ?? (() => Date.now());
    this.schedule = opts.schedule ?? ((fn, ms) => setTimeout(fn, ms));
    this.minInterval = opts.minSendIntervalMs ?? 100;
  }

  private setStatus(status: Status) {
    this.status = status;
    this.onStatus?.(status);
  }

  async connect(): Promise<ServiceInfo> {
    this.setStatus('connecting');
    let resp: Response;
    try {
      resp = await this.fetchFn(`${this.baseUrl}/info`);
      if (!resp.ok) throw new Error(`/info returned ${resp.status}`);
      this.info = (await resp.json()) as ServiceInfo;
    } catch (err) {
      this.lastError = String(err);
      this.setStatus('error');
      throw err;
    }
    const wsUrl = this.baseUrl.replace(/^http/, 'ws') + '/stream';
    const ws = this.wsFactory(wsUrl);
    ws.binaryType = 'arraybuffer';
    ws.onmessage = (ev) => this.handleMessage(ev.data);
    ws.onerror = () => {
      this.lastError = 'stream error';
      this.setStatus('error');
    };
    ws.onclose = () => {
      if (this.status !== 'error') this.setStatus('idle');
    };
    this.ws = ws;
    await new Promise<void>((resolve, reject) => {
      ws.onopen = () => resolve();
      const prevError = ws.onerror;
      ws.onerror = (ev) => {
        prevError?.(ev);
        reject(new Error('websocket failed to open'));
      };
    });
    this.setStatus('connected');
    return this.info;
  }

  private handleMessage(data: unknown) {
    if (typeof data === 'string') {
      try {
        const payload = JSON.parse(data) as { error?: string };
        if (payload.error) this.lastError = payload.error;
      } catch {
        this.lastError = data;
      }
      return;
    }
    const frame = decodeFrame(data as ArrayBuffer);
    if (frame.id <= this.lastFrameId) return; // stale frame, discard
    this.lastFrameId = frame.id;
    this.onFrame?.(frame);
  }

  /**
   * Queue a pose for streaming. Sends immediately when the rate limit
   * allows; otherwise keeps only the newest pose and flushes it when the
   * window reopens.
   */
  sendPose(pose: number[], width: number, height: number,
           quality: 'preview' | 'full' = 'preview'): number {
    const id = ++this.lastSentId;
    this.pending = { pose, width, height, quality, id };
    this.flush();
    return id;
  }

  private flush() {
    if (!this.pending || !this.ws) return;
    const wait = this.lastSendTime + this.minInterval - this.now();
    if (wait > 0) {
      if (!this.flushScheduled) {
        this.flushScheduled = true;
        this.schedule(() => {
          this.flushScheduled = false;
          this.flush();
        }, wait);
      }
      return;
    }
    this.ws.send(encodeRequest(this.pending));
    this.lastSendTime = this.now();
    this.pending = null;
  }

  async sources(pose: number[], v?: number): Promise<SourceInfo> {
    const params = new URLSearchParams({ pose: pose.join(',') });
    if (v !== undefined) params.set('v', String(v));
    const resp = await this.fetchFn(`${this.baseUrl}/sources?${params}`);
    if (!resp.ok) {
      const body = (await resp.json()) as { error?: string };
      throw new Error(body.error ?? `sources failed: ${resp.status}`);
    }
    return (await resp.json()) as SourceInfo;
  }

  /** Full-quality PNG capture through the offline-equivalent endpoint. */
  async capture(pose: number[], width: number, height: number): Promise<Blob> {
    const resp = await this.fetchFn(`${this.baseUrl}/render`, {
      method: 'POST',
      headers: { 'content-type': 'application/json' },
      body: JSON.stringify({ pose, width, height, quality: 'full' }),
    });
    if (!resp.ok) {
      const body = (await resp.json()) as { error?: string };
      throw new Error(body.error ?? `render failed: ${resp.status}`);
    }
    return resp.blob();
  }

  close() {
    this.ws?.close();
    this.ws = null;
    this.setStatus('idle');
  }
}
