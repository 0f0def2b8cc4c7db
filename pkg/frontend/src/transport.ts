import { ConnectionStatus, RenderRequest, Transport } from "./types.js";

const BACKOFF_MS = [500, 1000, 2000, 4000];

/** WebSocket transport for the /v1/stream endpoint.
 *
 * The service answers every JSON request with one binary PNG (or a JSON
 * error object, which is surfaced to the console and dropped). Reconnects
 * automatically with bounded backoff and reports status transitions.
 */
export class WsTransport implements Transport {
  onFrame: ((png: ArrayBuffer) => void) | null = null;
  onStatus: ((status: ConnectionStatus) => void) | null = null;

  private ws: WebSocket | null = null;
  private attempts = 0;
  private closed = false;

  constructor(private url: string) {}

  connect(): void {
    this.closed = false;
    this.open();
  }

  private open(): void {
    this.setStatus("connecting");
    const ws = new WebSocket(this.url);
    ws.binaryType = "arraybuffer";
    this.ws = ws;
    ws.onopen = () => {
      this.attempts = 0;
      this.setStatus("connected");
    };
    ws.onmessage = (e: MessageEvent) => {
      if (typeof e.data === "string") {
        console.warn("render service error:", e.data);
        return;
      }
      this.onFrame?.(e.data as ArrayBuffer);
    };
    ws.onclose = () => {
      this.ws = null;
      if (this.closed) return;
      this.setStatus("disconnected");
      const delay = BACKOFF_MS[Math.min(this.attempts, BACKOFF_MS.length - 1)];
      this.attempts += 1;
      setTimeout(() => {
        if (!this.closed) this.open();
      }, delay);
    };
    ws.onerror = () => ws.close();
  }

  send(req: RenderRequest): void {
    if (this.ws === null || this.ws.readyState !== WebSocket.OPEN) {
      console.warn("dropping request: not connected");
      return;
    }
    this.ws.send(JSON.stringify(req));
  }

  close(): void {
    this.closed = true;
    this.ws?.close();
  }

  private setStatus(status: ConnectionStatus): void {
    this.onStatus?.(status);
  }
}

export async function fetchMeta(baseUrl: string) {
  const res = await fetch(`${baseUrl}/v1/meta`);
  if (!res.ok) throw new Error(`meta request failed: ${res.status}`);
  return res.json();
}
