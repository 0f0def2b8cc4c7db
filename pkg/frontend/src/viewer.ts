import { RequestScheduler } from "./scheduler.js";
import { ViewerState } from "./state.js";
import { ConnectionStatus, Transport } from "./types.js";

export interface ViewerOptions {
  debounceMs?: number;
  width?: number;
  height?: number;
  now?: () => number;
}

/** Headless viewer core: state + scheduling, no DOM.
 *
 * The UI layer forwards control events here; every mutation funnels into
 * the scheduler, which keeps at most one request in flight and drops stale
 * frames. Pad drags are debounced; preset jumps and scrubs send promptly.
 */
export class Viewer {
  readonly state = new ViewerState();
  onFrame: ((png: ArrayBuffer) => void) | null = null;
  onStatus: ((status: ConnectionStatus) => void) | null = null;
  private scheduler: RequestScheduler;

  constructor(private transport: Transport, opts: ViewerOptions = {}) {
    this.scheduler = new RequestScheduler(
      transport,
      () => this.state.request(opts.width, opts.height),
      (png, latency) => {
        this.state.lastLatencyMs = latency;
        this.onFrame?.(png);
      },
      opts.debounceMs ?? 50,
      opts.now ?? (() => Date.now()),
    );
    transport.onStatus = (status) => {
      this.state.connection = status;
      this.onStatus?.(status);
      this.scheduler.setOnline(status === "connected");
      if (status === "connected") this.scheduler.flush();
    };
  }

  connect(): void {
    this.transport.connect();
  }

  disconnect(): void {
    this.transport.close();
  }

  padDrag(v: number, a: number): void {
    this.state.setPad(v, a);
    this.scheduler.poke();
  }

  scrub(frame: number): void {
    this.state.setFrame(frame);
    this.scheduler.flush();
  }

  orbit(yaw: number, pitch: number): void {
    this.state.setOrbit(yaw, pitch);
    this.scheduler.poke();
  }

  preset(index: number): { v: number; a: number; label: string } {
    const p = this.state.applyPreset(index);
    this.scheduler.flush();
    return p;
  }

  get requestsSent(): number {
    return this.scheduler.requestsSent;
  }

  get pendingRequests(): number {
    return this.scheduler.pendingCount;
  }
}
