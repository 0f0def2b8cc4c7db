import { RenderRequest, Transport } from "./types.js";

/** Debounced, latest-wins request scheduling.
 *
 * Control changes are debounced (50 ms default); at most one request is in
 * flight at any time. If the state changes while a request is pending, one
 * follow-up is sent when the reply lands, so the canvas always converges to
 * the newest state and stale frames are dropped by sequence number.
 * Nothing is sent while the state is unchanged.
 */
export class RequestScheduler {
  private timer: ReturnType<typeof setTimeout> | null = null;
  private inFlight = false;
  private dirty = false;
  private online = false;
  private seq = 0;
  private displayedSeq = 0;
  private sentAt = new Map<number, number>();
  private lastSent: string | null = null;

  requestsSent = 0;

  constructor(
    private transport: Transport,
    private current: () => RenderRequest,
    private onFrame: (png: ArrayBuffer, latencyMs: number) => void,
    private debounceMs = 50,
    private now: () => number = () => Date.now(),
  ) {
    transport.onFrame = (png) => this.handleFrame(png);
  }

  /** Call on every control change; collapses bursts into one request. */
  poke(): void {
    if (this.timer !== null) clearTimeout(this.timer);
    this.timer = setTimeout(() => {
      this.timer = null;
      this.flush();
    }, this.debounceMs);
  }

  /** Send immediately (presets, scrubber release). */
  flush(): void {
    if (this.timer !== null) {
      clearTimeout(this.timer);
      this.timer = null;
    }
    if (!this.online || this.inFlight) {
      this.dirty = true;
      return;
    }
    const req = this.current();
    const key = JSON.stringify(req);
    if (key === this.lastSent) return; // idle: state unchanged
    this.seq += 1;
    this.sentAt.set(this.seq, this.now());
    this.lastSent = key;
    this.inFlight = true;
    this.requestsSent += 1;
    this.transport.send(req);
  }

  get pendingCount(): number {
    return this.inFlight ? 1 : 0;
  }

  /** Track connectivity. Going offline forgets in-flight bookkeeping (the
   * reply will never arrive); nothing is sent until the link returns. */
  setOnline(online: boolean): void {
    this.online = online;
    if (!online) {
      this.inFlight = false;
      this.lastSent = null;
      this.sentAt.clear();
    }
  }

  private handleFrame(png: ArrayBuffer): void {
    const seq = this.seq; // single in-flight: replies arrive in send order
    this.inFlight = false;
    if (seq >= this.displayedSeq) {
      this.displayedSeq = seq;
      const t0 = this.sentAt.get(seq);
      this.sentAt.delete(seq);
      this.onFrame(png, t0 === undefined ? 0 : this.now() - t0);
    }
    if (this.dirty) {
      this.dirty = false;
      this.flush();
    }
  }
}
