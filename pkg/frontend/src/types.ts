export interface RenderRequest {
  frame: number;
  v: number;
  a: number;
  yaw: number;
  pitch: number;
  width?: number;
  height?: number;
}

export interface ServiceMeta {
  frame_count: number;
  condition_dims: { a: number; u: number; e: number };
  va_points: [number, number][];
}

export type ConnectionStatus = "connecting" | "connected" | "disconnected";

/** A transport delivers one binary PNG frame per request, in order. */
export interface Transport {
  connect(): void;
  close(): void;
  send(req: RenderRequest): void;
  onFrame: ((png: ArrayBuffer) => void) | null;
  onStatus: ((status: ConnectionStatus) => void) | null;
}
