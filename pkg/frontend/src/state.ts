import { ConnectionStatus } from "./types.js";

/** The protocol's twelve valence/arousal points with their labels:
 * eight on the radius-0.8 circle every 45 degrees, four at radius 0.5. */
export const VA_PRESETS: { v: number; a: number; label: string }[] = [
  { v: 0.74, a: 0.31, label: "Happy" },
  { v: 0.31, a: 0.74, label: "Surprise" },
  { v: -0.31, a: 0.74, label: "Angry" },
  { v: -0.74, a: 0.31, label: "Disgust" },
  { v: -0.74, a: -0.31, label: "Sad" },
  { v: -0.31, a: -0.74, label: "Sad" },
  { v: 0.31, a: -0.74, label: "Contempt" },
  { v: 0.74, a: -0.31, label: "Contempt" },
  { v: 0.35, a: 0.35, label: "Happy" },
  { v: -0.35, a: 0.35, label: "Angry" },
  { v: -0.35, a: -0.35, label: "Sad" },
  { v: 0.35, a: -0.35, label: "Contempt" },
];

/** Guide-circle radius drawn on the pad, matching the preset ring. */
export const GUIDE_CIRCLE_RADIUS = 0.8;

export function clamp(x: number, lo: number, hi: number): number {
  return Math.min(Math.max(x, lo), hi);
}

export class ViewerState {
  v = 0;
  a = 0;
  frame = 0;
  yaw = 0;
  pitch = 0;
  connection: ConnectionStatus = "connecting";
  lastLatencyMs = 0;

  setPad(v: number, a: number): void {
    this.v = clamp(v, -1, 1);
    this.a = clamp(a, -1, 1);
  }

  setFrame(frame: number): void {
    this.frame = Math.max(0, Math.round(frame));
  }

  setOrbit(yaw: number, pitch: number): void {
    this.yaw = yaw;
    this.pitch = pitch;
  }

  applyPreset(index: number): { v: number; a: number; label: string } {
    const p = VA_PRESETS[index];
    this.setPad(p.v, p.a);
    return p;
  }

  request(width?: number, height?: number) {
    return {
      frame: this.frame,
      v: this.v,
      a: this.a,
      yaw: this.yaw,
      pitch: this.pitch,
      width,
      height,
    };
  }
}
