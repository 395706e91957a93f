/**
 * Telemetry client: WebSocket connection with automatic reconnect and a
 * latest-wins handoff into the view state. Decode errors drop the message
 * (the render loop never sees a partially decoded frame).
 */

import { decodeFrameMessage, decodeReply, ServerReply } from "./protocol";
import { ViewState } from "./state";

export interface WebSocketLike {
  send(data: string): void;
  close(): void;
  onopen: ((ev?: unknown) => void) | null;
  onmessage: ((ev: { data: unknown }) => void) | null;
  onclose: ((ev?: unknown) => void) | null;
  onerror: ((ev?: unknown) => void) | null;
}

export type SocketFactory = (url: string) => WebSocketLike;

export interface ClientOptions {
  url: string;
  state: ViewState;
  socketFactory?: SocketFactory;
  reconnectDelayMs?: number;
  onReply?: (reply: ServerReply) => void;
}

export class TelemetryClient {
  private socket: WebSocketLike | null = null;
  private closed = false;
  private readonly factory: SocketFactory;
  private readonly reconnectDelayMs: number;

  constructor(private readonly options: ClientOptions) {
    this.factory =
      options.socketFactory ??
      ((url: string) => new WebSocket(url) as unknown as WebSocketLike);
    this.reconnectDelayMs = options.reconnectDelayMs ?? 1000;
  }

  connect(): void {
    if (this.closed) return;
    const state = this.options.state;
    state.connection = "connecting";
    const socket = this.factory(this.options.url);
    this.socket = socket;
    socket.onopen = () => {
      state.connection = "live";
    };
    socket.onmessage = (ev) => {
      const data = typeof ev.data === "string" ? ev.data : String(ev.data);
      try {
        state.deliver(decodeFrameMessage(data));
        state.connection = "live";
      } catch {
        try {
          const reply = decodeReply(data);
          if (reply && this.options.onReply) this.options.onReply(reply);
        } catch {
          // malformed line: ignore, never crash the render path
        }
      }
    };
    socket.onclose = () => {
      if (this.closed) return;
      state.connection = "stale"; // stale-data banner until reconnected
      setTimeout(() => this.connect(), this.reconnectDelayMs);
    };
    socket.onerror = () => {
      // onclose follows and handles the reconnect
    };
  }

  send(payload: string): void {
    this.socket?.send(payload);
  }

  close(): void {
    this.closed = true;
    this.options.state.connection = "closed";
    this.socket?.close();
  }
}
