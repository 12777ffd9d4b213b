import type { Snapshot } from "./types.js";
import type { StreamCallbacks, StreamHandle, Transport } from "./session.js";

/** fetch + WebSocket against a running gateway (host:port, no scheme). */
export class GatewayTransport implements Transport {
  constructor(private address: string) {}

  async fetchSnapshot(): Promise<Snapshot> {
    const response = await fetch(`http://${this.address}/snapshot`);
    if (!response.ok) throw new Error(`snapshot failed: ${response.status}`);
    return (await response.json()) as Snapshot;
  }

  openStream(callbacks: StreamCallbacks): StreamHandle {
    const socket = new WebSocket(`ws://${this.address}/ws`);
    socket.onmessage = (event) => {
      try {
        callbacks.onFrame(JSON.parse(event.data as string));
      } catch {
        // ignore undecodable frames; the server never sends them
      }
    };
    socket.onclose = () => callbacks.onClose();
    socket.onerror = () => socket.close();
    return {
      send: (data) => socket.send(JSON.stringify(data)),
      close: () => {
        socket.onclose = null;
        socket.close();
      },
    };
  }
}
