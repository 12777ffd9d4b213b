import { colorFor } from "./colors.js";
import type { ChatEntry, Role } from "./types.js";

export interface TimelineItem {
  seq: number;
  role: Role;
  color: string;
  text: string;
  tick: number;
}

/**
 * Order-preserving, loss-free, duplicate-free view of the chat history.
 * Snapshots are authoritative (they reseed the whole list); streamed entries
 * are deduplicated by seq, so any interleaving of disconnects and replays
 * converges to the server's history.
 */
export class TimelineStore {
  private items_: TimelineItem[] = [];
  private seqs = new Set<number>();

  seed(entries: ChatEntry[]): void {
    this.items_ = [];
    this.seqs.clear();
    for (const entry of entries) this.apply(entry);
  }

  apply(entry: ChatEntry): boolean {
    if (this.seqs.has(entry.seq)) return false;
    this.seqs.add(entry.seq);
    const item: TimelineItem = {
      seq: entry.seq,
      role: entry.role,
      color: colorFor(entry.role),
      text: entry.text,
      tick: entry.tick,
    };
    // Stream frames arrive in order; after a resync an older seq may slot in.
    let i = this.items_.length;
    while (i > 0 && this.items_[i - 1].seq > entry.seq) i -= 1;
    this.items_.splice(i, 0, item);
    return true;
  }

  items(): readonly TimelineItem[] {
    return this.items_;
  }

  lastSeq(): number {
    return this.items_.length ? this.items_[this.items_.length - 1].seq : -1;
  }

  /** Item-for-item equality against a snapshot's chat list. */
  equals(entries: ChatEntry[]): boolean {
    if (entries.length !== this.items_.length) return false;
    return entries.every((entry, i) => {
      const item = this.items_[i];
      return (
        item.seq === entry.seq &&
        item.role === entry.role &&
        item.text === entry.text &&
        item.tick === entry.tick
      );
    });
  }
}
