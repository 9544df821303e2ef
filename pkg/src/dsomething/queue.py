"""At-least-once work queue with visibility timeouts and a dead-letter list.

Time is always supplied by the caller, so the same queue runs unchanged under
the simulated clock and the wall clock. Counts are exact.
"""
from __future__ import annotations

import heapq
import threading
from dataclasses import dataclass, field
from typing import NamedTuple

from .errors import QueueAlreadyExists, QueueDeleted, SchemaViolation, StaleReceipt
from .specfiles import TaskMessage


@dataclass
class QueuedMessage:
    message_id: str
    body: TaskMessage
    receive_count: int = 0
    visible_at: float = 0.0
    current_receipt: str | None = None


@dataclass(frozen=True)
class Receipt:
    message_id: str
    token: str
    leased_until: float
    receive_count: int


class QueueCounts(NamedTuple):
    visible: int
    in_flight: int
    dlq: int


@dataclass(frozen=True)
class QueueEvent:
    time: float
    op: str  # enqueue | lease | extend | ack | stale | dead_letter | purge
    message_id: str


class WorkQueue:
    def __init__(self, name: str, visibility_timeout_s: int, max_receive_count: int) -> None:
        if visibility_timeout_s <= 0:
            raise SchemaViolation("visibility_timeout_s", "must be positive")
        if max_receive_count <= 0:
            raise SchemaViolation("max_receive_count", "must be positive")
        self.name = name
        self.visibility_timeout_s = visibility_timeout_s
        self.max_receive_count = max_receive_count
        self.messages: dict[str, QueuedMessage] = {}
        self.dead_letter: list[QueuedMessage] = []
        self.deleted = False
        self.acked = 0
        self.history: list[QueueEvent] = []
        self.purged_dead_letter: list[QueuedMessage] = []
        self._heap: list[tuple[float, str]] = []
        self._next_message = 0
        self._next_token = 0
        self._lock = threading.RLock()

    def __getstate__(self) -> dict:
        state = self.__dict__.copy()
        del state["_lock"]
        return state

    def __setstate__(self, state: dict) -> None:
        self.__dict__.update(state)
        self._lock = threading.RLock()

    def _check_live(self) -> None:
        if self.deleted:
            raise QueueDeleted(self.name)

    def enqueue(self, body: TaskMessage, now: float) -> str:
        with self._lock:
            self._check_live()
            self._next_message += 1
            mid = f"m{self._next_message:08d}"
            self.messages[mid] = QueuedMessage(mid, body, 0, now)
            heapq.heappush(self._heap, (now, mid))
            self.history.append(QueueEvent(now, "enqueue", mid))
            return mid

    def lease(self, now: float) -> tuple[TaskMessage, Receipt] | None:
        """Hand out the oldest visible message, or None if nothing is visible.

        Messages that already hit max_receive_count move to the dead-letter
        list here instead of being delivered again.
        """
        with self._lock:
            self._check_live()
            while self._heap and self._heap[0][0] <= now:
                visible_at, mid = heapq.heappop(self._heap)
                msg = self.messages.get(mid)
                if msg is None or msg.visible_at != visible_at:
                    continue  # superseded heap entry
                if msg.receive_count >= self.max_receive_count:
                    self._to_dead_letter(msg, now)
                    continue
                msg.receive_count += 1
                msg.visible_at = now + self.visibility_timeout_s
                heapq.heappush(self._heap, (msg.visible_at, mid))
                receipt = self._issue(msg)
                self.history.append(QueueEvent(now, "lease", mid))
                return msg.body, receipt
            return None

    def _issue(self, msg: QueuedMessage) -> Receipt:
        self._next_token += 1
        token = f"r{self._next_token:08d}"
        msg.current_receipt = token
        return Receipt(msg.message_id, token, msg.visible_at, msg.receive_count)

    def _to_dead_letter(self, msg: QueuedMessage, now: float) -> None:
        del self.messages[msg.message_id]
        msg.current_receipt = None
        self.dead_letter.append(msg)
        self.history.append(QueueEvent(now, "dead_letter", msg.message_id))

    def _held(self, receipt: Receipt, now: float) -> QueuedMessage:
        msg = self.messages.get(receipt.message_id)
        if msg is None or msg.current_receipt != receipt.token or now >= msg.visible_at:
            self.history.append(QueueEvent(now, "stale", receipt.message_id))
            raise StaleReceipt(f"receipt {receipt.token} for {receipt.message_id} is no longer valid")
        return msg

    def extend_lease(self, receipt: Receipt, extra_s: float, now: float) -> Receipt:
        with self._lock:
            self._check_live()
            msg = self._held(receipt, now)
            msg.visible_at = now + extra_s
            heapq.heappush(self._heap, (msg.visible_at, msg.message_id))
            self.history.append(QueueEvent(now, "extend", msg.message_id))
            return self._issue(msg)

    def ack(self, receipt: Receipt, now: float) -> None:
        with self._lock:
            self._check_live()
            msg = self._held(receipt, now)
            del self.messages[msg.message_id]
            self.acked += 1
            self.history.append(QueueEvent(now, "ack", msg.message_id))

    def counts(self, now: float) -> QueueCounts:
        # Exhausted messages whose lease ran out are dead letters in waiting:
        # the next lease call would move them without delivering.
        with self._lock:
            if self.deleted:
                return QueueCounts(0, 0, 0)
            visible = in_flight = pending_dlq = 0
            for msg in self.messages.values():
                if msg.visible_at > now:
                    in_flight += 1
                elif msg.receive_count >= self.max_receive_count:
                    pending_dlq += 1
                else:
                    visible += 1
            return QueueCounts(visible, in_flight, len(self.dead_letter) + pending_dlq)

    def purge_and_delete(self, now: float) -> list[QueuedMessage]:
        """Delete the queue; return the dead letters (stable across repeat calls)."""
        with self._lock:
            if self.deleted:
                return list(self.purged_dead_letter)
            for msg in sorted(self.messages.values(), key=lambda m: (m.visible_at, m.message_id)):
                if msg.visible_at <= now and msg.receive_count >= self.max_receive_count:
                    self._to_dead_letter(msg, now)
            self.purged_dead_letter = list(self.dead_letter)
            self.messages.clear()
            self.dead_letter = []
            self._heap = []
            self.deleted = True
            self.history.append(QueueEvent(now, "purge", ""))
            return list(self.purged_dead_letter)


@dataclass
class QueueService:
    """Name-scoped registry of queues."""

    queues: dict[str, WorkQueue] = field(default_factory=dict)

    def create_queue(self, name: str, visibility_timeout_s: int, max_receive_count: int) -> WorkQueue:
        if name in self.queues and not self.queues[name].deleted:
            raise QueueAlreadyExists(name)
        q = WorkQueue(name, visibility_timeout_s, max_receive_count)
        self.queues[name] = q
        return q

    def get(self, name: str) -> WorkQueue:
        return self.queues[name]
