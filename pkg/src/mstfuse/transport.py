"""Synchronous round-based message transport with exact communication accounting.

A round collects sends from any node to its topology neighbors; ``close_round``
delivers everything at once and opens the next round. The unit of cost is one
real scalar; messages are counted separately. Costs are booked into either the
``setup`` bucket (one-off bootstrap exchanges) or the ``iterate`` bucket.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ProtocolError

BUCKETS = ("setup", "iterate")


@dataclass
class RoundRecord:
    round: int
    bucket: str
    scalars: int
    messages: int


@dataclass
class CommLedger:
    setup_scalars: int = 0
    setup_messages: int = 0
    iterate_scalars: int = 0
    iterate_messages: int = 0
    per_round: list[RoundRecord] = field(default_factory=list)

    @property
    def scalars_sent(self) -> int:
        return self.setup_scalars + self.iterate_scalars

    @property
    def messages_sent(self) -> int:
        return self.setup_messages + self.iterate_messages

    @property
    def iterate_rounds(self) -> int:
        return sum(1 for r in self.per_round if r.bucket == "iterate")

    def book(self, bucket: str, scalars: int, messages: int) -> None:
        if bucket == "setup":
            self.setup_scalars += scalars
            self.setup_messages += messages
        elif bucket == "iterate":
            self.iterate_scalars += scalars
            self.iterate_messages += messages
        else:
            raise ProtocolError(f"unknown ledger bucket {bucket!r}")

    def as_dict(self) -> dict:
        return {
            "scalars_setup": self.setup_scalars,
            "scalars_iterate": self.iterate_scalars,
            "messages_setup": self.setup_messages,
            "messages_iterate": self.iterate_messages,
            "scalars_total": self.scalars_sent,
            "messages_total": self.messages_sent,
            "iterate_rounds": self.iterate_rounds,
        }


class RoundTransport:
    """Message buffers over a fixed topology (an ``EdgeSupport``).

    Parameters
    ----------
    topology : EdgeSupport
        Links along which messages may travel.
    ledger : CommLedger, optional
        Shared accounting object; a fresh one is created if omitted.
    bucket : {"setup", "iterate"}
        Ledger bucket charged for sends in the current round.
    trace : bool
        Keep per-message ``(round, sender, receiver, scalar_count)`` records.
    """

    def __init__(self, topology, ledger: CommLedger | None = None, bucket: str = "iterate", trace: bool = False):
        self.topology = topology
        self.ledger = ledger if ledger is not None else CommLedger()
        self.bucket = bucket
        self.round = 0
        self.is_open = True
        self._outbox: dict[int, dict[int, np.ndarray]] = {}
        self._round_scalars = 0
        self._round_messages = 0
        self._neighbor_sets = [set(n) for n in topology.neighbors]
        self.trace: list[tuple[int, int, int, int]] | None = [] if trace else None

    def set_bucket(self, bucket: str) -> None:
        if bucket not in BUCKETS:
            raise ProtocolError(f"unknown ledger bucket {bucket!r}")
        self.bucket = bucket

    def _require_open(self):
        if not self.is_open:
            raise ProtocolError("no round is open")

    def send(self, sender: int, receiver: int, payload) -> None:
        self._require_open()
        if receiver not in self._neighbor_sets[sender]:
            raise ProtocolError(f"no link between {sender} and {receiver}")
        if sender in self._outbox.get(receiver, {}):
            raise ProtocolError(f"{sender} already sent to {receiver} in round {self.round}")
        data = np.array(payload, dtype=float, copy=True).ravel()
        self._outbox.setdefault(receiver, {})[sender] = data
        self._round_scalars += data.size
        self._round_messages += 1
        if self.trace is not None:
            self.trace.append((self.round, sender, receiver, data.size))

    def broadcast_to_neighbors(self, node: int, payload) -> None:
        """Send ``payload`` to every topology neighbor of ``node``."""
        self._require_open()
        for j in self.topology.neighbors[node]:
            self.send(node, j, payload)

    def _finish_round(self):
        self.ledger.book(self.bucket, self._round_scalars, self._round_messages)
        self.ledger.per_round.append(RoundRecord(self.round, self.bucket, self._round_scalars, self._round_messages))
        self._round_scalars = 0
        self._round_messages = 0
        self._outbox = {}
        self.round += 1

    def close_round(self) -> dict[int, list[tuple[int, np.ndarray]]]:
        """Deliver the round's messages; each inbox is a list of ``(sender, payload)`` sorted by sender."""
        self._require_open()
        inboxes = {i: sorted(self._outbox.get(i, {}).items()) for i in range(self.topology.node_count)}
        self._finish_round()
        return inboxes

    def exchange(self, payloads: np.ndarray) -> np.ndarray:
        """Every node broadcasts its row of ``payloads``; returns the delivered inboxes.

        Equivalent to calling ``broadcast_to_neighbors(i, payloads[i])`` for all
        nodes followed by ``close_round``. The result is laid out in half-edge
        order (sorted by receiver, then sender): row ``h`` is what node
        ``owner[h]`` received from ``other[h]``.
        """
        self._require_open()
        if self._outbox:
            raise ProtocolError("exchange cannot be mixed with individual sends in the same round")
        payloads = np.asarray(payloads, dtype=float)
        half = self.topology.half_edges
        per_message = int(np.prod(payloads.shape[1:])) if payloads.ndim > 1 else 1
        self._round_scalars += len(half) * per_message
        self._round_messages += len(half)
        if self.trace is not None:
            order = np.lexsort((half.owner, half.other))
            self.trace.extend((self.round, int(half.other[h]), int(half.owner[h]), per_message) for h in order)
        received = payloads[half.other]
        self._finish_round()
        return received

    def shutdown(self) -> None:
        """Close the transport; further sends raise ``ProtocolError``."""
        if self._outbox:
            raise ProtocolError("undelivered messages at shutdown")
        self.is_open = False

    def write_trace(self, path: str | Path) -> None:
        if self.trace is None:
            raise ProtocolError("tracing was not enabled")
        lines = ["round,sender,receiver,scalar_count"]
        lines += [f"{r},{s},{t},{c}" for r, s, t, c in self.trace]
        Path(path).write_text("\n".join(lines) + "\n")
