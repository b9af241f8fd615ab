"""Typed client/server messages and the append-only ledger that carries them.

Everything the server learns about a client passes through
:meth:`Ledger.send`. The set of message kinds is closed; raw features and
labels have no kind and are refused at the boundary.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field

import numpy as np


class PrivacyViolation(RuntimeError):
    """A transfer tried to cross the client/server boundary with a forbidden payload."""


class Direction(str, enum.Enum):
    TO_SERVER = "client->server"
    TO_CLIENT = "server->client"


class MessageKind(str, enum.Enum):
    PARAM_VECTOR = "ParamVector"
    GRAD_VECTOR = "GradVector"
    ENERGY_SCALARS = "EnergyScalars"
    LATENT_VECTORS = "LatentVectors"
    CLASS_PREDICTIONS = "ClassPredictions"
    SAMPLE_INDICES = "SampleIndices"
    DATASET_SIZE = "DatasetSize"


ALLOWED_SERVER_BOUND = frozenset(MessageKind)


@dataclass(frozen=True)
class Message:
    direction: Direction
    kind: MessageKind
    client: str
    round: int
    payload_size: int


@dataclass
class Ledger:
    records: list[Message] = field(default_factory=list)

    def send(self, direction, kind, client: str, payload, round: int = 0):
        """Record a transfer and hand back the delivered payload (a copy)."""
        try:
            direction = Direction(direction)
        except ValueError:
            raise PrivacyViolation(f"unknown direction {direction!r}") from None
        if not isinstance(kind, MessageKind):
            try:
                kind = MessageKind(kind)
            except ValueError:
                raise PrivacyViolation(
                    f"message kind {kind!r} from {client} is not transferable"
                ) from None
        if direction is Direction.TO_SERVER and kind not in ALLOWED_SERVER_BOUND:
            raise PrivacyViolation(f"{kind.value} may not be sent to the server")
        delivered = np.array(payload, dtype=np.float64 if kind is not MessageKind.SAMPLE_INDICES else np.int64)
        self.records.append(Message(direction, kind, client, int(round), int(delivered.size)))
        return delivered

    def to_server(self, kind, client: str, payload, round: int = 0):
        return self.send(Direction.TO_SERVER, kind, client, payload, round)

    def to_client(self, kind, client: str, payload, round: int = 0):
        return self.send(Direction.TO_CLIENT, kind, client, payload, round)

    def extend(self, other: "Ledger") -> None:
        self.records.extend(other.records)

    def server_bound_kinds(self) -> set[str]:
        return {m.kind.value for m in self.records if m.direction is Direction.TO_SERVER}

    def violations(self) -> list[Message]:
        return [
            m for m in self.records
            if m.direction is Direction.TO_SERVER and m.kind not in ALLOWED_SERVER_BOUND
        ]

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["round", "direction", "kind", "client", "payload_size"])
            for m in self.records:
                w.writerow([m.round, m.direction.value, m.kind.value, m.client, m.payload_size])
