"""Coalitions and viability pruning.

A coalition is a subset of agents, stored as a bitmask over agent indices.
Only viable coalitions (trader present, at least one source, and a source
connected to the trader within the induced subgraph) can produce a trading
decision; everything else is assigned value zero by definition, so the
attribution engine never needs to execute it.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator

from .graph import WorkflowGraph, path_exists

MAX_AGENTS = 24


class GraphTooLarge(ValueError):
    """Exhaustive enumeration refused beyond MAX_AGENTS agents."""


class InvalidCoalition(ValueError):
    pass


@dataclass(frozen=True, order=True)
class Coalition:
    """Immutable agent subset. Equality, hashing and ordering use the bitmask."""

    mask: int

    def __post_init__(self) -> None:
        if self.mask < 0:
            raise InvalidCoalition("coalition mask must be non-negative")

    @classmethod
    def of(cls, indices: Iterable[int]) -> "Coalition":
        mask = 0
        for i in indices:
            if i < 0:
                raise InvalidCoalition(f"negative agent index {i}")
            mask |= 1 << i
        return cls(mask)

    @classmethod
    def full(cls, n: int) -> "Coalition":
        return cls((1 << n) - 1)

    @classmethod
    def empty(cls) -> "Coalition":
        return cls(0)

    def __contains__(self, index: int) -> bool:
        return index >= 0 and (self.mask >> index) & 1 == 1

    def __iter__(self) -> Iterator[int]:
        mask = self.mask
        while mask:
            low = mask & -mask
            yield low.bit_length() - 1
            mask ^= low

    def __len__(self) -> int:
        return self.mask.bit_count()

    def __bool__(self) -> bool:
        return self.mask != 0

    def add(self, index: int) -> "Coalition":
        return Coalition(self.mask | (1 << index))

    def without(self, index: int) -> "Coalition":
        return Coalition(self.mask & ~(1 << index))

    def __or__(self, other: "Coalition") -> "Coalition":
        return Coalition(self.mask | other.mask)

    def __and__(self, other: "Coalition") -> "Coalition":
        return Coalition(self.mask & other.mask)

    def issubset(self, other: "Coalition") -> bool:
        return self.mask & ~other.mask == 0

    def names(self, graph: WorkflowGraph) -> list[str]:
        return [graph.names[i] for i in self]

    def __repr__(self) -> str:
        return f"Coalition({bin(self.mask)})"


@dataclass(frozen=True)
class ViabilityReport:
    """Outcome of the three viability conditions for one coalition."""

    has_trader: bool
    has_source: bool
    connected: bool

    @property
    def viable(self) -> bool:
        return self.has_trader and self.has_source and self.connected


def check_viability(graph: WorkflowGraph, coalition: Coalition) -> ViabilityReport:
    """Evaluate the three conditions a coalition needs to produce a decision.

    Connectivity asks for at least one source inside the coalition with a
    path to the sink through coalition members only. The empty coalition
    fails all three conditions.
    """
    if coalition.mask >> graph.n:
        raise InvalidCoalition("coalition references agents outside the graph")
    has_trader = graph.sink in coalition
    members_sources = [s for s in graph.sources if s in coalition]
    has_source = bool(members_sources)
    connected = False
    if has_trader and has_source:
        connected = any(
            path_exists(graph, coalition, s, graph.sink) for s in members_sources
        )
    return ViabilityReport(has_trader, has_source, connected)


def enumerate_viable(graph: WorkflowGraph) -> list[Coalition]:
    """All viable coalitions in ascending bit-pattern order.

    Enumeration walks the full power set, so graphs beyond MAX_AGENTS agents
    are rejected rather than silently taking hours.
    """
    if graph.n > MAX_AGENTS:
        raise GraphTooLarge(f"{graph.n} agents exceeds the limit of {MAX_AGENTS}")
    sink_bit = 1 << graph.sink
    out = []
    for mask in range(1 << graph.n):
        if not mask & sink_bit:
            continue
        c = Coalition(mask)
        if check_viability(graph, c).viable:
            out.append(c)
    return out


@dataclass(frozen=True)
class CoalitionCounts:
    total: int
    viable: int

    @property
    def reduction(self) -> float:
        """Fraction of the power set pruned away."""
        return 1.0 - self.viable / self.total


def coalition_counts(graph: WorkflowGraph) -> CoalitionCounts:
    return CoalitionCounts(total=1 << graph.n, viable=len(enumerate_viable(graph)))
