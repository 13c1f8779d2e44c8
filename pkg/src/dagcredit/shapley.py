"""Exact Shapley attribution over coalition games, with a pruned engine for
layered workflows.

Two engines produce per-agent contributions:

* ``shapley_exact`` evaluates the characteristic function on every subset.
* ``shapley_dag`` evaluates only viable coalitions and treats the rest as
  zero, which is sound whenever non-viable coalitions cannot trade.

Shared agent executions across coalitions are exploited by ``layered_run``:
agents in one layer are keyed by the exact upstream membership they see, so
every distinct (agent, upstream configuration) pair runs once per episode.
"""
from __future__ import annotations

import math
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Callable, Mapping, Sequence

from .coalitions import Coalition, GraphTooLarge
from .graph import BadLayerIndex, WorkflowGraph, topological_order

MAX_EXACT_AGENTS = 24

# An agent runner: (agent index, upstream outputs by agent index, external
# data or None) -> opaque output. Engines pass external data to source
# agents only.
AgentRunner = Callable[[int, Mapping[int, Any], Any], Any]


class TooManyAgents(ValueError):
    pass


class InvalidSize(ValueError):
    pass


class ExecutorFailure(RuntimeError):
    """An agent runner raised during engine-driven execution."""


class NonDeterminismDetected(RuntimeError):
    """Optional debug re-execution produced a different output for a cached key."""


class CacheConflict(RuntimeError):
    """Attempt to overwrite a memo entry with a different value."""


def shapley_weight(s: int, n: int) -> Fraction:
    """Exact weight ``s! (n - s - 1)! / n!`` for a coalition of size ``s``.

    Kept rational so that summing the weights over all subset sizes is
    exactly 1; conversion to float happens only when terms are accumulated.
    """
    if n <= 0 or s < 0 or s >= n:
        raise InvalidSize(f"need 0 <= s < n, got s={s} n={n}")
    return Fraction(
        math.factorial(s) * math.factorial(n - s - 1), math.factorial(n)
    )


@dataclass
class CostCounters:
    """Work performed while valuing a game."""

    coalition_evaluations: int = 0
    agent_executions: int = 0
    cache_hits: int = 0

    def merged(self, other: "CostCounters") -> "CostCounters":
        return CostCounters(
            self.coalition_evaluations + other.coalition_evaluations,
            self.agent_executions + other.agent_executions,
            self.cache_hits + other.cache_hits,
        )


@dataclass(frozen=True)
class AttributionResult:
    """Per-agent Shapley values plus the cost of obtaining them."""

    values: tuple[float, ...]
    counters: CostCounters
    elapsed: float

    def total(self) -> float:
        return math.fsum(self.values)


def _phi_from_values(
    n: int, value_of: Callable[[int], float], exact_arith: bool
) -> list[float]:
    # Sum over all subsets not containing i of w(|S|) * (v(S + i) - v(S)).
    weights = [shapley_weight(s, n) for s in range(n)]
    if exact_arith:
        phi = []
        for i in range(n):
            bit = 1 << i
            acc = Fraction(0)
            for mask in range(1 << n):
                if mask & bit:
                    continue
                marginal = Fraction(value_of(mask | bit)) - Fraction(value_of(mask))
                acc += weights[mask.bit_count()] * marginal
            phi.append(float(acc))
        return phi
    wf = [float(w) for w in weights]
    phi = []
    for i in range(n):
        bit = 1 << i
        terms = [
            wf[mask.bit_count()] * (value_of(mask | bit) - value_of(mask))
            for mask in range(1 << n)
            if not mask & bit
        ]
        phi.append(math.fsum(terms))
    return phi


def shapley_exact(
    game: Callable[[Coalition], float], n: int, *, exact_arith: bool = False
) -> AttributionResult:
    """Exact Shapley values by full power-set evaluation.

    Every subset is valued exactly once (results keyed by bit pattern), so
    ``coalition_evaluations`` is ``2**n``. With ``exact_arith`` the weighted
    marginals accumulate as rationals, which makes null players exactly zero;
    the default path converts weights to float and uses compensated summation.
    """
    if n <= 0:
        raise InvalidSize("need at least one agent")
    if n > MAX_EXACT_AGENTS:
        raise TooManyAgents(f"{n} agents exceeds the limit of {MAX_EXACT_AGENTS}")
    start = time.perf_counter()
    values = [game(Coalition(mask)) for mask in range(1 << n)]
    phi = _phi_from_values(n, values.__getitem__, exact_arith)
    counters = CostCounters(
        coalition_evaluations=1 << n,
        agent_executions=getattr(game, "agent_executions", 0),
        cache_hits=getattr(game, "cache_hits", 0),
    )
    return AttributionResult(tuple(phi), counters, time.perf_counter() - start)


def shapley_dag(
    graph: WorkflowGraph,
    evaluator: Callable[[Coalition], float],
    *,
    viable: Sequence[Coalition] | None = None,
    exact_arith: bool = False,
) -> AttributionResult:
    """Exact Shapley values evaluating viable coalitions only.

    ``evaluator`` is called once per viable coalition; all other subsets take
    value zero by the game definition, so their marginals cost nothing. The
    result is identical to ``shapley_exact`` on the zero-extended game.
    """
    from .coalitions import enumerate_viable

    if graph.n > MAX_EXACT_AGENTS:
        raise TooManyAgents(f"{graph.n} agents exceeds the limit of {MAX_EXACT_AGENTS}")
    start = time.perf_counter()
    if viable is None:
        viable = enumerate_viable(graph)
    table = {c.mask: evaluator(c) for c in viable}
    phi = _phi_from_values(
        graph.n, lambda mask: table.get(mask, 0.0), exact_arith
    )
    counters = CostCounters(
        coalition_evaluations=len(table),
        agent_executions=getattr(evaluator, "agent_executions", 0),
        cache_hits=getattr(evaluator, "cache_hits", 0),
    )
    return AttributionResult(tuple(phi), counters, time.perf_counter() - start)


def upstream_configuration(
    graph: WorkflowGraph, coalition: Coalition, layer_index: int
) -> Coalition:
    """Coalition members in layers strictly before ``layer_index`` (0-based).

    This is the memo key for agents of that layer: two coalitions with the
    same upstream membership feed a layer identical inputs.
    """
    if not 0 <= layer_index < len(graph.layers):
        raise BadLayerIndex(f"layer {layer_index} out of range")
    return Coalition(coalition.mask & graph.prefix_masks[layer_index])


class MemoCache:
    """Write-once mapping from (agent, upstream configuration) to output.

    Entries may be inserted concurrently but never overwritten with a
    different value; a conflicting write raises CacheConflict. Reads are
    counted so engines can report reuse.
    """

    def __init__(self) -> None:
        self._data: dict[tuple[int, int], Any] = {}
        self._lock = threading.Lock()
        self.reads = 0

    def put(self, agent: int, config_mask: int, value: Any) -> None:
        key = (agent, config_mask)
        with self._lock:
            existing = self._data.setdefault(key, value)
        if existing is not value and existing != value:
            raise CacheConflict(f"conflicting value for key {key}")

    def get(self, agent: int, config_mask: int) -> Any:
        value = self._data[(agent, config_mask)]
        self.reads += 1
        return value

    def peek(self, agent: int, config_mask: int) -> Any:
        """Read without counting toward the reuse statistics."""
        return self._data[(agent, config_mask)]

    def __contains__(self, key: tuple[int, int]) -> bool:
        return key in self._data

    def __len__(self) -> int:
        return len(self._data)

    def keys(self) -> list[tuple[int, int]]:
        return sorted(self._data)


@dataclass(frozen=True)
class LayeredRunResult:
    """One episode of memoized execution across all viable coalitions."""

    cache: MemoCache
    sink_outputs: dict[Coalition, Any]
    counters: CostCounters


def _predecessor_config(graph: WorkflowGraph, pred: int, config_mask: int) -> int:
    # The predecessor's own upstream membership is derivable from the current
    # configuration: members of layers before the predecessor's layer.
    return config_mask & graph.prefix_masks[graph.layer_of[pred]]


def layered_run(
    graph: WorkflowGraph,
    viable: Sequence[Coalition],
    run_agent: AgentRunner,
    external: Any = None,
    *,
    parallel: int = 1,
    verify_determinism: bool = False,
) -> LayeredRunResult:
    """Execute every viable coalition for one episode with layer-wise sharing.

    Layer by layer, viable coalitions are grouped by upstream configuration;
    each agent active under a configuration is executed exactly once and the
    output is cached under (agent, configuration). Inputs to an agent are the
    cached outputs of its direct predecessors inside the configuration;
    external data goes to source agents only. Per-coalition sink outputs are
    then read straight from the cache.

    ``parallel`` > 1 runs each layer's pending executions in a thread pool;
    outputs are deterministic because execution order never feeds back into
    inputs within a layer. ``verify_determinism`` re-executes one sampled key
    per episode and raises NonDeterminismDetected on a mismatch.
    """
    cache = MemoCache()
    counters = CostCounters()
    last_task: tuple[int, int] | None = None

    for li, _layer in enumerate(graph.layers):
        layer_mask = graph.layer_masks[li]
        groups: dict[int, int] = {}
        for c in viable:
            active_bits = c.mask & layer_mask
            if active_bits:
                cfg = c.mask & graph.prefix_masks[li]
                groups[cfg] = groups.get(cfg, 0) | active_bits

        tasks: list[tuple[int, int]] = []
        for cfg in sorted(groups):
            bits = groups[cfg]
            while bits:
                low = bits & -bits
                tasks.append((cfg, low.bit_length() - 1))
                bits ^= low

        def execute(task: tuple[int, int]) -> tuple[int, int, Any]:
            cfg, agent = task
            upstream = {
                p: cache.get(p, _predecessor_config(graph, p, cfg))
                for p in graph.preds[agent]
                if (cfg >> p) & 1
            }
            data = external if agent in graph.sources else None
            try:
                out = run_agent(agent, upstream, data)
            except Exception as exc:  # pragma: no cover - passthrough wrapper
                raise ExecutorFailure(
                    f"agent {graph.names[agent]} failed under config {bin(cfg)}"
                ) from exc
            return cfg, agent, out

        if parallel > 1 and len(tasks) > 1:
            with ThreadPoolExecutor(max_workers=parallel) as pool:
                results = list(pool.map(execute, tasks))
        else:
            results = [execute(t) for t in tasks]
        for cfg, agent, out in results:
            cache.put(agent, cfg, out)
            counters.agent_executions += 1
            last_task = (cfg, agent)

    if verify_determinism and last_task is not None:
        cfg, agent = last_task
        upstream = {
            p: cache.get(p, _predecessor_config(graph, p, cfg))
            for p in graph.preds[agent]
            if (cfg >> p) & 1
        }
        data = external if agent in graph.sources else None
        again = run_agent(agent, upstream, data)
        if again != cache.get(agent, cfg):
            raise NonDeterminismDetected(
                f"agent {graph.names[agent]} is not deterministic under config {bin(cfg)}"
            )

    last_layer = len(graph.layers) - 1
    sink_outputs: dict[Coalition, Any] = {}
    for c in viable:
        cfg = c.mask & graph.prefix_masks[last_layer]
        sink_outputs[c] = cache.get(graph.sink, cfg)
    counters.cache_hits = cache.reads
    return LayeredRunResult(cache, sink_outputs, counters)


@dataclass(frozen=True)
class ReplayResult:
    outputs: dict[int, Any]
    sink_output: Any
    executions: int


def replay_coalition(
    graph: WorkflowGraph,
    coalition: Coalition,
    run_agent: AgentRunner,
    external: Any = None,
) -> ReplayResult:
    """Cache-free straight-line execution of one coalition.

    Every member runs once in topological order, receiving the outputs of its
    direct predecessors that are also members. This is the classical
    (unshared) evaluation path and the reference oracle for the memoized one.
    """
    outputs: dict[int, Any] = {}
    executed = 0
    for agent in topological_order(graph):
        if agent not in coalition:
            continue
        upstream = {p: outputs[p] for p in graph.preds[agent] if p in coalition}
        data = external if agent in graph.sources else None
        try:
            outputs[agent] = run_agent(agent, upstream, data)
        except Exception as exc:
            raise ExecutorFailure(f"agent {graph.names[agent]} failed") from exc
        executed += 1
    return ReplayResult(outputs, outputs.get(graph.sink), executed)


class ReplayGame:
    """Characteristic function that replays every requested coalition.

    Used by the exhaustive engine as the classical comparator: no sharing,
    every member of every coalition executes. ``sink_value`` maps the sink
    output (or None when the sink is absent) to a real value.
    """

    def __init__(
        self,
        graph: WorkflowGraph,
        run_agent: AgentRunner,
        sink_value: Callable[[Any], float],
        external: Any = None,
    ) -> None:
        self.graph = graph
        self.run_agent = run_agent
        self.sink_value = sink_value
        self.external = external
        self.agent_executions = 0
        self.cache_hits = 0

    def __call__(self, coalition: Coalition) -> float:
        result = replay_coalition(self.graph, coalition, self.run_agent, self.external)
        self.agent_executions += result.executions
        if result.sink_output is None:
            return 0.0
        return self.sink_value(result.sink_output)


class MemoizedGame:
    """Characteristic function backed by one memoized episode run.

    Valid only for viable coalitions (the pruned engine never asks for
    others); the episode executes lazily on first use.
    """

    def __init__(
        self,
        graph: WorkflowGraph,
        viable: Sequence[Coalition],
        run_agent: AgentRunner,
        sink_value: Callable[[Any], float],
        external: Any = None,
        parallel: int = 1,
    ) -> None:
        self.graph = graph
        self.viable = viable
        self.run_agent = run_agent
        self.sink_value = sink_value
        self.external = external
        self.parallel = parallel
        self._table: dict[int, float] | None = None
        self.agent_executions = 0
        self.cache_hits = 0

    def _materialize(self) -> dict[int, float]:
        if self._table is None:
            run = layered_run(
                self.graph, self.viable, self.run_agent, self.external,
                parallel=self.parallel,
            )
            self._table = {
                c.mask: self.sink_value(out) for c, out in run.sink_outputs.items()
            }
            self.agent_executions = run.counters.agent_executions
            self.cache_hits = run.counters.cache_hits
        return self._table

    def __call__(self, coalition: Coalition) -> float:
        return self._materialize()[coalition.mask]


@dataclass(frozen=True)
class PredictedCost:
    """Closed-form execution counts for a fully connected layered graph."""

    unique_configs: tuple[int, ...]
    total_executions: int
    viable_coalitions: int


def predicted_cost(
    layer_sizes: Sequence[int], mandatory: Sequence[bool] | None = None
) -> PredictedCost:
    """Predict memoized execution counts from layer sizes alone.

    For each layer the number of distinct upstream configurations is the
    product over earlier layers of (2**size - 1 if the layer is mandatory
    else 2**size); total executions add size * configs per layer. Matches the
    measured counter of ``layered_run`` on fully connected layered graphs.
    """
    if not layer_sizes or any(s < 1 for s in layer_sizes):
        raise InvalidSize("layer sizes must be positive")
    if mandatory is None:
        mandatory = [True] * len(layer_sizes)
    if len(mandatory) != len(layer_sizes):
        raise InvalidSize("one mandatory flag per layer")
    configs = []
    total = 0
    for i, size in enumerate(layer_sizes):
        u = 1
        for j in range(i):
            u *= (1 << layer_sizes[j]) - (1 if mandatory[j] else 0)
        configs.append(u)
        total += u * size
    viable = 1
    for size, flag in zip(layer_sizes, mandatory):
        viable *= (1 << size) - (1 if flag else 0)
    return PredictedCost(tuple(configs), total, viable)


def classical_cost(n: int) -> tuple[int, int]:
    """(coalition evaluations, agent executions) for unshared full enumeration.

    Every one of the 2**n subsets is replayed and each member executes, so
    executions total n * 2**(n-1).
    """
    if n < 1:
        raise InvalidSize("need at least one agent")
    return (1 << n, n * (1 << (n - 1)))


def format_attribution(graph: WorkflowGraph, result: AttributionResult) -> str:
    """Per-agent contributions plus the cost block, as stable text."""
    lines = ["agent contributions:"]
    for i, name in enumerate(graph.names):
        lines.append(f"  {name:<8} {result.values[i]:+.10f}")
    lines.append(f"  total    {result.total():+.10f}")
    c = result.counters
    lines.append(
        "cost: "
        f"coalition_evaluations={c.coalition_evaluations} "
        f"agent_executions={c.agent_executions} "
        f"cache_hits={c.cache_hits}"
    )
    return "\n".join(lines)


def format_attribution_table(
    graph: WorkflowGraph, results: Mapping[str, AttributionResult]
) -> str:
    """Side-by-side engine comparison; single-engine input degrades cleanly."""
    engines = list(results)
    if len(engines) == 1:
        return format_attribution(graph, results[engines[0]])
    header = f"{'agent':<8}" + "".join(f" {e:>16}" for e in engines) + f" {'|diff|':>12}"
    lines = [header]
    for i, name in enumerate(graph.names):
        row = [f"{name:<8}"]
        row.extend(f" {results[e].values[i]:>+16.10f}" for e in engines)
        spread = max(results[e].values[i] for e in engines) - min(
            results[e].values[i] for e in engines
        )
        row.append(f" {spread:>12.3e}")
        lines.append("".join(row))
    for e in engines:
        c = results[e].counters
        lines.append(
            f"cost ({e}): coalition_evaluations={c.coalition_evaluations} "
            f"agent_executions={c.agent_executions} cache_hits={c.cache_hits}"
        )
    execs = {e: results[e].counters.agent_executions for e in engines}
    if "exact" in execs and "dag" in execs and execs["exact"]:
        reduction = 1.0 - execs["dag"] / execs["exact"]
        lines.append(f"execution reduction: {100.0 * reduction:.1f}%")
    return "\n".join(lines)
