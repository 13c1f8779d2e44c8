"""Attribution engines, memoized execution, cost model, and axiom properties."""

import itertools
import math
import random
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dagcredit.agents import build_system, signed_decision_value, system_runner
from dagcredit.coalitions import Coalition, enumerate_viable
from dagcredit.graph import BadLayerIndex, build_graph, reference_graph
from dagcredit.shapley import (
    CacheConflict,
    ExecutorFailure,
    InvalidSize,
    MemoCache,
    MemoizedGame,
    NonDeterminismDetected,
    ReplayGame,
    TooManyAgents,
    classical_cost,
    format_attribution,
    format_attribution_table,
    layered_run,
    predicted_cost,
    replay_coalition,
    shapley_dag,
    shapley_exact,
    shapley_weight,
    upstream_configuration,
)

from conftest import FEATURES, layered_graph


# ---------------------------------------------------------------------------
# weights


def test_weight_endpoints():
    assert shapley_weight(0, 4) == Fraction(1, 4)
    assert shapley_weight(3, 4) == Fraction(1, 4)
    assert shapley_weight(1, 3) == Fraction(1, 6)


@pytest.mark.parametrize("n", range(1, 13))
def test_weights_sum_to_one_exactly(n):
    total = sum(
        math.comb(n - 1, s) * shapley_weight(s, n) for s in range(n)
    )
    assert total == Fraction(1)


def test_weight_rejects_bad_sizes():
    with pytest.raises(InvalidSize):
        shapley_weight(-1, 3)
    with pytest.raises(InvalidSize):
        shapley_weight(3, 3)
    with pytest.raises(InvalidSize):
        shapley_weight(0, 0)


# ---------------------------------------------------------------------------
# exact engine against a permutation oracle


def permutation_shapley(n, game):
    """Average marginal contribution over every join order. O(n! * n)."""
    totals = [Fraction(0)] * n
    count = 0
    for order in itertools.permutations(range(n)):
        mask = 0
        for agent in order:
            before = game(Coalition(mask))
            mask |= 1 << agent
            totals[agent] += Fraction(game(Coalition(mask))) - Fraction(before)
        count += 1
    return [t / count for t in totals]


@pytest.mark.parametrize("seed,n", [(0, 3), (1, 4), (2, 5), (3, 5)])
def test_exact_engine_matches_permutation_oracle(seed, n):
    rng = random.Random(seed)
    table = {0: Fraction(0)}
    for mask in range(1, 1 << n):
        table[mask] = Fraction(rng.randint(-20, 20), rng.randint(1, 9))
    game = lambda c: table[c.mask]
    oracle = permutation_shapley(n, game)
    result = shapley_exact(game, n, exact_arith=True)
    assert list(result.values) == [float(v) for v in oracle]
    floats = shapley_exact(lambda c: float(table[c.mask]), n)
    for got, want in zip(floats.values, oracle):
        assert abs(got - float(want)) < 1e-9


def test_exact_engine_counts_evaluations():
    calls = []
    result = shapley_exact(lambda c: calls.append(c.mask) or 0.0, 4)
    assert result.counters.coalition_evaluations == 16
    assert sorted(calls) == list(range(16))


def test_engines_reject_oversized_inputs():
    with pytest.raises(TooManyAgents):
        shapley_exact(lambda c: 0.0, 25)
    with pytest.raises(InvalidSize):
        shapley_exact(lambda c: 0.0, 0)


# ---------------------------------------------------------------------------
# axioms


@given(
    st.integers(min_value=2, max_value=5),
    st.integers(min_value=0, max_value=10_000),
)
@settings(max_examples=60, deadline=None)
def test_efficiency_on_random_games(n, seed):
    rng = random.Random(seed)
    table = [0.0] + [rng.uniform(-5, 5) for _ in range((1 << n) - 1)]
    result = shapley_exact(lambda c: table[c.mask], n)
    assert abs(result.total() - table[-1]) < 1e-9


@given(st.integers(min_value=2, max_value=6), st.integers(min_value=0, max_value=500))
@settings(max_examples=40, deadline=None)
def test_symmetry_on_cardinality_games(n, seed):
    """A game that only counts heads treats every agent identically."""
    rng = random.Random(seed)
    by_size = [Fraction(0)] + [
        Fraction(rng.randint(-9, 9), rng.randint(1, 7)) for _ in range(n)
    ]
    result = shapley_exact(lambda c: by_size[len(c)], n, exact_arith=True)
    assert len(set(result.values)) == 1


@given(st.integers(min_value=2, max_value=6), st.integers(min_value=0, max_value=500))
@settings(max_examples=40, deadline=None)
def test_null_player_gets_exact_zero(n, seed):
    rng = random.Random(seed)
    null_agent = rng.randrange(n)
    strip = ~(1 << null_agent)
    table = {}
    for mask in range(1 << n):
        base = mask & strip
        if base not in table:
            table[base] = Fraction(rng.randint(-20, 20), rng.randint(1, 9))
        table[mask] = table[base]
    table[0] = Fraction(0)
    result = shapley_exact(lambda c: table[c.mask & strip], n, exact_arith=True)
    assert result.values[null_agent] == 0


def test_symmetric_pair_in_float_mode():
    table = {0: 0.0, 0b001: 1.5, 0b010: 1.5, 0b100: 0.25,
             0b011: 2.0, 0b101: 1.75, 0b110: 1.75, 0b111: 3.5}
    result = shapley_exact(lambda c: table[c.mask], 3)
    assert abs(result.values[0] - result.values[1]) < 1e-12


# ---------------------------------------------------------------------------
# pruned engine equals the exhaustive one across random topologies


def random_layered(rng, n):
    """Random forward-edged DAG with one sink; mid-layer sources allowed."""
    sizes = []
    remaining = n - 1
    while remaining > 0:
        take = rng.randint(1, min(remaining, 4))
        sizes.append(take)
        remaining -= take
    sizes.append(1)
    layers = [[f"L{i}N{j}" for j in range(s)] for i, s in enumerate(sizes)]
    edges = []
    for i, layer in enumerate(layers[:-1]):
        for name in layer:
            later = [m for down in layers[i + 1:] for m in down]
            targets = rng.sample(later, rng.randint(1, min(3, len(later))))
            for dst in targets:
                edges.append((name, dst))
    return build_graph(layers, sorted(set(edges)))


@pytest.mark.parametrize("seed", range(25))
def test_engine_equivalence_on_random_graphs(seed):
    rng = random.Random(1000 + seed)
    g = random_layered(rng, 3 + seed % 8)
    viable = enumerate_viable(g)
    table = {c.mask: rng.uniform(-2, 2) for c in viable}
    dag = shapley_dag(g, lambda c: table[c.mask], viable=viable)
    exact = shapley_exact(lambda c: table.get(c.mask, 0.0), g.n)
    worst = max(abs(a - b) for a, b in zip(dag.values, exact.values))
    assert worst < 1e-9
    assert abs(dag.total() - table[g.full_mask]) < 1e-9
    assert dag.counters.coalition_evaluations == len(viable)
    assert exact.counters.coalition_evaluations == 1 << g.n


def test_dag_engine_rejects_oversized_graph():
    layers = [[f"s{i}"] for i in range(24)] + [["t"]]
    edges = [(f"s{i}", f"s{i+1}") for i in range(23)] + [("s23", "t")]
    g = build_graph(layers, edges)
    with pytest.raises(TooManyAgents):
        shapley_dag(g, lambda c: 0.0)


# ---------------------------------------------------------------------------
# upstream configurations and the memo cache


def test_upstream_configuration_masks():
    g = reference_graph()
    c = Coalition.of([0, 2, 4, 6])
    assert upstream_configuration(g, c, 0) == Coalition.empty()
    assert upstream_configuration(g, c, 1) == Coalition.of([0, 2])
    assert upstream_configuration(g, c, 2) == Coalition.of([0, 2, 4])


def test_upstream_configuration_range_check():
    g = reference_graph()
    with pytest.raises(BadLayerIndex):
        upstream_configuration(g, Coalition.empty(), 3)


def test_memo_cache_read_write_semantics():
    cache = MemoCache()
    cache.put(3, 0b101, "out")
    assert (3, 0b101) in cache
    assert len(cache) == 1
    assert cache.get(3, 0b101) == "out"
    assert cache.reads == 1
    assert cache.peek(3, 0b101) == "out"
    assert cache.reads == 1
    cache.put(3, 0b101, "out")
    with pytest.raises(CacheConflict):
        cache.put(3, 0b101, "different")
    assert cache.keys() == [(3, 0b101)]


# ---------------------------------------------------------------------------
# layered memoized execution


def test_memoized_run_execution_counts(ref_graph, ref_viable, ref_runner):
    run = layered_run(ref_graph, ref_viable, ref_runner, FEATURES)
    assert run.counters.agent_executions == 73
    assert len(run.cache) == 73
    # upstream reads: layer 1 pulls 3 * (3 + 6 + 3) / ... = 36, layer 2 pulls
    # 84 across its 49 configurations, plus 49 sink-output reads = 169.
    assert run.counters.cache_hits == 169
    assert len(run.sink_outputs) == 49


def test_memoized_outputs_match_cache_free_replay(ref_graph, ref_viable, ref_runner):
    run = layered_run(ref_graph, ref_viable, ref_runner, FEATURES)
    for c in ref_viable:
        replay = replay_coalition(ref_graph, c, ref_runner, FEATURES)
        assert run.sink_outputs[c] == replay.sink_output


def test_parallel_execution_is_equivalent(ref_graph, ref_viable, ref_runner):
    serial = layered_run(ref_graph, ref_viable, ref_runner, FEATURES)
    threaded = layered_run(ref_graph, ref_viable, ref_runner, FEATURES, parallel=4)
    assert threaded.sink_outputs == serial.sink_outputs
    assert threaded.counters.agent_executions == serial.counters.agent_executions


def test_determinism_verification_passes_for_pure_agents(ref_graph, ref_viable, ref_runner):
    run = layered_run(
        ref_graph, ref_viable, ref_runner, FEATURES, verify_determinism=True
    )
    assert run.counters.agent_executions == 73


def test_determinism_verification_catches_impure_agents(ref_graph, ref_viable):
    ticks = itertools.count()

    def flaky(agent, upstream, external):
        return next(ticks)

    with pytest.raises(NonDeterminismDetected):
        layered_run(
            ref_graph, ref_viable, flaky, FEATURES, verify_determinism=True
        )


def test_agent_failure_is_wrapped(ref_graph, ref_viable):
    def broken(agent, upstream, external):
        raise ValueError("boom")

    with pytest.raises(ExecutorFailure):
        layered_run(ref_graph, ref_viable, broken, FEATURES)


def test_executions_stay_inside_declared_configurations(ref_graph, ref_viable):
    """Every execution serves some viable coalition containing the agent,
    and inputs come only from declared predecessors inside its configuration."""
    seen = []

    def recorder(agent, upstream, external):
        seen.append((agent, frozenset(upstream)))
        return len(upstream)

    layered_run(ref_graph, ref_viable, recorder, FEATURES)
    legal = set()
    for c in ref_viable:
        for agent in c:
            layer = ref_graph.layer_of[agent]
            cfg = upstream_configuration(ref_graph, c, layer)
            legal.add((agent, frozenset(set(cfg) & set(ref_graph.preds[agent]))))
    assert set(seen) <= legal


# ---------------------------------------------------------------------------
# game wrappers


def test_memoized_game_matches_replay_game(ref_graph, ref_viable, ref_runner):
    memo = MemoizedGame(
        ref_graph, ref_viable, ref_runner, signed_decision_value, FEATURES
    )
    replay = ReplayGame(ref_graph, ref_runner, signed_decision_value, FEATURES)
    dag = shapley_dag(ref_graph, memo, viable=ref_viable)
    exact = shapley_exact(replay, ref_graph.n)
    assert max(abs(a - b) for a, b in zip(dag.values, exact.values)) < 1e-9
    assert dag.counters.agent_executions == 73
    assert exact.counters.agent_executions == 448


def test_replay_game_values_nonviable_as_zero(ref_graph, ref_runner):
    replay = ReplayGame(ref_graph, ref_runner, signed_decision_value, FEATURES)
    assert replay(Coalition.empty()) == 0.0
    assert replay(Coalition.of([0, 1])) == 0.0


# ---------------------------------------------------------------------------
# cost model


def test_predicted_cost_reference_values():
    cost = predicted_cost([3, 3, 1])
    assert cost.unique_configs == (1, 7, 49)
    assert cost.total_executions == 73
    assert cost.viable_coalitions == 49


@pytest.mark.parametrize(
    "sizes,configs,total,viable",
    [
        ([2, 2, 1], (1, 3, 9), 17, 9),
        ([4, 2, 1], (1, 15, 45), 79, 45),
        ([3, 4, 1], (1, 7, 105), 136, 105),
        ([2, 1], (1, 3), 5, 3),
        ([1], (1,), 1, 1),
    ],
)
def test_predicted_cost_small_topologies(sizes, configs, total, viable):
    cost = predicted_cost(sizes)
    assert cost.unique_configs == configs
    assert cost.total_executions == total
    assert cost.viable_coalitions == viable


def test_predicted_cost_rejects_bad_shapes():
    with pytest.raises(InvalidSize):
        predicted_cost([])
    with pytest.raises(InvalidSize):
        predicted_cost([3, 0, 1])
    with pytest.raises(InvalidSize):
        predicted_cost([2, 1], mandatory=[True])


def test_predicted_cost_matches_measured_counter():
    for sizes in ([2, 2, 1], [3, 3, 1]):
        g = layered_graph(sizes)
        viable = enumerate_viable(g)
        runner = system_runner(build_system(g, seed=5))
        run = layered_run(g, viable, runner, FEATURES)
        cost = predicted_cost(sizes)
        assert run.counters.agent_executions == cost.total_executions
        assert len(viable) == cost.viable_coalitions


def test_classical_cost_values():
    assert classical_cost(7) == (128, 448)
    assert classical_cost(1) == (2, 1)
    assert classical_cost(3) == (8, 12)
    with pytest.raises(InvalidSize):
        classical_cost(0)


def test_reference_execution_reduction_fraction():
    memoized = predicted_cost([3, 3, 1]).total_executions
    _, classical = classical_cost(7)
    reduction = 1 - memoized / classical
    assert abs(reduction - 0.837) < 0.0005


# ---------------------------------------------------------------------------
# formatting


def test_format_attribution_lists_agents_and_cost(ref_graph, ref_viable, ref_runner):
    memo = MemoizedGame(
        ref_graph, ref_viable, ref_runner, signed_decision_value, FEATURES
    )
    result = shapley_dag(ref_graph, memo, viable=ref_viable)
    text = format_attribution(ref_graph, result)
    for name in ref_graph.names:
        assert name in text
    assert "agent_executions=73" in text


def test_format_attribution_table_reports_reduction(ref_graph, ref_viable, ref_runner):
    memo = MemoizedGame(
        ref_graph, ref_viable, ref_runner, signed_decision_value, FEATURES
    )
    replay = ReplayGame(ref_graph, ref_runner, signed_decision_value, FEATURES)
    results = {
        "dag": shapley_dag(ref_graph, memo, viable=ref_viable),
        "exact": shapley_exact(replay, ref_graph.n),
    }
    text = format_attribution_table(ref_graph, results)
    assert "execution reduction: 83.7%" in text
    assert "TRA" in text
