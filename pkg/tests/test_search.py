"""Tests for reward, frontiers, controllers and the search loop."""

import math

import numpy as np
import pytest

from src.errors import BatchRejectedError, LatencyLookupError, ResumeMismatchError, RewardDomainError
from src.cost import LatencyTable
from src.evaluator import Evaluation, SurrogateEvaluator, SurrogateSpec
from src.history import Candidate, HistoryLog
from src.search import (
    CandidateCoster,
    EvolutionController,
    Frontier,
    PolicyConfig,
    PolicyGradientController,
    PolicyState,
    RandomController,
    RewardConfig,
    SearchConfig,
    controller_update,
    evaluate_candidate,
    pareto_frontier,
    reward,
    run_search,
    select_at_latency,
    sweep_repeats,
)
from src.spaces import Genome, sample_uniform, token_schema

W = RewardConfig(w=-0.3)


def _candidate(i, latency, quality, status="ok"):
    return Candidate(
        candidate_id=f"c{i}",
        step=i,
        genome=(0,),
        quality=quality if status == "ok" else None,
        latency_ms=latency,
        reward=quality * latency**-0.3 if status == "ok" else None,
        status=status,
    )


def _dominance_oracle(latency, quality):
    """Indices no other point dominates; exact duplicates keep the first."""
    keep = []
    n = len(latency)
    for start in range(0, n, 500):
        lat = latency[start : start + 500, None]
        q = quality[start : start + 500, None]
        dominated = (
            (latency[None, :] <= lat)
            & (quality[None, :] >= q)
            & ((latency[None, :] < lat) | (quality[None, :] > q))
        ).any(axis=1)
        keep.extend(int(i) + start for i in np.flatnonzero(~dominated))
    return set(keep)


def _config(**overrides):
    values = dict(
        space="mnasfpn",
        budget=40,
        batch_size=10,
        controller="random",
        seed=1,
        repeats=1,
        parallelism=1,
        surrogate=SurrogateSpec(seed=3),
    )
    values.update(overrides)
    return SearchConfig(**values)


@pytest.mark.unit
class TestReward:
    """Soft-constrained latency reward."""

    def test_reference_value(self):
        """Quality 0.25 at 180 ms."""
        value = reward(0.25, 180.0, W)
        assert value == pytest.approx(0.25 * 180.0**-0.3, abs=1e-12)
        assert abs(value - 0.05264) < 1e-5

    def test_monotone(self):
        """Higher quality helps, higher latency hurts."""
        rng = np.random.default_rng(0)
        q = rng.uniform(0.01, 1.0, size=(100_000, 2))
        lat = rng.uniform(50.0, 500.0, size=(100_000, 2))
        for (q1, q2), (l1, l2) in zip(q, lat):
            lo_q, hi_q = sorted((q1, q2))
            lo_l, hi_l = sorted((l1, l2))
            assert reward(hi_q, l1, W) >= reward(lo_q, l1, W)
            assert reward(q1, lo_l, W) >= reward(q1, hi_l, W)

    def test_argmax_survives_rescaling(self):
        """Scaling every latency by one factor keeps the best candidate."""
        rng = np.random.default_rng(1)
        for _ in range(1000):
            q = rng.uniform(0.0, 1.0, size=20)
            lat = rng.uniform(50.0, 500.0, size=20)
            scale = rng.uniform(0.1, 10.0)
            before = np.argmax([reward(a, b, W) for a, b in zip(q, lat)])
            after = np.argmax([reward(a, b * scale, W) for a, b in zip(q, lat)])
            assert before == after

    @pytest.mark.parametrize("latency", [0.0, -3.0, math.inf])
    def test_bad_latency(self, latency):
        """Latency must be positive and finite."""
        with pytest.raises(RewardDomainError):
            reward(0.5, latency, W)

    def test_w_must_not_be_positive(self):
        """A positive exponent would reward slowness."""
        with pytest.raises(ValueError):
            RewardConfig(w=0.1)


@pytest.mark.unit
class TestParetoFrontier:
    """Non-dominated sets."""

    def test_small_example(self):
        """Dominated and failed candidates are dropped; order is by latency."""
        candidates = [
            _candidate(0, 100.0, 0.20),
            _candidate(1, 120.0, 0.18),
            _candidate(2, 130.0, 0.25),
            _candidate(3, 90.0, 0.10),
            _candidate(4, 80.0, 0.0, status="failed"),
        ]
        frontier = pareto_frontier(candidates)
        assert [c.candidate_id for c in frontier] == ["c3", "c0", "c2"]

    def test_duplicates_keep_first(self):
        """Identical points appear once."""
        frontier = pareto_frontier([_candidate(0, 100.0, 0.2), _candidate(1, 100.0, 0.2)])
        assert [c.candidate_id for c in frontier] == ["c0"]

    def test_empty(self):
        """No ok candidates, empty frontier."""
        assert len(pareto_frontier([])) == 0

    def test_matches_oracle(self):
        """Equal to the quadratic dominance check on random sets."""
        rng = np.random.default_rng(2)
        for _ in range(5):
            latency = rng.uniform(100.0, 300.0, size=10_000)
            quality = rng.uniform(0.0, 1.0, size=10_000)
            candidates = [_candidate(i, l, q) for i, (l, q) in enumerate(zip(latency, quality))]
            frontier = pareto_frontier(candidates)
            assert {int(c.candidate_id[1:]) for c in frontier} == _dominance_oracle(latency, quality)
            lat = [c.latency_ms for c in frontier]
            qual = [c.quality for c in frontier]
            assert lat == sorted(set(lat)) and qual == sorted(set(qual))

    @pytest.mark.slow
    def test_matches_oracle_many_sets(self):
        """The oracle check over a hundred large random sets."""
        rng = np.random.default_rng(3)
        for _ in range(100):
            latency = rng.uniform(100.0, 300.0, size=10_000)
            quality = rng.uniform(0.0, 1.0, size=10_000)
            candidates = [_candidate(i, l, q) for i, (l, q) in enumerate(zip(latency, quality))]
            frontier = pareto_frontier(candidates)
            assert {int(c.candidate_id[1:]) for c in frontier} == _dominance_oracle(latency, quality)


@pytest.mark.unit
class TestSelectAtLatency:
    """Picking frontier members under latency targets."""

    def test_targets(self):
        """Best member at or under each target, None when nothing fits."""
        frontier = Frontier((_candidate(0, 150.0, 0.1), _candidate(1, 170.0, 0.2), _candidate(2, 180.0, 0.3)))
        picks = select_at_latency(frontier, [140.0, 166.0, 173.0, 180.0, 999.0])
        assert [p.candidate_id if p else None for p in picks] == [None, "c0", "c1", "c2", "c2"]


@pytest.mark.unit
class TestControllerUpdate:
    """Clipped policy-gradient updates."""

    def _batch(self, space, rewards, seed=0):
        return [(sample_uniform(space, seed + i), r) for i, r in enumerate(rewards)]

    def test_zero_learning_rate(self, mnasfpn_space):
        """A zero step leaves the distribution unchanged."""
        state = PolicyState.uniform(mnasfpn_space)
        new = controller_update(state, self._batch(mnasfpn_space, [0.1, 0.3, 0.2]), PolicyConfig(learning_rate=0.0))
        for old, updated in zip(state.probabilities(), new.probabilities()):
            np.testing.assert_allclose(old, updated)
        assert new.updates == 1

    def test_distributions_stay_valid(self, mnasfpn_space):
        """Every slot distribution still sums to one."""
        state = PolicyState.uniform(mnasfpn_space)
        for step in range(5):
            batch = self._batch(mnasfpn_space, list(np.linspace(0.0, 1.0, 8)), seed=step * 10)
            state = controller_update(state, batch, PolicyConfig(learning_rate=1.0))
        for p in state.probabilities():
            assert p.sum() == pytest.approx(1.0)
            assert (p > 0).all()

    def test_rewarded_genome_becomes_likelier(self, mnasfpn_space):
        """Repeated positive advantage never lowers a genome's probability."""
        genome = sample_uniform(mnasfpn_space, 0)
        state = PolicyState(PolicyState.uniform(mnasfpn_space).logits, baseline=0.0)
        config = PolicyConfig(learning_rate=0.5, entropy_weight=0.0)
        previous = state.log_prob(genome)
        for _ in range(10):
            state = controller_update(state, [(genome, 1.0)] * 4, config)
            current = state.log_prob(genome)
            assert current >= previous - 1e-12
            previous = current
        assert previous > PolicyState.uniform(mnasfpn_space).log_prob(genome)

    def test_mixed_rewards_around_baseline(self, mnasfpn_space):
        """Above-baseline genomes gain probability, below-baseline ones lose it."""
        high = sample_uniform(mnasfpn_space, 0)
        slots = token_schema(mnasfpn_space).slots
        low = Genome(tuple((t + 1) % s.choices for t, s in zip(high.tokens, slots)))
        state = PolicyState(PolicyState.uniform(mnasfpn_space).logits, baseline=0.5)
        config = PolicyConfig(learning_rate=0.5, entropy_weight=0.0)
        new = controller_update(state, [(high, 0.9), (low, 0.1)], config)
        assert new.log_prob(high) > state.log_prob(high)
        assert new.log_prob(low) < state.log_prob(low)
        assert new.baseline == pytest.approx(0.5)

    def test_update_is_pure(self, mnasfpn_space):
        """The input state is not modified."""
        state = PolicyState(PolicyState.uniform(mnasfpn_space).logits, baseline=0.0)
        before = [theta.copy() for theta in state.logits]
        controller_update(state, self._batch(mnasfpn_space, [1.0, 2.0]), PolicyConfig())
        for old, theta in zip(before, state.logits):
            np.testing.assert_array_equal(old, theta)

    @pytest.mark.parametrize("bad", [math.nan, math.inf])
    def test_non_finite_reward(self, mnasfpn_space, bad):
        """Batches with non-finite rewards are rejected."""
        with pytest.raises(BatchRejectedError):
            controller_update(PolicyState.uniform(mnasfpn_space), self._batch(mnasfpn_space, [0.1, bad]), PolicyConfig())

    def test_empty_batch(self, mnasfpn_space):
        """Nothing to learn from."""
        with pytest.raises(BatchRejectedError):
            controller_update(PolicyState.uniform(mnasfpn_space), [], PolicyConfig())


@pytest.mark.unit
class TestControllers:
    """Proposal strategies."""

    def test_seeded_proposals(self, mnasfpn_space):
        """Same seed, same proposals, for every controller."""
        for make in (
            lambda: RandomController(mnasfpn_space, 4),
            lambda: PolicyGradientController(mnasfpn_space, 4, PolicyConfig()),
            lambda: EvolutionController(mnasfpn_space, 4, population_size=5, tournament_size=2),
        ):
            assert make().propose(6) == make().propose(6)

    def test_proposals_fit_schema(self, mnasfpn_space):
        """Policy samples are valid genomes."""
        slots = token_schema(mnasfpn_space).slots
        for genome in PolicyGradientController(mnasfpn_space, 0, PolicyConfig()).propose(20):
            assert all(0 <= t < s.choices for t, s in zip(genome.tokens, slots))

    def test_evolution_mutates_one_slot(self, mnasfpn_space):
        """Once the population is full, children differ from a member in exactly one slot."""
        controller = EvolutionController(mnasfpn_space, 0, population_size=4, tournament_size=2)
        parents = controller.propose(4)
        controller.observe(parents, [0.1, 0.2, 0.3, 0.4])
        for child in controller.propose(10):
            distances = [sum(a != b for a, b in zip(child.tokens, p.tokens)) for p in parents]
            assert min(distances) == 1

    def test_evolution_retires_oldest(self, mnasfpn_space):
        """The population keeps the newest members only."""
        controller = EvolutionController(mnasfpn_space, 0, population_size=3, tournament_size=2)
        genomes = controller.propose(5)
        controller.observe(genomes, [0.1, 0.2, None, 0.3, 0.4])
        assert [g for g, _ in controller.population] == [genomes[1], genomes[3], genomes[4]]


class _FlakyEvaluator:
    """Fails every third candidate."""

    def __init__(self, inner):
        self.inner = inner

    def evaluate(self, graph, genome, candidate_id):
        if int(candidate_id.rsplit("-", 1)[1]) % 3 == 0:
            raise RuntimeError("trainer crashed")
        return self.inner.evaluate(graph, genome, candidate_id)


@pytest.mark.unit
class TestCandidateCosting:
    """Decoding, pricing and evaluating single candidates."""

    def test_latency_is_attached_to_evaluations(self, mnasfpn_space, mnasfpn_lut, surrogate):
        """The cost-model latency travels with the evaluation, failed or not."""
        coster = CandidateCoster(mnasfpn_space, mnasfpn_lut, 1, 320)
        genome = sample_uniform(mnasfpn_space, 4)
        graph, latency_ms = coster(genome)
        evaluation = evaluate_candidate(surrogate, graph, genome, "c0", latency_ms)
        assert evaluation.latency_ms == latency_ms
        assert evaluation.quality == surrogate.evaluate(graph, genome, "c0").quality
        failed = evaluate_candidate(_FlakyEvaluator(surrogate), graph, genome, "s0-000003", latency_ms)
        assert (failed.status, failed.latency_ms) == ("failed", latency_ms)

    def test_cache_holds_latencies_only(self, mnasfpn_space, mnasfpn_lut):
        """Repeated genomes reuse their latency; no graph is retained."""
        coster = CandidateCoster(mnasfpn_space, mnasfpn_lut, 2, 320)
        genomes = [sample_uniform(mnasfpn_space, seed) for seed in (1, 2, 1)]
        results = [coster(g) for g in genomes]
        assert results[0][1] == results[2][1]
        assert results[0][0] == results[2][0]
        assert set(coster._latencies) == {genomes[0].tokens, genomes[1].tokens}
        assert all(isinstance(v, float) for v in coster._latencies.values())


@pytest.mark.integration
class TestRunSearch:
    """The full sample, cost, evaluate, update loop."""

    def test_budget_and_frontier(self, mnasfpn_lut):
        """Exactly budget candidates; frontier drawn from them."""
        result = run_search(_config(), lut=mnasfpn_lut)
        assert len(result.history) == 40
        assert [c.step for c in result.history] == list(range(40))
        ids = {c.candidate_id for c in result.history}
        assert all(c.candidate_id in ids for c in result.frontier)
        assert all(c.latency_ms > 100.0 for c in result.history)

    @pytest.mark.parametrize("controller", ["random", "policy-gradient", "evolution"])
    def test_identical_history_files(self, tmp_path, mnasfpn_lut, controller):
        """Same seed, byte-identical history."""
        paths = [tmp_path / "a.jsonl", tmp_path / "b.jsonl"]
        for path in paths:
            run_search(
                _config(controller=controller, history_path=path, population_size=10, tournament_size=3),
                lut=mnasfpn_lut,
            )
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_parallel_matches_serial(self, tmp_path, mnasfpn_lut):
        """Worker threads do not change results or their order."""
        serial = run_search(_config(history_path=tmp_path / "s.jsonl"), lut=mnasfpn_lut)
        parallel = run_search(_config(history_path=tmp_path / "p.jsonl", parallelism=4), lut=mnasfpn_lut)
        assert serial.history == parallel.history

    @pytest.mark.parametrize("controller", ["policy-gradient", "evolution"])
    def test_resume_matches_uninterrupted(self, tmp_path, mnasfpn_lut, controller):
        """A search stopped after two batches and resumed ends where a full run ends."""
        full = tmp_path / "full.jsonl"
        partial = tmp_path / "partial.jsonl"
        extra = dict(controller=controller, population_size=10, tournament_size=3)
        run_search(_config(history_path=full, **extra), lut=mnasfpn_lut)
        run_search(_config(history_path=partial, budget=20, **extra), lut=mnasfpn_lut)
        resumed = run_search(_config(history_path=partial, **extra), lut=mnasfpn_lut)
        assert partial.read_bytes() == full.read_bytes()
        assert len(resumed.history) == 40

    def test_resume_after_torn_write(self, tmp_path, mnasfpn_lut):
        """A half-written last line is dropped and re-evaluated."""
        full = tmp_path / "full.jsonl"
        torn = tmp_path / "torn.jsonl"
        run_search(_config(history_path=full), lut=mnasfpn_lut)
        lines = full.read_text().splitlines(keepends=True)
        torn.write_text("".join(lines[:15]) + lines[15][:30])
        run_search(_config(history_path=torn), lut=mnasfpn_lut)
        assert torn.read_bytes() == full.read_bytes()

    def test_resume_with_other_seed(self, tmp_path, mnasfpn_lut):
        """Replaying a history under a different seed is refused."""
        path = tmp_path / "h.jsonl"
        run_search(_config(history_path=path, budget=20), lut=mnasfpn_lut)
        with pytest.raises(ResumeMismatchError):
            run_search(_config(history_path=path, seed=2), lut=mnasfpn_lut)

    def test_failures_are_recorded(self, mnasfpn_space, mnasfpn_lut):
        """Evaluator errors become failed records and the search keeps going."""
        evaluator = _FlakyEvaluator(SurrogateEvaluator(SurrogateSpec(seed=3), mnasfpn_space))
        result = run_search(_config(controller="policy-gradient"), evaluator=evaluator, lut=mnasfpn_lut)
        failed = [c for c in result.history if not c.ok]
        assert len(failed) == 14
        assert all(c.reward is None and "trainer crashed" in c.message for c in failed)
        assert all(c.ok for c in result.frontier)

    def test_lut_miss_aborts(self):
        """Missing latency entries stop the search."""
        with pytest.raises(LatencyLookupError):
            run_search(_config(), lut=LatencyTable({}, 100.0))

    def test_batch_larger_than_budget(self):
        """Batch size may not exceed the budget."""
        with pytest.raises(ValueError):
            _config(budget=5, batch_size=10)


@pytest.mark.integration
class TestSweepRepeats:
    """Re-costing candidates at several repeat counts."""

    def test_sweep(self, mnasfpn_space, mnasfpn_lut, surrogate):
        """Latency grows with repeats; a single repeat reproduces the search latency."""
        base = run_search(_config(budget=10, batch_size=10), lut=mnasfpn_lut).history
        result = sweep_repeats(base, [1, 3], mnasfpn_space, surrogate, mnasfpn_lut, W)
        assert len(result.candidates) == 20
        by_id = {c.candidate_id: c for c in result.candidates}
        for c in base:
            one, three = by_id[f"{c.candidate_id}-x1"], by_id[f"{c.candidate_id}-x3"]
            assert one.latency_ms == c.latency_ms
            assert three.latency_ms > one.latency_ms
            assert three.repeats == 3
        assert all(m in result.candidates for m in result.frontier)

    def test_empty_repeats(self, mnasfpn_space, mnasfpn_lut, surrogate):
        """At least one repeat count is needed."""
        with pytest.raises(ValueError):
            sweep_repeats([], [], mnasfpn_space, surrogate, mnasfpn_lut, W)


@pytest.mark.slow
@pytest.mark.timeout(600)
class TestControllerLearning:
    """Policy gradient against random search on the planted-optimum surrogate."""

    def test_policy_gradient_beats_random(self, mnasfpn_lut):
        """Best reward over 2000 samples is higher in mean over 20 paired seeds."""
        from scipy.stats import ttest_rel

        best = {"policy-gradient": [], "random": []}
        for seed in range(20):
            for controller in best:
                result = run_search(
                    _config(controller=controller, seed=seed, budget=2000, batch_size=20),
                    lut=mnasfpn_lut,
                )
                best[controller].append(max(c.reward for c in result.history if c.ok))
        assert np.mean(best["policy-gradient"]) > np.mean(best["random"])
        assert ttest_rel(best["policy-gradient"], best["random"], alternative="greater").pvalue < 0.05
