"""Latency-aware architecture search: reward, controllers, search loop and frontiers."""

import bisect
import logging
import math
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Optional, Protocol, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator

from src.arch import NetworkPlan, decode_genome
from src.config import settings
from src.cost import LatencyModel, LatencyTable, estimate_latency, synth_lut_for_space
from src.errors import BatchRejectedError, ConfigurationError, ResumeMismatchError, RewardDomainError
from src.evaluator import (
    Evaluation,
    Evaluator,
    ExchangeConfig,
    ExternalEvaluator,
    SurrogateEvaluator,
    SurrogateSpec,
)
from src.graph import ResolvedGraph, expand_network
from src.history import Candidate, HistoryLog
from src.spaces import Genome, SearchSpaceDef, resolve_space, sample_with, token_schema

logger = logging.getLogger(__name__)

ControllerKind = Literal["policy-gradient", "random", "evolution"]


# Reward


class RewardConfig(BaseModel):
    w: float = Field(default_factory=lambda: settings.reward_w, le=0)


def reward(quality: float, latency_ms: float, config: RewardConfig) -> float:
    """Soft-constrained trade-off ``quality * latency_ms ** w``."""
    if not latency_ms > 0 or not math.isfinite(latency_ms):
        raise RewardDomainError(f"latency must be positive and finite, got {latency_ms}")
    return quality * latency_ms**config.w


# Pareto frontier


@dataclass(frozen=True)
class Frontier:
    """Non-dominated candidates, latency and quality both strictly increasing."""

    members: Tuple[Candidate, ...] = ()

    def __iter__(self):
        return iter(self.members)

    def __len__(self) -> int:
        return len(self.members)

    @property
    def latencies(self) -> List[float]:
        return [c.latency_ms for c in self.members]


def pareto_frontier(candidates: Sequence[Candidate]) -> Frontier:
    """Latency-minimizing, quality-maximizing frontier of the ok candidates.

    Exact duplicates keep the first one seen.
    """
    ranked = sorted(
        ((i, c) for i, c in enumerate(candidates) if c.ok),
        key=lambda ic: (ic[1].latency_ms, -ic[1].quality, ic[0]),
    )
    members: List[Candidate] = []
    best = -math.inf
    for _, c in ranked:
        if c.quality > best:
            members.append(c)
            best = c.quality
    return Frontier(tuple(members))


def select_at_latency(frontier: Frontier, targets: Sequence[float]) -> List[Optional[Candidate]]:
    """Best frontier member with latency at or under each target (None if none fits)."""
    latencies = frontier.latencies
    picked: List[Optional[Candidate]] = []
    for target in targets:
        i = bisect.bisect_right(latencies, target)
        picked.append(frontier.members[i - 1] if i > 0 else None)
    return picked


# Policy-gradient controller


class PolicyConfig(BaseModel):
    learning_rate: float = Field(default_factory=lambda: settings.learning_rate, ge=0)
    entropy_weight: float = Field(default_factory=lambda: settings.entropy_weight, ge=0)
    clip_epsilon: float = Field(default_factory=lambda: settings.clip_epsilon, gt=0)
    baseline_decay: float = Field(default_factory=lambda: settings.baseline_decay, ge=0, lt=1)
    epochs: int = Field(default_factory=lambda: settings.ppo_epochs, ge=1)


@dataclass(frozen=True)
class PolicyState:
    """Independent categorical distribution per slot, stored as logits."""

    logits: Tuple[np.ndarray, ...]
    baseline: Optional[float] = None
    updates: int = 0

    @classmethod
    def uniform(cls, space: SearchSpaceDef) -> "PolicyState":
        return cls(tuple(np.zeros(slot.choices) for slot in token_schema(space).slots))

    def probabilities(self) -> List[np.ndarray]:
        return [_log_softmax(theta)[1] for theta in self.logits]

    def log_prob(self, genome: Genome) -> float:
        return float(
            sum(_log_softmax(theta)[0][t] for theta, t in zip(self.logits, genome.tokens))
        )


def _log_softmax(theta: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    z = theta - theta.max()
    total = np.exp(z).sum()
    log_p = z - np.log(total)
    return log_p, np.exp(log_p)


def controller_update(
    state: PolicyState, batch: Sequence[Tuple[Genome, float]], config: PolicyConfig
) -> PolicyState:
    """One clipped-surrogate policy-gradient step over a batch of (genome, reward).

    Returns a new state; ``state`` is left untouched.
    """
    if not batch:
        raise BatchRejectedError("cannot update the policy from an empty batch")
    rewards = np.array([r for _, r in batch], dtype=float)
    if not np.all(np.isfinite(rewards)):
        raise BatchRejectedError(f"batch contains non-finite rewards: {rewards.tolist()}")
    tokens = np.array([g.tokens for g, _ in batch], dtype=np.int64)
    if tokens.ndim != 2 or tokens.shape[1] != len(state.logits):
        raise BatchRejectedError(
            f"genomes have {tokens.shape[-1]} tokens, policy has {len(state.logits)} slots"
        )

    baseline = float(rewards.mean()) if state.baseline is None else state.baseline
    advantages = rewards - baseline
    spread = advantages.std()
    if len(advantages) > 1 and spread > 1e-12:
        advantages = advantages / spread

    n = len(batch)
    eps = config.clip_epsilon
    old_log_probs = [_log_softmax(theta)[0] for theta in state.logits]
    logits = [theta.astype(float, copy=True) for theta in state.logits]
    for _ in range(config.epochs):
        for s, theta in enumerate(logits):
            log_p, p = _log_softmax(theta)
            chosen = tokens[:, s]
            ratio = np.exp(log_p[chosen] - old_log_probs[s][chosen])
            # Clipped terms contribute no gradient
            active = ((advantages >= 0) & (ratio <= 1 + eps)) | ((advantages < 0) & (ratio >= 1 - eps))
            weight = np.where(active, advantages * ratio, 0.0)
            grad = (np.bincount(chosen, weights=weight, minlength=len(theta)) - weight.sum() * p) / n
            if config.entropy_weight > 0:
                entropy = -float((p * log_p).sum())
                grad += config.entropy_weight * (-p * (log_p + entropy))
            theta += config.learning_rate * grad

    new_baseline = config.baseline_decay * baseline + (1 - config.baseline_decay) * float(rewards.mean())
    return PolicyState(tuple(logits), new_baseline, state.updates + 1)


class Controller(Protocol):
    def propose(self, count: int) -> List[Genome]: ...

    def observe(self, genomes: Sequence[Genome], rewards: Sequence[Optional[float]]) -> None: ...


class RandomController:
    """Uniform sampling baseline."""

    def __init__(self, space: SearchSpaceDef, seed: int):
        self.space = space
        self.rng = np.random.default_rng(seed)

    def propose(self, count: int) -> List[Genome]:
        return [sample_with(self.space, self.rng) for _ in range(count)]

    def observe(self, genomes: Sequence[Genome], rewards: Sequence[Optional[float]]) -> None:
        pass


class PolicyGradientController:
    def __init__(self, space: SearchSpaceDef, seed: int, config: PolicyConfig):
        self.config = config
        self.state = PolicyState.uniform(space)
        self.rng = np.random.default_rng(seed)

    def propose(self, count: int) -> List[Genome]:
        columns = [
            self.rng.choice(len(p), size=count, p=p) for p in self.state.probabilities()
        ]
        return [Genome(tuple(int(col[i]) for col in columns)) for i in range(count)]

    def observe(self, genomes: Sequence[Genome], rewards: Sequence[Optional[float]]) -> None:
        batch = [(g, r) for g, r in zip(genomes, rewards) if r is not None]
        if not batch:
            logger.warning("Skipping policy update: every candidate in the batch failed")
            return
        self.state = controller_update(self.state, batch, self.config)


class EvolutionController:
    """Aging evolution: tournament parent, single-slot mutation, oldest member retired."""

    def __init__(self, space: SearchSpaceDef, seed: int, population_size: int, tournament_size: int):
        if not 1 <= tournament_size <= population_size:
            raise ConfigurationError(
                f"tournament_size must be in [1, population_size], got {tournament_size}"
            )
        self.space = space
        self.slots = token_schema(space).slots
        self.population_size = population_size
        self.tournament_size = tournament_size
        self.population: deque = deque(maxlen=population_size)
        self.rng = np.random.default_rng(seed)

    def _mutate(self, parent: Genome) -> Genome:
        tokens = list(parent.tokens)
        s = int(self.rng.integers(len(tokens)))
        # Shift by 1..choices-1 so the mutated token always differs
        tokens[s] = (tokens[s] + 1 + int(self.rng.integers(self.slots[s].choices - 1))) % self.slots[s].choices
        return Genome(tuple(tokens))

    def propose(self, count: int) -> List[Genome]:
        if len(self.population) < self.population_size:
            return [sample_with(self.space, self.rng) for _ in range(count)]
        members = list(self.population)
        children = []
        for _ in range(count):
            picks = self.rng.choice(len(members), size=self.tournament_size, replace=False)
            parent = max((members[i] for i in picks), key=lambda m: m[1])[0]
            children.append(self._mutate(parent))
        return children

    def observe(self, genomes: Sequence[Genome], rewards: Sequence[Optional[float]]) -> None:
        for g, r in zip(genomes, rewards):
            if r is not None:
                self.population.append((g, r))


# Search loop


class SearchConfig(BaseModel):
    space: str = Field(default_factory=lambda: settings.default_space)
    budget: int = Field(default_factory=lambda: settings.budget, ge=1)
    batch_size: int = Field(default_factory=lambda: settings.batch_size, ge=1)
    controller: ControllerKind = Field(default_factory=lambda: settings.controller)
    seed: int = 0
    reward: RewardConfig = Field(default_factory=RewardConfig)
    policy: PolicyConfig = Field(default_factory=PolicyConfig)
    population_size: int = Field(default_factory=lambda: settings.population_size, ge=1)
    tournament_size: int = Field(default_factory=lambda: settings.tournament_size, ge=1)
    repeats: int = Field(default_factory=lambda: settings.repeats, ge=1)
    input_image_size: int = Field(default_factory=lambda: settings.input_image_size, gt=0)
    parallelism: int = Field(default_factory=lambda: settings.parallelism, ge=1)
    evaluator: Literal["surrogate", "external"] = "surrogate"
    surrogate: SurrogateSpec = Field(default_factory=SurrogateSpec)
    exchange_dir: Optional[Path] = None
    history_path: Optional[Path] = None
    lut_path: Optional[Path] = None

    @model_validator(mode="after")
    def validate_budget(self) -> "SearchConfig":
        if self.batch_size > self.budget:
            raise ValueError(f"batch_size ({self.batch_size}) must not exceed budget ({self.budget})")
        if self.evaluator == "external" and self.exchange_dir is None:
            raise ValueError("the external evaluator needs an exchange_dir")
        return self


@dataclass
class SearchResult:
    history: List[Candidate]
    frontier: Frontier


def make_controller(config: SearchConfig, space: SearchSpaceDef) -> Controller:
    if config.controller == "random":
        return RandomController(space, config.seed)
    if config.controller == "evolution":
        return EvolutionController(space, config.seed, config.population_size, config.tournament_size)
    return PolicyGradientController(space, config.seed, config.policy)


def make_evaluator(config: SearchConfig, space: SearchSpaceDef) -> Evaluator:
    if config.evaluator == "external":
        return ExternalEvaluator(ExchangeConfig(exchange_dir=config.exchange_dir))
    return SurrogateEvaluator(config.surrogate, space)


@dataclass
class CandidateCoster:
    """Decode, expand and price genomes.

    Latencies are memoized per genome; graphs are rebuilt on every call so the
    cache stays a few floats per distinct genome.
    """

    space: SearchSpaceDef
    lut: LatencyTable
    repeats: int
    input_image_size: int
    _latencies: Dict[Tuple[int, ...], float] = field(default_factory=dict)

    def graph(self, genome: Genome) -> ResolvedGraph:
        cell = decode_genome(genome, self.space, self.input_image_size)
        plan = NetworkPlan(
            cell,
            repeats=self.repeats,
            input_image_size=self.input_image_size,
            space_flavor=self.space.cell_flavor,
            sdo_enabled=self.space.sdo_enabled,
        )
        return expand_network(plan)

    def __call__(self, genome: Genome) -> Tuple[ResolvedGraph, float]:
        graph = self.graph(genome)
        latency_ms = self._latencies.get(genome.tokens)
        if latency_ms is None:
            latency_ms = estimate_latency(graph, self.lut).latency_ms
            self._latencies[genome.tokens] = latency_ms
        return graph, latency_ms


def evaluate_candidate(
    evaluator: Evaluator, graph: ResolvedGraph, genome: Genome, candidate_id: str, latency_ms: float
) -> Evaluation:
    """Ask ``evaluator`` for quality and attach the cost-model latency.

    Evaluator exceptions become failed evaluations.
    """
    try:
        evaluation = evaluator.evaluate(graph, genome, candidate_id)
    except Exception as e:
        logger.error(
            f"Evaluation of candidate '{candidate_id}' failed: {e}",
            extra={"candidate_id": candidate_id},
            exc_info=True,
        )
        evaluation = Evaluation.failed(f"{type(e).__name__}: {e}")
    return evaluation.with_latency(latency_ms)


def _to_candidate(
    candidate_id: str,
    step: int,
    genome: Genome,
    evaluation: Evaluation,
    repeats: int,
    seed: int,
    reward_config: RewardConfig,
) -> Candidate:
    if evaluation.status != "ok":
        return Candidate(
            candidate_id=candidate_id,
            step=step,
            genome=genome.tokens,
            latency_ms=evaluation.latency_ms,
            repeats=repeats,
            seed=seed,
            status="failed",
            message=evaluation.message,
        )
    return Candidate(
        candidate_id=candidate_id,
        step=step,
        genome=genome.tokens,
        quality=evaluation.quality,
        latency_ms=evaluation.latency_ms,
        reward=reward(evaluation.quality, evaluation.latency_ms, reward_config),
        repeats=repeats,
        seed=seed,
        message=evaluation.message,
    )


def default_lut(space: SearchSpaceDef, input_image_size: int) -> LatencyTable:
    return synth_lut_for_space(space, LatencyModel(), input_image_size)


def run_search(
    config: SearchConfig,
    evaluator: Optional[Evaluator] = None,
    lut: Optional[LatencyTable] = None,
) -> SearchResult:
    """Run the sample, cost, evaluate, update loop until the budget is spent.

    With ``config.history_path`` set, records already in the file are replayed
    through the controller instead of being evaluated again.
    """
    space = resolve_space(config.space)
    if lut is None:
        lut = LatencyTable.load(config.lut_path) if config.lut_path else default_lut(space, config.input_image_size)
    evaluator = evaluator or make_evaluator(config, space)
    controller = make_controller(config, space)
    coster = CandidateCoster(space, lut, config.repeats, config.input_image_size)

    log = HistoryLog(config.history_path)
    recorded = log.load(repair=True)
    if len(recorded) > config.budget:
        raise ResumeMismatchError(
            f"history holds {len(recorded)} candidates, more than the budget of {config.budget}"
        )
    if recorded:
        logger.info(
            f"Resuming search from {len(recorded)} recorded candidates",
            extra={"history": str(config.history_path), "recorded": len(recorded)},
        )

    start_time = time.time()
    history: List[Candidate] = []
    with log, ThreadPoolExecutor(max_workers=config.parallelism) as pool:
        step = 0
        while step < config.budget:
            count = min(config.batch_size, config.budget - step)
            genomes = controller.propose(count)
            batch: List[Optional[Candidate]] = [None] * count
            pending = []
            for offset, genome in enumerate(genomes):
                index = step + offset
                if index < len(recorded):
                    previous = recorded[index]
                    if previous.genome != genome.tokens:
                        raise ResumeMismatchError(
                            f"candidate {index} in the history does not match the replayed proposal; "
                            "was the search started with a different seed or configuration?"
                        )
                    batch[offset] = previous
                else:
                    graph, latency_ms = coster(genome)
                    pending.append((offset, index, genome, graph, latency_ms))

            evaluations = pool.map(
                lambda item: evaluate_candidate(
                    evaluator, item[3], item[2], f"s{config.seed}-{item[1]:06d}", item[4]
                ),
                pending,
            )
            for (offset, index, genome, _, _), evaluation in zip(pending, evaluations):
                candidate = _to_candidate(
                    f"s{config.seed}-{index:06d}",
                    index,
                    genome,
                    evaluation,
                    config.repeats,
                    config.seed,
                    config.reward,
                )
                log.append(candidate)
                batch[offset] = candidate

            controller.observe(genomes, [c.reward if c.ok else None for c in batch])
            history.extend(batch)
            step += count
            logger.debug(
                f"Search step {step}/{config.budget}",
                extra={"step": step, "best_reward": max((c.reward for c in history if c.ok), default=None)},
            )

    frontier = pareto_frontier(history)
    logger.info(
        f"Search finished: {len(history)} candidates, {len(frontier)} on the frontier "
        f"in {time.time() - start_time:.2f}s",
        extra={
            "candidates": len(history),
            "failed": sum(not c.ok for c in history),
            "frontier": len(frontier),
            "controller": config.controller,
        },
    )
    return SearchResult(history=history, frontier=frontier)


@dataclass
class SweepResult:
    candidates: List[Candidate]
    frontier: Frontier


def sweep_repeats(
    candidates: Sequence[Candidate],
    repeats_values: Sequence[int],
    space: SearchSpaceDef,
    evaluator: Evaluator,
    lut: LatencyTable,
    reward_config: Optional[RewardConfig] = None,
    input_image_size: int = 320,
) -> SweepResult:
    """Re-cost and re-evaluate each candidate at every repeat count; frontier of the union."""
    if not repeats_values:
        raise ConfigurationError("sweep needs at least one repeats value")
    reward_config = reward_config or RewardConfig()
    swept: List[Candidate] = []
    for repeats in repeats_values:
        coster = CandidateCoster(space, lut, repeats, input_image_size)
        for base in candidates:
            genome = Genome(tuple(base.genome))
            graph, latency_ms = coster(genome)
            candidate_id = f"{base.candidate_id}-x{repeats}"
            evaluation = evaluate_candidate(evaluator, graph, genome, candidate_id, latency_ms)
            swept.append(
                _to_candidate(
                    candidate_id, base.step, genome, evaluation, repeats, base.seed, reward_config
                )
            )
    logger.info(
        f"Swept {len(candidates)} candidates over repeats {list(repeats_values)}",
        extra={"candidates": len(swept)},
    )
    return SweepResult(candidates=swept, frontier=pareto_frontier(swept))
