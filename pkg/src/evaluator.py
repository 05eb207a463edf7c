"""Quality signals: a deterministic surrogate and a file-exchange protocol."""

import asyncio
import logging
import math
import os
import time
from pathlib import Path
from typing import List, Literal, Optional, Protocol, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from src.config import settings
from src.cost import total_madds
from src.errors import ConfigurationError, ExchangeError
from src.graph import ResolvedGraph, graph_to_json
from src.spaces import Genome, SearchSpaceDef, sample_uniform

logger = logging.getLogger(__name__)


class Evaluation(BaseModel):
    """Quality of one candidate (plays the role of proxy-task mAP)."""

    quality: Optional[float] = None
    # Filled in from the cost model by the search loop
    latency_ms: Optional[float] = None
    status: Literal["ok", "failed"] = "ok"
    message: str = ""

    @model_validator(mode="after")
    def validate_quality(self) -> "Evaluation":
        if self.status == "ok":
            if self.quality is None or not 0.0 <= self.quality <= 1.0:
                raise ValueError(f"quality must be in [0, 1] for ok evaluations, got {self.quality}")
        return self

    @classmethod
    def failed(cls, message: str) -> "Evaluation":
        return cls(quality=None, status="failed", message=message)

    def with_latency(self, latency_ms: float) -> "Evaluation":
        return self.model_copy(update={"latency_ms": latency_ms})


class Evaluator(Protocol):
    """Anything the search loop can ask for a quality score.

    Implementations must be safe to call from several worker threads.
    """

    def evaluate(self, graph: ResolvedGraph, genome: Genome, candidate_id: str) -> Evaluation: ...


class SurrogateSpec(BaseModel):
    """Weights of the synthetic quality function.

    quality = clamp(base + agreement_weight * agreement(g, g*)
                    + madds_weight * (1 - exp(-MAdds / madds_scale))
                    + resolution_weight * share of blocks at preferred_resolution
                    - overcapacity_weight * max(0, blocks - capacity_blocks))
    """

    model_config = ConfigDict(frozen=True)

    seed: int = 0
    # Planted optimum; sampled from the space with ``seed`` when omitted
    optimum: Optional[Tuple[int, ...]] = None
    base: float = 0.05
    agreement_weight: float = 0.6
    madds_weight: float = 0.1
    madds_scale: float = Field(2e8, gt=0)
    resolution_weight: float = 0.05
    preferred_resolution: int = 20
    overcapacity_weight: float = 0.02
    capacity_blocks: int = 3

    @field_validator(
        "base", "agreement_weight", "madds_weight", "resolution_weight", "overcapacity_weight"
    )
    @classmethod
    def validate_finite(cls, v: float) -> float:
        if not math.isfinite(v):
            raise ValueError("surrogate weights must be finite")
        return v


def surrogate_evaluate(
    graph: ResolvedGraph, genome: Genome, spec: SurrogateSpec, optimum: Optional[Genome] = None
) -> Evaluation:
    """Deterministic, seeded stand-in for proxy-task training.

    ``optimum`` overrides ``spec.optimum``; one of them must be set.
    """
    if optimum is None:
        if spec.optimum is None:
            raise ConfigurationError("surrogate needs a planted optimum genome")
        optimum = Genome(tuple(spec.optimum))
    if len(optimum.tokens) == len(genome.tokens) and genome.tokens:
        matches = sum(a == b for a, b in zip(genome.tokens, optimum.tokens))
        agreement = matches / len(genome.tokens)
    else:
        agreement = 0.0

    saturation = 1.0 - math.exp(-total_madds(graph) / spec.madds_scale)

    # Internal blocks of the first cell instance, identified by their depthwise convs
    internal = [n for n in graph.nodes if n.kind == "depthwise_conv" and n.block.startswith("r0/b")]
    preferred = (
        sum(n.out_resolution == spec.preferred_resolution for n in internal) / len(internal)
        if internal
        else 0.0
    )
    overcapacity = max(0, len(internal) - spec.capacity_blocks)

    score = (
        spec.base
        + spec.agreement_weight * agreement
        + spec.madds_weight * saturation
        + spec.resolution_weight * preferred
        - spec.overcapacity_weight * overcapacity
    )
    return Evaluation(quality=min(1.0, max(0.0, score)))


class SurrogateEvaluator:
    """Binds surrogate settings to a space, resolving the planted optimum once."""

    def __init__(self, spec: SurrogateSpec, space: SearchSpaceDef):
        self.spec = spec
        self.optimum = (
            Genome(tuple(spec.optimum)) if spec.optimum is not None else sample_uniform(space, spec.seed)
        )

    def evaluate(self, graph: ResolvedGraph, genome: Genome, candidate_id: str) -> Evaluation:
        return surrogate_evaluate(graph, genome, self.spec, self.optimum)


class ExchangeConfig(BaseModel):
    exchange_dir: Path
    timeout: float = Field(default_factory=lambda: settings.exchange_timeout, gt=0)
    poll_interval: float = Field(default_factory=lambda: settings.exchange_poll_interval, gt=0)


class ExchangeRequest(BaseModel):
    """Body of ``<id>.request``."""

    candidate_id: str
    genome: List[int]
    graph: str


def parse_response(text: str, candidate_id: str) -> Evaluation:
    """Parse ``key: value`` lines (candidate_id, quality, status, optional message)."""
    fields = {}
    for raw in text.splitlines():
        line = raw.strip()
        if not line:
            continue
        key, sep, value = line.partition(":")
        if not sep:
            return Evaluation.failed(f"malformed response line {line!r}")
        fields[key.strip()] = value.strip()

    if fields.get("candidate_id") != candidate_id:
        return Evaluation.failed(
            f"response is for candidate {fields.get('candidate_id')!r}, expected {candidate_id!r}"
        )
    status = fields.get("status", "ok")
    if status == "failed":
        return Evaluation.failed(fields.get("message", "trainer reported failure"))
    if status != "ok":
        return Evaluation.failed(f"unknown status {status!r}")
    try:
        quality = float(fields["quality"])
    except (KeyError, ValueError):
        return Evaluation.failed(f"response has no numeric quality: {fields.get('quality')!r}")
    try:
        return Evaluation(quality=quality, message=fields.get("message", ""))
    except ValidationError:
        return Evaluation.failed(f"quality {quality} out of range, must be in [0, 1]")


class ExternalEvaluator:
    """Hands candidates to an outside trainer through an exchange directory.

    Writes ``<id>.request`` and waits for ``<id>.response``. Files left under the
    same id by an earlier run are removed before the new request goes out.
    """

    def __init__(self, config: ExchangeConfig):
        self.config = config
        self.config.exchange_dir.mkdir(parents=True, exist_ok=True)

    def request_path(self, candidate_id: str) -> Path:
        return self.config.exchange_dir / f"{candidate_id}.request"

    def response_path(self, candidate_id: str) -> Path:
        return self.config.exchange_dir / f"{candidate_id}.response"

    def _clear_stale(self, candidate_id: str) -> None:
        for path in (self.response_path(candidate_id), self.request_path(candidate_id)):
            if path.exists():
                logger.warning(
                    f"Removing stale exchange file {path.name}",
                    extra={"candidate_id": candidate_id, "path": str(path)},
                )
                path.unlink(missing_ok=True)

    def _write_request(self, graph: ResolvedGraph, genome: Genome, candidate_id: str) -> None:
        body = ExchangeRequest(
            candidate_id=candidate_id, genome=list(genome.tokens), graph=graph_to_json(graph)
        )
        target = self.request_path(candidate_id)
        tmp = target.with_suffix(".request.tmp")
        tmp.write_text(body.model_dump_json(indent=2), encoding="utf-8")
        os.replace(tmp, target)

    async def _wait_for_response(self, path: Path) -> str:
        while not path.exists():
            await asyncio.sleep(self.config.poll_interval)
        return path.read_text(encoding="utf-8")

    async def evaluate_async(
        self, graph: ResolvedGraph, genome: Genome, candidate_id: str
    ) -> Evaluation:
        start_time = time.time()
        try:
            self._clear_stale(candidate_id)
            self._write_request(graph, genome, candidate_id)
        except OSError as e:
            raise ExchangeError(f"cannot write request for candidate '{candidate_id}': {e}") from e
        try:
            text = await asyncio.wait_for(
                self._wait_for_response(self.response_path(candidate_id)),
                timeout=self.config.timeout,
            )
        except asyncio.TimeoutError:
            logger.error(
                f"No response for candidate '{candidate_id}' after {self.config.timeout}s",
                extra={"candidate_id": candidate_id},
            )
            return Evaluation.failed(f"timeout after {self.config.timeout}s")

        evaluation = parse_response(text, candidate_id)
        logger.info(
            f"Candidate '{candidate_id}' evaluated externally in {time.time() - start_time:.2f}s",
            extra={"candidate_id": candidate_id, "status": evaluation.status},
        )
        return evaluation

    def evaluate(self, graph: ResolvedGraph, genome: Genome, candidate_id: str) -> Evaluation:
        return asyncio.run(self.evaluate_async(graph, genome, candidate_id))
