"""MAdds, parameter counts and connectivity-based latency estimation."""

import itertools
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from types import MappingProxyType
from typing import Dict, Iterable, Mapping, Optional, Set, Tuple

import numpy as np
from pydantic import BaseModel, Field, TypeAdapter

from src.arch import FeatureSpec, SdoOrder, level_resolution, resolve_sdo_order, scale_ratio
from src.config import settings
from src.errors import ConfigurationError, LatencyLookupError, UnsupportedOpError
from src.graph import OpNode, OpSignature, ResolvedGraph, merge_path_nodes
from src.spaces import PYRAMID_LEVELS, SearchSpaceDef

logger = logging.getLogger(__name__)

SE_REDUCTION = 4
_ZERO_MADD_KINDS = frozenset({"upsample", "add", "relu"})


def _se_hidden(channels: int) -> int:
    return max(1, channels // SE_REDUCTION)


def signature_madds(sig: OpSignature) -> int:
    """Multiply-accumulates of one operator."""
    area = sig.out_resolution * sig.out_resolution
    if sig.kind == "conv1x1":
        return area * sig.in_channels * sig.out_channels
    if sig.kind in ("depthwise_conv", "downsample"):
        return area * sig.kernel * sig.kernel * sig.out_channels
    if sig.kind == "squeeze_excite":
        # Pooling is free; two 1x1 convs on the pooled vector plus the channelwise scale
        return 2 * sig.out_channels * _se_hidden(sig.out_channels) + area * sig.out_channels
    if sig.kind in _ZERO_MADD_KINDS:
        return 0
    raise UnsupportedOpError(f"no MAdds model for op kind '{sig.kind}'")


def signature_params(sig: OpSignature) -> int:
    """Weights of one operator; biases and batch-norm are folded away."""
    if sig.kind == "conv1x1":
        return sig.in_channels * sig.out_channels
    if sig.kind in ("depthwise_conv", "downsample"):
        return sig.kernel * sig.kernel * sig.out_channels
    if sig.kind == "squeeze_excite":
        return 2 * sig.out_channels * _se_hidden(sig.out_channels)
    if sig.kind in _ZERO_MADD_KINDS:
        return 0
    raise UnsupportedOpError(f"no parameter model for op kind '{sig.kind}'")


@dataclass(frozen=True)
class MergePathCost:
    madds: int
    order: SdoOrder


def merge_path_madds(
    feature: FeatureSpec, resolution: int, channels: int, sdo_enabled: bool
) -> MergePathCost:
    """Cost of bringing ``feature`` to ``resolution`` x ``channels``.

    Down-sampling by k with SDO:    R*R*k*k*C + R*R*C*F
    Down-sampling by k without SDO: kR*kR*C*F + R*R*k*k*F
    Up-sampling: the 1x1 conv runs at the input resolution, the resize is free.
    """
    r0, c, r, f = feature.resolution, feature.channels, resolution, channels
    if r0 == r:
        return MergePathCost(0 if c == f else r * r * c * f, "no_resize")
    k = scale_ratio(r0, r)
    order = resolve_sdo_order(r0, r) if sdo_enabled else "conv_then_resize"
    if r0 > r:
        if order == "resize_then_conv":
            return MergePathCost(r * r * k * k * c + r * r * c * f, order)
        return MergePathCost(k * r * k * r * c * f + r * r * k * k * f, order)
    return MergePathCost(r0 * r0 * c * f, order)


@dataclass(frozen=True, slots=True)
class CostRow:
    name: str
    kind: str
    block: str
    madds: int
    params: int
    latency_ms: float = 0.0


@dataclass(frozen=True)
class CostReport:
    """Totals and per-node rows; every total is the sum of its column."""

    madds: int
    params: int
    latency_ms: Optional[float]
    rows: Tuple[CostRow, ...]

    def grouped_latency(self) -> Dict[str, float]:
        """Latency split into fixed overhead, head blocks and cell-level adds."""
        groups: Dict[str, list] = {"overhead": [], "blocks": [], "cell_adds": []}
        for row in self.rows:
            if row.kind == "overhead":
                groups["overhead"].append(row.latency_ms)
            elif "/residual_" in row.block or "/recycle_" in row.block:
                groups["cell_adds"].append(row.latency_ms)
            else:
                groups["blocks"].append(row.latency_ms)
        return {name: math.fsum(values) for name, values in groups.items()}


def total_madds(graph: ResolvedGraph) -> int:
    return sum(signature_madds(n.signature) for n in graph.nodes)


def graph_madds(graph: ResolvedGraph) -> CostReport:
    """Per-node MAdds and parameters over all nodes of ``graph``."""
    rows = tuple(_row(node) for node in graph.nodes)
    return CostReport(
        madds=sum(r.madds for r in rows),
        params=sum(r.params for r in rows),
        latency_ms=None,
        rows=rows,
    )


def graph_params(graph: ResolvedGraph) -> int:
    return sum(signature_params(n.signature) for n in graph.nodes)


def _row(node: OpNode, latency_ms: float = 0.0) -> CostRow:
    sig = node.signature
    return CostRow(
        name=node.id,
        kind=node.kind,
        block=node.block,
        madds=signature_madds(sig),
        params=signature_params(sig),
        latency_ms=latency_ms,
    )


@dataclass(frozen=True)
class LatencyTable:
    """Per-signature latencies in milliseconds plus a constant overhead.

    The overhead stands for everything outside the head: backbone, box
    predictor and runtime fixed cost.
    """

    entries: Mapping[OpSignature, float]
    overhead_ms: float = 0.0

    def __post_init__(self) -> None:
        if self.overhead_ms < 0 or not math.isfinite(self.overhead_ms):
            raise ConfigurationError(f"overhead must be a finite non-negative number, got {self.overhead_ms}")
        for sig, ms in self.entries.items():
            if ms < 0 or not math.isfinite(ms):
                raise ConfigurationError(f"latency for {sig} must be finite and >= 0, got {ms}")
        object.__setattr__(self, "entries", MappingProxyType(dict(self.entries)))

    def __len__(self) -> int:
        return len(self.entries)

    def lookup(self, sig: OpSignature) -> float:
        try:
            return self.entries[sig]
        except KeyError:
            raise LatencyLookupError([sig]) from None

    def to_text(self) -> str:
        lines = ["# op latency table: <signature> -> <milliseconds>", f"overhead -> {self.overhead_ms!r}"]
        lines.extend(f"{sig} -> {self.entries[sig]!r}" for sig in sorted(self.entries))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "LatencyTable":
        overhead: Optional[float] = None
        entries: Dict[OpSignature, float] = {}
        for number, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.rpartition(" -> ")
            if not sep:
                raise ConfigurationError(f"latency table line {number}: missing ' -> ' separator")
            try:
                ms = float(value)
                if key == "overhead":
                    overhead = ms
                else:
                    entries[OpSignature.parse(key)] = ms
            except ValueError as e:
                raise ConfigurationError(f"latency table line {number}: {e}") from e
        if overhead is None:
            raise ConfigurationError("latency table has no 'overhead' header row")
        return cls(entries=entries, overhead_ms=overhead)

    def save(self, path: Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path: Path) -> "LatencyTable":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


@dataclass(frozen=True)
class LatencyEstimate:
    latency_ms: float
    # ("overhead", ms) first, then one row per reachable node in graph order
    rows: Tuple[Tuple[str, float], ...]


def estimate_latency(graph: ResolvedGraph, lut: LatencyTable) -> LatencyEstimate:
    """Overhead plus table latency of every node reachable from the outputs."""
    reachable = graph.reachable_ids()
    rows = [("overhead", lut.overhead_ms)]
    missing: Set[OpSignature] = set()
    for node in graph.nodes:
        if node.id not in reachable:
            continue
        ms = lut.entries.get(node.signature)
        if ms is None:
            missing.add(node.signature)
            continue
        rows.append((node.id, ms))
    if missing:
        raise LatencyLookupError(sorted(missing))
    return LatencyEstimate(latency_ms=math.fsum(ms for _, ms in rows), rows=tuple(rows))


def cost_report(graph: ResolvedGraph, lut: Optional[LatencyTable] = None) -> CostReport:
    """MAdds, params and (with a table) latency, with one row per node."""
    if lut is None:
        return graph_madds(graph)
    estimate = estimate_latency(graph, lut)
    per_node = dict(estimate.rows[1:])
    rows = [CostRow("overhead", "overhead", "", 0, 0, lut.overhead_ms)]
    rows.extend(_row(node, per_node.get(node.id, 0.0)) for node in graph.nodes)
    return CostReport(
        madds=sum(r.madds for r in rows),
        params=sum(r.params for r in rows),
        latency_ms=math.fsum(r.latency_ms for r in rows),
        rows=tuple(rows),
    )


_report_adapter = TypeAdapter(CostReport)


def cost_report_to_json(report: CostReport) -> str:
    return _report_adapter.dump_json(report, indent=2).decode("utf-8")


class LatencyModel(BaseModel):
    """Synthetic per-op latency: ``ms_per_madd * MAdds + fixed_ms``, optional noise."""

    ms_per_madd: float = Field(default_factory=lambda: settings.lut_ms_per_madd, gt=0)
    fixed_ms: float = Field(default_factory=lambda: settings.lut_fixed_ms, ge=0)
    overhead_ms: float = Field(default_factory=lambda: settings.lut_overhead_ms, ge=0)
    # Relative standard deviation of multiplicative Gaussian noise
    noise: float = Field(0.0, ge=0)
    seed: int = 0


def synth_lut(graphs: Iterable[ResolvedGraph], model: LatencyModel) -> LatencyTable:
    """Table covering every signature that appears in ``graphs``."""
    signatures = {node.signature for graph in graphs for node in graph.nodes}
    return _synthesize(signatures, model)


def _synthesize(signatures: Iterable[OpSignature], model: LatencyModel) -> LatencyTable:
    rng = np.random.default_rng(model.seed)
    entries: Dict[OpSignature, float] = {}
    for sig in sorted(signatures):
        ms = model.ms_per_madd * signature_madds(sig) + model.fixed_ms
        if model.noise > 0:
            ms *= max(0.0, 1.0 + model.noise * float(rng.standard_normal()))
        entries[sig] = ms
    logger.info(
        f"Synthesized latency table with {len(entries)} entries",
        extra={"entries": len(entries), "seed": model.seed, "noise": model.noise},
    )
    return LatencyTable(entries=entries, overhead_ms=model.overhead_ms)


def enumerate_signatures(space: SearchSpaceDef, input_image_size: int) -> Set[OpSignature]:
    """Every operator signature any genome of ``space`` can expand to.

    Merge paths are enumerated for both SDO settings so SDO ablations can be
    costed with the same table.
    """
    resolutions = [level_resolution(input_image_size, level) for level in PYRAMID_LEVELS]
    signatures: Set[OpSignature] = set()
    for c in space.channel_choices:
        expansions = (c,) if space.no_expand else space.expansion_choices
        for r in resolutions:
            signatures.add(OpSignature("add", r, r, c, c))
            for f in expansions:
                for r0 in resolutions:
                    for sdo in (True, False):
                        signatures.update(
                            n.signature for n in merge_path_nodes(r0, c, r, f, sdo)
                        )
                for merge in space.merge_op_choices:
                    kind = "squeeze_excite" if merge == "se" else "add"
                    signatures.add(OpSignature(kind, r, r, f, f))
                signatures.add(OpSignature("relu", r, r, f, f))
                for k in space.kernel_choices:
                    signatures.add(OpSignature("depthwise_conv", r, r, f, f, kernel=k))
                signatures.add(OpSignature("conv1x1", r, r, f, c))
    return signatures


def synth_lut_for_space(
    space: SearchSpaceDef, model: LatencyModel, input_image_size: int = 320
) -> LatencyTable:
    """Table covering the whole space, so searches never miss a lookup."""
    return _synthesize(enumerate_signatures(space, input_image_size), model)


def sdo_grid_violations(
    kernels: Iterable[int] = (2, 4, 8),
    channels: Iterable[int] = (16, 32, 48, 64, 80, 96),
    expansions: Iterable[int] = (16, 32, 64, 96, 128, 256, 512),
    resolutions: Iterable[int] = (5, 10, 20, 40),
) -> Tuple[int, list]:
    """Check down-sample-then-1x1 is strictly cheaper over a grid.

    Returns the number of cases checked and the violating (k, C, F, R) tuples.
    """
    checked = 0
    violations = []
    for k, c, f, r in itertools.product(kernels, channels, expansions, resolutions):
        feature = FeatureSpec(level=0, resolution=k * r, channels=c)
        with_sdo = merge_path_madds(feature, r, f, sdo_enabled=True).madds
        without = merge_path_madds(feature, r, f, sdo_enabled=False).madds
        checked += 1
        if not with_sdo < without:
            violations.append((k, c, f, r))
    return checked, violations
