"""Expansion of a cell plan into a concrete operator DAG, plus graph exports."""

import logging
import re
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, List, Literal, NamedTuple, Optional, Sequence, Tuple

import networkx as nx
from pydantic import TypeAdapter

from src.arch import (
    Block,
    Cell,
    NetworkPlan,
    ValidationReport,
    consumed_internal_blocks,
    level_resolution,
    prune_unused_blocks,
    resolve_sdo_order,
    scale_ratio,
)
from src.errors import ConfigurationError, GraphConsistencyError
from src.spaces import NUM_CELL_INPUTS, PYRAMID_LEVELS

logger = logging.getLogger(__name__)

OpKind = Literal[
    "conv1x1", "depthwise_conv", "downsample", "upsample", "add", "squeeze_excite", "relu"
]

_SIGNATURE_RE = re.compile(
    r"^(?P<kind>[a-z_0-9]+) in=(?P<ir>\d+)x(?P<ic>\d+) out=(?P<or>\d+)x(?P<oc>\d+)"
    r" k=(?P<k>\d+) s=(?P<s>\d+)$"
)


@dataclass(frozen=True, slots=True, order=True)
class OpSignature:
    """Shape-level identity of an operator; one latency-table row each."""

    kind: str
    in_resolution: int
    out_resolution: int
    in_channels: int
    out_channels: int
    kernel: int = 1
    stride: int = 1

    def __str__(self) -> str:
        return (
            f"{self.kind} in={self.in_resolution}x{self.in_channels} "
            f"out={self.out_resolution}x{self.out_channels} k={self.kernel} s={self.stride}"
        )

    @classmethod
    def parse(cls, text: str) -> "OpSignature":
        match = _SIGNATURE_RE.match(text.strip())
        if match is None:
            raise ValueError(f"malformed op signature: {text!r}")
        return cls(
            kind=match["kind"],
            in_resolution=int(match["ir"]),
            out_resolution=int(match["or"]),
            in_channels=int(match["ic"]),
            out_channels=int(match["oc"]),
            kernel=int(match["k"]),
            stride=int(match["s"]),
        )


@dataclass(frozen=True, slots=True)
class Source:
    """Backbone feature entering the head."""

    id: str
    level: int
    resolution: int
    channels: int


@dataclass(frozen=True, slots=True)
class OpNode:
    id: str
    kind: OpKind
    inputs: Tuple[str, ...]
    in_resolution: int
    in_channels: int
    out_resolution: int
    out_channels: int
    kernel: int = 1
    stride: int = 1
    block: str = ""

    @property
    def signature(self) -> OpSignature:
        return OpSignature(
            kind=self.kind,
            in_resolution=self.in_resolution,
            out_resolution=self.out_resolution,
            in_channels=self.in_channels,
            out_channels=self.out_channels,
            kernel=self.kernel,
            stride=self.stride,
        )


@dataclass(frozen=True)
class ResolvedGraph:
    sources: Tuple[Source, ...]
    nodes: Tuple[OpNode, ...]
    outputs: Tuple[str, ...]

    def node_map(self) -> Dict[str, OpNode]:
        return {n.id: n for n in self.nodes}

    def to_digraph(self) -> nx.DiGraph:
        graph = nx.DiGraph()
        graph.add_nodes_from(s.id for s in self.sources)
        for node in self.nodes:
            graph.add_node(node.id)
            graph.add_edges_from((src, node.id) for src in node.inputs)
        return graph

    def reachable_ids(self) -> FrozenSet[str]:
        """Operator ids on some path into an output."""
        graph = self.to_digraph()
        reachable = set(self.outputs)
        for output in self.outputs:
            reachable |= nx.ancestors(graph, output)
        return frozenset(n.id for n in self.nodes if n.id in reachable)


class _Tensor(NamedTuple):
    id: str
    resolution: int
    channels: int


@dataclass
class _GraphBuilder:
    nodes: List[OpNode] = field(default_factory=list)

    def op(
        self,
        block: str,
        name: str,
        kind: OpKind,
        inputs: Sequence[_Tensor],
        out_resolution: int,
        out_channels: int,
        kernel: int = 1,
        stride: int = 1,
    ) -> _Tensor:
        first = inputs[0]
        node = OpNode(
            id=f"{block}/{name}",
            kind=kind,
            inputs=tuple(t.id for t in inputs),
            in_resolution=first.resolution,
            in_channels=first.channels,
            out_resolution=out_resolution,
            out_channels=out_channels,
            kernel=kernel,
            stride=stride,
            block=block,
        )
        self.nodes.append(node)
        return _Tensor(node.id, out_resolution, out_channels)

    def resize(self, block: str, name: str, t: _Tensor, resolution: int) -> _Tensor:
        ratio = scale_ratio(t.resolution, resolution)
        # Down: strided depthwise ratio x ratio conv. Up: nearest-neighbor, stride = scale factor.
        kind: OpKind = "downsample" if t.resolution > resolution else "upsample"
        return self.op(block, f"{name}.{kind}", kind, [t], resolution, t.channels, ratio, ratio)

    def conv1x1(self, block: str, name: str, t: _Tensor, channels: int) -> _Tensor:
        return self.op(block, f"{name}.conv1x1", "conv1x1", [t], t.resolution, channels)


def _merge_path(
    builder: _GraphBuilder, block: str, name: str, t: _Tensor, resolution: int, channels: int, sdo: bool
) -> _Tensor:
    if t.resolution == resolution and t.channels == channels:
        return t
    if sdo:
        order = resolve_sdo_order(t.resolution, resolution)
    else:
        order = "no_resize" if t.resolution == resolution else "conv_then_resize"

    if order == "no_resize":
        return builder.conv1x1(block, name, t, channels)
    if order == "resize_then_conv":
        t = builder.resize(block, name, t, resolution)
        return builder.conv1x1(block, name, t, channels)
    t = builder.conv1x1(block, name, t, channels)
    return builder.resize(block, name, t, resolution)


def _expand_block(
    builder: _GraphBuilder,
    label: str,
    block: Block,
    inputs: Sequence[_Tensor],
    shared_channels: int,
    sdo: bool,
) -> _Tensor:
    r, f = block.resolution, block.expansion_channels
    paths = [
        _merge_path(builder, label, f"in{k}", t, r, f, sdo) for k, t in enumerate(inputs)
    ]
    merge_kind: OpKind = "squeeze_excite" if block.merge_op == "se" else "add"
    merged = builder.op(label, "merge", merge_kind, paths, r, f)
    # ReLU on the intermediate feature only; the block output stays linear
    act = builder.op(label, "relu", "relu", [merged], r, f)
    dw = builder.op(label, "depthwise", "depthwise_conv", [act], r, f, kernel=block.kernel)
    return builder.op(label, "project", "conv1x1", [dw], r, shared_channels)


def _expand_cell(
    builder: _GraphBuilder,
    cell: Cell,
    inputs: Sequence[_Tensor],
    prefix: str,
    plan: NetworkPlan,
) -> List[_Tensor]:
    n_internal = len(cell.internal_blocks)
    features: List[_Tensor] = list(inputs)
    for position, block in enumerate(cell.blocks):
        if position < n_internal:
            label = f"{prefix}/b{position}"
        else:
            label = f"{prefix}/out_p{cell.output_levels[position - n_internal]}"
        block_inputs = [features[ref] for ref in block.inputs]
        features.append(
            _expand_block(builder, label, block, block_inputs, cell.shared_channels, plan.sdo_enabled)
        )

    unconsumed = sorted(set(range(n_internal)) - consumed_internal_blocks(cell))
    by_level: Dict[int, _Tensor] = {}
    for j, level in enumerate(cell.output_levels):
        result = features[NUM_CELL_INPUTS + n_internal + j]
        if plan.space_flavor == "recycling":
            extras = [
                features[NUM_CELL_INPUTS + i]
                for i in unconsumed
                if cell.internal_blocks[i].resolution == result.resolution
            ]
            if extras:
                result = builder.op(
                    f"{prefix}/recycle_p{level}", "add", "add", [result, *extras],
                    result.resolution, result.channels,
                )
        else:
            skip = inputs[PYRAMID_LEVELS.index(level)]
            if (skip.resolution, skip.channels) != (result.resolution, result.channels):
                raise GraphConsistencyError(
                    f"residual at level {level}: input {skip.resolution}x{skip.channels} "
                    f"does not match output {result.resolution}x{result.channels}"
                )
            result = builder.op(
                f"{prefix}/residual_p{level}", "add", "add", [skip, result],
                result.resolution, result.channels,
            )
        by_level[level] = result
    return [by_level[level] for level in PYRAMID_LEVELS]


def expand_network(plan: NetworkPlan, prune: bool = True) -> ResolvedGraph:
    """Chain ``plan.repeats`` cell instances into one operator graph.

    Residual-flavor cells are pruned first unless ``prune`` is False, in which
    case unused blocks stay in the graph as unreachable nodes. Recycling-flavor
    cells keep every block inside a cell, but with ``repeats`` > 1 an output the
    next cell never reads is dead; with ``prune`` those operators are dropped.
    """
    cell = plan.cell
    if cell.input_image_size != plan.input_image_size:
        raise ConfigurationError(
            f"cell was decoded for {cell.input_image_size}px inputs, plan uses "
            f"{plan.input_image_size}px"
        )
    if plan.space_flavor == "residual" and prune:
        cell = prune_unused_blocks(cell)

    sources = tuple(
        Source(
            id=f"P{level}",
            level=level,
            resolution=level_resolution(plan.input_image_size, level),
            channels=cell.shared_channels,
        )
        for level in PYRAMID_LEVELS
    )
    builder = _GraphBuilder()
    current = [_Tensor(s.id, s.resolution, s.channels) for s in sources]
    for r in range(plan.repeats):
        current = _expand_cell(builder, cell, current, f"r{r}", plan)

    graph = ResolvedGraph(
        sources=sources, nodes=tuple(builder.nodes), outputs=tuple(t.id for t in current)
    )
    if not prune:
        return graph
    reachable = graph.reachable_ids()
    if len(reachable) == len(graph.nodes):
        return graph
    logger.debug(
        f"Dropped {len(graph.nodes) - len(reachable)} operators no output reads",
        extra={"repeats": plan.repeats, "flavor": plan.space_flavor},
    )
    return ResolvedGraph(
        sources=sources,
        nodes=tuple(n for n in graph.nodes if n.id in reachable),
        outputs=graph.outputs,
    )


def validate_graph(graph: ResolvedGraph) -> ValidationReport:
    """Acyclicity, edge shape agreement, op consistency and reachability."""
    problems: List[str] = []
    shapes: Dict[str, Tuple[int, int]] = {s.id: (s.resolution, s.channels) for s in graph.sources}
    seen = set(shapes)
    for node in graph.nodes:
        if node.id in seen:
            problems.append(f"duplicate id {node.id}")
        seen.add(node.id)
        shapes[node.id] = (node.out_resolution, node.out_channels)

    for node in graph.nodes:
        for src in node.inputs:
            if src not in shapes:
                problems.append(f"{node.id}: unknown input {src}")
            elif shapes[src] != (node.in_resolution, node.in_channels):
                problems.append(
                    f"{node.id}: input {src} is {shapes[src]}, expected "
                    f"{(node.in_resolution, node.in_channels)}"
                )
        if node.kind == "downsample":
            expected = node.in_resolution // node.stride
        elif node.kind == "upsample":
            expected = node.in_resolution * node.stride
        else:
            expected = node.in_resolution
        if node.out_resolution != expected:
            problems.append(f"{node.id}: output resolution {node.out_resolution} != {expected}")
        if node.kind not in ("conv1x1",) and node.in_channels != node.out_channels:
            problems.append(f"{node.id}: {node.kind} cannot change channels")

    missing = [o for o in graph.outputs if o not in shapes]
    problems.extend(f"unknown output {o}" for o in missing)

    digraph = graph.to_digraph()
    if not nx.is_directed_acyclic_graph(digraph):
        problems.append("graph contains a cycle")
    elif not missing:
        reachable = graph.reachable_ids()
        problems.extend(
            f"{n.id}: not reachable from any output" for n in graph.nodes if n.id not in reachable
        )
    return ValidationReport(tuple(problems))


_graph_adapter = TypeAdapter(ResolvedGraph)


def graph_to_json(graph: ResolvedGraph, indent: Optional[int] = 2) -> str:
    """Structured-text export: ``sources``, ``nodes`` (with signatures) and ``outputs``."""
    return _graph_adapter.dump_json(graph, indent=indent).decode("utf-8")


def graph_from_json(text: str) -> ResolvedGraph:
    return _graph_adapter.validate_json(text)


def graph_to_dot(graph: ResolvedGraph, name: str = "head") -> str:
    """Graphviz DOT rendering, one cluster per block."""
    lines = [f'digraph "{name}" {{', "  rankdir=BT;", "  node [fontsize=10];"]
    for s in graph.sources:
        lines.append(f'  "{s.id}" [shape=ellipse, label="{s.id}\\n{s.resolution}x{s.resolution}x{s.channels}"];')

    clusters: Dict[str, List[OpNode]] = {}
    for node in graph.nodes:
        clusters.setdefault(node.block, []).append(node)
    for index, (block, members) in enumerate(clusters.items()):
        lines.append(f'  subgraph "cluster_{index}" {{')
        lines.append(f'    label="{block}";')
        for node in members:
            shape = "doubleoctagon" if node.id in graph.outputs else "box"
            label = f"{node.kind}\\n{node.out_resolution}x{node.out_resolution}x{node.out_channels}"
            if node.kind in ("depthwise_conv", "downsample", "upsample"):
                label += f"\\nk={node.kernel} s={node.stride}"
            lines.append(f'    "{node.id}" [shape={shape}, label="{label}"];')
        lines.append("  }")
    for node in graph.nodes:
        for src in node.inputs:
            lines.append(f'  "{src}" -> "{node.id}";')
    lines.append("}")
    return "\n".join(lines) + "\n"


def merge_path_nodes(
    in_resolution: int, in_channels: int, resolution: int, channels: int, sdo_enabled: bool
) -> Tuple[OpNode, ...]:
    """Operators realizing one merge path in isolation (empty for identity paths)."""
    builder = _GraphBuilder()
    _merge_path(
        builder, "path", "in0", _Tensor("x", in_resolution, in_channels), resolution, channels, sdo_enabled
    )
    return tuple(builder.nodes)
