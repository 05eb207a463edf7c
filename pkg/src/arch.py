"""Cell structures: decoding, validation, pruning and SDO ordering."""

import logging
from dataclasses import dataclass, field, replace
from typing import List, Literal, Optional, Sequence, Tuple

import networkx as nx

from src.errors import ConfigurationError, SchemaViolationError, UnsupportedScaleError
from src.spaces import (
    NUM_CELL_INPUTS,
    NUM_OUTPUT_BLOCKS,
    OUTPUT_ORDERS,
    PYRAMID_LEVELS,
    CellFlavor,
    Genome,
    MergeOp,
    SearchSpaceDef,
    check_genome,
    input_subsets,
    subset_token,
    token_schema,
)

logger = logging.getLogger(__name__)

SdoOrder = Literal["resize_then_conv", "conv_then_resize", "no_resize"]


def level_resolution(input_image_size: int, level: int) -> int:
    """Spatial side of pyramid level ``level`` for a square input image."""
    stride = 2**level
    if input_image_size <= 0 or input_image_size % stride != 0:
        raise ConfigurationError(
            f"input image size {input_image_size} is not divisible by 2^{level} = {stride}"
        )
    return input_image_size // stride


def scale_ratio(a: int, b: int) -> int:
    """Ratio max/min of two resolutions; must be a power of two."""
    if a <= 0 or b <= 0:
        raise UnsupportedScaleError(f"resolutions must be positive, got {a} and {b}")
    hi, lo = max(a, b), min(a, b)
    ratio, rem = divmod(hi, lo)
    if rem != 0 or ratio & (ratio - 1) != 0:
        raise UnsupportedScaleError(f"resolution ratio {a}:{b} is not a power of 2")
    return ratio


def resolve_sdo_order(input_resolution: int, target_resolution: int) -> SdoOrder:
    """Size-dependent ordering: shrink before the 1x1 conv, grow after it."""
    scale_ratio(input_resolution, target_resolution)
    if input_resolution > target_resolution:
        return "resize_then_conv"
    if input_resolution < target_resolution:
        return "conv_then_resize"
    return "no_resize"


@dataclass(frozen=True, slots=True)
class FeatureSpec:
    level: int
    resolution: int
    channels: int


@dataclass(frozen=True, slots=True)
class Block:
    """One feature-generation block.

    ``inputs`` index the cell's feature list: 0..3 are the cell inputs at
    levels 3..6, ``4 + j`` is the j-th generated block.
    """

    inputs: Tuple[int, ...]
    merge_op: MergeOp
    level: int
    resolution: int
    expansion_channels: int
    kernel: int


@dataclass(frozen=True, slots=True)
class Cell:
    internal_blocks: Tuple[Block, ...]
    output_blocks: Tuple[Block, ...]
    # Level bound to each output block, in generation order
    output_levels: Tuple[int, ...]
    shared_channels: int
    input_image_size: int

    @property
    def blocks(self) -> Tuple[Block, ...]:
        return self.internal_blocks + self.output_blocks

    def feature(self, ref: int) -> FeatureSpec:
        """Shape of the feature a block reference points at."""
        if ref < NUM_CELL_INPUTS:
            level = PYRAMID_LEVELS[ref]
            return FeatureSpec(
                level, level_resolution(self.input_image_size, level), self.shared_channels
            )
        block = self.blocks[ref - NUM_CELL_INPUTS]
        return FeatureSpec(block.level, block.resolution, self.shared_channels)


@dataclass(frozen=True, slots=True)
class NetworkPlan:
    cell: Cell
    repeats: int = 1
    input_image_size: int = 320
    space_flavor: CellFlavor = "residual"
    sdo_enabled: bool = True

    def __post_init__(self) -> None:
        if self.repeats < 1:
            raise ConfigurationError(f"repeats must be >= 1, got {self.repeats}")


@dataclass(frozen=True)
class ValidationReport:
    violations: Tuple[str, ...] = field(default_factory=tuple)

    @property
    def ok(self) -> bool:
        return not self.violations


def decode_genome(genome: Genome, space: SearchSpaceDef, input_image_size: int = 320) -> Cell:
    """Turn a token sequence into a cell; pure and deterministic."""
    schema = check_genome(genome, space)
    chosen = {(s.kind, s.node): t for s, t in zip(schema.slots, genome.tokens)}

    def pick(kind: str, node: Optional[int] = None) -> int:
        return chosen.get((kind, node), 0)

    channels = space.channel_choices[pick("channels")]
    output_levels = OUTPUT_ORDERS[pick("output_order")]
    internal: List[Block] = []
    outputs: List[Block] = []

    for i in range(space.node_count):
        inputs = input_subsets(i + NUM_CELL_INPUTS, space.max_in_degree)[pick("inputs", i)]
        if i < space.internal_block_budget:
            level = PYRAMID_LEVELS[pick("resolution", i)]
        else:
            level = output_levels[i - space.internal_block_budget]
        if space.no_expand:
            expansion = channels
        else:
            expansion = space.expansion_choices[pick("expansion", i)]
        block = Block(
            inputs=inputs,
            merge_op=space.merge_op_choices[pick("merge", i)],
            level=level,
            resolution=level_resolution(input_image_size, level),
            expansion_channels=expansion,
            kernel=space.kernel_choices[pick("kernel", i)],
        )
        (internal if i < space.internal_block_budget else outputs).append(block)

    return Cell(
        internal_blocks=tuple(internal),
        output_blocks=tuple(outputs),
        output_levels=output_levels,
        shared_channels=channels,
        input_image_size=input_image_size,
    )


def encode_cell(cell: Cell, space: SearchSpaceDef) -> Genome:
    """Inverse of ``decode_genome`` for full (unpruned) cells."""
    if len(cell.internal_blocks) != space.internal_block_budget:
        raise SchemaViolationError(
            f"only unpruned cells can be encoded: expected {space.internal_block_budget} "
            f"internal blocks, got {len(cell.internal_blocks)}"
        )
    tokens: List[int] = []
    for slot in token_schema(space).slots:
        tokens.append(_encode_slot(cell, space, slot.kind, slot.node))
    return Genome(tuple(tokens))


def _encode_slot(cell: Cell, space: SearchSpaceDef, kind: str, node: Optional[int]) -> int:
    if kind == "channels":
        return _index_of(space.channel_choices, cell.shared_channels, "channel count")
    if kind == "output_order":
        return _index_of(OUTPUT_ORDERS, tuple(cell.output_levels), "output order")
    block = cell.blocks[node]
    if kind == "inputs":
        token = subset_token(block.inputs, node + NUM_CELL_INPUTS, space.max_in_degree)
        if token is None:
            raise SchemaViolationError(f"node {node} inputs {block.inputs} are not encodable")
        return token
    if kind == "merge":
        return _index_of(space.merge_op_choices, block.merge_op, "merge op")
    if kind == "kernel":
        return _index_of(space.kernel_choices, block.kernel, "kernel")
    if kind == "expansion":
        return _index_of(space.expansion_choices, block.expansion_channels, "expansion")
    if kind == "resolution":
        return _index_of(PYRAMID_LEVELS, block.level, "level")
    raise SchemaViolationError(f"unknown slot kind {kind}")


def _index_of(choices: Sequence, value, what: str) -> int:
    try:
        return list(choices).index(value)
    except ValueError:
        raise SchemaViolationError(f"{what} {value!r} is not in {tuple(choices)}") from None


def validate_cell(cell: Cell, space: SearchSpaceDef) -> ValidationReport:
    """List every structural or choice-set violation of ``cell`` in ``space``."""
    problems: List[str] = []

    if len(cell.internal_blocks) > space.internal_block_budget:
        problems.append(
            f"{len(cell.internal_blocks)} internal blocks exceed budget {space.internal_block_budget}"
        )
    if len(cell.output_blocks) != NUM_OUTPUT_BLOCKS:
        problems.append(f"expected {NUM_OUTPUT_BLOCKS} output blocks, got {len(cell.output_blocks)}")
    if sorted(cell.output_levels) != list(PYRAMID_LEVELS):
        problems.append(f"output levels {cell.output_levels} are not a permutation of 3..6")
    if cell.shared_channels not in space.channel_choices:
        problems.append(f"channel count C={cell.shared_channels} not in {space.channel_choices}")

    n_internal = len(cell.internal_blocks)
    for position, block in enumerate(cell.blocks):
        name = f"block {position}"
        visible = position + NUM_CELL_INPUTS
        if len(set(block.inputs)) != len(block.inputs):
            problems.append(f"{name}: duplicate inputs {block.inputs}")
        if len(block.inputs) < 2:
            problems.append(f"{name}: merges {len(block.inputs)} inputs, at least 2 required")
        if len(block.inputs) > space.max_in_degree:
            problems.append(
                f"{name}: in-degree exceeds maximum {space.max_in_degree} ({len(block.inputs)} inputs)"
            )
        for ref in block.inputs:
            if ref < 0:
                problems.append(f"{name}: negative reference {ref}")
            elif ref >= visible:
                problems.append(f"{name}: forward reference to feature {ref}")
        if block.merge_op not in space.merge_op_choices:
            problems.append(f"{name}: merge op {block.merge_op} not in {space.merge_op_choices}")
        if block.kernel not in space.kernel_choices:
            problems.append(f"{name}: kernel {block.kernel} not in {space.kernel_choices}")
        if space.no_expand:
            if block.expansion_channels != cell.shared_channels:
                problems.append(
                    f"{name}: F={block.expansion_channels} must equal C={cell.shared_channels}"
                )
        elif block.expansion_channels not in space.expansion_choices:
            problems.append(f"{name}: F={block.expansion_channels} not in {space.expansion_choices}")
        if block.level not in PYRAMID_LEVELS:
            problems.append(f"{name}: level {block.level} outside 3..6")
        else:
            try:
                expected = level_resolution(cell.input_image_size, block.level)
            except ConfigurationError as e:
                problems.append(f"{name}: {e}")
            else:
                if block.resolution != expected:
                    problems.append(
                        f"{name}: resolution {block.resolution} does not match level "
                        f"{block.level} ({expected})"
                    )
        if position >= n_internal:
            j = position - n_internal
            if j < len(cell.output_levels) and block.level != cell.output_levels[j]:
                problems.append(
                    f"{name}: output block at level {block.level} is bound to level "
                    f"{cell.output_levels[j]}"
                )

    return ValidationReport(tuple(problems))


def reference_graph(cell: Cell) -> nx.DiGraph:
    """Feature-reference DAG: edge ``ref -> consumer`` over feature indices."""
    graph = nx.DiGraph()
    graph.add_nodes_from(range(NUM_CELL_INPUTS + len(cell.blocks)))
    for position, block in enumerate(cell.blocks):
        for ref in block.inputs:
            graph.add_edge(ref, position + NUM_CELL_INPUTS)
    return graph


def consumed_internal_blocks(cell: Cell) -> set:
    """Internal block indices referenced by some block."""
    n_internal = len(cell.internal_blocks)
    used = set()
    for block in cell.blocks:
        for ref in block.inputs:
            if NUM_CELL_INPUTS <= ref < NUM_CELL_INPUTS + n_internal:
                used.add(ref - NUM_CELL_INPUTS)
    return used


def prune_unused_blocks(cell: Cell) -> Cell:
    """Keep only internal blocks reachable from the output blocks."""
    n_internal = len(cell.internal_blocks)
    graph = reference_graph(cell)
    reachable = set()
    for j in range(len(cell.output_blocks)):
        reachable |= nx.ancestors(graph, NUM_CELL_INPUTS + n_internal + j)
    kept = [i for i in range(n_internal) if NUM_CELL_INPUTS + i in reachable]
    if len(kept) == n_internal:
        return cell

    remap = {r: r for r in range(NUM_CELL_INPUTS)}
    for new, old in enumerate(kept):
        remap[NUM_CELL_INPUTS + old] = NUM_CELL_INPUTS + new
    for j in range(len(cell.output_blocks)):
        remap[NUM_CELL_INPUTS + n_internal + j] = NUM_CELL_INPUTS + len(kept) + j

    def rewire(block: Block) -> Block:
        return replace(block, inputs=tuple(remap[r] for r in block.inputs))

    logger.debug(
        f"Pruned {n_internal - len(kept)} of {n_internal} internal blocks",
        extra={"kept": kept},
    )
    return replace(
        cell,
        internal_blocks=tuple(rewire(cell.internal_blocks[i]) for i in kept),
        output_blocks=tuple(rewire(b) for b in cell.output_blocks),
    )
