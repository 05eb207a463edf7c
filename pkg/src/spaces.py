"""Search-space presets, genome token schemas, sampling and cardinality."""

import itertools
import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Dict, Iterable, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from src.errors import ConfigurationError, SchemaViolationError, UnknownSpaceError

logger = logging.getLogger(__name__)

PYRAMID_LEVELS: Tuple[int, ...] = (3, 4, 5, 6)
NUM_CELL_INPUTS = len(PYRAMID_LEVELS)
NUM_OUTPUT_BLOCKS = len(PYRAMID_LEVELS)
OUTPUT_ORDERS: Tuple[Tuple[int, ...], ...] = tuple(itertools.permutations(PYRAMID_LEVELS))

MergeOp = Literal["sum", "se"]
CellFlavor = Literal["residual", "recycling"]
SlotKind = Literal["inputs", "merge", "kernel", "expansion", "resolution", "channels", "output_order"]


class SearchSpaceDef(BaseModel):
    """One search space: the choice sets every genome slot draws from."""

    model_config = ConfigDict(frozen=True)

    name: str
    kernel_choices: Tuple[int, ...] = Field(..., min_length=1)
    channel_choices: Tuple[int, ...] = Field(..., min_length=1)
    # Empty means No-Expand: F is forced to the shared channel count C
    expansion_choices: Tuple[int, ...] = ()
    sdo_enabled: bool = True
    max_in_degree: int = Field(2, ge=2)
    internal_block_budget: int = Field(5, ge=0)
    merge_op_choices: Tuple[MergeOp, ...] = ("sum", "se")
    resolution_choice_count: int = 4
    cell_flavor: CellFlavor = "residual"
    quoted_cardinality: Optional[float] = None

    @field_validator("kernel_choices")
    @classmethod
    def validate_kernels(cls, v: Tuple[int, ...]) -> Tuple[int, ...]:
        for k in v:
            if k < 1 or k % 2 == 0:
                raise ValueError(f"kernel sizes must be odd and positive, got {k}")
        return v

    @field_validator("channel_choices", "expansion_choices")
    @classmethod
    def validate_channels(cls, v: Tuple[int, ...]) -> Tuple[int, ...]:
        if any(c < 1 for c in v):
            raise ValueError(f"channel counts must be positive, got {v}")
        if len(set(v)) != len(v):
            raise ValueError(f"channel choices must be distinct, got {v}")
        return v

    @field_validator("merge_op_choices")
    @classmethod
    def validate_merge_ops(cls, v: Tuple[str, ...]) -> Tuple[str, ...]:
        if not v or len(set(v)) != len(v):
            raise ValueError(f"merge ops must be a non-empty distinct set, got {v}")
        return v

    @model_validator(mode="after")
    def validate_resolution_count(self) -> "SearchSpaceDef":
        if self.resolution_choice_count != len(PYRAMID_LEVELS):
            raise ValueError(
                f"resolution_choice_count must be {len(PYRAMID_LEVELS)} (levels 3..6)"
            )
        return self

    @property
    def no_expand(self) -> bool:
        return not self.expansion_choices

    @property
    def node_count(self) -> int:
        return self.internal_block_budget + NUM_OUTPUT_BLOCKS


PRESETS: Dict[str, SearchSpaceDef] = {
    "nas-fpnlite-s": SearchSpaceDef(
        name="nas-fpnlite-s",
        kernel_choices=(3,),
        channel_choices=(64,),
        expansion_choices=(),
        sdo_enabled=False,
        max_in_degree=2,
        cell_flavor="recycling",
        quoted_cardinality=2e22,
    ),
    "no-expand": SearchSpaceDef(
        name="no-expand",
        kernel_choices=(3, 5, 7),
        channel_choices=(16, 32, 48, 64, 80, 96),
        expansion_choices=(),
        sdo_enabled=True,
        max_in_degree=2,
        quoted_cardinality=2.4e27,
    ),
    "mnasfpn": SearchSpaceDef(
        name="mnasfpn",
        kernel_choices=(3, 5, 7),
        channel_choices=(16, 32, 48, 64, 80, 96),
        expansion_choices=(16, 32, 64, 96, 128, 256, 512),
        sdo_enabled=True,
        max_in_degree=2,
        quoted_cardinality=1e31,
    ),
    "conn-search": SearchSpaceDef(
        name="conn-search",
        kernel_choices=(3, 5, 7),
        channel_choices=(16, 32, 48, 64, 80, 96),
        expansion_choices=(16, 32, 64, 96, 128, 256, 512),
        sdo_enabled=True,
        max_in_degree=4,
        merge_op_choices=("sum",),
        quoted_cardinality=3e42,
    ),
}


def preset(name: str) -> SearchSpaceDef:
    """Return one of the four built-in search spaces."""
    try:
        return PRESETS[name]
    except KeyError:
        raise UnknownSpaceError(
            f"unknown search space '{name}', expected one of {sorted(PRESETS)}"
        ) from None


def load_space(path: Path) -> SearchSpaceDef:
    """Load a user-defined space from a JSON config file."""
    try:
        return SearchSpaceDef.model_validate_json(Path(path).read_text(encoding="utf-8"))
    except ValueError as e:
        raise ConfigurationError(f"invalid search space file {path}: {e}") from e


def dump_space(space: SearchSpaceDef, path: Path) -> None:
    Path(path).write_text(space.model_dump_json(indent=2) + "\n", encoding="utf-8")


def resolve_space(name_or_path: str) -> SearchSpaceDef:
    """Preset name, or path to a space JSON file."""
    if name_or_path in PRESETS:
        return PRESETS[name_or_path]
    if Path(name_or_path).is_file():
        return load_space(Path(name_or_path))
    return preset(name_or_path)


@dataclass(frozen=True, slots=True)
class Genome:
    """Flat token sequence, one token per schema slot."""

    tokens: Tuple[int, ...]

    def __len__(self) -> int:
        return len(self.tokens)

    def to_line(self) -> str:
        return " ".join(str(t) for t in self.tokens)

    @classmethod
    def from_line(cls, line: str) -> "Genome":
        try:
            return cls(tuple(int(t) for t in line.split()))
        except ValueError as e:
            raise SchemaViolationError(f"genome line is not a token sequence: {line!r}") from e


@dataclass(frozen=True, slots=True)
class Slot:
    name: str
    kind: SlotKind
    choices: int
    node: Optional[int] = None


@dataclass(frozen=True, slots=True)
class TokenSchema:
    """Ordered slot descriptors of a space's genome."""

    slots: Tuple[Slot, ...]

    @property
    def length(self) -> int:
        return len(self.slots)

    @property
    def size(self) -> int:
        """Exact number of distinct genomes (product of slot choice counts)."""
        return math.prod(s.choices for s in self.slots)


@lru_cache(maxsize=None)
def input_subsets(available: int, max_in_degree: int) -> Tuple[Tuple[int, ...], ...]:
    """All input reference sets of size 2..D over ``available`` features.

    Ordered by size, then in ``itertools.combinations`` order, so for D=2 the
    list has exactly choose(available, 2) entries.
    """
    subsets: List[Tuple[int, ...]] = []
    for size in range(2, min(max_in_degree, available) + 1):
        subsets.extend(itertools.combinations(range(available), size))
    return tuple(subsets)


@lru_cache(maxsize=None)
def _subset_index(available: int, max_in_degree: int) -> Dict[Tuple[int, ...], int]:
    return {s: i for i, s in enumerate(input_subsets(available, max_in_degree))}


def subset_token(inputs: Sequence[int], available: int, max_in_degree: int) -> Optional[int]:
    return _subset_index(available, max_in_degree).get(tuple(sorted(inputs)))


@lru_cache(maxsize=None)
def token_schema(space: SearchSpaceDef) -> TokenSchema:
    """Slot layout: per node inputs/merge/kernel/expansion/resolution, then globals.

    Slots with a single choice are omitted; decoding uses the fixed value.
    """
    slots: List[Slot] = []

    def add(name: str, kind: SlotKind, choices: int, node: Optional[int] = None) -> None:
        if choices > 1:
            slots.append(Slot(name=name, kind=kind, choices=choices, node=node))

    for i in range(space.node_count):
        add(f"node{i}.inputs", "inputs", len(input_subsets(i + NUM_CELL_INPUTS, space.max_in_degree)), i)
        add(f"node{i}.merge", "merge", len(space.merge_op_choices), i)
        add(f"node{i}.kernel", "kernel", len(space.kernel_choices), i)
        if not space.no_expand:
            add(f"node{i}.expansion", "expansion", len(space.expansion_choices), i)
        if i < space.internal_block_budget:
            add(f"node{i}.resolution", "resolution", space.resolution_choice_count, i)
    add("channels", "channels", len(space.channel_choices))
    add("output_order", "output_order", len(OUTPUT_ORDERS))
    return TokenSchema(slots=tuple(slots))


def check_genome(genome: Genome, space: SearchSpaceDef) -> TokenSchema:
    """Raise ``SchemaViolationError`` naming the first offending token."""
    schema = token_schema(space)
    if len(genome.tokens) != schema.length:
        raise SchemaViolationError(
            f"genome has {len(genome.tokens)} tokens, space '{space.name}' expects {schema.length}"
        )
    for index, (token, slot) in enumerate(zip(genome.tokens, schema.slots)):
        if not 0 <= token < slot.choices:
            raise SchemaViolationError(
                f"token {index} ({slot.name}) = {token} is outside 0..{slot.choices - 1}",
                token_index=index,
            )
    return schema


def sample_uniform(space: SearchSpaceDef, seed: int) -> Genome:
    """Sample every slot independently and uniformly."""
    rng = np.random.default_rng(seed)
    return sample_with(space, rng)


def sample_with(space: SearchSpaceDef, rng: np.random.Generator) -> Genome:
    schema = token_schema(space)
    return Genome(tuple(int(rng.integers(slot.choices)) for slot in schema.slots))


def _falling_factorial(top: int, count: int) -> int:
    return math.prod(range(top - count + 1, top + 1)) if count > 0 else 1


def cardinality(space: SearchSpaceDef) -> int:
    """Literal appendix formula for the total search-space size.

    Pair selection contributes choose(i+4, 2) per node. For D > 2 each node gains
    the appendix's extra factor, (i+2)(i+1) for D=4, generalized here to the
    falling factorial (i+2)(i+1)...(i+5-D). Merge-op, kernel, expansion,
    resolution, channel and order factors come from the choice-set sizes, so the
    Conn-Search removal of the merge choice is the size-1 merge set.
    """
    total = 1
    for i in range(space.node_count):
        visible = i + NUM_CELL_INPUTS
        total *= math.comb(visible, 2)
        total *= _falling_factorial(i + 2, space.max_in_degree - 2)
        total *= len(space.merge_op_choices)
        total *= len(space.kernel_choices)
        if not space.no_expand:
            total *= len(space.expansion_choices)
        if i < space.internal_block_budget:
            total *= space.resolution_choice_count
    total *= len(space.channel_choices)
    total *= len(OUTPUT_ORDERS)
    return total


def read_genomes(path: Path) -> List[Genome]:
    """One genome per non-empty line, tokens separated by whitespace."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [Genome.from_line(line) for line in lines if line.strip() and not line.startswith("#")]


def write_genomes(path: Path, genomes: Iterable[Genome]) -> None:
    Path(path).write_text("".join(g.to_line() + "\n" for g in genomes), encoding="utf-8")
