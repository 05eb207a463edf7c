"""Shared pytest fixtures for all tests."""

import os
import sys

import pytest

# Add the project root to Python path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from src.arch import Block, Cell, NetworkPlan, encode_cell, level_resolution
from src.config import Settings
from src.cost import LatencyModel, synth_lut_for_space
from src.evaluator import SurrogateEvaluator, SurrogateSpec
from src.spaces import preset

IMAGE_SIZE = 320


@pytest.fixture
def test_settings():
    """Settings with small search defaults."""
    return Settings(budget=40, batch_size=10, repeats=1, parallelism=1, log_level="DEBUG")


@pytest.fixture(scope="session")
def mnasfpn_space():
    return preset("mnasfpn")


@pytest.fixture(scope="session")
def no_expand_space():
    return preset("no-expand")


@pytest.fixture(scope="session")
def nas_fpnlite_space():
    return preset("nas-fpnlite-s")


@pytest.fixture(scope="session")
def conn_search_space():
    return preset("conn-search")


@pytest.fixture(scope="session", params=["nas-fpnlite-s", "no-expand", "mnasfpn", "conn-search"])
def any_space(request):
    """Each built-in preset in turn."""
    return preset(request.param)


def _block(inputs, level, expansion=96, kernel=3, merge_op="sum"):
    return Block(
        inputs=tuple(inputs),
        merge_op=merge_op,
        level=level,
        resolution=level_resolution(IMAGE_SIZE, level),
        expansion_channels=expansion,
        kernel=kernel,
    )


@pytest.fixture(scope="session")
def single_block_cell():
    """Discovered single-block cell: one 20x20 block with F=96 feeding every output.

    The four other internal blocks are valid but unreferenced, so pruning drops them.
    """
    internal = (_block((0, 1), level=4),) + tuple(
        _block((0, 1), level=3, expansion=16) for _ in range(4)
    )
    outputs = tuple(_block((p, 4), level=3 + p) for p in range(4))
    return Cell(
        internal_blocks=internal,
        output_blocks=outputs,
        output_levels=(3, 4, 5, 6),
        shared_channels=48,
        input_image_size=IMAGE_SIZE,
    )


@pytest.fixture(scope="session")
def single_block_genome(single_block_cell, mnasfpn_space):
    return encode_cell(single_block_cell, mnasfpn_space)


@pytest.fixture
def single_block_plan(single_block_cell):
    def make(repeats=1, sdo_enabled=True):
        return NetworkPlan(
            single_block_cell, repeats=repeats, input_image_size=IMAGE_SIZE, sdo_enabled=sdo_enabled
        )

    return make


@pytest.fixture(scope="session")
def mnasfpn_lut(mnasfpn_space):
    """Noise-free synthetic table covering the whole MnasFPN space."""
    return synth_lut_for_space(mnasfpn_space, LatencyModel(ms_per_madd=1e-6, fixed_ms=0.01, overhead_ms=100.0))


@pytest.fixture(scope="session")
def surrogate(mnasfpn_space):
    return SurrogateEvaluator(SurrogateSpec(seed=7), mnasfpn_space)
