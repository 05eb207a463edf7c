"""Configuration for the search engine."""

from typing import Any, Callable, List

from pydantic import ConfigDict, Field, GetCoreSchemaHandler
from pydantic_core import core_schema
from pydantic_settings import BaseSettings


class CommaSeparatedList:
    """Custom type for comma-separated lists.

    Subclasses set ``item_type`` to convert each element.
    """

    item_type: Callable[[Any], Any] = str

    @classmethod
    def __get_pydantic_core_schema__(
        cls, source_type: Any, handler: GetCoreSchemaHandler
    ) -> core_schema.CoreSchema:
        return core_schema.no_info_after_validator_function(
            cls._validate,
            core_schema.union_schema(
                [core_schema.str_schema(), core_schema.list_schema(core_schema.any_schema())]
            ),
            serialization=core_schema.plain_serializer_function_ser_schema(
                lambda x: ",".join(str(v) for v in x) if isinstance(x, list) else str(x),
                return_schema=core_schema.str_schema(),
            ),
        )

    @classmethod
    def _validate(cls, value: Any) -> List[Any]:
        """Validate and convert comma-separated string to list."""
        if isinstance(value, str):
            return [cls.item_type(item.strip()) for item in value.split(",") if item.strip()]
        elif isinstance(value, list):
            return [cls.item_type(item) for item in value]
        else:
            return []


class CommaSeparatedFloats(CommaSeparatedList):
    item_type = float


class CommaSeparatedInts(CommaSeparatedList):
    item_type = int


class Settings(BaseSettings):
    """Engine settings; every CLI flag falls back to one of these."""

    # Search space and network plan
    default_space: str = "mnasfpn"
    input_image_size: int = 320  # Square input side in pixels
    repeats: int = 3  # Cell repeats used for costing during search

    # Reward
    reward_w: float = -0.3

    # Search loop
    budget: int = 200
    batch_size: int = 20
    controller: str = "policy-gradient"  # policy-gradient, random, evolution
    parallelism: int = 1  # Evaluation workers per batch

    # Policy-gradient controller
    learning_rate: float = 0.3
    entropy_weight: float = 1e-3
    clip_epsilon: float = 0.2
    baseline_decay: float = 0.9
    ppo_epochs: int = 2

    # Evolution controller
    population_size: int = 50
    tournament_size: int = 10

    # Synthetic latency table
    lut_ms_per_madd: float = 1e-6
    lut_fixed_ms: float = 0.01
    lut_overhead_ms: float = 100.0

    # File-exchange evaluator
    exchange_timeout: float = 3600.0
    exchange_poll_interval: float = 0.5

    # Selection and repeats sweep
    target_latencies: CommaSeparatedFloats = Field(
        default=[166.0, 173.0, 180.0], description="Comma-separated latency targets in ms"
    )
    sweep_repeats: CommaSeparatedInts = Field(
        default=[3, 4, 5], description="Comma-separated repeat counts for the sweep"
    )

    log_level: str = "INFO"  # DEBUG, INFO, WARNING, ERROR, CRITICAL

    model_config = ConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        env_prefix="MNASFPN_",
        protected_namespaces=("settings_",),
    )


settings = Settings()
