"""Append-only search history: one JSON candidate record per line."""

import csv
import logging
import os
from pathlib import Path
from typing import IO, Iterable, List, Literal, Optional, Tuple

from pydantic import BaseModel, ValidationError, model_validator

from src.errors import ConfigurationError

logger = logging.getLogger(__name__)


class Candidate(BaseModel):
    """One evaluated architecture."""

    candidate_id: str
    step: int
    genome: Tuple[int, ...]
    quality: Optional[float] = None
    latency_ms: Optional[float] = None
    reward: Optional[float] = None
    repeats: int = 1
    seed: int = 0
    status: Literal["ok", "failed"] = "ok"
    message: str = ""

    @model_validator(mode="after")
    def validate_ok_record(self) -> "Candidate":
        if self.status == "ok":
            if self.quality is None or self.reward is None or self.latency_ms is None:
                raise ValueError("ok candidates need quality, latency and reward")
            if self.latency_ms <= 0:
                raise ValueError(f"latency must be positive, got {self.latency_ms}")
        return self

    @property
    def ok(self) -> bool:
        return self.status == "ok"


class HistoryLog:
    """Single-writer, line-delimited history file.

    A torn final line left by an interrupted write is skipped on ``load``; with
    ``repair`` it is also cut from the file so that appending can resume cleanly.
    """

    def __init__(self, path: Optional[Path]):
        self.path = Path(path) if path is not None else None
        self._fh: Optional[IO[str]] = None

    def load(self, repair: bool = False) -> List[Candidate]:
        if self.path is None or not self.path.exists():
            return []
        text = self.path.read_text(encoding="utf-8")
        lines = text.split("\n")
        records: List[Candidate] = []
        for number, line in enumerate(lines, start=1):
            if not line.strip():
                continue
            try:
                records.append(Candidate.model_validate_json(line))
            except ValidationError as e:
                if number == len(lines) and not text.endswith("\n"):
                    logger.warning(
                        f"Skipping incomplete last history line in {self.path}",
                        extra={"path": str(self.path), "line": number, "repair": repair},
                    )
                    if repair:
                        self._truncate(text[: len(text) - len(line)])
                    break
                raise ConfigurationError(f"{self.path}:{number}: invalid history record: {e}") from e
        return records

    def _truncate(self, keep: str) -> None:
        self.path.write_text(keep, encoding="utf-8")

    def __enter__(self) -> "HistoryLog":
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = self.path.open("a", encoding="utf-8", newline="\n")
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def append(self, candidate: Candidate) -> None:
        if self._fh is None:
            return
        self._fh.write(candidate.model_dump_json() + "\n")
        self._fh.flush()
        os.fsync(self._fh.fileno())

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def read_history(path: Path) -> List[Candidate]:
    """Records of a history file, which is never modified."""
    if not Path(path).exists():
        raise ConfigurationError(f"history file {path} does not exist")
    return HistoryLog(path).load()


FRONTIER_COLUMNS = ("latency_ms", "quality", "reward", "candidate_id", "repeats", "genome")


def write_candidates_table(candidates: Iterable[Optional[Candidate]], path: Optional[Path], out=None) -> None:
    """Tab-separated table for plotting trade-off curves; absent entries become empty rows."""
    fh = Path(path).open("w", encoding="utf-8", newline="") if path is not None else out
    try:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(FRONTIER_COLUMNS)
        for c in candidates:
            if c is None:
                writer.writerow(["", "", "", "", "", ""])
                continue
            writer.writerow(
                [
                    repr(c.latency_ms),
                    repr(c.quality),
                    repr(c.reward),
                    c.candidate_id,
                    c.repeats,
                    " ".join(str(t) for t in c.genome),
                ]
            )
    finally:
        if path is not None:
            fh.close()
