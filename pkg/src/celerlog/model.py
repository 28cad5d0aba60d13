"""Shared domain types and run configuration."""

from __future__ import annotations

import threading
from dataclasses import asdict, dataclass

#: Placeholder written into final templates for every parameter position.
PLACEHOLDER = "<*>"

#: Designated tokens produced by the masking rules, in rule order.
MASK_TOKENS = ("<NUM>", "<CL>", "<UCL>", "<BL>", "<SL>")

SOURCE_STATISTICAL = "statistical"
SOURCE_LLM = "llm"
SOURCE_ROLLBACK = "rollback"


class CelerlogError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(CelerlogError):
    """Invalid configuration or unusable input; fatal at startup (exit code 2)."""


class InternalInvariantError(CelerlogError):
    """A should-never-happen condition; indicates a bug upstream of the caller."""


@dataclass(frozen=True, slots=True)
class LogRecord:
    """One raw log message body with its input position."""

    line_id: int
    content: str

    @property
    def tokens(self) -> tuple[str, ...]:
        """The whitespace split of content, derived on demand."""
        return tuple(self.content.split())

    @classmethod
    def from_content(cls, line_id: int, content: str) -> "LogRecord":
        return cls(line_id=line_id, content=content)


@dataclass(frozen=True, slots=True)
class SkeletonGroup:
    """All records sharing one masked skeleton; the skeleton is the group key."""

    key: str
    key_tokens: tuple[str, ...]
    members: frozenset[str]
    record_ids: tuple[int, ...]

    @property
    def unique_count(self) -> int:
        return len(self.members)


@dataclass(frozen=True, slots=True)
class LogBucket:
    """Skeleton groups whose keys share one token length; the unit of parallel work."""

    length: int
    groups: tuple[SkeletonGroup, ...]


@dataclass(frozen=True, slots=True)
class DenseGroup:
    """Skeleton groups merged together and bound for the statistical processor.

    anchor_key is None when the containing bucket was bypass-routed and no
    anchor round ever ran.
    """

    member_groups: tuple[SkeletonGroup, ...]
    anchor_key: str | None = None

    def record_ids(self) -> list[int]:
        ids: list[int] = []
        for group in self.member_groups:
            ids.extend(group.record_ids)
        return ids

    def distinct_contents(self) -> list[str]:
        seen: set[str] = set()
        for group in self.member_groups:
            seen.update(group.members)
        return sorted(seen)


@dataclass(frozen=True, slots=True)
class SparseGroup:
    """A single unmerged skeleton group bound for the LLM processor."""

    group: SkeletonGroup


@dataclass(frozen=True, slots=True)
class RouterConfig:
    """Knobs for routing, merging, parallelism and LLM batching."""

    alpha: float = 0.5
    p_quantile: float = 0.95
    tau_min: float = 0.5
    tau_max: float = 0.95
    tau_step: float = 0.01
    bypass_length: int = 3
    bypass_group_count: int = 2
    jobs: int = 8
    llm_batch_size: int = 1

    def validate(self) -> None:
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in (0, 1], got {self.alpha}")
        if not 0.0 < self.p_quantile <= 1.0:
            raise ConfigError(f"p-quantile must be in (0, 1], got {self.p_quantile}")
        if not 0.0 <= self.tau_min < self.tau_max <= 1.0:
            raise ConfigError(
                f"similarity sweep bounds must satisfy 0 <= tau_min < tau_max <= 1, "
                f"got [{self.tau_min}, {self.tau_max}]"
            )
        if self.tau_step <= 0.0:
            raise ConfigError(f"tau-step must be positive, got {self.tau_step}")
        if self.bypass_length < 0:
            raise ConfigError(f"bypass-length must be >= 0, got {self.bypass_length}")
        if self.bypass_group_count < 0:
            raise ConfigError(f"bypass-groups must be >= 0, got {self.bypass_group_count}")
        if self.jobs < 1:
            raise ConfigError(f"jobs must be >= 1, got {self.jobs}")
        if self.llm_batch_size < 1:
            raise ConfigError(f"batch-size must be >= 1, got {self.llm_batch_size}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, slots=True)
class TemplateResult:
    """A final template with the parameters extracted from one message."""

    template: str
    parameters: tuple[str, ...]
    source: str

    def token_sequence(self) -> list[str]:
        """Substitute parameters back into the template, token by token.

        A parameter may span several whitespace-separated tokens (after
        placeholder runs were collapsed); each expands in place.
        """
        out: list[str] = []
        params = iter(self.parameters)
        for token in self.template.split():
            if token == PLACEHOLDER:
                out.extend(next(params).split())
            else:
                out.append(token)
        return out


class CostLedger:
    """Run-level cost counters; increments are safe from concurrent workers."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.wall_time_seconds: float = 0.0
        self.tokens_consumed: int = 0
        self.llm_invocations: int = 0
        self.dense_record_count: int = 0
        self.sparse_record_count: int = 0

    def add_llm_usage(self, tokens: int, invocations: int = 1) -> None:
        with self._lock:
            self.tokens_consumed += tokens
            self.llm_invocations += invocations

    def add_routing_counts(self, dense_records: int, sparse_records: int) -> None:
        with self._lock:
            self.dense_record_count += dense_records
            self.sparse_record_count += sparse_records

    def set_wall_time(self, seconds: float) -> None:
        with self._lock:
            self.wall_time_seconds = max(self.wall_time_seconds, seconds)

    def to_dict(self) -> dict:
        with self._lock:
            return {
                "wall_time_seconds": self.wall_time_seconds,
                "tokens_consumed": self.tokens_consumed,
                "llm_invocations": self.llm_invocations,
                "dense_record_count": self.dense_record_count,
                "sparse_record_count": self.sparse_record_count,
            }
