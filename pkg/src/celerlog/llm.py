"""Sparse-group processing through a pluggable inference backend.

The model's job is deliberately narrow: list the exact variable substrings of
each message. Returned variables are checked against the original text before
anything is masked, and any response that cannot be validated degrades to a
rollback (the raw message becomes its own template) rather than an error.
"""

from __future__ import annotations

import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from typing import Protocol, Sequence

import requests

from .masking import _data_text, mask_token
from .model import (
    PLACEHOLDER,
    SOURCE_LLM,
    SOURCE_ROLLBACK,
    CelerlogError,
    ConfigError,
    CostLedger,
    RouterConfig,
    SparseGroup,
    TemplateResult,
)

DEFAULT_MAX_RETRIES = 3
DEFAULT_BACKOFF_SECONDS = 0.5

_RESPONSE_LINE = re.compile(r"^\s*(\d+)\s*:\s?(.*)$")


class FormatError(CelerlogError):
    """The backend's reply does not contain one variable list per message."""


class TransportError(CelerlogError):
    """The backend could not be reached or answered unusably; retryable."""


@dataclass(frozen=True, slots=True)
class PromptEnvelope:
    """A full request: fixed framing plus the per-request message payload.

    Only the payload varies between requests in a run; task description,
    constraints and examples are byte-identical every time.
    """

    task_description: str
    constraints: str
    examples: str
    payload: str
    messages: tuple[str, ...]

    def render(self) -> str:
        return "\n\n".join(
            (self.task_description, self.constraints, self.examples, self.payload)
        )


@dataclass(frozen=True, slots=True)
class BackendResponse:
    text: str
    prompt_tokens: int
    completion_tokens: int


class InferenceBackend(Protocol):
    def infer(self, envelope: PromptEnvelope) -> BackendResponse: ...


@lru_cache(maxsize=1)
def load_prompt_parts() -> tuple[str, str, str]:
    """Load the fixed prompt sections from the packaged fixture."""
    text = _data_text("prompt.txt")
    sections: dict[str, list[str]] = {}
    current: list[str] | None = None
    for line in text.splitlines():
        header = line.strip()
        if header in ("=== TASK ===", "=== CONSTRAINTS ===", "=== EXAMPLES ==="):
            current = sections.setdefault(header, [])
            continue
        if current is not None:
            current.append(line)
    try:
        return tuple("\n".join(sections[name]).strip() for name in
                     ("=== TASK ===", "=== CONSTRAINTS ===", "=== EXAMPLES ==="))  # type: ignore[return-value]
    except KeyError as exc:
        raise ConfigError(f"prompt fixture is missing section {exc}") from exc


def build_prompt(messages: Sequence[str]) -> PromptEnvelope:
    """Assemble the envelope for a batch of message contents."""
    if not messages:
        raise ValueError("build_prompt needs at least one message")
    task, constraints, examples = load_prompt_parts()
    lines = ["Input messages:"]
    lines.extend(f"{index}. {message}" for index, message in enumerate(messages, start=1))
    return PromptEnvelope(
        task_description=task,
        constraints=constraints,
        examples=examples,
        payload="\n".join(lines),
        messages=tuple(messages),
    )


def parse_response(raw: str, messages: Sequence[str]) -> list[list[str]]:
    """Extract one variable list per message from a backend reply.

    Lines look like ``2:<TAB>var<TAB>var``; a bare ``2:`` means no variables.
    Missing, duplicated or surplus indices fail the whole batch.
    """
    found: dict[int, list[str]] = {}
    for line in raw.splitlines():
        match = _RESPONSE_LINE.match(line)
        if match is None:
            continue
        index = int(match.group(1))
        if index in found:
            raise FormatError(f"duplicate variable list for message {index}")
        variables = [piece.strip() for piece in match.group(2).split("\t")]
        found[index] = [variable for variable in variables if variable]
    expected = set(range(1, len(messages) + 1))
    if set(found) != expected:
        raise FormatError(
            f"expected variable lists for messages {sorted(expected)}, got {sorted(found)}"
        )
    return [found[index] for index in sorted(expected)]


def validate_and_mask(content: str, variables: Sequence[str]) -> TemplateResult:
    """Mask validated variable substrings; fall back to the raw message.

    Variables not present verbatim in the message are dropped. Survivors are
    masked longest first, scanning left to right without overlaps, and the
    masking is then snapped outward to whole tokens. No survivors means a
    rollback: the original message is its own template.
    """
    survivors = [variable for variable in variables if variable and variable in content]
    if not survivors:
        return TemplateResult(template=content, parameters=(), source=SOURCE_ROLLBACK)

    covered = bytearray(len(content))
    for variable in sorted(set(survivors), key=lambda v: (-len(v), survivors.index(v))):
        start = 0
        while True:
            position = content.find(variable, start)
            if position == -1:
                break
            end = position + len(variable)
            if any(covered[position:end]):
                start = position + 1
                continue
            for i in range(position, end):
                covered[i] = 1
            start = end

    template_tokens: list[str] = []
    parameters: list[str] = []
    for match in re.finditer(r"\S+", content):
        token = match.group(0)
        if any(covered[match.start() : match.end()]) or PLACEHOLDER in token:
            template_tokens.append(PLACEHOLDER)
            parameters.append(token)
        else:
            template_tokens.append(token)
    if not parameters:
        return TemplateResult(template=content, parameters=(), source=SOURCE_ROLLBACK)
    return TemplateResult(
        template=" ".join(template_tokens),
        parameters=tuple(parameters),
        source=SOURCE_LLM,
    )


class MockBackend:
    """Deterministic offline backend for tests, CI and dry runs.

    Every token containing a digit, plus every token the mask rules would
    classify, is reported as a variable. Token usage follows a fixed
    convention: rendered character count divided by four, on each side.
    """

    io_bound = False

    def infer(self, envelope: PromptEnvelope) -> BackendResponse:
        lines = []
        for index, message in enumerate(envelope.messages, start=1):
            variables: list[str] = []
            for token in message.split():
                if token in variables:
                    continue
                if any(ch.isdigit() for ch in token) or mask_token(token) != token:
                    variables.append(token)
            suffix = "\t" + "\t".join(variables) if variables else ""
            lines.append(f"{index}:{suffix}")
        text = "\n".join(lines)
        return BackendResponse(
            text=text,
            prompt_tokens=len(envelope.render()) // 4,
            completion_tokens=len(text) // 4,
        )


class HttpBackend:
    """Chat-completions-style HTTP backend; temperature pinned to 0."""

    io_bound = True

    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key: str | None = None,
        timeout: float = 60.0,
    ) -> None:
        if not endpoint:
            raise ConfigError("http backend needs an endpoint URL")
        if not model:
            raise ConfigError("http backend needs a model name")
        self.endpoint = endpoint
        self.model = model
        self.api_key = api_key
        self.timeout = timeout

    def infer(self, envelope: PromptEnvelope) -> BackendResponse:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        body = {
            "model": self.model,
            "temperature": 0,
            "messages": [{"role": "user", "content": envelope.render()}],
        }
        try:
            response = requests.post(
                self.endpoint, json=body, headers=headers, timeout=self.timeout
            )
        except requests.RequestException as exc:
            raise TransportError(f"request to {self.endpoint} failed: {exc}") from exc
        if response.status_code != 200:
            raise TransportError(
                f"backend returned HTTP {response.status_code}: {response.text[:200]}"
            )
        try:
            data = response.json()
            text = data["choices"][0]["message"]["content"]
        except (ValueError, LookupError, TypeError) as exc:
            raise TransportError(f"malformed completion payload: {exc}") from exc
        usage = data.get("usage") or {}
        return BackendResponse(
            text=text,
            prompt_tokens=int(usage.get("prompt_tokens", 0)),
            completion_tokens=int(usage.get("completion_tokens", 0)),
        )


def process_sparse(
    groups: Sequence[SparseGroup],
    backend: InferenceBackend,
    config: RouterConfig,
    ledger: CostLedger,
    max_retries: int = DEFAULT_MAX_RETRIES,
    backoff_seconds: float = DEFAULT_BACKOFF_SECONDS,
) -> dict[str, TemplateResult]:
    """Run every sparse group through the backend; returns content -> result.

    One representative per distinct content is queried (a sparse group
    normally holds exactly one). Requests go out in batches of the configured
    size with up to ``config.jobs`` in flight. Transport failures retry with
    exponential backoff; exhausted retries and malformed replies both degrade
    to rollbacks, never to exceptions. Every attempt counts as an invocation.
    """
    contents: list[str] = []
    for item in sorted(groups, key=lambda s: s.group.key):
        contents.extend(sorted(item.group.members))
    if not contents:
        return {}

    batches = [
        contents[start : start + config.llm_batch_size]
        for start in range(0, len(contents), config.llm_batch_size)
    ]

    def rollback_all(batch: list[str]) -> dict[str, TemplateResult]:
        return {
            content: TemplateResult(template=content, parameters=(), source=SOURCE_ROLLBACK)
            for content in batch
        }

    def handle(batch: list[str]) -> dict[str, TemplateResult]:
        envelope = build_prompt(batch)
        attempts = 0
        while True:
            attempts += 1
            try:
                response = backend.infer(envelope)
            except TransportError:
                ledger.add_llm_usage(0, invocations=1)
                if attempts > max_retries:
                    return rollback_all(batch)
                time.sleep(backoff_seconds * (2 ** (attempts - 1)))
                continue
            ledger.add_llm_usage(
                response.prompt_tokens + response.completion_tokens, invocations=1
            )
            try:
                variable_lists = parse_response(response.text, batch)
            except FormatError:
                return rollback_all(batch)
            return {
                content: validate_and_mask(content, variables)
                for content, variables in zip(batch, variable_lists)
            }

    if config.jobs > 1 and len(batches) > 1:
        with ThreadPoolExecutor(max_workers=config.jobs) as executor:
            outcomes = list(executor.map(handle, batches))
    else:
        outcomes = [handle(batch) for batch in batches]

    results: dict[str, TemplateResult] = {}
    for outcome in outcomes:
        results.update(outcome)
    return results
