"""End-to-end orchestration: ingest, route, process in parallel, write outputs.

The CPU-heavy phases (masking and bucket merging) run on process pools that
read their inputs through fork-inherited module state, so the only pickle
traffic is the results; sparse groups are network-bound and run on a thread
while the dense side computes. All aggregation happens in a fixed order, so
output bytes never depend on the worker count. Platforms without the fork
start method fall back to sequential compute with threaded LLM requests.
"""

from __future__ import annotations

import csv
import gc
import io
import json
import logging
import multiprocessing
import os
import re
import threading
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import partial
from pathlib import Path
from time import perf_counter
from typing import Callable, Sequence, TypeVar

from . import llm, statistical
from .masking import compile_header_pattern, mask_message, strip_header
from .model import (
    ConfigError,
    CostLedger,
    DenseGroup,
    InternalInvariantError,
    LogBucket,
    LogRecord,
    RouterConfig,
    SparseGroup,
    TemplateResult,
)
from .routing import RoutingStats, bucket_by_length, group_by_skeleton, merge_bucket

logger = logging.getLogger(__name__)

#: Below this many records, process pools cost more than they save.
_PARALLEL_THRESHOLD = 2000

R = TypeVar("R")

#: Inputs for forked workers, set immediately before each pool spins up.
_FORK_STATE: dict = {}


@dataclass(frozen=True, slots=True)
class IngestStats:
    record_count: int
    blank_lines: int
    decode_errors: int

    def to_dict(self) -> dict:
        return {
            "record_count": self.record_count,
            "blank_lines": self.blank_lines,
            "decode_errors": self.decode_errors,
        }


@dataclass(frozen=True, slots=True)
class ParsedRecord:
    line_id: int
    content: str
    result: TemplateResult


@dataclass(slots=True)
class RunResult:
    rows: list[ParsedRecord]
    catalog: Counter
    ledger: CostLedger
    routing: RoutingStats
    ingest: IngestStats


def ingest(
    path: str | Path,
    input_format: str = "raw",
    header_pattern: str | None = None,
) -> tuple[list[LogRecord], IngestStats]:
    """Read records from a raw log file or a structured CSV.

    Raw input takes one record per line after header stripping; CSV input
    reads the ``Content`` column. Blank lines are skipped and counted, and
    undecodable bytes are replaced and counted rather than fatal.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"input file not found: {path}")
    compiled = compile_header_pattern(header_pattern) if header_pattern else None

    data = path.read_bytes()
    text = data.decode("utf-8", errors="replace")
    decode_errors = text.count("\ufffd")

    records: list[LogRecord] = []
    blank = 0
    if input_format == "raw":
        for line in text.splitlines():
            content = strip_header(line, compiled)
            if not content.strip():
                blank += 1
                continue
            records.append(LogRecord.from_content(len(records), content))
    elif input_format == "csv":
        blank += sum(1 for line in text.splitlines() if not line.strip())
        reader = csv.DictReader(io.StringIO(text))
        if reader.fieldnames is None or "Content" not in reader.fieldnames:
            raise ConfigError(f"structured input {path} has no Content column")
        for row in reader:
            content = row.get("Content") or ""
            if not content.strip():
                blank += 1
                continue
            records.append(LogRecord.from_content(len(records), content))
    else:
        raise ConfigError(f"unknown input format: {input_format!r}")

    stats = IngestStats(record_count=len(records), blank_lines=blank, decode_errors=decode_errors)
    return records, stats


def _fork_ready() -> bool:
    try:
        return multiprocessing.get_start_method() == "fork"
    except ValueError:  # pragma: no cover
        return False


def _effective_workers(jobs: int) -> int:
    # CPU-bound pools never benefit from more processes than cores; jobs above
    # the core count still raise the in-flight limit for network requests.
    return max(1, min(jobs, os.cpu_count() or 1))


def _ranges(total: int, parts: int) -> list[tuple[int, int]]:
    size = max(1, (total + parts - 1) // parts)
    return [(start, min(start + size, total)) for start in range(0, total, size)]


def _fork_map(
    key: str,
    data,
    worker: Callable[[int, int], R],
    total: int,
    jobs: int,
    what: str,
    parts: int | None = None,
) -> list[R]:
    """Run ``worker(start, end)`` over index ranges of fork-inherited data.

    The data is published under ``_FORK_STATE[key]`` before the pool forks,
    so workers read it from inherited memory; only results travel back.
    Results are ordered by range, independent of completion order.
    """
    workers = _effective_workers(jobs)
    spans = _ranges(total, parts if parts is not None else workers * 4)
    _FORK_STATE[key] = data
    # Freezing the heap keeps the children's collector from writing GC headers
    # across every inherited page, which would otherwise copy-on-write the
    # whole parent heap; the short-lived workers run without collection.
    gc.freeze()
    try:
        out: list[R] = [None] * len(spans)  # type: ignore[list-item]
        with ProcessPoolExecutor(max_workers=workers, initializer=gc.disable) as pool:
            futures = {
                pool.submit(worker, start, end): index
                for index, (start, end) in enumerate(spans)
            }
            for future, index in futures.items():
                try:
                    out[index] = future.result()
                except Exception as exc:
                    raise InternalInvariantError(f"{what} worker failed: {exc}") from exc
        return out
    finally:
        gc.unfreeze()
        _FORK_STATE.pop(key, None)


def _mask_span(start: int, end: int) -> list[str]:
    contents: list[str] = _FORK_STATE["contents"]
    return [mask_message(content)[0] for content in contents[start:end]]


def _merge_span(start: int, end: int) -> list[tuple[list[tuple[str | None, list[str]]], list[str]]]:
    buckets: list[LogBucket] = _FORK_STATE["buckets"]
    config: RouterConfig = _FORK_STATE["merge_config"]
    outcomes = []
    for bucket in buckets[start:end]:
        try:
            dense, sparse = merge_bucket(bucket, config)
        except Exception as exc:
            raise InternalInvariantError(
                f"routing failed in bucket of length {bucket.length}: {exc}"
            ) from exc
        outcomes.append(
            (
                [(d.anchor_key, [m.key for m in d.member_groups]) for d in dense],
                [s.group.key for s in sparse],
            )
        )
    return outcomes


def parallel_map_buckets(
    buckets: Sequence[LogBucket],
    worker_count: int,
    work_fn: Callable[[LogBucket], R],
) -> list[R]:
    """Apply work_fn to each bucket with up to worker_count workers.

    Results come back ordered by bucket (buckets arrive sorted by length), so
    a single worker and many workers produce identical aggregates. A failing
    work unit fails the whole run with the bucket named. With more than one
    worker, work_fn must be picklable (a module-level function or a partial
    over one).
    """
    if worker_count < 1:
        raise ConfigError(f"worker count must be >= 1, got {worker_count}")
    if not buckets:
        return []
    if worker_count == 1 or len(buckets) == 1:
        results = []
        for bucket in buckets:
            try:
                results.append(work_fn(bucket))
            except Exception as exc:
                raise InternalInvariantError(
                    f"routing failed in bucket of length {bucket.length}: {exc}"
                ) from exc
        return results
    out: list[R] = [None] * len(buckets)  # type: ignore[list-item]
    with ProcessPoolExecutor(max_workers=_effective_workers(worker_count)) as pool:
        futures = {pool.submit(work_fn, bucket): index for index, bucket in enumerate(buckets)}
        for future, index in futures.items():
            try:
                out[index] = future.result()
            except Exception as exc:
                raise InternalInvariantError(
                    f"routing failed in bucket of length {buckets[index].length}: {exc}"
                ) from exc
    return out


def _route_records(
    records: Sequence[LogRecord], config: RouterConfig, use_pool: bool
) -> tuple[list[DenseGroup], list[SparseGroup], RoutingStats]:
    contents = [record.content for record in records]
    if use_pool:
        skeletons: list[str] = []
        for part in _fork_map("contents", contents, _mask_span, len(contents), config.jobs, "masking"):
            skeletons.extend(part)
    else:
        skeletons = [mask_message(content)[0] for content in contents]

    groups = group_by_skeleton(records, skeletons)
    buckets = bucket_by_length(groups)
    by_key = {group.key: group for group in groups}

    dense: list[DenseGroup] = []
    sparse: list[SparseGroup] = []
    # Merging cost grows with the square of groups per bucket while the keys
    # shipped back stay small, so the pool only engages once groups abound.
    if use_pool and len(groups) >= _PARALLEL_THRESHOLD and len(buckets) > 1:
        _FORK_STATE["merge_config"] = config
        try:
            # One task per bucket: buckets arrive sorted by length, so fixed
            # ranges would hand all the crowded buckets to a single worker.
            spans = _fork_map(
                "buckets", buckets, _merge_span, len(buckets), config.jobs, "routing",
                parts=len(buckets),
            )
        finally:
            _FORK_STATE.pop("merge_config", None)
        for span in spans:
            for dense_keys, sparse_keys in span:
                for anchor_key, member_keys in dense_keys:
                    dense.append(
                        DenseGroup(
                            member_groups=tuple(by_key[key] for key in member_keys),
                            anchor_key=anchor_key,
                        )
                    )
                sparse.extend(SparseGroup(group=by_key[key]) for key in sparse_keys)
    else:
        outcomes = parallel_map_buckets(buckets, 1, partial(merge_bucket, config=config))
        for bucket_dense, bucket_sparse in outcomes:
            dense.extend(bucket_dense)
            sparse.extend(bucket_sparse)

    stats = RoutingStats(
        skeleton_groups=len(groups),
        buckets=len(buckets),
        dense_groups=len(dense),
        sparse_groups=len(sparse),
        dense_records=sum(len(group.record_ids()) for group in dense),
        sparse_records=sum(len(item.group.record_ids) for item in sparse),
    )
    return dense, sparse, stats


def run(
    input_path: str | Path,
    config: RouterConfig | None = None,
    backend: llm.InferenceBackend | None = None,
    input_format: str = "raw",
    header_pattern: str | None = None,
    out_dir: str | Path | None = None,
) -> RunResult:
    """Parse a corpus end to end and optionally write the output files."""
    config = config or RouterConfig()
    config.validate()
    backend = backend or llm.MockBackend()
    started_at = perf_counter()

    records, ingest_stats = ingest(input_path, input_format, header_pattern)
    ledger = CostLedger()
    use_pool = config.jobs > 1 and len(records) >= _PARALLEL_THRESHOLD and _fork_ready()

    dense, sparse, routing_stats = _route_records(records, config, use_pool)
    ledger.add_routing_counts(routing_stats.dense_records, routing_stats.sparse_records)

    # Sparse groups wait on the network; run them while the dense side computes.
    # The thread starts only after the last fork above, so no pool ever forks
    # a multi-threaded parent.
    sparse_results: dict[str, TemplateResult] = {}
    sparse_error: list[BaseException] = []

    def sparse_task() -> None:
        try:
            sparse_results.update(llm.process_sparse(sparse, backend, config, ledger))
        except BaseException as exc:  # re-raised on the main thread
            sparse_error.append(exc)

    # Offloading to a thread only pays when the backend actually waits on I/O;
    # for CPU-bound backends the interpreter lock would just tax both sides.
    sparse_thread: threading.Thread | None = None
    if sparse and config.jobs > 1 and getattr(backend, "io_bound", True):
        sparse_thread = threading.Thread(target=sparse_task, name="sparse-processor")
        sparse_thread.start()
    elif sparse:
        sparse_task()

    # Dense extraction is one linear scan over the distinct messages; shipping
    # member sets to workers costs more than the scan, so it stays here and
    # overlaps with the sparse thread's network waits.
    by_content: dict[str, TemplateResult] = {}
    for group in dense:
        by_content.update(statistical.extract_template(group))

    if sparse_thread is not None:
        sparse_thread.join()
    if sparse_error:
        raise sparse_error[0]
    by_content.update(sparse_results)

    final: dict[str, TemplateResult] = {
        content: statistical.finalize(result, tuple(content.split()))
        for content, result in by_content.items()
    }

    rows: list[ParsedRecord] = []
    for record in records:
        result = final.get(record.content)
        if result is None:
            raise InternalInvariantError(f"record {record.line_id} missing from routing output")
        rows.append(ParsedRecord(line_id=record.line_id, content=record.content, result=result))
    catalog = Counter(row.result.template for row in rows)

    if out_dir is not None:
        write_output(
            rows,
            catalog,
            ledger,
            out_dir,
            config=config,
            routing=routing_stats,
            ingest_stats=ingest_stats,
            started_at=started_at,
        )
    ledger.set_wall_time(perf_counter() - started_at)
    return RunResult(
        rows=rows, catalog=catalog, ledger=ledger, routing=routing_stats, ingest=ingest_stats
    )


def escape_parameters(parameters: Sequence[str]) -> str:
    return "|".join(parameter.replace("|", "\\|") for parameter in parameters)


def unescape_parameters(text: str) -> list[str]:
    if not text:
        return []
    pieces = re.split(r"(?<!\\)\|", text)
    return [piece.replace("\\|", "|") for piece in pieces]


def write_output(
    rows: Sequence[ParsedRecord],
    catalog: Counter,
    ledger: CostLedger,
    out_dir: str | Path,
    config: RouterConfig | None = None,
    routing: RoutingStats | None = None,
    ingest_stats: IngestStats | None = None,
    started_at: float | None = None,
) -> None:
    """Write structured.csv, templates.csv and run.json into out_dir.

    The wall clock stops after the CSVs are on disk, so the figure recorded in
    run.json covers ingest, processing and the bulk of output writing.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "structured.csv", "w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(["LineId", "Content", "EventTemplate", "Parameters"])
            for row in rows:
                writer.writerow(
                    [
                        row.line_id,
                        row.content,
                        row.result.template,
                        escape_parameters(row.result.parameters),
                    ]
                )
        with open(out / "templates.csv", "w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(["EventTemplate", "Occurrences"])
            for template, count in sorted(catalog.items(), key=lambda kv: (-kv[1], kv[0])):
                writer.writerow([template, count])
        if started_at is not None:
            ledger.set_wall_time(perf_counter() - started_at)
        report = {
            "ledger": ledger.to_dict(),
            "config": config.to_dict() if config else None,
            "routing": routing.to_dict() if routing else None,
            "ingest": ingest_stats.to_dict() if ingest_stats else None,
        }
        with open(out / "run.json", "w", encoding="utf-8") as handle:
            json.dump(report, handle, indent=2, sort_keys=True)
            handle.write("\n")
    except OSError as exc:
        raise ConfigError(f"cannot write outputs to {out}: {exc}") from exc
