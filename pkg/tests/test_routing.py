import random

import pytest

from celerlog.model import (
    InternalInvariantError,
    LogRecord,
    RouterConfig,
    SkeletonGroup,
)
from celerlog.routing import (
    bucket_by_length,
    group_by_skeleton,
    merge_bucket,
    pos_jaccard,
    route,
    select_threshold,
    singleton_ratio,
)
from corpus import fig4_lines, fig5_lines, make_template_corpus


def records_of(lines):
    return [LogRecord.from_content(i, line) for i, line in enumerate(lines)]


def make_group(key, members, record_ids):
    return SkeletonGroup(
        key=key,
        key_tokens=tuple(key.split()),
        members=frozenset(members),
        record_ids=tuple(record_ids),
    )


class TestGroupBySkeleton:
    def test_groups_masked_variants_together(self):
        groups = group_by_skeleton(records_of(["a 1 b", "a 2 b"]))
        assert len(groups) == 1
        assert groups[0].key == "a <NUM> b"
        assert groups[0].unique_count == 2

    def test_singleton(self):
        groups = group_by_skeleton(records_of(["hello world"]))
        assert len(groups) == 1
        assert groups[0].unique_count == 1

    def test_identical_contents_dedupe_members_not_ids(self):
        groups = group_by_skeleton(records_of(["same line", "same line"]))
        assert len(groups) == 1
        assert groups[0].unique_count == 1
        assert groups[0].record_ids == (0, 1)

    def test_members_reproduce_key(self):
        from celerlog.masking import mask_message

        groups = group_by_skeleton(records_of(fig4_lines() + fig5_lines()))
        for group in groups:
            for member in group.members:
                assert mask_message(member)[0] == group.key


class TestBucketByLength:
    def test_two_lengths(self):
        groups = [
            make_group("a b c d", ["a b c d"], [0]),
            make_group("e f g h", ["e f g h"], [1]),
            make_group("a b c d e f g", ["a b c d e f g"], [2]),
        ]
        buckets = bucket_by_length(groups)
        assert [(b.length, len(b.groups)) for b in buckets] == [(4, 2), (7, 1)]

    def test_empty(self):
        assert bucket_by_length([]) == []

    def test_three_groups_one_bucket(self):
        groups = group_by_skeleton(records_of(fig4_lines()))
        buckets = bucket_by_length(groups)
        assert [(b.length, len(b.groups)) for b in buckets] == [(4, 3)]


class TestPosJaccard:
    def test_identical(self):
        key = ("a", "b", "c", "d")
        assert pos_jaccard(key, key) == 1.0

    def test_three_of_four_positions(self):
        a = ("Failed", "password", "for", "<CL>")
        b = ("Failed", "password", "for", "<NUM>")
        assert pos_jaccard(a, b) == 0.6

    def test_disjoint(self):
        assert pos_jaccard(("a", "b", "c", "d"), ("e", "f", "g", "h")) == 0.0

    def test_length_mismatch_raises(self):
        with pytest.raises(InternalInvariantError):
            pos_jaccard(("a",), ("a", "b"))

    def test_position_matters(self):
        assert pos_jaccard(("a", "b"), ("b", "a")) == 0.0


class TestSingletonRatio:
    def test_half(self):
        assert singleton_ratio([0.6, 0.0], 0.60) == 0.5

    def test_all(self):
        assert singleton_ratio([0.6, 0.0], 0.61) == 1.0

    def test_zero_threshold(self):
        assert singleton_ratio([0.2, 0.9, 0.5], 0.0) == 0.0

    def test_empty_is_zero(self):
        assert singleton_ratio([], 0.7) == 0.0

    def test_nondecreasing_in_tau(self):
        rng = random.Random(3)
        scores = [rng.random() for _ in range(40)]
        ratios = [singleton_ratio(scores, round(0.01 * i, 2)) for i in range(101)]
        assert ratios == sorted(ratios)


class TestSelectThreshold:
    def test_reverts_to_preceding_grid_point(self):
        assert select_threshold([0.6, 0.0], RouterConfig()) == 0.60

    def test_never_reaching_limit_returns_tau_max(self):
        assert select_threshold([1.0, 1.0, 1.0], RouterConfig()) == 0.95

    def test_clamps_to_tau_min(self):
        assert select_threshold([0.4, 0.3], RouterConfig()) == 0.5


class TestMergeBucket:
    def test_worked_example(self):
        groups = group_by_skeleton(records_of(fig4_lines()))
        bucket = bucket_by_length(groups)[0]
        trace = []
        dense, sparse = merge_bucket(bucket, RouterConfig(), trace=trace)
        assert len(dense) == 1 and len(sparse) == 1
        assert {g.key for g in dense[0].member_groups} == {
            "Failed password for <CL>",
            "Failed password for <NUM>",
        }
        assert dense[0].anchor_key == "Failed password for <CL>"
        assert sparse[0].group.key == "session opened remotely today"
        assert trace[0].tau == 0.60
        assert trace[0].similarities == {
            "Failed password for <NUM>": 0.6,
            "session opened remotely today": 0.0,
        }

    def test_single_group_bucket_bypasses(self):
        groups = group_by_skeleton(records_of(["alpha beta gamma delta epsilon"]))
        bucket = bucket_by_length(groups)[0]
        dense, sparse = merge_bucket(bucket, RouterConfig())
        assert len(dense) == 1 and sparse == []
        assert dense[0].anchor_key is None

    def test_short_bucket_bypasses(self):
        lines = ["stop now please", "begin work now", "retry later maybe"]
        bucket = bucket_by_length(group_by_skeleton(records_of(lines)))[0]
        dense, sparse = merge_bucket(bucket, RouterConfig())
        assert len(dense) == 3 and sparse == []

    def test_anchor_budget_caps_dense_groups(self):
        groups = [
            make_group("aa bb cc dd", ["aa bb cc dd"], [0, 1]),
            make_group("ee ff gg hh", ["ee ff gg hh"], [2]),
            make_group("ii jj kk ll", ["ii jj kk ll"], [3]),
            make_group("mm nn oo pp", ["mm nn oo pp"], [4]),
        ]
        bucket = bucket_by_length(groups)[0]
        dense, sparse = merge_bucket(bucket, RouterConfig())
        assert len(dense) == 2
        assert len(sparse) == 2

    def test_verb_subset_blocks_merging(self):
        # Same shape at 3 of 4 positions, but the candidate lacks the anchor's verb.
        anchor = make_group("Started worker on <NUM>", ["Started worker on 1", "Started worker on 2"], [0, 1])
        candidate = make_group("Stopped worker on <NUM>", ["Stopped worker on 9"], [2])
        third = make_group("aa bb cc dd", ["aa bb cc dd"], [3])
        bucket = bucket_by_length([anchor, candidate, third])[0]
        dense, sparse = merge_bucket(bucket, RouterConfig())
        merged_keys = {g.key for g in dense[0].member_groups}
        assert merged_keys == {"Started worker on <NUM>"}

    def test_lone_anchor_still_emitted_dense(self):
        groups = [
            make_group("aa bb cc dd", ["aa bb cc dd"], [0, 1]),
            make_group("ee ff gg hh", ["ee ff gg hh"], [2]),
            make_group("ii jj kk ll", ["ii jj kk ll"], [3]),
        ]
        bucket = bucket_by_length(groups)[0]
        dense, sparse = merge_bucket(bucket, RouterConfig())
        assert len(dense) == 1
        assert len(dense[0].member_groups) == 1
        assert {s.group.key for s in sparse} == {"ee ff gg hh", "ii jj kk ll"}


class TestRoute:
    def test_empty_input(self):
        dense, sparse, stats = route([])
        assert dense == [] and sparse == []
        assert stats.dense_records == 0 and stats.sparse_records == 0

    def test_combined_worked_examples(self):
        records = records_of(fig4_lines() + fig5_lines())
        dense, sparse, stats = route(records)
        snapshot_groups = [
            g for g in dense if any("Snapshotting:" in m.key for m in g.member_groups)
        ]
        assert len(snapshot_groups) == 1
        assert sum(len(m.record_ids) for m in snapshot_groups[0].member_groups) == 5
        assert stats.dense_records + stats.sparse_records == len(records)

    def test_mostly_templated_corpus_routes_dense(self):
        lines, _ = make_template_corpus(n_lines=100, n_templates=1, n_oneoffs=1, seed=5)
        dense, sparse, stats = route(records_of(lines))
        assert stats.dense_records >= 99

    def test_partition_invariant(self):
        lines, _ = make_template_corpus(n_lines=400, n_templates=12, n_oneoffs=30, seed=11)
        records = records_of(lines)
        dense, sparse, stats = route(records)
        seen: list[int] = []
        for group in dense:
            seen.extend(group.record_ids())
        for item in sparse:
            seen.extend(item.group.record_ids)
        assert sorted(seen) == [r.line_id for r in records]

    def test_bucket_isolation(self):
        lines, _ = make_template_corpus(n_lines=300, n_templates=10, n_oneoffs=20, seed=2)
        dense, sparse, _ = route(records_of(lines))
        for group in dense:
            lengths = {len(m.key_tokens) for m in group.member_groups}
            assert len(lengths) == 1

    def test_anchor_dominance(self):
        lines, _ = make_template_corpus(n_lines=300, n_templates=8, n_oneoffs=40, seed=9)
        records = records_of(lines)
        counts = {g.key: g.unique_count for g in group_by_skeleton(records)}
        for bucket in bucket_by_length(group_by_skeleton(records)):
            trace = []
            merge_bucket(bucket, RouterConfig(), trace=trace)
            for state in trace:
                for key in state.similarities:
                    assert counts[state.anchor_key] >= counts[key]

    def test_verb_safety_for_every_merged_pair(self):
        from celerlog.masking import extract_verbs

        lines, _ = make_template_corpus(n_lines=600, n_templates=20, n_oneoffs=60, seed=31)
        lines += fig4_lines()
        dense, _, _ = route(records_of(lines))
        for group in dense:
            if group.anchor_key is None or len(group.member_groups) == 1:
                continue
            anchor_verbs = extract_verbs(group.anchor_key)
            for member in group.member_groups:
                assert anchor_verbs <= extract_verbs(member.key)

    def test_composes_with_parallel_bucket_mapper(self):
        from celerlog.pipeline import parallel_map_buckets

        lines, _ = make_template_corpus(n_lines=300, n_templates=10, n_oneoffs=20, seed=6)
        records = records_of(lines)
        sequential = route(records)
        parallel = route(
            records, bucket_mapper=lambda buckets, fn: parallel_map_buckets(buckets, 4, fn)
        )
        assert [s.group.key for s in sequential[1]] == [s.group.key for s in parallel[1]]
        assert [
            [m.key for m in g.member_groups] for g in sequential[0]
        ] == [[m.key for m in g.member_groups] for g in parallel[0]]

    def test_deterministic(self):
        lines, _ = make_template_corpus(n_lines=500, n_templates=15, n_oneoffs=40, seed=4)
        records = records_of(lines)
        first = route(records)
        second = route(records)
        assert [
            [m.key for m in g.member_groups] for g in first[0]
        ] == [[m.key for m in g.member_groups] for g in second[0]]
        assert [s.group.key for s in first[1]] == [s.group.key for s in second[1]]
