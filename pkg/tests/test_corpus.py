"""Ingestion, overlap and time-split tests."""

import json
from collections import Counter

import numpy as np
import pytest

from multitap.corpus import (
    DomainDataset,
    InteractionRecord,
    ItemMeta,
    SplitBundle,
    build_domain_pair,
    load_domain,
    time_split,
)
from multitap.errors import (
    DegenerateSplitError,
    DuplicateInteractionError,
    EmptyOverlapError,
    ParseError,
    UnknownItemError,
)

TS_2018 = 1514764800
TS_2019 = 1546300800
TS_2020 = 1577836800
TS_2021 = 1609459200


def write_jsonl(path, rows):
    path.write_text("\n".join(json.dumps(r) for r in rows) + "\n")


def meta_row(item, category="cat", price=10.0):
    return {
        "item": item,
        "title": f"title {item}",
        "category": category,
        "price": price,
        "avg_rating": 4.0,
        "rating_count": 3,
    }


def make_dataset(domain_id, triples, categories=None):
    """triples: (user, item, ts) or (user, item, ts, category)"""
    categories = categories or {}
    items = {}
    records = []
    for row in triples:
        user, item, ts = row[:3]
        category = row[3] if len(row) > 3 else categories.get(item, "cat")
        items.setdefault(
            item, ItemMeta(item, f"t {item}", category, 5.0, 4.0, 2)
        )
        records.append(InteractionRecord(user, item, 5.0, ts))
    return DomainDataset.from_records(domain_id, records, items)


class TestLoadDomain:
    def test_single_line(self, tmp_path):
        write_jsonl(tmp_path / "meta.jsonl", [meta_row("i1")])
        write_jsonl(
            tmp_path / "inter.jsonl",
            [{"user": "u1", "item": "i1", "rating": 5.0, "ts": 1546300800}],
        )
        ds = load_domain(tmp_path / "inter.jsonl", tmp_path / "meta.jsonl", "demo")
        assert ds.interactions == (InteractionRecord("u1", "i1", 5.0, 1546300800),)
        assert ds.users == {"u1"}

    def test_rating_out_of_range_names_line(self, tmp_path):
        write_jsonl(tmp_path / "meta.jsonl", [meta_row("i1")])
        write_jsonl(
            tmp_path / "inter.jsonl",
            [
                {"user": "u1", "item": "i1", "rating": 5.0, "ts": 10},
                {"user": "u2", "item": "i1", "rating": 7.0, "ts": 11},
            ],
        )
        with pytest.raises(ParseError, match=r":2: rating 7\.0"):
            load_domain(tmp_path / "inter.jsonl", tmp_path / "meta.jsonl", "demo")

    def test_unknown_item(self, tmp_path):
        write_jsonl(tmp_path / "meta.jsonl", [meta_row("i1")])
        write_jsonl(
            tmp_path / "inter.jsonl",
            [{"user": "u1", "item": "ghost", "rating": 3.0, "ts": 10}],
        )
        with pytest.raises(UnknownItemError, match="ghost"):
            load_domain(tmp_path / "inter.jsonl", tmp_path / "meta.jsonl", "demo")

    def test_duplicate_triple(self, tmp_path):
        write_jsonl(tmp_path / "meta.jsonl", [meta_row("i1")])
        row = {"user": "u1", "item": "i1", "rating": 3.0, "ts": 10}
        write_jsonl(tmp_path / "inter.jsonl", [row, row])
        with pytest.raises(DuplicateInteractionError):
            load_domain(tmp_path / "inter.jsonl", tmp_path / "meta.jsonl", "demo")

    def test_same_pair_distinct_timestamps_kept(self, tmp_path):
        write_jsonl(tmp_path / "meta.jsonl", [meta_row("i1")])
        write_jsonl(
            tmp_path / "inter.jsonl",
            [
                {"user": "u1", "item": "i1", "rating": 3.0, "ts": 10},
                {"user": "u1", "item": "i1", "rating": 3.0, "ts": 11},
            ],
        )
        ds = load_domain(tmp_path / "inter.jsonl", tmp_path / "meta.jsonl", "demo")
        assert len(ds.interactions) == 2

    def test_missing_price_allowed(self, tmp_path):
        write_jsonl(tmp_path / "meta.jsonl", [meta_row("i1", price=None)])
        write_jsonl(
            tmp_path / "inter.jsonl",
            [{"user": "u1", "item": "i1", "rating": 3.0, "ts": 10}],
        )
        ds = load_domain(tmp_path / "inter.jsonl", tmp_path / "meta.jsonl", "demo")
        assert ds.items["i1"].price is None

    def test_invalid_json_names_line(self, tmp_path):
        (tmp_path / "meta.jsonl").write_text('{"item": "i1", broken\n')
        write_jsonl(tmp_path / "inter.jsonl", [])
        with pytest.raises(ParseError, match=":1:"):
            load_domain(tmp_path / "inter.jsonl", tmp_path / "meta.jsonl", "demo")


class TestDomainPair:
    def test_overlap_intersection(self):
        src = make_dataset("s", [("a", "i1", 1), ("b", "i1", 2)])
        tgt = make_dataset("t", [("b", "j1", 1), ("c", "j1", 2)])
        pair = build_domain_pair(src, tgt)
        assert pair.overlap == {"b"}

    def test_disjoint_users_error(self):
        src = make_dataset("s", [("a", "i1", 1)])
        tgt = make_dataset("t", [("b", "j1", 1)])
        with pytest.raises(EmptyOverlapError):
            build_domain_pair(src, tgt)


class TestTimeSplit:
    def test_forced_chronology(self):
        ds = make_dataset(
            "d", [("u", "i1", TS_2018), ("u", "i2", TS_2020), ("u", "i3", TS_2021)]
        )
        bundle = time_split(ds, TS_2019, valid_fraction=0.5)
        assert [r.item_id for r in bundle.train] == ["i1"]
        assert [r.item_id for r in bundle.valid] == ["i2"]
        assert [r.item_id for r in bundle.test] == ["i3"]

    def test_post_only_user_dropped(self):
        ds = make_dataset(
            "d",
            [
                ("u", "i1", TS_2018),
                ("u", "i2", TS_2020),
                ("u", "i3", TS_2021),
                ("v", "i1", TS_2020),
            ],
        )
        bundle = time_split(ds, TS_2019)
        users_post = {r.user_id for r in bundle.valid} | {r.user_id for r in bundle.test}
        assert "v" not in users_post
        dropped = len(ds.interactions) - len(bundle.train) - len(bundle.valid) - len(bundle.test)
        assert dropped == 1

    def test_counting_identity_on_synthetic_corpus(self):
        rng = np.random.default_rng(42)
        triples = []
        for k in range(1000):
            user = f"u{rng.integers(0, 60)}"
            item = f"i{rng.integers(0, 40)}"
            ts = int(rng.integers(TS_2018, TS_2021))
            triples.append((user, item, ts + k))  # keep triples unique
        ds = make_dataset("d", triples)
        bundle = time_split(ds, TS_2019, valid_fraction=0.5)
        train_users = {r.user_id for r in bundle.train}
        # enumeration oracle over every record
        dropped = sum(
            1
            for r in ds.interactions
            if r.timestamp >= TS_2019 and r.user_id not in train_users
        )
        total = len(bundle.train) + len(bundle.valid) + len(bundle.test) + dropped
        assert total == len(ds.interactions)
        # chronological per-user property
        by_user_valid = {}
        for r in bundle.valid:
            by_user_valid.setdefault(r.user_id, []).append(r.timestamp)
        for r in bundle.test:
            if r.user_id in by_user_valid:
                assert max(by_user_valid[r.user_id]) <= r.timestamp

    def test_monotonicity_in_boundary(self):
        rng = np.random.default_rng(7)
        triples = [
            (f"u{rng.integers(0, 10)}", f"i{rng.integers(0, 10)}", int(rng.integers(TS_2018, TS_2021)) + k)
            for k in range(300)
        ]
        ds = make_dataset("d", triples)
        sizes = []
        for boundary in (TS_2019, TS_2019 + 10_000_000, TS_2020):
            try:
                sizes.append(len(time_split(ds, boundary).train))
            except DegenerateSplitError:
                sizes.append(len([r for r in ds.interactions if r.timestamp < boundary]))
        assert sizes == sorted(sizes)

    def test_degenerate_split_errors(self):
        ds = make_dataset("d", [("u", "i1", TS_2018)])
        with pytest.raises(DegenerateSplitError):
            time_split(ds, TS_2019)  # nothing after the boundary
        with pytest.raises(DegenerateSplitError):
            time_split(ds, TS_2018 - 1000)  # nothing before it


class TestIndexViews:
    def test_category_views(self):
        ds = make_dataset(
            "d",
            [
                ("u", "i1", 1, "catA"),
                ("u", "i2", 2, "catA"),
                ("u", "i3", 3, "catB"),
            ],
        )
        assert ds.distinct_items("u", "catA") == ["i1", "i2"]
        assert ds.interaction_count("u", "catA") == 2
        assert ds.distinct_items("u", "catC") == []

    def test_views_match_brute_force_group_by(self):
        rng = np.random.default_rng(11)
        cats = {f"i{k}": f"cat{k % 5}" for k in range(30)}
        triples = []
        for k in range(200):
            triples.append(
                (f"u{rng.integers(0, 20)}", f"i{rng.integers(0, 30)}", k, None)
            )
        triples = [(u, i, ts, cats[i]) for u, i, ts, _ in triples]
        ds = make_dataset("d", triples, categories=cats)
        # full re-scan oracle
        expected: dict = {}
        for u, i, ts, c in triples:
            expected.setdefault(u, {}).setdefault(c, Counter())[i] += 1
        assert ds.user_category_items == expected
        for u in ds.users:
            total = sum(
                ds.interaction_count(u, c) for c in ds.user_category_items[u]
            )
            assert total == sum(1 for t in triples if t[0] == u)
