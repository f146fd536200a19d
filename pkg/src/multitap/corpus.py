"""Domain ingestion: interaction logs, item metadata, overlap and time splits.

A domain is a pair of JSONL files.  Interactions carry one
`{"user", "item", "rating", "ts"}` object per line; metadata carries
`{"item", "title", "category", "price", "avg_rating", "rating_count"}`.
Datasets are immutable after construction and pre-indexed with the
per-user and per-(user, category) views the rest of the pipeline reads.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import (
    DegenerateSplitError,
    DuplicateInteractionError,
    EmptyOverlapError,
    ParseError,
    UnknownItemError,
)


@dataclass(frozen=True)
class InteractionRecord:
    user_id: str
    item_id: str
    rating: float
    timestamp: int


@dataclass(frozen=True)
class ItemMeta:
    item_id: str
    title: str
    category: str
    price: float | None
    avg_rating: float
    rating_count: int


@dataclass
class DomainDataset:
    """One domain with all derived views indexed.

    `user_category_items[u][c]` is a Counter over item ids (interaction
    multiplicity preserved), `user_items[u]` the per-user Counter across
    categories.  Treat instances as immutable once built.
    """

    domain_id: str
    interactions: tuple[InteractionRecord, ...]
    items: dict[str, ItemMeta]
    users: frozenset[str] = field(default_factory=frozenset)
    item_ids: frozenset[str] = field(default_factory=frozenset)
    categories: frozenset[str] = field(default_factory=frozenset)
    user_category_items: dict[str, dict[str, Counter]] = field(default_factory=dict)
    user_items: dict[str, Counter] = field(default_factory=dict)

    @classmethod
    def from_records(
        cls,
        domain_id: str,
        interactions: Iterable[InteractionRecord],
        items: Mapping[str, ItemMeta],
    ) -> "DomainDataset":
        ds = cls(domain_id=domain_id, interactions=tuple(interactions), items=dict(items))
        return index_views(ds)

    def category_of(self, item_id: str) -> str:
        return self.items[item_id].category

    def interaction_count(self, user_id: str, category: str) -> int:
        """|E_{u,c}|: number of the user's interactions with items of c."""
        per_cat = self.user_category_items.get(user_id, {})
        counter = per_cat.get(category)
        return 0 if counter is None else sum(counter.values())

    def distinct_items(self, user_id: str, category: str) -> list[str]:
        per_cat = self.user_category_items.get(user_id, {})
        counter = per_cat.get(category)
        return sorted(counter) if counter else []

    def users_in_category(self, category: str) -> list[str]:
        return sorted(
            u for u, cats in self.user_category_items.items() if category in cats
        )

    def restricted_to(self, records: Sequence[InteractionRecord]) -> "DomainDataset":
        """Same catalog, different interaction slice (e.g. the train split)."""
        return DomainDataset.from_records(self.domain_id, records, self.items)


def index_views(dataset: DomainDataset) -> DomainDataset:
    """Materialize the per-user and per-(user, category) views."""
    user_category_items: dict[str, dict[str, Counter]] = {}
    user_items: dict[str, Counter] = {}
    for rec in dataset.interactions:
        meta = dataset.items.get(rec.item_id)
        if meta is None:
            raise UnknownItemError(
                dataset.domain_id, 0, f"interaction references unknown item '{rec.item_id}'"
            )
        per_cat = user_category_items.setdefault(rec.user_id, {})
        per_cat.setdefault(meta.category, Counter())[rec.item_id] += 1
        user_items.setdefault(rec.user_id, Counter())[rec.item_id] += 1
    dataset.users = frozenset(user_items)
    dataset.item_ids = frozenset(dataset.items)
    dataset.categories = frozenset(m.category for m in dataset.items.values())
    dataset.user_category_items = user_category_items
    dataset.user_items = user_items
    return dataset


def _jsonl_lines(path: str | Path):
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(str(path), lineno, f"invalid JSON: {exc.msg}") from exc
            if not isinstance(obj, dict):
                raise ParseError(str(path), lineno, "expected a JSON object")
            yield lineno, obj


def _require(obj: dict, key: str, path: str, lineno: int):
    if key not in obj:
        raise ParseError(path, lineno, f"missing field '{key}'")
    return obj[key]


def load_metadata(path: str | Path) -> dict[str, ItemMeta]:
    items: dict[str, ItemMeta] = {}
    spath = str(path)
    for lineno, obj in _jsonl_lines(path):
        item_id = str(_require(obj, "item", spath, lineno))
        if item_id in items:
            raise ParseError(spath, lineno, f"duplicate metadata for item '{item_id}'")
        title = str(_require(obj, "title", spath, lineno))
        category = str(_require(obj, "category", spath, lineno))
        price = obj.get("price")
        if price is not None:
            price = float(price)
            if price < 0:
                raise ParseError(spath, lineno, f"price {price} is negative")
        avg_rating = float(_require(obj, "avg_rating", spath, lineno))
        if not (1.0 <= avg_rating <= 5.0):
            raise ParseError(spath, lineno, f"avg_rating {avg_rating} outside [1, 5]")
        rating_count = int(_require(obj, "rating_count", spath, lineno))
        if rating_count < 0:
            raise ParseError(spath, lineno, f"rating_count {rating_count} is negative")
        items[item_id] = ItemMeta(item_id, title, category, price, avg_rating, rating_count)
    return items


def load_interactions(path: str | Path, items: Mapping[str, ItemMeta]) -> list[InteractionRecord]:
    records: list[InteractionRecord] = []
    seen: set[tuple[str, str, int]] = set()
    spath = str(path)
    for lineno, obj in _jsonl_lines(path):
        user = str(_require(obj, "user", spath, lineno))
        item = str(_require(obj, "item", spath, lineno))
        rating = float(_require(obj, "rating", spath, lineno))
        ts = int(_require(obj, "ts", spath, lineno))
        if not (1.0 <= rating <= 5.0):
            raise ParseError(spath, lineno, f"rating {rating} outside [1, 5]")
        if ts < 0:
            raise ParseError(spath, lineno, f"timestamp {ts} is negative")
        if item not in items:
            raise UnknownItemError(spath, lineno, f"unknown item '{item}'")
        triple = (user, item, ts)
        if triple in seen:
            raise DuplicateInteractionError(
                spath, lineno, f"duplicate interaction {triple}"
            )
        seen.add(triple)
        records.append(InteractionRecord(user, item, rating, ts))
    return records


def load_domain(interactions_path: str | Path, metadata_path: str | Path, domain_id: str) -> DomainDataset:
    """Load one domain from its two JSONL files and index all views."""
    items = load_metadata(metadata_path)
    records = load_interactions(interactions_path, items)
    return DomainDataset.from_records(domain_id, records, items)


@dataclass(frozen=True)
class DomainPair:
    source: DomainDataset
    target: DomainDataset
    overlap: frozenset[str]


def build_domain_pair(source: DomainDataset, target: DomainDataset) -> DomainPair:
    overlap = frozenset(source.users & target.users)
    if not overlap:
        raise EmptyOverlapError(
            f"domains '{source.domain_id}' and '{target.domain_id}' share no users"
        )
    return DomainPair(source=source, target=target, overlap=overlap)


@dataclass(frozen=True)
class SplitBundle:
    train: tuple[InteractionRecord, ...]
    valid: tuple[InteractionRecord, ...]
    test: tuple[InteractionRecord, ...]
    boundary_time: int


def time_split(
    dataset: DomainDataset, boundary_time: int, valid_fraction: float = 0.5
) -> SplitBundle:
    """Chronological split: pre-boundary rows train, post-boundary rows are
    split per user into valid (earliest `valid_fraction`) and test.

    Post-boundary rows of users absent from train are dropped.
    """
    if not (0.0 < valid_fraction < 1.0):
        raise ValueError(f"valid_fraction {valid_fraction} outside (0, 1)")
    train = [r for r in dataset.interactions if r.timestamp < boundary_time]
    if not train:
        raise DegenerateSplitError(
            f"no interactions before boundary {boundary_time} in '{dataset.domain_id}'"
        )
    train_users = {r.user_id for r in train}
    post: dict[str, list[InteractionRecord]] = {}
    for r in dataset.interactions:
        if r.timestamp >= boundary_time and r.user_id in train_users:
            post.setdefault(r.user_id, []).append(r)
    valid: list[InteractionRecord] = []
    test: list[InteractionRecord] = []
    for user in sorted(post):
        rows = sorted(post[user], key=lambda r: (r.timestamp, r.item_id))
        n_valid = int(len(rows) * valid_fraction)
        valid.extend(rows[:n_valid])
        test.extend(rows[n_valid:])
    if not test:
        raise DegenerateSplitError(
            f"no post-boundary interactions for train users in '{dataset.domain_id}'"
        )
    return SplitBundle(
        train=tuple(train), valid=tuple(valid), test=tuple(test), boundary_time=boundary_time
    )
