"""Full-ranking top-K evaluation: HR@K and NDCG@K with seed aggregation.

Every item the user has not touched in train is a candidate.  Each held-out
interaction is one evaluation unit; ties in score break by ascending item id
so rankings are deterministic across runs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)


@dataclass
class RankResult:
    user_id: str
    ranked_items: list[str]
    positive_ranks: dict[str, int]  # item -> 1-based rank among candidates


def rank_candidates(
    scores: np.ndarray, item_ids: Sequence[str], exclude: set[str]
) -> list[str]:
    """Candidates sorted by descending score, ties by ascending item id."""
    ids = np.asarray(item_ids)
    keep = np.array([i not in exclude for i in item_ids], dtype=bool)
    order = np.lexsort((ids[keep], -np.asarray(scores, dtype=np.float64)[keep]))
    return list(ids[keep][order])


def full_ranking_eval(
    score_fn: Callable[[str], np.ndarray],
    item_ids: Sequence[str],
    train_items: Mapping[str, set[str]],
    heldout: Sequence,
    ks: Sequence[int] = (5,),
    average: str = "interaction",
) -> dict:
    """Evaluate held-out positives under the full-ranking protocol.

    `score_fn(user)` returns scores aligned with `item_ids`.  `heldout`
    entries expose `.user_id` and `.item_id` (or are (user, item) pairs).
    Users without scores or candidates are skipped and counted.
    `average` is "interaction" (each positive is one unit) or "user"
    (per-user means, then averaged across users).
    """
    if average not in ("interaction", "user"):
        raise ValueError(f"unknown averaging mode '{average}'")
    ks = sorted(ks)
    by_user: dict[str, list[str]] = {}
    for entry in heldout:
        if hasattr(entry, "user_id"):
            user, item = entry.user_id, entry.item_id
        else:
            user, item = entry
        by_user.setdefault(user, []).append(item)

    per_user_hits: list[dict[int, float]] = []
    per_user_gains: list[dict[int, float]] = []
    per_user_units: list[int] = []
    units = 0
    skipped = 0
    id_index = {item: i for i, item in enumerate(item_ids)}
    for user in sorted(by_user):
        try:
            scores = score_fn(user)
        except KeyError:
            skipped += len(by_user[user])
            continue
        exclude = train_items.get(user, set())
        ranked = rank_candidates(scores, item_ids, exclude)
        if not ranked:
            skipped += len(by_user[user])
            continue
        rank_of = {item: r + 1 for r, item in enumerate(ranked)}
        u_hits = {k: 0.0 for k in ks}
        u_gains = {k: 0.0 for k in ks}
        u_units = 0
        for item in by_user[user]:
            if item not in id_index or item in exclude:
                skipped += 1
                continue
            rank = rank_of[item]
            u_units += 1
            for k in ks:
                if rank <= k:
                    u_hits[k] += 1.0
                    u_gains[k] += 1.0 / np.log2(rank + 1)
        if u_units:
            per_user_hits.append(u_hits)
            per_user_gains.append(u_gains)
            per_user_units.append(u_units)
            units += u_units
    if skipped:
        logger.warning("full_ranking_eval skipped %d held-out units", skipped)

    def reduce(per_user: list[dict[int, float]], k: int) -> float:
        if not per_user:
            return 0.0
        if average == "interaction":
            return sum(d[k] for d in per_user) / units
        return float(
            np.mean([d[k] / n for d, n in zip(per_user, per_user_units)])
        )

    return {
        "units": units,
        "skipped": skipped,
        "HR": {k: reduce(per_user_hits, k) for k in ks},
        "NDCG": {k: reduce(per_user_gains, k) for k in ks},
    }


def aggregate_seed_reports(
    reports: Sequence[dict], ks: Sequence[int], expected_seeds: int | None = None
) -> dict:
    """Mean and std of each metric over per-seed reports."""
    if expected_seeds is not None and len(reports) != expected_seeds:
        raise ValueError(
            f"expected {expected_seeds} seed reports, got {len(reports)}"
        )
    metrics = []
    for metric in ("HR", "NDCG"):
        for k in sorted(ks):
            values = [float(r[metric][k]) for r in reports]
            metrics.append(
                {
                    "metric": metric,
                    "K": k,
                    "mean": float(np.mean(values)),
                    "std": float(np.std(values)),
                    "per_seed": values,
                }
            )
    return {
        "metrics": metrics,
        "seeds": len(reports),
        "units_per_seed": [r["units"] for r in reports],
        "skipped_per_seed": [r["skipped"] for r in reports],
    }
