"""Prompt assets: system prompts, domain descriptions and payload builders.

The generation payloads use a fixed key vocabulary (`category_price_level`,
`category_rating_level`, `category_popularity_level`,
`category_familiarity_level`, `overall_category_diversity`, `History`) and
the structured output carries exactly five named persona fields.  The same
payloads drive both the remote chat client and the deterministic template
client, so the parser downstream is shared.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

from ..corpus import DomainDataset, InteractionRecord, ItemMeta
from ..idh import BinAssignment, Criterion, Label

PERSONA_SYSTEM_PROMPT = (
    "You analyze e-commerce users. From the given domain, domain description, "
    "per-category level maps and interaction history, write FIVE separate persona "
    "descriptions, one per criterion, in this order: "
    "1. price sensitivity, 2. quality preference, 3. popularity bias, "
    "4. category familiarity, 5. category diversity. "
    "Each persona is 3-4 sentences and must only restate the evidence provided "
    "(H=High, M=Middle, L=Low per category). "
    'Answer as JSON: {"User ID": "...", "Profiles": {'
    '"price_centric": {"persona": "..."}, '
    '"quality_centric": {"persona": "..."}, '
    '"popularity_centric": {"persona": "..."}, '
    '"category_familiarity": {"persona": "..."}, '
    '"category_diversity": {"persona": "..."}}}'
)

DESCRIPTION_SYSTEM_PROMPT = (
    "You summarize an e-commerce domain. Using only the sampled item metadata "
    "provided, write a concise 2-3 sentence description of what the domain sells "
    "and what buyers care about. "
    'Answer as JSON: {"Domain": "...", "Domain Profile": {"Domain Description": "..."}}'
)

# Output keys in criterion order; CF historically appears under two names.
PROFILE_KEYS: dict[Criterion, tuple[str, ...]] = {
    Criterion.PS: ("price_centric",),
    Criterion.QP: ("quality_centric",),
    Criterion.PB: ("popularity_centric",),
    Criterion.CF: ("category_familiarity", "category_preference"),
    Criterion.CD: ("category_diversity",),
}

# One sentence pattern per (criterion, label); categories are interpolated.
# Each level carries its own vocabulary (as a language model's wording
# would), so the degenerate encoder still separates levels.
TEMPLATE_SENTENCES: dict[Criterion, dict[str, str]] = {
    Criterion.PS: {
        "H": (
            "prefers higher-priced items in {category}, leaning premium, "
            "upscale, expensive, high-end when shopping {category}"
        ),
        "M": (
            "keeps to mid-priced items in {category}, leaning average, "
            "midrange, moderate, middling when shopping {category}"
        ),
        "L": (
            "leans toward budget-priced items in {category}, leaning cheap, "
            "economical, low-cost, bargain when shopping {category}"
        ),
    },
    Criterion.QP: {
        "H": (
            "favors highly rated items in {category}, seeking excellent, "
            "top-scored, acclaimed, outstanding quality in {category}"
        ),
        "M": (
            "accepts moderately rated items in {category}, seeking decent, "
            "fair, middle-scored, acceptable quality in {category}"
        ),
        "L": (
            "tolerates low-rated items in {category}, seeking unproven, "
            "poorly-scored, criticized, weak quality in {category}"
        ),
    },
    Criterion.PB: {
        "H": (
            "gravitates to widely reviewed items in {category}, following "
            "popular, mainstream, bestselling, trending picks in {category}"
        ),
        "M": (
            "picks moderately reviewed items in {category}, following "
            "known, established, familiar, common picks in {category}"
        ),
        "L": (
            "chooses rarely reviewed items in {category}, following niche, "
            "obscure, undiscovered, overlooked picks in {category}"
        ),
    },
    Criterion.CF: {
        "H": (
            "engages deeply with {category}, a veteran, devoted, frequent, "
            "seasoned shopper of {category}"
        ),
        "M": (
            "is moderately familiar with {category}, a returning, casual, "
            "occasional, intermittent shopper of {category}"
        ),
        "L": (
            "has only light exposure to {category}, a newcomer, novice, "
            "first-time, unfamiliar shopper of {category}"
        ),
    },
    Criterion.CD: {
        "H": (
            "explores a broad range of categories in this domain, roaming "
            "widely, adventurously, eclectically across the catalog"
        ),
        "M": (
            "explores a moderate range of categories in this domain, mixing "
            "a few staple areas with occasional detours across the catalog"
        ),
        "L": (
            "sticks to a narrow set of categories in this domain, staying "
            "focused, specialized, loyal within the catalog"
        ),
    },
}

TEMPLATE_EMPTY_SENTENCES: dict[Criterion, str] = {
    Criterion.PS: "shows no price signal in this domain",
    Criterion.QP: "shows no rating-quality signal in this domain",
    Criterion.PB: "shows no popularity signal in this domain",
    Criterion.CF: "shows no category familiarity signal in this domain",
    Criterion.CD: "shows no category diversity signal in this domain",
}


@dataclass
class PromptAssets:
    domain_id: str
    domain_description: str
    persona_instruction: str = PERSONA_SYSTEM_PROMPT
    description_instruction: str = DESCRIPTION_SYSTEM_PROMPT
    item_snippets: dict[str, tuple[str, str]] = field(default_factory=dict)
    domain_config_texts: list[str] = field(default_factory=list)


def sample_description_items(dataset: DomainDataset, cap: int = 100) -> list[ItemMeta]:
    """Representative items: 50 most-interacted plus 50 top-rated, deduped.

    If the two lists overlap, further items are backfilled by interaction
    rank until `cap` (or the catalog) is exhausted.
    """
    counts: dict[str, int] = {i: 0 for i in dataset.items}
    for user_counter in dataset.user_items.values():
        for item_id, n in user_counter.items():
            counts[item_id] += n
    by_interactions = sorted(dataset.items.values(), key=lambda m: (-counts[m.item_id], m.item_id))
    by_rating = sorted(
        dataset.items.values(), key=lambda m: (-m.avg_rating, -m.rating_count, m.item_id)
    )
    half = cap // 2
    chosen: dict[str, ItemMeta] = {}
    for meta in by_interactions[:half]:
        chosen[meta.item_id] = meta
    for meta in by_rating[:half]:
        chosen.setdefault(meta.item_id, meta)
    target = min(cap, len(dataset.items))
    for meta in by_interactions:
        if len(chosen) >= target:
            break
        chosen.setdefault(meta.item_id, meta)
    return sorted(chosen.values(), key=lambda m: (-counts[m.item_id], m.item_id))


def build_domain_config_texts(domain_id: str, items: Sequence[ItemMeta]) -> list[str]:
    """Concatenated snippets: domain, title and category per sampled item."""
    return [f"{domain_id} || {m.title} || {m.category}" for m in items]


def description_payload(dataset: DomainDataset, items: Sequence[ItemMeta]) -> dict:
    return {
        "Domain": dataset.domain_id,
        "sampled_item_list": {
            m.item_id: f"{m.title} || {m.category}" for m in items
        },
    }


def persona_payload(
    user_id: str,
    domain_id: str,
    domain_description: str,
    level_maps: Mapping[Criterion, Mapping[str, Label]],
    diversity: Label,
    history: Sequence[tuple[InteractionRecord, ItemMeta, str | None]],
) -> dict:
    """Structured generation input: level maps plus recent history snippets."""

    def levels(criterion: Criterion) -> dict[str, str]:
        return {
            category: label.code
            for category, label in sorted(level_maps.get(criterion, {}).items())
        }

    return {
        "Domain": domain_id,
        "Domain description": domain_description,
        "User ID": user_id,
        "category_price_level": levels(Criterion.PS),
        "category_rating_level": levels(Criterion.QP),
        "category_popularity_level": levels(Criterion.PB),
        "category_familiarity_level": levels(Criterion.CF),
        "overall_category_diversity": diversity.code,
        "History": [
            {
                "item_id": meta.item_id,
                "title": meta.title,
                "category": meta.category,
                "average_rating": meta.avg_rating,
                "rating_number": meta.rating_count,
                "user_rating": rec.rating,
                "cat_item_price_tag": price_tag,
            }
            for rec, meta, price_tag in history
        ],
    }


def recent_history(
    dataset: DomainDataset,
    user_id: str,
    price_bins: Mapping[str, BinAssignment] | None = None,
    limit: int = 30,
) -> list[tuple[InteractionRecord, ItemMeta, str | None]]:
    """The user's most recent `limit` interactions, newest first."""
    rows = [r for r in dataset.interactions if r.user_id == user_id]
    rows.sort(key=lambda r: (-r.timestamp, r.item_id))
    out = []
    for rec in rows[:limit]:
        meta = dataset.items[rec.item_id]
        tag = None
        if price_bins and meta.category in price_bins:
            b = price_bins[meta.category].bins.get(rec.item_id)
            if b is not None:
                tag = Label(b).code
        out.append((rec, meta, tag))
    return out


def build_domain_description(dataset: DomainDataset, client, items: Sequence[ItemMeta] | None = None) -> str:
    """Generate the domain description via the client and parse it out."""
    import json

    from ..errors import MalformedResponseError

    if items is None:
        items = sample_description_items(dataset)
    payload = description_payload(dataset, items)
    raw = client.domain_description(payload)
    try:
        obj = json.loads(raw)
        description = obj["Domain Profile"]["Domain Description"]
    except (ValueError, KeyError, TypeError) as exc:
        raise MalformedResponseError(
            f"domain description response for '{dataset.domain_id}' is malformed: {exc}"
        ) from exc
    if not isinstance(description, str) or not description.strip():
        raise MalformedResponseError(f"empty domain description for '{dataset.domain_id}'")
    return description.strip()


def build_prompt_assets(dataset: DomainDataset, client) -> PromptAssets:
    """Assemble all prompt inputs for one domain."""
    items = sample_description_items(dataset)
    description = build_domain_description(dataset, client, items)
    return PromptAssets(
        domain_id=dataset.domain_id,
        domain_description=description,
        item_snippets={m.item_id: (m.title, m.category) for m in items},
        domain_config_texts=build_domain_config_texts(dataset.domain_id, items),
    )
