"""Persona text generation: one structured client call yields all five texts.

Responses are parsed against the fixed output schema (five named profile
fields, each with a `persona` string); a malformed response gets exactly one
regeneration attempt.  Results are cached on disk keyed by a content hash of
the payload and client identity, so repeated runs make zero client calls.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Sequence

from ..errors import MalformedResponseError
from ..idh import CRITERIA_ORDER, Criterion
from .cache import JsonCache, content_key
from .clients import GeneratorClient
from .database import PersonaDB
from .prompts import PROFILE_KEYS, PromptAssets, persona_payload


@dataclass
class PersonaText:
    user_id: str
    texts: dict[Criterion, str]
    provenance: str
    cache_key: str

    def ordered_texts(self) -> list[str]:
        return [self.texts[c] for c in CRITERIA_ORDER]


def parse_persona_response(raw: str, user_id: str) -> dict[Criterion, str]:
    """Extract the five criterion texts; either CF key spelling is accepted."""
    try:
        obj = json.loads(raw)
        profiles = obj["Profiles"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise MalformedResponseError(
            f"persona response for '{user_id}' is not the expected JSON shape: {exc}"
        ) from exc
    texts: dict[Criterion, str] = {}
    for criterion in CRITERIA_ORDER:
        entry = None
        for key in PROFILE_KEYS[criterion]:
            if key in profiles:
                entry = profiles[key]
                break
        if entry is None:
            raise MalformedResponseError(
                f"persona response for '{user_id}' is missing '{PROFILE_KEYS[criterion][0]}'"
            )
        text = entry.get("persona") if isinstance(entry, dict) else entry
        if not isinstance(text, str) or not text.strip():
            raise MalformedResponseError(
                f"persona response for '{user_id}' has an empty '{PROFILE_KEYS[criterion][0]}'"
            )
        texts[criterion] = text.strip()
    return texts


def generate_personas(
    user_id: str,
    db: PersonaDB,
    assets: PromptAssets,
    history: Sequence[tuple],
    client: GeneratorClient,
    cache: JsonCache | None = None,
) -> PersonaText:
    """Generate (or fetch from cache) the five persona texts for one user."""
    if len(history) > 30:
        history = history[:30]
    payload = persona_payload(
        user_id=user_id,
        domain_id=assets.domain_id,
        domain_description=assets.domain_description,
        level_maps=db.labels,
        diversity=db.diversity,
        history=history,
    )
    key = content_key(
        {"payload": payload, "client": client.identity, "instruction": assets.persona_instruction}
    )
    if cache is not None:
        hit = cache.get(key)
        if hit is not None:
            return PersonaText(
                user_id=user_id,
                texts={Criterion(k): v for k, v in hit["texts"].items()},
                provenance=hit["provenance"],
                cache_key=key,
            )
    raw = client.personas(payload)
    try:
        texts = parse_persona_response(raw, user_id)
    except MalformedResponseError:
        raw = client.personas(payload)  # one reparse attempt
        texts = parse_persona_response(raw, user_id)
    result = PersonaText(
        user_id=user_id,
        texts=texts,
        provenance=getattr(client, "provenance", "llm"),
        cache_key=key,
    )
    if cache is not None:
        cache.put(
            key,
            {
                "user_id": user_id,
                "texts": {c.value: t for c, t in texts.items()},
                "provenance": result.provenance,
            },
        )
    return result


def generate_all_personas(
    dbs: Mapping[str, PersonaDB],
    assets: PromptAssets,
    histories: Mapping[str, Sequence[tuple]],
    client: GeneratorClient,
    cache: JsonCache | None = None,
    parallelism: int = 1,
) -> dict[str, PersonaText]:
    """Generate texts for many users, optionally with bounded concurrency."""
    users = sorted(dbs)
    if parallelism <= 1:
        return {
            u: generate_personas(u, dbs[u], assets, histories.get(u, ()), client, cache)
            for u in users
        }
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        results = pool.map(
            lambda u: generate_personas(u, dbs[u], assets, histories.get(u, ()), client, cache),
            users,
        )
        return dict(zip(users, results))
