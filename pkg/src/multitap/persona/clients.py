"""Generator and encoder clients.

Two implementations of each interface: a remote chat/embedding API client
(OpenAI-style endpoints, key from an environment variable, retries with
exponential backoff) and a deterministic offline fallback that needs no
network.  The offline generator verbalizes the structured evidence through
fixed sentence templates; the offline encoder is a seeded feature-hashing
bag-of-words embedder with unit L2 norm.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import threading
import time
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from ..errors import ClientError
from ..idh import CRITERIA_ORDER, Criterion
from .prompts import (
    DESCRIPTION_SYSTEM_PROMPT,
    PERSONA_SYSTEM_PROMPT,
    PROFILE_KEYS,
    TEMPLATE_EMPTY_SENTENCES,
    TEMPLATE_SENTENCES,
)

API_KEY_ENV = "MULTITAP_API_KEY"

_LEVEL_MAP_KEYS: dict[Criterion, str] = {
    Criterion.PS: "category_price_level",
    Criterion.QP: "category_rating_level",
    Criterion.PB: "category_popularity_level",
    Criterion.CF: "category_familiarity_level",
}


class GeneratorClient(Protocol):
    identity: str

    def personas(self, payload: dict) -> str: ...

    def domain_description(self, payload: dict) -> str: ...


class EncoderClient(Protocol):
    identity: str
    dim: int

    def embed(self, texts: Sequence[str]) -> np.ndarray: ...


class TemplateGenerator:
    """Offline verbalizer: maps each (criterion, category, label) to a fixed
    sentence, so identical inputs always produce identical texts."""

    provenance = "template"

    def __init__(self):
        self.identity = "template-v1"
        self.calls = 0

    def personas(self, payload: dict) -> str:
        self.calls += 1
        profiles: dict[str, dict[str, str]] = {}
        for criterion in CRITERIA_ORDER:
            key = PROFILE_KEYS[criterion][0]
            profiles[key] = {"persona": self._criterion_text(criterion, payload)}
        return json.dumps({"User ID": payload["User ID"], "Profiles": profiles})

    def _criterion_text(self, criterion: Criterion, payload: dict) -> str:
        if criterion is Criterion.CD:
            code = payload.get("overall_category_diversity")
            if not code:
                return f"This user {TEMPLATE_EMPTY_SENTENCES[criterion]}."
            return f"This user {TEMPLATE_SENTENCES[criterion][code]}."
        levels = payload.get(_LEVEL_MAP_KEYS[criterion]) or {}
        if not levels:
            return f"This user {TEMPLATE_EMPTY_SENTENCES[criterion]}."
        parts = [
            TEMPLATE_SENTENCES[criterion][code].format(category=category)
            for category, code in sorted(levels.items())
        ]
        return "This user " + ", and ".join(parts) + "."

    def domain_description(self, payload: dict) -> str:
        self.calls += 1
        snippets = payload.get("sampled_item_list", {})
        categories: dict[str, int] = {}
        for text in snippets.values():
            category = text.split("||")[-1].strip()
            categories[category] = categories.get(category, 0) + 1
        top = sorted(categories.items(), key=lambda kv: (-kv[1], kv[0]))[:5]
        listing = ", ".join(name for name, _ in top) if top else "a mix of goods"
        description = (
            f"The {payload['Domain']} domain sells items across categories such as "
            f"{listing}. Buyers weigh price, ratings and review volume when choosing "
            f"within these categories."
        )
        return json.dumps(
            {"Domain": payload["Domain"], "Domain Profile": {"Domain Description": description}}
        )


class HashingEncoder:
    """Seeded feature-hashing encoder over unigrams and bigrams, unit L2 norm.

    Bigrams keep short phrase distinctions ("higher priced" vs "budget
    priced") that single-token bags wash out."""

    def __init__(self, dim: int = 256, seed: int = 0):
        if dim <= 0:
            raise ValueError("encoder dimension must be positive")
        self.dim = dim
        self.seed = seed
        self.identity = f"hashing-v2-d{dim}-s{seed}"
        self.calls = 0

    def _features(self, text: str) -> list[str]:
        tokens = re.findall(r"[a-z0-9]+", text.lower())
        return tokens + [f"{a} {b}" for a, b in zip(tokens, tokens[1:])]

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        self.calls += 1
        out = np.zeros((len(texts), self.dim), dtype=np.float64)
        for row, text in enumerate(texts):
            for feature in self._features(text):
                digest = hashlib.blake2b(
                    f"{self.seed}:{feature}".encode("utf-8"), digest_size=8
                ).digest()
                value = int.from_bytes(digest, "little")
                idx = value % self.dim
                sign = 1.0 if (value >> 62) & 1 else -1.0
                out[row, idx] += sign
            norm = np.linalg.norm(out[row])
            if norm == 0.0:
                # text with no tokens still needs a valid unit vector
                out[row, 0] = 1.0
            else:
                out[row] /= norm
        return out


@dataclass
class RemoteConfig:
    endpoint: str = "https://api.openai.com/v1"
    chat_model: str = "gpt-4o"
    embed_model: str = "text-embedding-3-large"
    persona_temperature: float = 0.7
    description_temperature: float = 1.0
    embed_dim: int = 3072
    retries: int = 3
    backoff: float = 1.0
    timeout: float = 60.0
    min_interval: float = 0.0  # simple rate limiting between calls


def _api_key() -> str:
    key = os.environ.get(API_KEY_ENV)
    if not key:
        raise ClientError(f"remote client requires the {API_KEY_ENV} environment variable")
    return key


class _RateLimiter:
    def __init__(self, min_interval: float):
        self.min_interval = min_interval
        self._lock = threading.Lock()
        self._last = 0.0

    def wait(self) -> None:
        if self.min_interval <= 0:
            return
        with self._lock:
            now = time.monotonic()
            delta = self._last + self.min_interval - now
            if delta > 0:
                time.sleep(delta)
            self._last = time.monotonic()


class _RemoteBase:
    def __init__(self, config: RemoteConfig, session=None):
        self.config = config
        if session is None:
            import requests

            session = requests.Session()
        self._session = session
        self._limiter = _RateLimiter(config.min_interval)

    def _post(self, path: str, body: dict) -> dict:
        url = self.config.endpoint.rstrip("/") + path
        headers = {"Authorization": f"Bearer {_api_key()}"}
        last_error: Exception | None = None
        for attempt in range(self.config.retries):
            self._limiter.wait()
            try:
                resp = self._session.post(
                    url, json=body, headers=headers, timeout=self.config.timeout
                )
                if resp.status_code >= 500:
                    raise ClientError(f"server error {resp.status_code}")
                if resp.status_code >= 400:
                    raise ClientError(f"request rejected ({resp.status_code}): {resp.text}")
                return resp.json()
            except ClientError as exc:
                last_error = exc
                if "rejected" in str(exc):
                    raise
            except Exception as exc:  # network-level failure, retry
                last_error = exc
            time.sleep(self.config.backoff * (2**attempt))
        raise ClientError(f"remote call to {url} failed after {self.config.retries} attempts: {last_error}")


class RemoteGenerator(_RemoteBase):
    provenance = "llm"

    def __init__(self, config: RemoteConfig | None = None, session=None):
        super().__init__(config or RemoteConfig(), session)
        self.identity = f"remote-{self.config.chat_model}"

    def _chat(self, system_prompt: str, payload: dict, temperature: float) -> str:
        body = {
            "model": self.config.chat_model,
            "temperature": temperature,
            "response_format": {"type": "json_object"},
            "messages": [
                {"role": "system", "content": system_prompt},
                {"role": "user", "content": json.dumps(payload)},
            ],
        }
        data = self._post("/chat/completions", body)
        try:
            return data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ClientError(f"unexpected chat response shape: {exc}") from exc

    def personas(self, payload: dict) -> str:
        return self._chat(PERSONA_SYSTEM_PROMPT, payload, self.config.persona_temperature)

    def domain_description(self, payload: dict) -> str:
        return self._chat(
            DESCRIPTION_SYSTEM_PROMPT, payload, self.config.description_temperature
        )


class RemoteEncoder(_RemoteBase):
    def __init__(self, config: RemoteConfig | None = None, session=None):
        super().__init__(config or RemoteConfig(), session)
        self.dim = self.config.embed_dim
        self.identity = f"remote-{self.config.embed_model}-d{self.dim}"

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        body = {
            "model": self.config.embed_model,
            "input": list(texts),
            "dimensions": self.dim,
        }
        data = self._post("/embeddings", body)
        try:
            rows = sorted(data["data"], key=lambda d: d["index"])
            out = np.array([row["embedding"] for row in rows], dtype=np.float64)
        except (KeyError, TypeError) as exc:
            raise ClientError(f"unexpected embedding response shape: {exc}") from exc
        if out.shape != (len(texts), self.dim):
            raise ClientError(f"embedding shape {out.shape} != ({len(texts)}, {self.dim})")
        return out
