"""Persona database, generation, encoding and client tests."""

import json

import numpy as np
import pytest

from multitap.corpus import DomainDataset, InteractionRecord, ItemMeta
from multitap.errors import ClientError, MalformedResponseError
from multitap.idh import CRITERIA_ORDER, Criterion, Label, compute_domain_bins, compute_domain_labels
from multitap.persona import (
    HashingEncoder,
    JsonCache,
    PersonaDB,
    PromptAssets,
    TemplateGenerator,
    build_all_persona_dbs,
    build_domain_description,
    build_persona_db,
    build_prompt_assets,
    category_diversity_label,
    category_familiarity_label,
    encode_item_batch,
    encode_item_semantics,
    encode_personas,
    familiarity_counts,
    generate_personas,
    parse_persona_response,
    persona_payload,
    recent_history,
    sample_description_items,
)


def make_domain(triples, item_meta=None):
    """triples: (user, item, category, ts)"""
    items = {}
    records = []
    for user, item, category, ts in triples:
        if item not in items:
            meta = (item_meta or {}).get(item, {})
            items[item] = ItemMeta(
                item,
                meta.get("title", f"t {item}"),
                category,
                meta.get("price", 10.0),
                meta.get("avg_rating", 4.0),
                meta.get("rating_count", 10),
            )
        records.append(InteractionRecord(user, item, 4.0, ts))
    return DomainDataset.from_records("home", records, items)


class TestBehavioralLabels:
    def test_diversity_distinct_count(self):
        ds = make_domain(
            [("u", "i1", "A", 1), ("u", "i2", "A", 2), ("u", "i3", "B", 3)]
        )
        x, _ = category_diversity_label("u", ds)
        assert x == 2

    def test_diversity_degenerate_all_equal(self):
        ds = make_domain(
            [("u1", "i1", "A", 1), ("u2", "i1", "A", 2), ("u3", "i1", "A", 3)]
        )
        for u in ("u1", "u2", "u3"):
            _, label = category_diversity_label(u, ds)
            assert label is Label.HIGH

    def test_diversity_matches_enumeration_oracle(self):
        rng = np.random.default_rng(5)
        triples = []
        cats = ["A", "B", "C", "D", "E"]
        for k in range(400):
            u = f"u{rng.integers(0, 30)}"
            c = cats[rng.integers(0, 5)]
            triples.append((u, f"{c}-i{rng.integers(0, 6)}", c, k))
        ds = make_domain(triples)
        xs = {u: len({t[2] for t in triples if t[0] == u}) for u in ds.users}
        ordered = sorted(xs.values())
        import math

        q13 = ordered[max(1, math.ceil(len(ordered) / 3)) - 1]
        q23 = ordered[max(1, math.ceil(2 * len(ordered) / 3)) - 1]
        for u in sorted(ds.users):
            x, label = category_diversity_label(u, ds)
            assert x == xs[u]
            expected = (
                Label.LOW if x < q13 else Label.MEDIUM if x < q23 else Label.HIGH
            )
            assert label is expected

    def test_familiarity_nearest_rank(self):
        counts = {f"u{k}": k for k in range(1, 7)}  # 1..6
        assert category_familiarity_label("u3", "c", counts) is Label.MEDIUM
        assert category_familiarity_label("u1", "c", counts) is Label.LOW
        assert category_familiarity_label("u4", "c", counts) is Label.HIGH  # == q23

    def test_familiarity_sole_user(self):
        assert category_familiarity_label("u", "c", {"u": 2}) is Label.HIGH

    def test_familiarity_absent_user_errors(self):
        with pytest.raises(ValueError):
            category_familiarity_label("ghost", "c", {"u": 2})


def domain_with_labels():
    triples = [
        ("u1", "i1", "catA", 1),
        ("u1", "i2", "catA", 2),
        ("u1", "i3", "catB", 3),
        ("u2", "i1", "catA", 4),
        ("u2", "i3", "catB", 5),
        ("u3", "i2", "catA", 6),
    ]
    meta = {
        "i1": {"price": 5.0, "avg_rating": 3.0, "rating_count": 5},
        "i2": {"price": 50.0, "avg_rating": 4.5, "rating_count": 100},
        "i3": {"price": 20.0, "avg_rating": 4.0, "rating_count": 30},
    }
    ds = make_domain(triples, meta)
    labels = compute_domain_labels(ds)
    return ds, labels


class TestPersonaDB:
    def test_json_shape(self):
        ds, labels = domain_with_labels()
        db = build_persona_db("u1", ds, labels)
        obj = db.to_json_dict()
        assert obj["User ID"] == "u1"
        assert set(obj) == {
            "User ID",
            "price_affiliated_group",
            "rating_score_preferred_group",
            "rating_nums_preferred_group",
            "cats_familiarity",
            "cats_interaction_diversity",
        }
        assert set(obj["price_affiliated_group"]) == {"catA", "catB"}
        assert all(v in "HML" for v in obj["price_affiliated_group"].values())
        assert obj["cats_interaction_diversity"] in "HML"

    def test_round_trip(self):
        ds, labels = domain_with_labels()
        db = build_persona_db("u1", ds, labels)
        again = PersonaDB.from_json_dict(json.loads(json.dumps(db.to_json_dict())))
        assert again == db

    def test_user_without_interactions_errors(self):
        ds, labels = domain_with_labels()
        with pytest.raises(ValueError):
            build_persona_db("ghost", ds, labels)

    def test_missing_criterion_errors(self):
        ds, labels = domain_with_labels()
        del labels[Criterion.PB]
        from multitap.errors import MissingLabelError

        with pytest.raises(MissingLabelError, match="pb"):
            build_persona_db("u1", ds, labels)

    def test_coverage_invariant(self):
        ds, labels = domain_with_labels()
        dbs = build_all_persona_dbs(ds, labels)
        for user, db in dbs.items():
            for category in ds.user_category_items[user]:
                for criterion in (Criterion.PS, Criterion.QP, Criterion.PB, Criterion.CF):
                    assert category in db.labels[criterion], (user, category, criterion)


class TestDomainDescription:
    def _bulk_domain(self, n_items):
        triples = []
        meta = {}
        for k in range(n_items):
            item = f"i{k:03d}"
            meta[item] = {"price": 5.0 + k, "avg_rating": 3.0 + (k % 20) / 10, "rating_count": k}
            triples.append((f"u{k % 17}", item, f"cat{k % 4}", k))
        return make_domain(triples, meta)

    def test_caps_at_100_config_texts(self):
        ds = self._bulk_domain(150)
        assets = build_prompt_assets(ds, TemplateGenerator())
        assert len(assets.domain_config_texts) == 100

    def test_small_catalog_uses_all_items(self):
        ds = self._bulk_domain(40)
        assets = build_prompt_assets(ds, TemplateGenerator())
        assert len(assets.domain_config_texts) == 40

    def test_fallback_description_deterministic(self):
        ds = self._bulk_domain(60)
        one = build_domain_description(ds, TemplateGenerator())
        two = build_domain_description(ds, TemplateGenerator())
        assert one == two
        assert "home" in one


class TestGeneratePersonas:
    def _setup(self):
        ds, labels = domain_with_labels()
        db = build_persona_db("u1", ds, labels)
        assets = PromptAssets(domain_id="home", domain_description="desc")
        history = recent_history(ds, "u1")
        return ds, db, assets, history

    def test_template_phrase_for_high_price(self):
        _, db, assets, history = self._setup()
        db.labels[Criterion.PS]["Women"] = Label.HIGH
        text = generate_personas("u1", db, assets, history, TemplateGenerator())
        assert "prefers higher-priced items in Women" in text.texts[Criterion.PS]
        assert text.provenance == "template"

    def test_all_five_texts_present(self):
        _, db, assets, history = self._setup()
        text = generate_personas("u1", db, assets, history, TemplateGenerator())
        assert set(text.texts) == set(CRITERIA_ORDER)
        assert all(t for t in text.texts.values())

    def test_missing_profile_key_errors(self):
        raw = json.dumps(
            {
                "User ID": "u",
                "Profiles": {
                    "price_centric": {"persona": "x"},
                    "quality_centric": {"persona": "x"},
                    "popularity_centric": {"persona": "x"},
                    "category_familiarity": {"persona": "x"},
                },
            }
        )
        with pytest.raises(MalformedResponseError, match="category_diversity"):
            parse_persona_response(raw, "u")

    def test_accepts_category_preference_alias(self):
        raw = json.dumps(
            {
                "User ID": "u",
                "Profiles": {
                    "price_centric": {"persona": "a"},
                    "quality_centric": {"persona": "b"},
                    "popularity_centric": {"persona": "c"},
                    "category_preference": {"persona": "d"},
                    "category_diversity": {"persona": "e"},
                },
            }
        )
        texts = parse_persona_response(raw, "u")
        assert texts[Criterion.CF] == "d"

    def test_cache_hit_makes_zero_calls(self, tmp_path):
        _, db, assets, history = self._setup()
        cache = JsonCache(tmp_path)
        client = TemplateGenerator()
        first = generate_personas("u1", db, assets, history, client, cache)
        calls_after_first = client.calls
        second = generate_personas("u1", db, assets, history, client, cache)
        assert client.calls == calls_after_first
        assert second.texts == first.texts
        assert second.cache_key == first.cache_key

    def test_cached_equals_fresh(self, tmp_path):
        _, db, assets, history = self._setup()
        cache = JsonCache(tmp_path)
        cached = generate_personas("u1", db, assets, history, TemplateGenerator(), cache)
        fresh = generate_personas("u1", db, assets, history, TemplateGenerator(), cache=None)
        assert cached.texts == fresh.texts

    def test_one_reparse_attempt_then_error(self):
        class FlakyClient:
            identity = "flaky"
            provenance = "llm"

            def __init__(self):
                self.calls = 0

            def personas(self, payload):
                self.calls += 1
                return "not json"

            def domain_description(self, payload):
                return "{}"

        _, db, assets, history = self._setup()
        client = FlakyClient()
        with pytest.raises(MalformedResponseError):
            generate_personas("u1", db, assets, history, client)
        assert client.calls == 2

    def test_payload_structure(self):
        ds, db, assets, history = self._setup()
        payload = persona_payload(
            "u1", "home", "desc", db.labels, db.diversity, history
        )
        assert set(payload) == {
            "Domain",
            "Domain description",
            "User ID",
            "category_price_level",
            "category_rating_level",
            "category_popularity_level",
            "category_familiarity_level",
            "overall_category_diversity",
            "History",
        }
        entry = payload["History"][0]
        assert set(entry) == {
            "item_id",
            "title",
            "category",
            "average_rating",
            "rating_number",
            "user_rating",
            "cat_item_price_tag",
        }

    def test_history_truncated_to_30(self):
        triples = [("u", f"i{k}", "A", k) for k in range(45)]
        ds = make_domain(triples)
        rows = recent_history(ds, "u")
        assert len(rows) == 30
        # newest first
        assert rows[0][0].timestamp == 44


class TestEncoders:
    def test_identical_text_identical_vector(self):
        enc = HashingEncoder(dim=64, seed=3)
        a = enc.embed(["hello pricing world"])[0]
        b = enc.embed(["hello pricing world"])[0]
        np.testing.assert_array_equal(a, b)

    def test_unit_norm(self):
        enc = HashingEncoder(dim=128, seed=0)
        for text in ["a", "some longer text with more words", ""]:
            v = enc.embed([text])[0]
            assert np.linalg.norm(v) == pytest.approx(1.0, abs=1e-9)

    def test_encode_personas_shape(self):
        ds, labels = domain_with_labels()
        db = build_persona_db("u1", ds, labels)
        assets = PromptAssets(domain_id="home", domain_description="desc")
        text = generate_personas("u1", db, assets, [], TemplateGenerator())
        out = encode_personas(text, HashingEncoder(dim=32, seed=1))
        assert set(out.vectors) == set(CRITERIA_ORDER)
        assert out.stacked().shape == (5, 32)

    def test_item_semantics_ignore_title(self):
        ds, _ = domain_with_labels()
        enc = HashingEncoder(dim=32, seed=2)
        a = encode_item_semantics(ds.items["i1"], "desc", enc)
        same_cat = ItemMeta("other", "completely different title", "catA", 9.9, 2.0, 1)
        b = encode_item_semantics(same_cat, "desc", enc)
        np.testing.assert_array_equal(a.vector, b.vector)

    def test_batch_call_count_matches_chunks(self):
        items = [ItemMeta(f"i{k}", "t", f"c{k % 7}", 1.0, 4.0, 1) for k in range(1000)]
        enc = HashingEncoder(dim=16, seed=4)
        out = encode_item_batch(items, "desc", enc, chunk_size=100)
        assert len(out) == 1000
        assert enc.calls == 10

    def test_embedding_cache_roundtrip(self, tmp_path):
        cache = JsonCache(tmp_path)
        items = [ItemMeta(f"i{k}", "t", "c", 1.0, 4.0, 1) for k in range(5)]
        enc = HashingEncoder(dim=16, seed=4)
        first = encode_item_batch(items, "desc", enc, cache=cache)
        calls = enc.calls
        second = encode_item_batch(items, "desc", enc, cache=cache)
        assert enc.calls == calls
        for k in first:
            np.testing.assert_allclose(first[k], second[k])


class TestRemoteRetries:
    def test_three_attempts_then_client_error(self, monkeypatch):
        from multitap.persona.clients import RemoteConfig, RemoteGenerator

        monkeypatch.setenv("MULTITAP_API_KEY", "k")

        class FailingSession:
            def __init__(self):
                self.calls = 0

            def post(self, *args, **kwargs):
                self.calls += 1
                raise OSError("connection refused")

        session = FailingSession()
        client = RemoteGenerator(
            RemoteConfig(retries=3, backoff=0.0), session=session
        )
        with pytest.raises(ClientError, match="after 3 attempts"):
            client.personas({"User ID": "u"})
        assert session.calls == 3

    def test_missing_api_key(self, monkeypatch):
        from multitap.persona.clients import RemoteConfig, RemoteGenerator

        monkeypatch.delenv("MULTITAP_API_KEY", raising=False)

        class NeverCalled:
            def post(self, *a, **k):
                raise AssertionError("should not reach the network")

        client = RemoteGenerator(RemoteConfig(retries=1), session=NeverCalled())
        with pytest.raises(ClientError, match="MULTITAP_API_KEY"):
            client.personas({"User ID": "u"})


class TestParallelGeneration:
    def test_parallel_equals_serial(self, tmp_path):
        ds, labels = domain_with_labels()
        dbs = build_all_persona_dbs(ds, labels)
        assets = PromptAssets(domain_id="home", domain_description="desc")
        histories = {u: recent_history(ds, u) for u in dbs}
        from multitap.persona import generate_all_personas

        serial = generate_all_personas(dbs, assets, histories, TemplateGenerator())
        parallel = generate_all_personas(
            dbs, assets, histories, TemplateGenerator(), parallelism=3
        )
        assert {u: t.texts for u, t in serial.items()} == {
            u: t.texts for u, t in parallel.items()
        }
