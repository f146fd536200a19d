"""Config-driven pipeline: ingest, split, idh, persona, pretrain, train, eval,
ablate.

Every stage writes its artifacts plus a manifest carrying the semantic
config hash; rerunning a completed stage with an unchanged config is a
no-op.  Artifacts never embed absolute paths or timestamps, so two runs
with the same config hash produce byte-identical primary outputs.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from . import idh as idh_mod
from . import persona as persona_mod
from .corpus import (
    DomainDataset,
    InteractionRecord,
    SplitBundle,
    build_domain_pair,
    load_domain,
    time_split,
)
from .diffkit import load_checkpoint, save_checkpoint
from .errors import DependencyError
from .evaluate import aggregate_seed_reports, full_ranking_eval
from .gcn import GcnConfig, IdEmbeddingTable, pretrain_id_embeddings
from .idh import Criterion, Label
from .model import (
    ModelInputs,
    MultiTapModel,
    TrainConfig,
    train_target,
)
from .util import atomic_write_text, content_key, read_json, write_json

logger = logging.getLogger(__name__)

STAGES = ("ingest", "split", "idh", "persona", "pretrain", "train", "eval", "ablate")

_STAGE_DEPS = {
    "ingest": (),
    "split": ("ingest",),
    "idh": ("split",),
    "persona": ("idh",),
    "pretrain": ("split",),
    "train": ("persona", "pretrain"),
    "eval": ("train",),
    "ablate": ("persona", "pretrain"),
}


def _parse_boundary(value) -> int:
    if isinstance(value, int):
        return value
    dt = datetime.fromisoformat(str(value))
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


@dataclass
class DomainPathsConfig:
    domain_id: str
    interactions: str
    metadata: str


@dataclass
class SplitConfig:
    boundary: str | int = "2019-01-01"
    valid_fraction: float = 0.5

    @property
    def boundary_ts(self) -> int:
        return _parse_boundary(self.boundary)


@dataclass
class ClientSettings:
    mode: str = "offline"
    persona_dim: int = 256
    item_dim: int = 128
    seed: int = 7
    chunk_size: int = 256
    parallelism: int = 1
    endpoint: str = "https://api.openai.com/v1"
    chat_model: str = "gpt-4o"
    embed_model: str = "text-embedding-3-large"
    persona_temperature: float = 0.7
    description_temperature: float = 1.0
    remote_persona_dim: int = 3072
    remote_item_dim: int = 512


@dataclass
class PipelineConfig:
    run_dir: str
    source: DomainPathsConfig
    target: DomainPathsConfig
    cache_dir: str | None = None
    split: SplitConfig = field(default_factory=SplitConfig)
    client: ClientSettings = field(default_factory=ClientSettings)
    gcn: GcnConfig = field(default_factory=GcnConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    # The source prerequisite usually trains hotter and longer than the
    # target run; it only has to produce well-separated persona tables.
    source_train: TrainConfig | None = None
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    eval_ks: tuple[int, ...] = (5, 10)
    eval_split: str = "test"
    eval_average: str = "interaction"
    criteria: tuple[str, ...] = ("ps", "qp", "pb")
    report_labels: tuple[str, ...] = ("high", "low")
    ablate: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, obj: dict) -> "PipelineConfig":
        obj = dict(obj)
        obj["source"] = DomainPathsConfig(**obj["source"])
        obj["target"] = DomainPathsConfig(**obj["target"])
        if "split" in obj:
            obj["split"] = SplitConfig(**obj["split"])
        if "client" in obj:
            obj["client"] = ClientSettings(**obj["client"])
        if "gcn" in obj:
            obj["gcn"] = GcnConfig(**obj["gcn"])
        if "train" in obj:
            obj["train"] = TrainConfig(**obj["train"])
        if obj.get("source_train") is not None:
            obj["source_train"] = TrainConfig(**obj["source_train"])
        for key in ("seeds", "eval_ks", "report_labels", "criteria"):
            if key in obj:
                obj[key] = tuple(obj[key])
        return cls(**obj)

    @classmethod
    def from_json(cls, path: str | Path) -> "PipelineConfig":
        return cls.from_dict(read_json(path))

    def semantic_dict(self) -> dict:
        """Everything that affects outputs; run/cache locations excluded."""
        obj = dataclasses.asdict(self)
        obj.pop("run_dir")
        obj.pop("cache_dir")
        return obj

    def config_hash(self) -> str:
        return content_key(self.semantic_dict())

    def to_json_dict(self) -> dict:
        return dataclasses.asdict(self)


def _records_to_rows(records: Sequence[InteractionRecord]) -> list[list]:
    return [[r.user_id, r.item_id, r.rating, r.timestamp] for r in records]


def _rows_to_records(rows: Sequence[Sequence]) -> tuple[InteractionRecord, ...]:
    return tuple(InteractionRecord(str(u), str(i), float(r), int(t)) for u, i, r, t in rows)


class Pipeline:
    def __init__(self, config: PipelineConfig):
        self.config = config
        self.run_dir = Path(config.run_dir)
        self.hash = config.config_hash()
        cache_dir = config.cache_dir or str(self.run_dir / "cache")
        self.text_cache = persona_mod.JsonCache(Path(cache_dir) / "texts")
        self.vector_cache = persona_mod.JsonCache(Path(cache_dir) / "vectors")
        self._domains: dict[str, DomainDataset] = {}
        self._splits: dict[str, SplitBundle] = {}

    # -- bookkeeping --------------------------------------------------------

    def _manifest_path(self, stage: str) -> Path:
        return self.run_dir / stage / "manifest.json"

    def _is_done(self, stage: str) -> bool:
        path = self._manifest_path(stage)
        if not path.exists():
            return False
        return read_json(path).get("config_hash") == self.hash

    def _mark_done(self, stage: str, extra: dict | None = None) -> None:
        manifest = {"stage": stage, "config_hash": self.hash}
        if extra:
            manifest.update(extra)
        write_json(self._manifest_path(stage), manifest)

    def _require(self, stage: str, needed: str) -> None:
        if not self._is_done(needed):
            raise DependencyError(stage, needed)

    # -- shared loaders -----------------------------------------------------

    def _domain_config(self, which: str) -> DomainPathsConfig:
        return self.config.source if which == "source" else self.config.target

    def _dataset(self, which: str) -> DomainDataset:
        if which not in self._domains:
            spec = self._domain_config(which)
            self._domains[which] = load_domain(
                spec.interactions, spec.metadata, spec.domain_id
            )
        return self._domains[which]

    def _split(self, which: str) -> SplitBundle:
        if which not in self._splits:
            obj = read_json(self.run_dir / "split" / f"{which}.json")
            self._splits[which] = SplitBundle(
                train=_rows_to_records(obj["train"]),
                valid=_rows_to_records(obj["valid"]),
                test=_rows_to_records(obj["test"]),
                boundary_time=obj["boundary"],
            )
        return self._splits[which]

    def _train_dataset(self, which: str) -> DomainDataset:
        return self._dataset(which).restricted_to(self._split(which).train)

    def _clients(self):
        cs = self.config.client
        if cs.mode == "offline":
            generator = persona_mod.TemplateGenerator()
            persona_encoder = persona_mod.HashingEncoder(cs.persona_dim, cs.seed)
            item_encoder = persona_mod.HashingEncoder(cs.item_dim, cs.seed)
        elif cs.mode == "remote":
            remote = persona_mod.RemoteConfig(
                endpoint=cs.endpoint,
                chat_model=cs.chat_model,
                embed_model=cs.embed_model,
                persona_temperature=cs.persona_temperature,
                description_temperature=cs.description_temperature,
                embed_dim=cs.remote_persona_dim,
            )
            generator = persona_mod.RemoteGenerator(remote)
            persona_encoder = persona_mod.RemoteEncoder(remote)
            item_remote = dataclasses.replace(remote, embed_dim=cs.remote_item_dim)
            item_encoder = persona_mod.RemoteEncoder(item_remote)
        else:
            raise ValueError(f"unknown client mode '{cs.mode}'")
        return generator, persona_encoder, item_encoder

    # -- stages -------------------------------------------------------------

    def stage_ingest(self) -> None:
        summary = {}
        for which in ("source", "target"):
            ds = self._dataset(which)
            summary[which] = {
                "domain": ds.domain_id,
                "users": len(ds.users),
                "items": len(ds.item_ids),
                "interactions": len(ds.interactions),
            }
        pair = build_domain_pair(self._dataset("source"), self._dataset("target"))
        summary["overlap_users"] = len(pair.overlap)
        write_json(self.run_dir / "ingest" / "summary.json", summary)
        self._mark_done("ingest", {"overlap_users": len(pair.overlap)})

    def stage_split(self) -> None:
        self._require("split", "ingest")
        boundary = self.config.split.boundary_ts
        for which in ("source", "target"):
            ds = self._dataset(which)
            bundle = time_split(ds, boundary, self.config.split.valid_fraction)
            dropped = len(ds.interactions) - (
                len(bundle.train) + len(bundle.valid) + len(bundle.test)
            )
            write_json(
                self.run_dir / "split" / f"{which}.json",
                {
                    "boundary": boundary,
                    "train": _records_to_rows(bundle.train),
                    "valid": _records_to_rows(bundle.valid),
                    "test": _records_to_rows(bundle.test),
                    "dropped": dropped,
                },
            )
            self._splits[which] = bundle
        self._mark_done("split")

    def stage_idh(self) -> None:
        self._require("idh", "split")
        report_labels = [Label[name.upper()] for name in self.config.report_labels]
        criteria = tuple(Criterion(c) for c in self.config.criteria)
        for which in ("source", "target"):
            train_ds = self._train_dataset(which)
            bins = idh_mod.compute_domain_bins(train_ds, criteria)
            labels = idh_mod.compute_domain_labels(train_ds, bins, criteria)
            base = self.run_dir / "idh" / which
            write_json(
                base / "bins.json",
                {
                    crit.value: {
                        cat: {
                            "q13": a.q13,
                            "q23": a.q23,
                            "bins": dict(sorted(a.bins.items())),
                        }
                        for cat, a in per_cat.items()
                    }
                    for crit, per_cat in bins.items()
                },
            )
            write_json(
                base / "labels.json",
                {
                    crit.value: {
                        cat: {u: lab.code for u, lab in sorted(per_user.items())}
                        for cat, per_user in per_cat.items()
                    }
                    for crit, per_cat in labels.items()
                },
            )
            matrices = []
            for crit in criteria:
                if len(labels[crit]) >= 2:
                    for lab in report_labels:
                        matrices.append(
                            idh_mod.preservation_matrix(labels[crit], crit, lab)
                        )
            if matrices:
                idh_mod.export_idh_report(matrices, base / "report")
        self._mark_done("idh")

    def _load_idh(self, which: str):
        base = self.run_dir / "idh" / which
        raw_bins = read_json(base / "bins.json")
        bins = {
            Criterion(c): {
                cat: idh_mod.BinAssignment(
                    category=cat,
                    criterion=Criterion(c),
                    q13=entry["q13"],
                    q23=entry["q23"],
                    bins={k: int(v) for k, v in entry["bins"].items()},
                )
                for cat, entry in per_cat.items()
            }
            for c, per_cat in raw_bins.items()
        }
        raw_labels = read_json(base / "labels.json")
        labels = {
            Criterion(c): {
                cat: {u: Label.from_code(code) for u, code in per_user.items()}
                for cat, per_user in per_cat.items()
            }
            for c, per_cat in raw_labels.items()
        }
        return bins, labels

    def stage_persona(self, phase: str = "encode") -> None:
        """Build databases, generate texts and encode vectors.

        `phase` stops early after "build" (databases only) or "generate"
        (plus texts); only the full "encode" pass marks the stage done."""
        self._require("persona", "idh")
        generator, persona_encoder, item_encoder = self._clients()
        for which in ("source", "target"):
            train_ds = self._train_dataset(which)
            bins, labels = self._load_idh(which)
            dbs = persona_mod.build_all_persona_dbs(train_ds, labels)
            base = self.run_dir / "persona" / which
            write_json(base / "db.json", [dbs[u].to_json_dict() for u in sorted(dbs)])
            if phase == "build":
                continue
            assets = persona_mod.build_prompt_assets(train_ds, generator)
            price_bins = bins.get(Criterion.PS, {})
            histories = {
                u: persona_mod.recent_history(train_ds, u, price_bins)
                for u in sorted(dbs)
            }
            texts = persona_mod.generate_all_personas(
                dbs,
                assets,
                histories,
                generator,
                cache=self.text_cache,
                parallelism=self.config.client.parallelism,
            )
            user_ids = sorted(texts)
            write_json(
                base / "texts.json",
                {u: {c.value: t for c, t in texts[u].texts.items()} for u in user_ids},
            )
            atomic_write_text(base / "description.txt", assets.domain_description + "\n")
            if phase == "generate":
                continue
            vectors = np.stack(
                [
                    persona_mod.encode_personas(
                        texts[u], persona_encoder, cache=self.vector_cache
                    ).stacked()
                    for u in user_ids
                ]
            )
            items = [train_ds.items[i] for i in sorted(train_ds.items)]
            item_vecs = persona_mod.encode_item_batch(
                items,
                assets.domain_description,
                item_encoder,
                chunk_size=self.config.client.chunk_size,
                cache=self.vector_cache,
            )
            save_checkpoint(
                base / "user_vectors.ckpt",
                {"vectors": vectors},
                {
                    "config_hash": self.hash,
                    "seed": self.config.client.seed,
                    "user_ids": user_ids,
                    "dim": persona_encoder.dim,
                },
            )
            item_order = [m.item_id for m in items]
            save_checkpoint(
                base / "item_vectors.ckpt",
                {"vectors": np.stack([item_vecs[i] for i in item_order])},
                {
                    "config_hash": self.hash,
                    "seed": self.config.client.seed,
                    "item_ids": item_order,
                    "dim": item_encoder.dim,
                },
            )
        if phase == "encode":
            self._mark_done("persona")

    def stage_pretrain(self) -> None:
        self._require("pretrain", "split")
        for which in ("source", "target"):
            ds = self._dataset(which)
            result = pretrain_id_embeddings(
                self._split(which), self.config.gcn, catalog_items=sorted(ds.item_ids)
            )
            save_checkpoint(
                self.run_dir / "backbone" / f"{which}.ckpt",
                {
                    "user_vecs": result.table.user_vecs,
                    "item_vecs": result.table.item_vecs,
                    "raw_user_vecs": result.raw.user_vecs,
                    "raw_item_vecs": result.raw.item_vecs,
                },
                {
                    "config_hash": self.hash,
                    "seed": self.config.gcn.seed,
                    "user_ids": result.table.user_ids,
                    "item_ids": result.table.item_ids,
                    "best_epoch": result.best_epoch,
                    "best_valid_hr": result.best_hr,
                },
            )
        self._mark_done("pretrain")

    # -- model assembly -----------------------------------------------------

    def _load_backbone(self, which: str) -> IdEmbeddingTable:
        arrays, manifest = load_checkpoint(self.run_dir / "backbone" / f"{which}.ckpt")
        return IdEmbeddingTable(
            user_ids=manifest["user_ids"],
            item_ids=manifest["item_ids"],
            user_vecs=arrays["user_vecs"],
            item_vecs=arrays["item_vecs"],
        )

    def _load_persona_vectors(self, which: str):
        base = self.run_dir / "persona" / which
        users, umanifest = load_checkpoint(base / "user_vectors.ckpt")
        items, imanifest = load_checkpoint(base / "item_vectors.ckpt")
        return (
            umanifest["user_ids"],
            users["vectors"],
            imanifest["item_ids"],
            items["vectors"],
        )

    def _model_inputs(
        self, which: str, overlap: list[str] | None = None,
        source_personas: np.ndarray | None = None,
        source_backbone: np.ndarray | None = None,
    ) -> ModelInputs:
        backbone = self._load_backbone(which)
        p_users, p_vecs, s_items, s_vecs = self._load_persona_vectors(which)
        urow = {u: k for k, u in enumerate(p_users)}
        irow = {i: k for k, i in enumerate(s_items)}
        persona_inputs = np.stack([p_vecs[urow[u]] for u in backbone.user_ids])
        item_semantics = np.stack([s_vecs[irow[i]] for i in backbone.item_ids])
        return ModelInputs(
            user_ids=backbone.user_ids,
            item_ids=backbone.item_ids,
            persona_inputs=persona_inputs,
            item_semantics=item_semantics,
            backbone_user=backbone.user_vecs,
            backbone_item=backbone.item_vecs,
            overlap_users=overlap or [],
            source_user_personas=source_personas,
            source_user_backbone=source_backbone,
        )

    def _source_tables_path(self) -> Path:
        return self.run_dir / "model" / "source_tables.ckpt"

    def _ensure_source_tables(self) -> None:
        """Train the source-domain model (no transfer) and export the
        overlap-aligned persona and ID tables it provides."""
        path = self._source_tables_path()
        if path.exists():
            _, manifest = load_checkpoint(path)
            if manifest.get("config_hash") == self.hash:
                return
        base = self.config.source_train or self.config.train
        cfg = dataclasses.replace(
            base, transfer="none", lambda_dpl=0.0, seed=self.config.seeds[0]
        )
        inputs = self._model_inputs("source")
        split = self._split("source")
        result = train_target(inputs, split.train, split.valid, cfg)
        h_all = result.model.user_persona_vectors()
        source_users = set(inputs.user_ids)
        target_train_users = {r.user_id for r in self._split("target").train}
        overlap = sorted(source_users & target_train_users)
        rows = [result.model.user_rows[u] for u in overlap]
        backbone = self._load_backbone("source")
        save_checkpoint(
            path,
            {
                "h_users": h_all[rows],
                "v_users": backbone.user_vecs[rows],
            },
            {"config_hash": self.hash, "overlap_users": overlap, "seed": cfg.seed},
        )
        save_checkpoint(
            self.run_dir / "model" / "source_model.ckpt",
            result.model.store.params,
            {"config_hash": self.hash, "seed": cfg.seed, "best_epoch": result.best_epoch},
        )

    def _target_inputs_with_transfer(self) -> ModelInputs:
        arrays, manifest = load_checkpoint(self._source_tables_path())
        return self._model_inputs(
            "target",
            overlap=manifest["overlap_users"],
            source_personas=arrays["h_users"],
            source_backbone=arrays["v_users"],
        )

    def _train_one(self, inputs: ModelInputs, seed: int, overrides: dict | None = None):
        cfg = dataclasses.replace(self.config.train, seed=seed, **(overrides or {}))
        split = self._split("target")
        return train_target(inputs, split.train, split.valid, cfg)

    def _test_report(
        self, model: MultiTapModel, ks: Sequence[int], which_split: str = "test"
    ) -> dict:
        split = self._split("target")
        heldout = split.test if which_split == "test" else split.valid
        scores = model.score_matrix()
        train_items: dict[str, set[str]] = {}
        for r in split.train:
            train_items.setdefault(r.user_id, set()).add(r.item_id)

        def score_fn(user: str) -> np.ndarray:
            return scores[model.user_rows[user]]

        return full_ranking_eval(
            score_fn,
            model.inputs.item_ids,
            train_items,
            heldout,
            ks=ks,
            average=self.config.eval_average,
        )

    def stage_train(self) -> None:
        self._require("train", "persona")
        self._require("train", "pretrain")
        self._ensure_source_tables()
        inputs = self._target_inputs_with_transfer()
        for seed in self.config.seeds:
            result = self._train_one(inputs, seed)
            save_checkpoint(
                self.run_dir / "model" / f"target_seed{seed}.ckpt",
                result.model.store.params,
                {
                    "config_hash": self.hash,
                    "seed": seed,
                    "best_epoch": result.best_epoch,
                },
            )
            lines = [json.dumps(row, sort_keys=True) for row in result.history]
            atomic_write_text(
                self.run_dir / "model" / f"metrics_seed{seed}.jsonl",
                "\n".join(lines) + "\n",
            )
        self._mark_done("train")

    def _eval_checkpoint(self, path: Path, inputs: ModelInputs, ks, which_split: str) -> dict:
        arrays, manifest = load_checkpoint(path)
        cfg = dataclasses.replace(self.config.train, seed=manifest.get("seed", 0))
        model = MultiTapModel(inputs, cfg)
        model.store.load_params(arrays)
        return self._test_report(model, ks, which_split)

    def stage_eval(self, checkpoint: str | None = None) -> None:
        if checkpoint is None:
            self._require("eval", "train")
        inputs = self._target_inputs_with_transfer()
        ks = list(self.config.eval_ks)
        which_split = self.config.eval_split
        if checkpoint is not None:
            report = self._eval_checkpoint(Path(checkpoint), inputs, ks, which_split)
            report.update(config_hash=self.hash, split=which_split, checkpoint=str(checkpoint))
            write_json(self.run_dir / "eval" / "report.json", report)
            self._mark_done("eval", {"checkpoint": str(checkpoint)})
            return
        reports = [
            self._eval_checkpoint(
                self.run_dir / "model" / f"target_seed{seed}.ckpt", inputs, ks, which_split
            )
            for seed in self.config.seeds
        ]
        aggregated = aggregate_seed_reports(reports, ks, expected_seeds=len(self.config.seeds))
        aggregated["config_hash"] = self.hash
        aggregated["split"] = which_split
        write_json(self.run_dir / "eval" / "report.json", aggregated)
        self._mark_done("eval")

    def stage_ablate(self) -> None:
        self._require("ablate", "persona")
        self._require("ablate", "pretrain")
        self._ensure_source_tables()
        inputs = self._target_inputs_with_transfer()
        grids: list[tuple[str, object, dict]] = []
        for mode in self.config.ablate.get("aggregation", []):
            grids.append(("aggregation", mode, {"aggregation": mode}))
        for mode in self.config.ablate.get("transfer", []):
            over = {"transfer": mode}
            if mode == "none":
                over["lambda_dpl"] = 0.0
            grids.append(("transfer", mode, over))
        for lam in self.config.ablate.get("lambda", []):
            grids.append(("lambda", lam, {"lambda_dpl": float(lam)}))
        for tau in self.config.ablate.get("tau", []):
            grids.append(("tau", tau, {"tau": float(tau)}))
        if not grids:
            grids = [("transfer", m, {"transfer": m, **({"lambda_dpl": 0.0} if m == "none" else {})})
                     for m in ("doppelganger", "none")]
        k = self.config.train.eval_k
        rows = []
        for axis, value, overrides in grids:
            for seed in self.config.seeds:
                result = self._train_one(inputs, seed, overrides)
                report = self._test_report(result.model, [k])
                rows.append(
                    {
                        "axis": axis,
                        "value": value,
                        "seed": seed,
                        f"hr@{k}": report["HR"][k],
                        f"ndcg@{k}": report["NDCG"][k],
                    }
                )
        header = ["axis", "value", "seed", f"hr@{k}", f"ndcg@{k}"]
        lines = [",".join(header)]
        for row in rows:
            lines.append(",".join(str(row[h]) for h in header))
        atomic_write_text(self.run_dir / "ablation" / "results.csv", "\n".join(lines) + "\n")
        self._mark_done("ablate", {"runs": len(rows)})

    # -- runner ---------------------------------------------------------------

    def run(self, stages: Sequence[str]) -> dict[str, str]:
        unknown = [s for s in stages if s not in STAGES]
        if unknown:
            raise ValueError(f"unknown stages: {unknown}")
        status: dict[str, str] = {}
        for stage in STAGES:
            if stage not in stages:
                continue
            if self._is_done(stage):
                logger.info("stage %s cached", stage)
                status[stage] = "cached"
                continue
            logger.info("stage %s running", stage)
            getattr(self, f"stage_{stage}")()
            status[stage] = "ran"
        return status


def run_pipeline(config: PipelineConfig, stages: Sequence[str]) -> dict[str, str]:
    return Pipeline(config).run(stages)
