"""LightGCN backbone: ID embeddings pretrained per domain with BPR.

The bipartite graph indexes only users and items that appear in train
edges; the embedding table may additionally cover catalog items that never
occur in train (they receive no propagation mass and are reachable only as
sampled negatives or ranking candidates).  Propagation is the layer mean of
repeated normalized-adjacency applications, including layer 0.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .corpus import InteractionRecord, SplitBundle
from .diffkit import AdamConfig, ParameterStore, adam_step, init_normal, sigmoid
from .errors import DivergenceError
from .evaluate import full_ranking_eval

logger = logging.getLogger(__name__)


@dataclass
class BipartiteGraph:
    user_index: dict[str, int]
    item_index: dict[str, int]
    edges: np.ndarray  # (E, 2) of (user_row, item_row), deduplicated
    user_degrees: np.ndarray
    item_degrees: np.ndarray

    @classmethod
    def from_interactions(cls, records: Iterable[InteractionRecord]) -> "BipartiteGraph":
        pairs = sorted({(r.user_id, r.item_id) for r in records})
        if not pairs:
            raise ValueError("cannot build a graph from zero interactions")
        users = sorted({u for u, _ in pairs})
        items = sorted({i for _, i in pairs})
        user_index = {u: k for k, u in enumerate(users)}
        item_index = {i: k for k, i in enumerate(items)}
        edges = np.array([(user_index[u], item_index[i]) for u, i in pairs], dtype=np.int64)
        user_degrees = np.bincount(edges[:, 0], minlength=len(users)).astype(np.float64)
        item_degrees = np.bincount(edges[:, 1], minlength=len(items)).astype(np.float64)
        return cls(user_index, item_index, edges, user_degrees, item_degrees)


@dataclass
class IdEmbeddingTable:
    user_ids: list[str]
    item_ids: list[str]
    user_vecs: np.ndarray  # (|U|, d)
    item_vecs: np.ndarray  # (|I|, d)

    def __post_init__(self):
        if self.user_vecs.shape[0] != len(self.user_ids):
            raise ValueError("user row count does not match user index")
        if self.item_vecs.shape[0] != len(self.item_ids):
            raise ValueError("item row count does not match item index")
        if self.user_vecs.shape[1] != self.item_vecs.shape[1]:
            raise ValueError("user and item embedding dimensions differ")

    @property
    def dim(self) -> int:
        return self.user_vecs.shape[1]

    def stacked(self) -> np.ndarray:
        return np.vstack([self.user_vecs, self.item_vecs])


def normalized_adjacency(
    graph: BipartiteGraph,
    user_order: Sequence[str] | None = None,
    item_order: Sequence[str] | None = None,
) -> sp.csr_matrix:
    """Symmetric bipartite adjacency with entries 1/sqrt(deg(u) * deg(i)).

    Optional orderings re-index rows onto a superset of nodes (extra rows
    stay zero); by default the graph's own index maps are used, for which
    every row has degree >= 1.
    """
    if user_order is None:
        u_map = graph.user_index
        nu = len(graph.user_index)
    else:
        u_map = {u: k for k, u in enumerate(user_order)}
        nu = len(user_order)
    if item_order is None:
        i_map = graph.item_index
        ni = len(graph.item_index)
    else:
        i_map = {i: k for k, i in enumerate(item_order)}
        ni = len(item_order)
    inv_user = {v: k for k, v in graph.user_index.items()}
    inv_item = {v: k for k, v in graph.item_index.items()}
    rows, cols, vals = [], [], []
    for u_row, i_row in graph.edges:
        u = inv_user[int(u_row)]
        i = inv_item[int(i_row)]
        if u not in u_map or i not in i_map:
            continue
        weight = 1.0 / np.sqrt(graph.user_degrees[u_row] * graph.item_degrees[i_row])
        ui = u_map[u]
        ii = nu + i_map[i]
        rows.extend([ui, ii])
        cols.extend([ii, ui])
        vals.extend([weight, weight])
    n = nu + ni
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def propagate(table: IdEmbeddingTable, adjacency: sp.spmatrix, layers: int) -> IdEmbeddingTable:
    """Layer-averaged propagation: mean over layers 0..L of A^l applied to
    the stacked embedding matrix.  layers=0 returns the input exactly."""
    if layers < 0:
        raise ValueError("layer count must be nonnegative")
    stacked = table.stacked()
    if adjacency.shape != (stacked.shape[0], stacked.shape[0]):
        raise ValueError(
            f"adjacency shape {adjacency.shape} does not match table ({stacked.shape[0]} nodes)"
        )
    acc = stacked.copy()
    current = stacked
    for _ in range(layers):
        current = adjacency @ current
        acc += current
    out = acc / (layers + 1)
    nu = len(table.user_ids)
    return IdEmbeddingTable(
        user_ids=list(table.user_ids),
        item_ids=list(table.item_ids),
        user_vecs=out[:nu],
        item_vecs=out[nu:],
    )


@dataclass
class GcnConfig:
    dim: int = 128
    layers: int = 3
    learning_rate: float = 1e-2
    weight_decay: float = 1e-4
    epochs: int = 100
    patience: int = 10
    batch_size: int = 1024
    negatives: int = 1
    seed: int = 0
    eval_k: int = 5


@dataclass
class PretrainResult:
    table: IdEmbeddingTable  # propagated embeddings at the best epoch
    raw: IdEmbeddingTable  # unpropagated parameters at the best epoch
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_hr: float = 0.0


def _sample_negatives(
    rng: np.random.Generator, users: np.ndarray, observed: list[set[int]], n_items: int
) -> np.ndarray:
    negs = rng.integers(0, n_items, size=users.shape[0])
    for idx in range(users.shape[0]):
        seen = observed[users[idx]]
        if len(seen) >= n_items:
            continue  # no unobserved item exists; keep the draw
        while int(negs[idx]) in seen:
            negs[idx] = rng.integers(0, n_items)
    return negs


def pretrain_id_embeddings(
    split: SplitBundle,
    config: GcnConfig,
    catalog_items: Sequence[str] | None = None,
) -> PretrainResult:
    """Train LightGCN with BPR on the train part, early-stopped on valid HR@K."""
    graph = BipartiteGraph.from_interactions(split.train)
    user_ids = sorted(graph.user_index)
    item_ids = sorted(graph.item_index)
    if catalog_items is not None:
        extra = sorted(set(catalog_items) - set(item_ids))
        item_ids = item_ids + extra
    adjacency = normalized_adjacency(graph, user_order=user_ids, item_order=item_ids)

    rng = np.random.default_rng(config.seed)
    nu, ni = len(user_ids), len(item_ids)
    store = ParameterStore()
    emb = store.add("emb", init_normal(rng, (nu + ni, config.dim)))
    adam = AdamConfig(
        learning_rate=config.learning_rate, weight_decay=config.weight_decay
    )

    u_index = {u: k for k, u in enumerate(user_ids)}
    i_index = {i: k for k, i in enumerate(item_ids)}
    pos_pairs = np.array(
        [(u_index[r.user_id], i_index[r.item_id]) for r in split.train], dtype=np.int64
    )
    observed: list[set[int]] = [set() for _ in range(nu)]
    for u_row, i_row in pos_pairs:
        observed[u_row].add(int(i_row))
    train_item_sets = {
        user_ids[u]: {item_ids[i] for i in rows} for u, rows in enumerate(observed)
    }
    valid = [r for r in split.valid if r.user_id in u_index and r.item_id in i_index]

    def current_table() -> IdEmbeddingTable:
        return IdEmbeddingTable(user_ids, item_ids, emb[:nu].copy(), emb[nu:].copy())

    def evaluate(table: IdEmbeddingTable) -> dict:
        scores = table.user_vecs @ table.item_vecs.T

        def score_fn(user: str) -> np.ndarray:
            return scores[u_index[user]]

        return full_ranking_eval(score_fn, item_ids, train_item_sets, valid, ks=[config.eval_k])

    best_hr = -1.0
    best_epoch = -1
    best_params: np.ndarray | None = None
    best_table: IdEmbeddingTable | None = None
    history: list[dict] = []
    layer_count = config.layers

    for epoch in range(config.epochs):
        order = rng.permutation(pos_pairs.shape[0])
        epoch_loss = 0.0
        n_triples = 0
        for start in range(0, order.size, config.batch_size):
            batch = pos_pairs[order[start : start + config.batch_size]]
            users = np.repeat(batch[:, 0], config.negatives)
            pos = np.repeat(batch[:, 1], config.negatives)
            neg = _sample_negatives(rng, users, observed, ni)

            # forward: propagate, then score the batch triples
            stacked = emb
            outputs = [stacked]
            current = stacked
            for _ in range(layer_count):
                current = adjacency @ current
                outputs.append(current)
            prop = sum(outputs) / (layer_count + 1)
            p_u = prop[users]
            q_pos = prop[nu + pos]
            q_neg = prop[nu + neg]
            margin = np.sum(p_u * (q_pos - q_neg), axis=1)
            loss = float(np.mean(np.logaddexp(0.0, -margin)))
            if not np.isfinite(loss):
                raise DivergenceError(
                    f"non-finite BPR loss at epoch {epoch}, batch start {start}"
                )
            epoch_loss += loss * margin.size
            n_triples += margin.size

            # backward through the propagation (adjacency is symmetric)
            coeff = -sigmoid(-margin) / margin.size
            grad_prop = np.zeros_like(prop)
            np.add.at(grad_prop, users, coeff[:, None] * (q_pos - q_neg))
            np.add.at(grad_prop, nu + pos, coeff[:, None] * p_u)
            np.add.at(grad_prop, nu + neg, -coeff[:, None] * p_u)
            acc = grad_prop.copy()
            current = grad_prop
            for _ in range(layer_count):
                current = adjacency @ current
                acc += current
            store.accumulate("emb", acc / (layer_count + 1))
            adam_step(store, adam)

        table = propagate(current_table(), adjacency, layer_count)
        metrics = evaluate(table)
        hr = metrics["HR"][config.eval_k]
        history.append(
            {"epoch": epoch, "loss": epoch_loss / max(n_triples, 1), "valid_hr": hr}
        )
        if hr > best_hr:
            best_hr = hr
            best_epoch = epoch
            best_params = emb.copy()
            best_table = table
        elif epoch - best_epoch >= config.patience:
            logger.info("early stop at epoch %d (best %d)", epoch, best_epoch)
            break

    assert best_table is not None and best_params is not None
    raw = IdEmbeddingTable(user_ids, item_ids, best_params[:nu], best_params[nu:])
    return PretrainResult(
        table=best_table, raw=raw, history=history, best_epoch=best_epoch, best_hr=best_hr
    )
