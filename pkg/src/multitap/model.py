"""Core recommendation model: self-attentive persona aggregation, doppelganger
contrastive transfer, persona-behavior fusion, BPR and joint training.

Frozen inputs are the per-user criterion embedding stacks, item semantic
vectors, and the source-domain persona/ID tables; trainable parameters are
the aggregation mask token, the aggregator FFN/Proj, the two fusion heads
and the ID embeddings (initialized from the pretrained graph backbone).
The forward and backward passes are composed explicitly from hand-derived
adjoints; `diffkit.grad_check` validates the complete objective.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .corpus import InteractionRecord
from .diffkit import (
    ParameterStore,
    AdamConfig,
    adam_step,
    init_normal,
    scaled_dot_attention,
    sigmoid,
    softmax,
)
from .errors import DivergenceError
from .evaluate import full_ranking_eval
from .persona.encoding import PersonaEmbeddingSet

logger = logging.getLogger(__name__)

AGGREGATION_MODES = ("self_attn", "mean", "concat")
TRANSFER_MODES = ("doppelganger", "direct_id", "direct_persona", "direct_both", "none")


# ---------------------------------------------------------------------------
# tables and standalone operations
# ---------------------------------------------------------------------------


@dataclass
class PersonaTable:
    """Frozen per-domain embedding tables (users and optionally items)."""

    user_ids: list[str]
    user_vecs: np.ndarray
    item_ids: list[str] = field(default_factory=list)
    item_vecs: np.ndarray | None = None

    def __post_init__(self):
        self._user_rows = {u: k for k, u in enumerate(self.user_ids)}

    def user_vector(self, user_id: str) -> np.ndarray:
        return self.user_vecs[self._user_rows[user_id]]

    def __contains__(self, user_id: str) -> bool:
        return user_id in self._user_rows


@dataclass
class AggregatorParams:
    mask: np.ndarray | None
    ffn_w: np.ndarray
    ffn_b: np.ndarray
    proj_w: np.ndarray
    proj_b: np.ndarray


@dataclass
class AggregateResult:
    weights: np.ndarray | None  # attention weights over criteria, None for mean/concat
    pooled: np.ndarray  # pre-FFN aggregation
    vector: np.ndarray  # final embedding h_u


def aggregate_personas(
    emb_set: PersonaEmbeddingSet, params: AggregatorParams, mode: str = "self_attn"
) -> AggregateResult:
    """Aggregate the five criterion vectors into one user embedding."""
    if mode not in AGGREGATION_MODES:
        raise ValueError(f"unknown aggregation mode '{mode}'")
    stacked = emb_set.stacked()  # (5, n)
    n = stacked.shape[1]
    weights = None
    if mode == "self_attn":
        if params.mask is None:
            raise ValueError("self_attn aggregation needs a mask token")
        if params.mask.shape != (n,):
            raise ValueError(f"mask dimension {params.mask.shape} != ({n},)")
        weights, pooled = scaled_dot_attention(params.mask, stacked, stacked)
    elif mode == "mean":
        pooled = stacked.mean(axis=0)
    else:  # concat
        pooled = stacked.reshape(-1)
    hid = np.tanh(pooled @ params.ffn_w + params.ffn_b)
    vector = hid @ params.proj_w + params.proj_b
    return AggregateResult(weights=weights, pooled=pooled, vector=vector)


@dataclass
class DoppelgangerState:
    user_id: str
    weights: np.ndarray  # attention over source users, sums to 1
    vector: np.ndarray


def doppelganger_embed(
    user_id: str, target_personas: PersonaTable, source_personas: PersonaTable
) -> DoppelgangerState:
    """Target-conditioned convex combination of source persona embeddings.

    The query is the user's target persona embedding; keys and values are
    the source persona embeddings of all overlapping users.
    """
    if user_id not in target_personas or user_id not in source_personas:
        raise ValueError(f"user '{user_id}' is not an overlapping user")
    if len(source_personas.user_ids) == 0:
        raise ValueError("source persona table is empty")
    query = target_personas.user_vector(user_id)
    keys = source_personas.user_vecs
    weights, vector = scaled_dot_attention(query, keys, keys)
    return DoppelgangerState(user_id=user_id, weights=weights, vector=vector)


def _cosine_rows(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    nx = np.linalg.norm(x, axis=1)
    ny = np.linalg.norm(y, axis=1)
    if np.any(nx == 0.0) or np.any(ny == 0.0):
        raise ValueError("cosine similarity of zero-norm vector")
    return (x / nx[:, None]) @ (y / ny[:, None]).T


def infonce_sum(anchors: np.ndarray, positives: np.ndarray, tau: float) -> float:
    """Sum over anchors of -log softmax(sim(anchor_u, positive_u') / tau)[u].

    Row u of the similarity matrix pairs anchor u against every positive;
    the diagonal entry is the positive pair.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    if anchors.shape[0] < 2:
        raise ValueError("contrastive loss needs at least two anchors")
    logits = _cosine_rows(anchors, positives) / tau
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1)) + logits.max(axis=1)
    return float(np.sum(lse - np.diag(logits)))


def dpl_loss(
    batch: Sequence[str],
    target_personas: PersonaTable,
    doppelgangers: Mapping[str, DoppelgangerState],
    tau: float,
) -> float:
    """Contrastive alignment of each target persona with its own doppelganger
    against the doppelgangers of the other batch users (sum form)."""
    users = list(batch)
    if len(users) < 2:
        raise ValueError("doppelganger loss needs a batch of at least two users")
    anchors = np.stack([target_personas.user_vector(u) for u in users])
    positives = np.stack([doppelgangers[u].vector for u in users])
    return infonce_sum(anchors, positives, tau)


def direct_alignment_loss(
    batch: Sequence[str],
    mode: str,
    tau: float,
    target_personas: Mapping[str, np.ndarray] | None = None,
    source_personas: Mapping[str, np.ndarray] | None = None,
    target_ids: Mapping[str, np.ndarray] | None = None,
    source_ids: Mapping[str, np.ndarray] | None = None,
) -> float:
    """InfoNCE where the positive is the same user's source-domain
    representation (ID embedding, persona embedding, or their concatenation)."""
    users = list(batch)
    if len(users) < 2:
        raise ValueError("alignment loss needs a batch of at least two users")
    if mode == "direct_id":
        anchors = np.stack([target_ids[u] for u in users])
        positives = np.stack([source_ids[u] for u in users])
    elif mode == "direct_persona":
        anchors = np.stack([target_personas[u] for u in users])
        positives = np.stack([source_personas[u] for u in users])
    elif mode == "direct_both":
        anchors = np.stack(
            [np.concatenate([target_personas[u], target_ids[u]]) for u in users]
        )
        positives = np.stack(
            [np.concatenate([source_personas[u], source_ids[u]]) for u in users]
        )
    else:
        raise ValueError(f"unknown direct alignment mode '{mode}'")
    return infonce_sum(anchors, positives, tau)


def fuse_representations(h: np.ndarray, v: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Single-layer fusion of a semantic vector with an ID vector."""
    x = np.concatenate([h, v])
    if x.shape[0] != w.shape[0]:
        raise ValueError(f"fusion input {x.shape[0]} != weight rows {w.shape[0]}")
    return x @ w + b


def bpr_loss_from_scores(pos_scores: np.ndarray, neg_scores: np.ndarray) -> float:
    """Sum over triples of -log sigmoid(pos - neg)."""
    margin = np.asarray(pos_scores, dtype=np.float64) - np.asarray(neg_scores, dtype=np.float64)
    return float(np.sum(np.logaddexp(0.0, -margin)))


def bpr_loss(
    triples: Sequence[tuple[str, str, str]],
    user_z: Mapping[str, np.ndarray],
    item_z: Mapping[str, np.ndarray],
) -> float:
    """BPR loss over (user, positive item, negative item) triples."""
    pos = np.array([user_z[u] @ item_z[i] for u, i, _ in triples])
    neg = np.array([user_z[u] @ item_z[j] for u, _, j in triples])
    return bpr_loss_from_scores(pos, neg)


# ---------------------------------------------------------------------------
# trainable model
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    aggregation: str = "self_attn"
    transfer: str = "doppelganger"
    lambda_dpl: float = 1.4
    tau: float = 0.5
    batch_size: int = 1024
    negatives: int = 1
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    dropout: float = 0.1
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    eval_k: int = 5
    persona_out_dim: int | None = None  # defaults to the persona input dimension
    fused_dim: int = 128
    # Aggregator layers in both domains share this seeded init so the source
    # and target persona spaces start aligned; the doppelganger attention
    # dots target queries against source keys, which is only meaningful when
    # the two maps agree up to training drift.
    persona_space_seed: int = 777

    def __post_init__(self):
        if self.aggregation not in AGGREGATION_MODES:
            raise ValueError(f"unknown aggregation mode '{self.aggregation}'")
        if self.transfer not in TRANSFER_MODES:
            raise ValueError(f"unknown transfer mode '{self.transfer}'")
        if self.lambda_dpl < 0:
            raise ValueError("lambda must be nonnegative")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError("dropout must lie in [0, 1)")


@dataclass
class ModelInputs:
    """Frozen tensors the trainable model is built around."""

    user_ids: list[str]
    item_ids: list[str]
    persona_inputs: np.ndarray  # (U, 5, n) criterion embeddings
    item_semantics: np.ndarray  # (I, m)
    backbone_user: np.ndarray  # (U, d) pretrained ID embeddings
    backbone_item: np.ndarray  # (I, d)
    overlap_users: list[str] = field(default_factory=list)
    source_user_personas: np.ndarray | None = None  # (|U_o|, h), doppelganger keys
    source_user_backbone: np.ndarray | None = None  # (|U_o|, d), direct_id positives


class MultiTapModel:
    """Holds the parameter store and implements the joint objective."""

    def __init__(self, inputs: ModelInputs, config: TrainConfig):
        self.inputs = inputs
        self.config = config
        U, K, n = inputs.persona_inputs.shape
        if K != 5:
            raise ValueError(f"expected 5 criterion vectors per user, got {K}")
        self.n = n
        self.h_dim = config.persona_out_dim or n
        self.id_dim = inputs.backbone_user.shape[1]
        self.sem_dim = inputs.item_semantics.shape[1]
        self.dz = config.fused_dim
        self.rng = np.random.default_rng(config.seed)
        self.user_rows = {u: k for k, u in enumerate(inputs.user_ids)}
        self.item_rows = {i: k for k, i in enumerate(inputs.item_ids)}
        self.overlap_rows = np.array(
            [self.user_rows[u] for u in inputs.overlap_users], dtype=np.int64
        )
        self.overlap_index = {u: k for k, u in enumerate(inputs.overlap_users)}

        # Variance-preserving init. Criterion embeddings are unit-L2 rows
        # (coordinates ~1/sqrt(n)), so the first layer uses std 1 to bring
        # hidden coordinates to O(1); downstream layers scale by fan-in.
        # A flat tiny init leaves persona vectors with near-zero norms, which
        # collapses the scaled-dot doppelganger attention to uniform and
        # silences the contrastive term entirely.
        ffn_in = 5 * n if config.aggregation == "concat" else n
        ffn_std = 1.0 / np.sqrt(5.0) if config.aggregation == "concat" else 1.0
        agg_rng = np.random.default_rng(config.persona_space_seed)
        store = ParameterStore()
        if config.aggregation == "self_attn":
            store.add("agg.mask", init_normal(agg_rng, (n,), std=1.0))
        store.add("agg.ffn_w", init_normal(agg_rng, (ffn_in, n), std=ffn_std))
        store.add("agg.ffn_b", np.zeros(n))
        store.add("agg.proj_w", init_normal(agg_rng, (n, self.h_dim), std=1.0 / np.sqrt(n)))
        store.add("agg.proj_b", np.zeros(self.h_dim))
        store.add(
            "fuse.user_w",
            init_normal(self.rng, (self.h_dim + self.id_dim, self.dz),
                        std=0.5 / np.sqrt(self.h_dim + self.id_dim)),
        )
        store.add("fuse.user_b", np.zeros(self.dz))
        store.add(
            "fuse.item_w",
            init_normal(self.rng, (self.sem_dim + self.id_dim, self.dz),
                        std=0.5 / np.sqrt(self.sem_dim + self.id_dim)),
        )
        store.add("fuse.item_b", np.zeros(self.dz))
        store.add("id.user", inputs.backbone_user.copy())
        store.add("id.item", inputs.backbone_item.copy())
        self.store = store

        if config.transfer != "none" and config.lambda_dpl > 0:
            if not inputs.overlap_users:
                raise ValueError(
                    "transfer is enabled but there are no overlapping users"
                )
            if config.transfer != "direct_id":
                if inputs.source_user_personas is None:
                    raise ValueError("transfer needs source persona embeddings")
                if inputs.source_user_personas.shape[1] != self.h_dim:
                    raise ValueError(
                        "source persona dimension "
                        f"{inputs.source_user_personas.shape[1]} != target {self.h_dim}"
                    )
            if (
                config.transfer in ("direct_id", "direct_both")
                and inputs.source_user_backbone is None
            ):
                raise ValueError(f"{config.transfer} needs source ID embeddings")

    # -- forward/backward pieces ------------------------------------------

    def aggregator_params(self) -> AggregatorParams:
        p = self.store.params
        return AggregatorParams(
            mask=p.get("agg.mask"),
            ffn_w=p["agg.ffn_w"],
            ffn_b=p["agg.ffn_b"],
            proj_w=p["agg.proj_w"],
            proj_b=p["agg.proj_b"],
        )

    def _persona_forward(self, user_rows: np.ndarray, dropout_rng=None) -> dict:
        p = self.store.params
        E = self.inputs.persona_inputs[user_rows]  # (B, 5, n)
        mode = self.config.aggregation
        cache: dict = {"E": E, "rows": user_rows, "mode": mode}
        if mode == "self_attn":
            logits = E @ p["agg.mask"] / np.sqrt(self.n)  # (B, 5)
            A = softmax(logits, axis=1)
            pooled = np.einsum("bk,bkn->bn", A, E)
            cache["A"] = A
        elif mode == "mean":
            pooled = E.mean(axis=1)
        else:
            pooled = E.reshape(E.shape[0], -1)
        hid = np.tanh(pooled @ p["agg.ffn_w"] + p["agg.ffn_b"])
        drop_mask = None
        if dropout_rng is not None and self.config.dropout > 0.0:
            keep = 1.0 - self.config.dropout
            drop_mask = (dropout_rng.random(hid.shape) < keep) / keep
            hid_d = hid * drop_mask
        else:
            hid_d = hid
        h = hid_d @ p["agg.proj_w"] + p["agg.proj_b"]
        cache.update(pooled=pooled, hid=hid, hid_d=hid_d, drop_mask=drop_mask, h=h)
        return cache

    def _persona_backward(self, cache: dict, dh: np.ndarray) -> None:
        p, g = self.store.params, self.store.grads
        hid_d, hid, pooled, E = cache["hid_d"], cache["hid"], cache["pooled"], cache["E"]
        g["agg.proj_w"] += hid_d.T @ dh
        g["agg.proj_b"] += dh.sum(axis=0)
        dhid_d = dh @ p["agg.proj_w"].T
        dhid = dhid_d * cache["drop_mask"] if cache["drop_mask"] is not None else dhid_d
        dhid_pre = dhid * (1.0 - hid * hid)
        g["agg.ffn_w"] += pooled.T @ dhid_pre
        g["agg.ffn_b"] += dhid_pre.sum(axis=0)
        dpooled = dhid_pre @ p["agg.ffn_w"].T
        if cache["mode"] == "self_attn":
            A = cache["A"]
            dA = np.einsum("bn,bkn->bk", dpooled, E)
            dlogits = A * (dA - (dA * A).sum(axis=1, keepdims=True))
            g["agg.mask"] += np.einsum("bk,bkn->n", dlogits, E) / np.sqrt(self.n)
        # mean/concat pooling has no trainable parameters and E is frozen

    def _fuse_users(self, user_rows: np.ndarray, h: np.ndarray) -> dict:
        p = self.store.params
        v = p["id.user"][user_rows]
        x = np.concatenate([h, v], axis=1)
        z = x @ p["fuse.user_w"] + p["fuse.user_b"]
        return {"x": x, "z": z, "rows": user_rows}

    def _fuse_users_backward(self, cache: dict, dz: np.ndarray) -> np.ndarray:
        p, g = self.store.params, self.store.grads
        g["fuse.user_w"] += cache["x"].T @ dz
        g["fuse.user_b"] += dz.sum(axis=0)
        dx = dz @ p["fuse.user_w"].T
        dh = dx[:, : self.h_dim]
        np.add.at(g["id.user"], cache["rows"], dx[:, self.h_dim :])
        return dh

    def _fuse_items(self, item_rows: np.ndarray) -> dict:
        p = self.store.params
        sem = self.inputs.item_semantics[item_rows]
        v = p["id.item"][item_rows]
        x = np.concatenate([sem, v], axis=1)
        z = x @ p["fuse.item_w"] + p["fuse.item_b"]
        return {"x": x, "z": z, "rows": item_rows}

    def _fuse_items_backward(self, cache: dict, dz: np.ndarray) -> None:
        p, g = self.store.params, self.store.grads
        g["fuse.item_w"] += cache["x"].T @ dz
        g["fuse.item_b"] += dz.sum(axis=0)
        dx = dz @ p["fuse.item_w"].T
        np.add.at(g["id.item"], cache["rows"], dx[:, self.sem_dim :])

    def _transfer_term(
        self, anchors_local: np.ndarray, anchor_users: list[str], h: np.ndarray
    ) -> tuple[float, np.ndarray, dict]:
        """Mean InfoNCE over the batch anchors.

        Returns (loss, dL/dh for all batch users, id-gradient scatter info).
        The doppelganger path recomputes the attention inside the loss so the
        gradient flows through both the anchor and the query."""
        mode = self.config.transfer
        tau = self.config.tau
        M = anchors_local.shape[0]
        dh = np.zeros_like(h)
        id_grads: dict = {}
        p = self.store.params

        H_a = h[anchors_local]
        if mode == "doppelganger":
            S = self.inputs.source_user_personas
            att_logits = H_a @ S.T / np.sqrt(self.h_dim)
            W = softmax(att_logits, axis=1)
            Htil = W @ S
            X, Y = H_a, Htil
        elif mode == "direct_persona":
            X = H_a
            Y = self.inputs.source_user_personas[
                [self.overlap_index[u] for u in anchor_users]
            ]
        elif mode == "direct_id":
            rows = np.array([self.user_rows[u] for u in anchor_users])
            X = p["id.user"][rows]
            Y = self.inputs.source_user_backbone[
                [self.overlap_index[u] for u in anchor_users]
            ]
        else:  # direct_both
            rows = np.array([self.user_rows[u] for u in anchor_users])
            src_rows = [self.overlap_index[u] for u in anchor_users]
            X = np.concatenate([H_a, p["id.user"][rows]], axis=1)
            Y = np.concatenate(
                [
                    self.inputs.source_user_personas[src_rows],
                    self.inputs.source_user_backbone[src_rows],
                ],
                axis=1,
            )

        nx = np.linalg.norm(X, axis=1)
        ny = np.linalg.norm(Y, axis=1)
        if np.any(nx == 0.0) or np.any(ny == 0.0):
            raise DivergenceError("zero-norm representation in the contrastive term")
        Xn = X / nx[:, None]
        Yn = Y / ny[:, None]
        C = Xn @ Yn.T
        logits = C / tau
        shifted = logits - logits.max(axis=1, keepdims=True)
        P = np.exp(shifted)
        P /= P.sum(axis=1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=1)) + logits.max(axis=1)
        loss = float(np.mean(lse - np.diag(logits)))

        G = (P - np.eye(M)) / (tau * M)
        dXn = G @ Yn
        dYn = G.T @ Xn
        dX = (dXn - (dXn * Xn).sum(axis=1, keepdims=True) * Xn) / nx[:, None]
        dY = (dYn - (dYn * Yn).sum(axis=1, keepdims=True) * Yn) / ny[:, None]

        if mode == "doppelganger":
            dH_a = dX
            dW = dY @ S.T
            dlogits = W * (dW - (dW * W).sum(axis=1, keepdims=True))
            dH_a = dH_a + dlogits @ S / np.sqrt(self.h_dim)
            np.add.at(dh, anchors_local, dH_a)
        elif mode == "direct_persona":
            np.add.at(dh, anchors_local, dX)
        elif mode == "direct_id":
            rows = np.array([self.user_rows[u] for u in anchor_users])
            id_grads = {"rows": rows, "grad": dX}
        else:  # direct_both
            rows = np.array([self.user_rows[u] for u in anchor_users])
            np.add.at(dh, anchors_local, dX[:, : self.h_dim])
            id_grads = {"rows": rows, "grad": dX[:, self.h_dim :]}
        return loss, dh, id_grads

    def batch_loss_and_grads(
        self,
        users: np.ndarray,
        pos_items: np.ndarray,
        neg_items: np.ndarray,
        dropout_rng=None,
    ) -> tuple[float, float, float]:
        """Accumulate gradients of L_total = mean BPR + lambda * mean InfoNCE.

        `users`, `pos_items`, `neg_items` are row indices; returns
        (L_total, L_rec, L_dpl)."""
        cfg = self.config
        batch_users, user_inv = np.unique(users, return_inverse=True)
        batch_items, item_inv = np.unique(
            np.concatenate([pos_items, neg_items]), return_inverse=True
        )
        T = users.shape[0]
        pos_local = item_inv[:T]
        neg_local = item_inv[T:]

        pcache = self._persona_forward(batch_users, dropout_rng)
        ucache = self._fuse_users(batch_users, pcache["h"])
        icache = self._fuse_items(batch_items)
        zu, zi = ucache["z"], icache["z"]

        margin = np.einsum(
            "td,td->t", zu[user_inv], zi[pos_local] - zi[neg_local]
        )
        l_rec = float(np.mean(np.logaddexp(0.0, -margin)))

        dmargin = -sigmoid(-margin) / T
        dzu = np.zeros_like(zu)
        dzi = np.zeros_like(zi)
        np.add.at(dzu, user_inv, dmargin[:, None] * (zi[pos_local] - zi[neg_local]))
        np.add.at(dzi, pos_local, dmargin[:, None] * zu[user_inv])
        np.add.at(dzi, neg_local, -dmargin[:, None] * zu[user_inv])

        l_dpl = 0.0
        dh_extra = None
        id_grads: dict = {}
        if cfg.transfer != "none" and cfg.lambda_dpl > 0:
            anchor_mask = np.array(
                [self.inputs.user_ids[r] in self.overlap_index for r in batch_users]
            )
            anchors_local = np.nonzero(anchor_mask)[0]
            if anchors_local.size >= 2:
                anchor_users = [
                    self.inputs.user_ids[batch_users[k]] for k in anchors_local
                ]
                l_dpl, dh_extra, id_grads = self._transfer_term(
                    anchors_local, anchor_users, pcache["h"]
                )

        dh = self._fuse_users_backward(ucache, dzu)
        self._fuse_items_backward(icache, dzi)
        if dh_extra is not None:
            dh = dh + cfg.lambda_dpl * dh_extra
        if id_grads:
            np.add.at(
                self.store.grads["id.user"],
                id_grads["rows"],
                cfg.lambda_dpl * id_grads["grad"],
            )
        self._persona_backward(pcache, dh)

        total = l_rec + cfg.lambda_dpl * l_dpl
        if not np.isfinite(total):
            raise DivergenceError("non-finite training loss")
        return total, l_rec, l_dpl

    # -- evaluation-mode forward passes ------------------------------------

    def user_persona_vectors(self) -> np.ndarray:
        """(U, h) table of aggregated persona embeddings, no dropout."""
        rows = np.arange(len(self.inputs.user_ids))
        return self._persona_forward(rows, None)["h"]

    def score_matrix(self) -> np.ndarray:
        """(U, I) preference scores from the fused representations."""
        rows = np.arange(len(self.inputs.user_ids))
        h = self._persona_forward(rows, None)["h"]
        zu = self._fuse_users(rows, h)["z"]
        zi = self._fuse_items(np.arange(len(self.inputs.item_ids)))["z"]
        return zu @ zi.T


@dataclass
class TrainResult:
    model: MultiTapModel
    history: list[dict]
    best_epoch: int
    best_valid: dict


def train_target(
    inputs: ModelInputs,
    train_records: Sequence[InteractionRecord],
    valid_records: Sequence[InteractionRecord],
    config: TrainConfig,
) -> TrainResult:
    """Joint training on the target domain with early stopping on valid HR@K."""
    model = MultiTapModel(inputs, config)
    store = model.store
    adam = AdamConfig(
        learning_rate=config.learning_rate, weight_decay=config.weight_decay
    )
    rng = model.rng

    u_rows = model.user_rows
    i_rows = model.item_rows
    positives = np.array(
        [
            (u_rows[r.user_id], i_rows[r.item_id])
            for r in train_records
            if r.user_id in u_rows and r.item_id in i_rows
        ],
        dtype=np.int64,
    )
    if positives.size == 0:
        raise ValueError("no usable training interactions")
    n_items = len(inputs.item_ids)
    observed: list[set[int]] = [set() for _ in inputs.user_ids]
    for u, i in positives:
        observed[u].add(int(i))
    train_item_sets = {
        inputs.user_ids[u]: {inputs.item_ids[i] for i in rows}
        for u, rows in enumerate(observed)
    }

    def valid_metrics() -> dict:
        scores = model.score_matrix()

        def score_fn(user: str) -> np.ndarray:
            return scores[u_rows[user]]

        return full_ranking_eval(
            score_fn, inputs.item_ids, train_item_sets, valid_records, ks=[config.eval_k]
        )

    best_hr = -1.0
    best_epoch = -1
    best_params: dict | None = None
    best_metrics: dict = {}
    history: list[dict] = []

    for epoch in range(config.max_epochs):
        order = rng.permutation(positives.shape[0])
        users_all = np.repeat(positives[order, 0], config.negatives)
        pos_all = np.repeat(positives[order, 1], config.negatives)
        neg_all = np.empty_like(pos_all)
        for t in range(users_all.size):
            draw = int(rng.integers(0, n_items))
            seen = observed[users_all[t]]
            if len(seen) < n_items:
                while draw in seen:
                    draw = int(rng.integers(0, n_items))
            neg_all[t] = draw

        sum_rec = 0.0
        sum_dpl = 0.0
        n_batches = 0
        for start in range(0, users_all.size, config.batch_size):
            sl = slice(start, start + config.batch_size)
            _, l_rec, l_dpl = model.batch_loss_and_grads(
                users_all[sl], pos_all[sl], neg_all[sl], dropout_rng=rng
            )
            adam_step(store, adam)
            sum_rec += l_rec
            sum_dpl += l_dpl
            n_batches += 1

        metrics = valid_metrics()
        hr = metrics["HR"][config.eval_k]
        history.append(
            {
                "epoch": epoch,
                "l_rec": sum_rec / n_batches,
                "l_dpl": sum_dpl / n_batches,
                "valid_hr": hr,
                "valid_ndcg": metrics["NDCG"][config.eval_k],
            }
        )
        if hr > best_hr:
            best_hr = hr
            best_epoch = epoch
            best_params = store.copy_params()
            best_metrics = metrics
        elif epoch - best_epoch >= config.patience:
            logger.info("early stop at epoch %d (best %d)", epoch, best_epoch)
            break

    if best_params is not None:
        store.load_params(best_params)
    return TrainResult(
        model=model, history=history, best_epoch=best_epoch, best_valid=best_metrics
    )
