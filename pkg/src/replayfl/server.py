"""Server side: warm start, selection, aggregation, late-join integration.

The server owns the global head, the replay pool, and the class-name
registry. A late joiner is folded in without retraining the federation:
its new classes get classifier rows seeded from encoding prototypes, a
short head-only distillation pass stabilizes old-class behavior, and a
temporary row gate keeps clients that never saw the new classes from
dragging the fresh rows back toward noise during aggregation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import nn
from .config import FedConfig
from .data import EmbeddingDataset, ReplayPool, merge_replay
from .errors import (
    AggregationError,
    ConfigError,
    DegenerateEncodingError,
    ProtocolError,
    RegistryError,
)


@dataclass
class RowGate:
    """Restricts aggregation of some classifier rows to their owners."""

    gated_rows: set[int]
    owners: set[int]
    rounds_remaining: int

    def __post_init__(self) -> None:
        if not self.gated_rows:
            raise ConfigError("a row gate needs at least one gated row")
        if not self.owners:
            raise ConfigError("a row gate needs at least one owner client")
        if self.rounds_remaining < 1:
            raise ConfigError(
                f"rounds_remaining must start >= 1, got {self.rounds_remaining}")


@dataclass
class ServerState:
    """Everything the coordinator owns between rounds."""

    global_params: nn.HeadParams
    class_registry: list[str]
    pool: ReplayPool | None = None
    round: int = 0
    gate: RowGate | None = None

    def __post_init__(self) -> None:
        if len(self.class_registry) != self.global_params.n_classes:
            raise RegistryError(
                f"registry lists {len(self.class_registry)} classes but the "
                f"classifier has {self.global_params.n_classes} rows"
            )


def make_server(cfg: FedConfig, class_names: Sequence[str]) -> ServerState:
    params = nn.init_head_params(cfg.d_in, cfg.d_model, cfg.d_ff,
                                 cfg.n_layers, len(class_names),
                                 cfg.init_rng())
    return ServerState(global_params=params, class_registry=list(class_names))


# ---------------------------------------------------------------------------
# Warm start
# ---------------------------------------------------------------------------

def warm_start(state: ServerState, warm_epochs: int,
               cfg: FedConfig) -> nn.HeadParams:
    """Supervised epochs on the replay pool before any federation round."""
    if warm_epochs == 0:
        return state.global_params
    if state.pool is None or len(state.pool) == 0:
        raise ProtocolError("warm start requires a populated replay pool")
    rng = cfg.server_train_rng(0)
    params = nn.clone(state.global_params)
    opt = nn.init_adamw_state(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    x_all = state.pool.vectors
    y_all = state.pool.labels
    n = len(state.pool)
    for _ in range(warm_epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb = x_all[idx].astype(np.float64)
            logits, _, cache = nn.head_forward_cached(params, xb)
            _, dlogits = nn.cross_entropy(logits, y_all[idx])
            grads = nn.head_backward(params, xb, dlogits, cache)
            params, opt = nn.adamw_step(params, grads, opt)
    state.global_params = params
    return params


# ---------------------------------------------------------------------------
# Selection and aggregation
# ---------------------------------------------------------------------------

def select_participants(n_clients: int, rate: float, round_index: int,
                        seed: int) -> set[int]:
    """Uniform sample of max(1, round(rate * n)) clients for this round."""
    if not 0.0 < rate <= 1.0:
        raise ConfigError(f"participant rate must be in (0, 1], got {rate}")
    k = max(1, round(rate * n_clients))
    k = min(k, n_clients)
    rng = np.random.default_rng([seed, round_index])
    chosen = rng.choice(n_clients, size=k, replace=False)
    return {int(c) for c in chosen}


def _check_congruent(reference: nn.HeadParams, update: nn.HeadParams,
                     who: str) -> None:
    if not nn.congruent(reference, update):
        raise AggregationError(
            f"update from {who} is not shape-congruent with the others")


def fedavg(updates: Sequence[nn.HeadParams],
           weights: Sequence[float] | None = None) -> nn.HeadParams:
    """Element-wise mean of updates; optionally weighted by sample counts.

    The unweighted mean is the protocol default; weights are a config
    variant. Updates are consumed in list order, so callers keep bitwise
    determinism by sorting on client id first.
    """
    if len(updates) == 0:
        raise ProtocolError("cannot aggregate an empty update list")
    for i, u in enumerate(updates[1:], start=1):
        _check_congruent(updates[0], u, f"update {i}")
    if weights is None:
        w = np.full(len(updates), 1.0 / len(updates))
    else:
        if len(weights) != len(updates):
            raise AggregationError(
                f"{len(weights)} weights for {len(updates)} updates")
        total = float(sum(weights))
        if total <= 0:
            raise AggregationError("aggregation weights sum to zero")
        w = np.asarray(weights, dtype=np.float64) / total

    def mean(*arrays: np.ndarray) -> np.ndarray:
        acc = w[0] * arrays[0]
        for wi, a in zip(w[1:], arrays[1:]):
            acc = acc + wi * a
        return acc

    return nn.map_arrays(mean, *updates)


def row_gated_fedavg(updates: Sequence[tuple[int, nn.HeadParams]],
                     gate: RowGate,
                     current: nn.HeadParams) -> nn.HeadParams:
    """FedAvg with the gated classifier rows averaged over owners only.

    Non-owner values for a gated row are discarded entirely; when no
    owner participated this round the gated rows carry over from
    ``current``. Decrements the gate's countdown.
    """
    ordered = sorted(updates, key=lambda pair: pair[0])
    params_list = [p for _, p in ordered]
    merged = fedavg(params_list)

    owner_params = [p for cid, p in ordered if cid in gate.owners]
    rows = sorted(gate.gated_rows)
    if owner_params:
        stack_w = np.stack([p.cls_w[rows] for p in owner_params])
        stack_b = np.stack([p.cls_b[rows] for p in owner_params])
        merged.cls_w[rows] = stack_w.mean(axis=0)
        merged.cls_b[rows] = stack_b.mean(axis=0)
    else:
        merged.cls_w[rows] = current.cls_w[rows]
        merged.cls_b[rows] = current.cls_b[rows]
    gate.rounds_remaining -= 1
    return merged


def aggregate_round(state: ServerState,
                    updates: Sequence[tuple[int, nn.HeadParams, int]],
                    cfg: FedConfig) -> nn.HeadParams:
    """Fold one round of client updates into the global model.

    ``updates`` carries (client_id, params, sample_count). Dispatches to
    the row-gated path while a gate is active and retires the gate when
    its countdown ends.
    """
    if len(updates) == 0:
        raise ProtocolError("no client updates to aggregate")
    ordered = sorted(updates, key=lambda item: item[0])
    for cid, params, _ in ordered:
        _check_congruent(state.global_params, params, f"client {cid}")
    if state.gate is not None:
        merged = row_gated_fedavg([(cid, p) for cid, p, _ in ordered],
                                  state.gate, state.global_params)
        if state.gate.rounds_remaining <= 0:
            state.gate = None
    elif cfg.size_weighted:
        merged = fedavg([p for _, p, _ in ordered],
                        weights=[n for _, _, n in ordered])
    else:
        merged = fedavg([p for _, p, _ in ordered])
    state.global_params = merged
    state.round += 1
    return merged


# ---------------------------------------------------------------------------
# Late-join integration
# ---------------------------------------------------------------------------

def compute_prototypes(new_pool: EmbeddingDataset,
                       params: nn.HeadParams) -> dict[int, np.ndarray]:
    """Per-class mean of L2-normalized encoder outputs (pre-classifier)."""
    if len(new_pool) == 0:
        raise ProtocolError("cannot compute prototypes from an empty pool")
    _, encoded = nn.head_forward(params,
                                 new_pool.vectors.astype(np.float64))
    norms = np.linalg.norm(encoded, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise DegenerateEncodingError(
            f"sample {int(zero[0])} encodes to the zero vector")
    unit = encoded / norms[:, None]
    return {
        int(c): unit[new_pool.labels == c].mean(axis=0)
        for c in new_pool.classes_present()
    }


def expand_classifier(params: nn.HeadParams,
                      prototypes: dict[int, np.ndarray]) -> nn.HeadParams:
    """Append one classifier row per new class: weights = prototype, bias 0.

    Existing tensors are carried over bitwise; only cls_w/cls_b grow.
    New class ids must continue the registry contiguously.
    """
    if not prototypes:
        return params
    c_old = params.n_classes
    ids = sorted(prototypes)
    if ids[0] < c_old:
        raise RegistryError(
            f"class {ids[0]} is already registered (have {c_old} classes)")
    if ids != list(range(c_old, c_old + len(ids))):
        raise RegistryError(
            f"new class ids {ids} do not extend the registry contiguously "
            f"from {c_old}")
    new_rows = np.stack([np.asarray(prototypes[c], dtype=np.float64)
                         for c in ids])
    expanded = nn.clone(params)
    expanded.cls_w = np.vstack([params.cls_w, new_rows])
    expanded.cls_b = np.concatenate([params.cls_b, np.zeros(len(ids))])
    return expanded


def kd_finetune_head(params: nn.HeadParams, teacher: nn.HeadParams,
                     new_pool: EmbeddingDataset, old_pool: ReplayPool,
                     cfg: FedConfig) -> nn.HeadParams:
    """Head-only fine-tune after expansion: CE on new classes plus
    weighted distillation toward the teacher on old-class pool features.

    Only cls_w/cls_b move; every other tensor is returned bitwise
    unchanged. The pools are tiny, so each epoch is one full-batch step.
    """
    if teacher.n_classes >= params.n_classes:
        raise ProtocolError(
            f"teacher has {teacher.n_classes} classes, student must have "
            f"more (got {params.n_classes})")
    if teacher.d_model != params.d_model:
        raise ProtocolError("teacher and student encoder widths differ")
    c_old = teacher.n_classes
    if cfg.kd_epochs == 0:
        return params

    # the encoder is frozen here, so embeddings can be computed once
    _, enc_new = nn.head_forward(params, new_pool.vectors.astype(np.float64))
    y_new = new_pool.labels
    _, enc_old = nn.head_forward(params, old_pool.vectors.astype(np.float64))
    teacher_logits, _ = nn.head_forward(teacher,
                                        old_pool.vectors.astype(np.float64))

    cls_w = params.cls_w.copy()
    cls_b = params.cls_b.copy()
    m_w = np.zeros_like(cls_w); v_w = np.zeros_like(cls_w)
    m_b = np.zeros_like(cls_b); v_b = np.zeros_like(cls_b)
    b1, b2, eps = 0.9, 0.999, 1e-8

    for step in range(1, cfg.kd_epochs + 1):
        logits_new = enc_new @ cls_w.T + cls_b
        _, d_new = nn.cross_entropy(logits_new, y_new)
        logits_old = enc_old @ cls_w[:c_old].T + cls_b[:c_old]
        _, d_old = nn.kd_kl(teacher_logits, logits_old, cfg.kd_temperature)

        g_w = d_new.T @ enc_new
        g_b = d_new.sum(axis=0)
        g_w[:c_old] += cfg.kd_weight * (d_old.T @ enc_old)
        g_b[:c_old] += cfg.kd_weight * d_old.sum(axis=0)

        c1 = 1.0 - b1 ** step
        c2 = 1.0 - b2 ** step
        for p, g, m, v in ((cls_w, g_w, m_w, v_w), (cls_b, g_b, m_b, v_b)):
            m *= b1; m += (1 - b1) * g
            v *= b2; v += (1 - b2) * g * g
            p -= cfg.lr * ((m / c1) / (np.sqrt(v / c2) + eps)
                           + cfg.weight_decay * p)

    tuned = nn.clone(params)
    tuned.cls_w = cls_w
    tuned.cls_b = cls_b
    return tuned


@dataclass
class JoinReport:
    """What integrate_new_client did: ids and names of the added classes."""

    new_class_ids: list[int]
    new_class_names: list[str]
    shared_records: int
    gate_installed: bool


def integrate_new_client(state: ServerState, share: EmbeddingDataset,
                         new_client_id: int, cfg: FedConfig) -> JoinReport:
    """Fold a late joiner's shared features into the federation.

    Steps: remap the share's labels onto the server registry (appending
    genuinely new class names), compute prototypes for the new classes,
    expand the classifier, run the head-only distillation pass, merge the
    share into the replay pool, and install a row gate owned by the
    joiner. A share with no new classes only merges into the pool.
    """
    if len(share) == 0:
        raise ProtocolError("late joiner shared an empty dataset")
    if state.pool is None or len(state.pool) == 0:
        raise ProtocolError("cannot integrate a client before the pool exists")

    # remap the share's local label space onto the server registry by
    # class name; unseen names get fresh contiguous global ids
    name_to_id = {name: i for i, name in enumerate(state.class_registry)}
    remap: dict[int, int] = {}
    new_names: list[str] = []
    next_id = len(state.class_registry)
    for local_id in share.classes_present():
        name = share.class_names[local_id]
        if name in name_to_id:
            remap[local_id] = name_to_id[name]
        else:
            remap[local_id] = next_id
            new_names.append(name)
            next_id += 1

    relabeled = np.array([remap[int(l)] for l in share.labels])
    new_ids = list(range(len(state.class_registry), next_id))
    gate_installed = False

    if new_ids:
        rows = np.flatnonzero(np.isin(relabeled, new_ids))
        registry_after = state.class_registry + new_names
        new_class_data = EmbeddingDataset(
            class_names=registry_after,
            labels=relabeled[rows],
            vectors=share.vectors[rows].copy(),
            provenance=f"{share.provenance} [join]",
        )
        teacher = state.global_params
        prototypes = compute_prototypes(new_class_data, teacher)
        expanded = expand_classifier(teacher, prototypes)
        tuned = kd_finetune_head(expanded, teacher, new_class_data,
                                 state.pool, cfg)
        state.global_params = tuned
        state.class_registry = registry_after
        if cfg.gate_rounds > 0:
            state.gate = RowGate(gated_rows=set(new_ids),
                                 owners={new_client_id},
                                 rounds_remaining=cfg.gate_rounds)
            gate_installed = True

    state.pool = merge_replay(state.pool, relabeled, share.vectors)
    return JoinReport(
        new_class_ids=new_ids,
        new_class_names=list(new_names),
        shared_records=len(share),
        gate_installed=gate_installed,
    )
