"""Experiment drivers: data builders, the round loop, and the probes.

Three entry points cover the shipped scenarios. ``run_simulation`` is
the standard pipeline (collect shares, warm start, federated rounds).
``run_late_join`` splits the class space so one client arrives late and
exercises the expansion/distillation/row-gate path. ``run_pulse_probe``
is the motivating diagnostic: plain federated averaging with a periodic
centralized fine-tune, which makes the aggregation damage visible as a
sawtooth in the accuracy series.

Every driver is a pure function of (config, data): all randomness comes
from the config's derived seed streams.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from .client import ClientState, extract_share, local_train_round, make_client
from .config import FedConfig
from .data import (
    EmbeddingDataset,
    PartitionPlan,
    collect_replay,
    gen_synthetic,
    partition_iid,
    partition_non_iid,
    stratified_split,
)
from .errors import (
    ConfigError,
    EvaluationError,
    LabelError,
    ProtocolError,
    RegistryError,
    ReplayFLError,
)
from .metrics import PulseEvent, RoundReport
from .server import (
    JoinReport,
    ServerState,
    aggregate_round,
    integrate_new_client,
    make_server,
    select_participants,
    warm_start,
)

_EVAL_CHUNK = 4096


# ---------------------------------------------------------------------------
# Scenario data
# ---------------------------------------------------------------------------

@dataclass
class DatasetSpec:
    """Shape of the synthetic embedding corpus behind a scenario."""

    n_classes: int = 30
    per_class: int = 100
    spread: float = 0.35
    holdout_frac: float = 0.2
    iid: bool = False
    n_families: int | None = None
    family_spread: float = 0.5

    def __post_init__(self) -> None:
        if self.n_classes < 2:
            raise ConfigError(
                f"n_classes must be >= 2, got {self.n_classes}")
        if self.per_class < 1:
            raise ConfigError(
                f"per_class must be >= 1, got {self.per_class}")
        if self.spread <= 0:
            raise ConfigError(f"spread must be > 0, got {self.spread}")
        if not 0.0 < self.holdout_frac < 1.0:
            raise ConfigError(
                f"holdout_frac must be in (0, 1), got {self.holdout_frac}")

    @classmethod
    def from_dict(cls, raw: dict) -> "DatasetSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(
                f"unknown dataset keys: {sorted(unknown)}")
        return cls(**raw)


@dataclass
class FederationData:
    """Partitioned training data plus the server-side evaluation split."""

    clients: list[EmbeddingDataset]
    val: EmbeddingDataset
    train: EmbeddingDataset                 # centralized union of client data
    registry: list[str]                     # class names the server starts with
    plan: PartitionPlan | None = None


def make_federation_data(cfg: FedConfig,
                         spec: DatasetSpec | None = None) -> FederationData:
    """Generate, split, and partition a synthetic corpus for ``cfg``."""
    spec = spec or DatasetSpec()
    full = gen_synthetic(spec.n_classes, spec.per_class, cfg.d_in,
                         spec.spread, cfg.seed_data,
                         n_families=spec.n_families,
                         family_spread=spec.family_spread)
    train, val = stratified_split(full, spec.holdout_frac, cfg.seed_data)
    if spec.iid:
        clients = partition_iid(train, cfg.n_clients, cfg.seed_data)
        plan = None
    else:
        plan = partition_non_iid(train, cfg.n_clients, cfg.seed_data)
        clients = plan.client_datasets
    return FederationData(clients=clients, val=val, train=train,
                          registry=list(full.class_names), plan=plan)


def make_late_join_data(cfg: FedConfig, spec: DatasetSpec,
                        n_new_classes: int,
                        ) -> tuple[FederationData, EmbeddingDataset]:
    """Split the class space: the last ``n_new_classes`` belong to a
    client that is absent from the initial federation.

    Returns (federation over the base classes, the late joiner's data).
    The validation split keeps all classes; drivers slice it as needed.
    """
    if not 0 < n_new_classes < spec.n_classes:
        raise ConfigError(
            f"n_new_classes must be in (0, {spec.n_classes}), "
            f"got {n_new_classes}")
    full = gen_synthetic(spec.n_classes, spec.per_class, cfg.d_in,
                         spec.spread, cfg.seed_data,
                         n_families=spec.n_families,
                         family_spread=spec.family_spread)
    train, val = stratified_split(full, spec.holdout_frac, cfg.seed_data)
    n_base = spec.n_classes - n_new_classes
    base_train = train.subset(np.flatnonzero(train.labels < n_base))
    joiner_data = train.subset(
        np.flatnonzero(train.labels >= n_base),
        provenance=f"{train.provenance} [late joiner]")
    plan = partition_non_iid(base_train, cfg.n_clients, cfg.seed_data)
    fed = FederationData(clients=plan.client_datasets, val=val,
                         train=base_train,
                         registry=list(full.class_names[:n_base]), plan=plan)
    return fed, joiner_data


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def _forward_chunked(params: nn.HeadParams,
                     vectors: np.ndarray) -> np.ndarray:
    parts = [
        nn.head_forward(params, vectors[s:s + _EVAL_CHUNK].astype(np.float64))[0]
        for s in range(0, vectors.shape[0], _EVAL_CHUNK)
    ]
    return np.vstack(parts)


def evaluate(params: nn.HeadParams,
             test_set: EmbeddingDataset) -> tuple[float, np.ndarray]:
    """Argmax accuracy plus the per-class accuracy vector.

    Ties go to the lowest class id; classes absent from the test set
    report 0.0. Labels outside the classifier's registry are an error.
    """
    if len(test_set) == 0:
        raise EvaluationError("cannot evaluate on an empty test set")
    labels = test_set.labels
    top = int(labels.max())
    if top >= params.n_classes:
        raise LabelError(
            f"test label {top} is outside the {params.n_classes}-class "
            f"registry")
    logits = _forward_chunked(params, test_set.vectors)
    preds = np.argmax(logits, axis=1)
    accuracy = float(np.mean(preds == labels))
    per_class = np.zeros(params.n_classes, dtype=np.float64)
    for c in range(params.n_classes):
        mask = labels == c
        if mask.any():
            per_class[c] = float(np.mean(preds[mask] == c))
    return accuracy, per_class


def mean_ce_loss(params: nn.HeadParams, dataset: EmbeddingDataset) -> float:
    """Mean cross-entropy of the model over a dataset (no training)."""
    if len(dataset) == 0:
        raise EvaluationError("cannot score an empty dataset")
    total = 0.0
    n = len(dataset)
    for s in range(0, n, _EVAL_CHUNK):
        xb = dataset.vectors[s:s + _EVAL_CHUNK].astype(np.float64)
        yb = dataset.labels[s:s + _EVAL_CHUNK]
        logits, _ = nn.head_forward(params, xb)
        loss, _ = nn.cross_entropy(logits, yb)
        total += loss * yb.size
    return total / n


# ---------------------------------------------------------------------------
# Round loop
# ---------------------------------------------------------------------------

def _with_round_context(exc: ReplayFLError, round_index: int) -> ReplayFLError:
    try:
        return type(exc)(f"round {round_index}: {exc}")
    except TypeError:
        return ProtocolError(f"round {round_index}: {exc}")


def _federated_round(server: ServerState, clients: Sequence[ClientState],
                     cfg: FedConfig, round_index: int,
                     eval_set: EmbeddingDataset) -> RoundReport:
    """One communication round: select, sync, train, aggregate, evaluate."""
    started = time.perf_counter()
    chosen = sorted(select_participants(len(clients), cfg.participant_rate,
                                        round_index, cfg.seed_select))
    p_count = nn.param_count(server.global_params)
    transfer = len(chosen) * p_count * 8
    updates = []
    losses = []
    for cid in chosen:
        result = local_train_round(clients[cid], server.global_params, cfg,
                                   pool=server.pool)
        updates.append((cid, result.params, result.n_samples))
        losses.append(result.mean_loss)
    aggregate_round(server, updates, cfg)
    accuracy, per_class = evaluate(server.global_params, eval_set)
    return RoundReport(
        round_index=round_index,
        participants=chosen,
        accuracy=accuracy,
        per_class=per_class,
        loss=float(np.mean(losses)),
        bytes_up=transfer,
        bytes_down=transfer,
        wall_time=time.perf_counter() - started,
    )


def _initial_report(server: ServerState, eval_set: EmbeddingDataset,
                    train_loss: float) -> RoundReport:
    accuracy, per_class = evaluate(server.global_params, eval_set)
    return RoundReport(round_index=0, participants=[], accuracy=accuracy,
                       per_class=per_class, loss=train_loss,
                       bytes_up=0, bytes_down=0)


def _make_clients(cfg: FedConfig,
                  fed: FederationData) -> list[ClientState]:
    if len(fed.clients) != cfg.n_clients:
        raise ConfigError(
            f"config expects {cfg.n_clients} clients but the federation "
            f"data provides {len(fed.clients)}")
    return [make_client(i, ds, cfg) for i, ds in enumerate(fed.clients)]


# ---------------------------------------------------------------------------
# Standard pipeline
# ---------------------------------------------------------------------------

@dataclass
class SimulationResult:
    """Everything a driver run produced.

    ``reports`` has one entry per federated round; the warm-start row
    (round 0) is kept separate so a zero-round run has an empty series.
    """

    warm_report: RoundReport
    reports: list[RoundReport]
    final_params: nn.HeadParams
    server: ServerState
    class_names: list[str]
    pulses: list[PulseEvent] = field(default_factory=list)
    join: dict | None = None
    join_report: JoinReport | None = None

    @property
    def all_reports(self) -> list[RoundReport]:
        return [self.warm_report] + self.reports

    @property
    def final_accuracy(self) -> float:
        return self.all_reports[-1].accuracy


def run_simulation(cfg: FedConfig, fed: FederationData) -> SimulationResult:
    """Collect shares, warm start, then run the configured rounds.

    The share collection and warm start always run; ``replay_enabled``
    and ``replay_ratio`` only control whether clients mix pool batches
    into their local steps. That keeps a replay-ratio-zero run on the
    exact code path of a replay-disabled one.
    """
    server = make_server(cfg, fed.registry)
    clients = _make_clients(cfg, fed)
    server.pool = collect_replay([c.local_data for c in clients],
                                 cfg.share_rate, cfg.seed_data)
    warm_start(server, cfg.warm_epochs, cfg)
    warm_loss = mean_ce_loss(server.global_params,
                             EmbeddingDataset(
                                 class_names=list(fed.registry),
                                 labels=server.pool.labels,
                                 vectors=server.pool.vectors,
                                 provenance="replay pool"))
    warm_report = _initial_report(server, fed.val, warm_loss)
    reports: list[RoundReport] = []
    for r in range(1, cfg.rounds + 1):
        try:
            reports.append(_federated_round(server, clients, cfg, r, fed.val))
        except ReplayFLError as exc:
            raise _with_round_context(exc, r) from exc
    return SimulationResult(
        warm_report=warm_report,
        reports=reports,
        final_params=server.global_params,
        server=server,
        class_names=list(server.class_registry),
    )


# ---------------------------------------------------------------------------
# Late-join pipeline
# ---------------------------------------------------------------------------

def run_late_join(cfg: FedConfig, fed: FederationData, join_round: int,
                  new_client_data: EmbeddingDataset) -> SimulationResult:
    """Run the base federation, integrate a late client, and continue.

    Rounds up to ``join_round`` are evaluated on the validation slice of
    the base classes (the model has no rows for the rest yet); later
    rounds use the full validation set, so the series shows the join-time
    drop and the recovery.
    """
    if not 0 <= join_round < cfg.rounds:
        raise ConfigError(
            f"join_round must be in [0, rounds), got {join_round} "
            f"with rounds={cfg.rounds}")
    if len(new_client_data) == 0:
        raise ProtocolError("late joiner has no data to bring")

    n_base = len(fed.registry)
    base_rows = np.flatnonzero(fed.val.labels < n_base)
    if base_rows.size == 0:
        raise EvaluationError(
            "validation set has no records for the base classes")
    base_val = fed.val.subset(base_rows)

    server = make_server(cfg, fed.registry)
    clients = _make_clients(cfg, fed)
    server.pool = collect_replay([c.local_data for c in clients],
                                 cfg.share_rate, cfg.seed_data)
    warm_start(server, cfg.warm_epochs, cfg)
    warm_loss = mean_ce_loss(server.global_params,
                             EmbeddingDataset(
                                 class_names=list(fed.registry),
                                 labels=server.pool.labels,
                                 vectors=server.pool.vectors,
                                 provenance="replay pool"))
    warm_report = _initial_report(server, base_val, warm_loss)

    reports: list[RoundReport] = []
    for r in range(1, join_round + 1):
        try:
            reports.append(_federated_round(server, clients, cfg, r,
                                            base_val))
        except ReplayFLError as exc:
            raise _with_round_context(exc, r) from exc

    pre_join = reports[-1].accuracy if reports else warm_report.accuracy
    pre_join_peak = max(r.accuracy for r in [warm_report] + reports)

    joiner = make_client(len(clients), new_client_data, cfg)
    share = extract_share(joiner, cfg.share_rate, cfg.seed_data)
    join_info = integrate_new_client(server, share, joiner.client_id, cfg)
    old_after, _ = evaluate(server.global_params, base_val)
    clients.append(joiner)

    for r in range(join_round + 1, cfg.rounds + 1):
        try:
            reports.append(_federated_round(server, clients, cfg, r,
                                            fed.val))
        except ReplayFLError as exc:
            raise _with_round_context(exc, r) from exc

    return SimulationResult(
        warm_report=warm_report,
        reports=reports,
        final_params=server.global_params,
        server=server,
        class_names=list(server.class_registry),
        join={
            "join_round": join_round,
            "new_client_id": joiner.client_id,
            "new_class_ids": join_info.new_class_ids,
            "new_class_names": join_info.new_class_names,
            "shared_records": join_info.shared_records,
            "gate_installed": join_info.gate_installed,
            "old_class_acc_before_kd": pre_join,
            "old_class_acc_after_kd": old_after,
            "pre_join_peak": pre_join_peak,
        },
        join_report=join_info,
    )


# ---------------------------------------------------------------------------
# Pulse probe
# ---------------------------------------------------------------------------

def _centralized_finetune(server: ServerState, train_set: EmbeddingDataset,
                          cfg: FedConfig, epochs: int, stage: int) -> None:
    """Server-side supervised pass over the full training corpus."""
    rng = cfg.server_train_rng(stage)
    params = nn.clone(server.global_params)
    opt = nn.init_adamw_state(params, lr=cfg.lr,
                              weight_decay=cfg.weight_decay)
    x_all = train_set.vectors
    y_all = train_set.labels
    n = len(train_set)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb = x_all[idx].astype(np.float64)
            logits, _, cache = nn.head_forward_cached(params, xb)
            _, dlogits = nn.cross_entropy(logits, y_all[idx])
            grads = nn.head_backward(params, xb, dlogits, cache)
            params, opt = nn.adamw_step(params, grads, opt)
    server.global_params = params


def run_pulse_probe(cfg: FedConfig, fed: FederationData, finetune_every: int,
                    finetune_epochs: int = 1) -> SimulationResult:
    """Plain federated averaging with a periodic centralized fine-tune.

    No replay pool and no warm start: this reproduces the baseline whose
    failure motivates replay. After every ``finetune_every``-th round the
    server fine-tunes the global model on the centralized training data;
    the report for such a round records the post-fine-tune accuracy, and
    the before/after pair is kept in the pulse list.
    """
    if cfg.replay_ratio != 0.0:
        raise ConfigError(
            f"the pulse probe runs plain federated averaging; set "
            f"replay_ratio to 0 (got {cfg.replay_ratio})")
    if finetune_every < 1:
        raise ConfigError(
            f"finetune_every must be >= 1, got {finetune_every}")
    if finetune_epochs < 1:
        raise ConfigError(
            f"finetune_epochs must be >= 1, got {finetune_epochs}")

    server = make_server(cfg, fed.registry)
    clients = _make_clients(cfg, fed)
    initial = _initial_report(server, fed.val,
                              mean_ce_loss(server.global_params, fed.train))

    reports: list[RoundReport] = []
    pulses: list[PulseEvent] = []
    for r in range(1, cfg.rounds + 1):
        try:
            report = _federated_round(server, clients, cfg, r, fed.val)
            if r % finetune_every == 0:
                before = report.accuracy
                _centralized_finetune(server, fed.train, cfg,
                                      finetune_epochs, stage=r)
                after, per_class = evaluate(server.global_params, fed.val)
                pulses.append(PulseEvent(round_index=r, acc_before=before,
                                         acc_after=after))
                report = replace(report, accuracy=after,
                                 per_class=per_class)
            reports.append(report)
        except ReplayFLError as exc:
            raise _with_round_context(exc, r) from exc

    return SimulationResult(
        warm_report=initial,
        reports=reports,
        final_params=server.global_params,
        server=server,
        class_names=list(server.class_registry),
        pulses=pulses,
    )


# ---------------------------------------------------------------------------
# Parameter snapshots
# ---------------------------------------------------------------------------

def save_params(params: nn.HeadParams, class_names: Sequence[str],
                path: str | Path) -> None:
    """Write the parameter tree plus its class registry as an .npz."""
    if len(class_names) != params.n_classes:
        raise RegistryError(
            f"registry lists {len(class_names)} classes but the classifier "
            f"has {params.n_classes} rows")
    arrays = dict(nn.named_arrays(params))
    np.savez(path, class_names=np.asarray(list(class_names)), **arrays)


def load_params(path: str | Path) -> tuple[nn.HeadParams, list[str]]:
    """Rebuild a parameter tree written by ``save_params``."""
    with np.load(path) as z:
        names = [str(s) for s in z["class_names"]]
        n_layers = len({k.split(".")[1] for k in z.files
                        if k.startswith("layers.")})
        layers = [
            nn.EncoderLayerParams(
                **{f: z[f"layers.{i}.{f}"] for f in nn._LAYER_FIELDS})
            for i in range(n_layers)
        ]
        params = nn.HeadParams(proj_w=z["proj_w"], proj_b=z["proj_b"],
                               layers=layers, cls_w=z["cls_w"],
                               cls_b=z["cls_b"])
    if len(names) != params.n_classes:
        raise RegistryError(
            f"snapshot registry lists {len(names)} classes but the "
            f"classifier has {params.n_classes} rows")
    return params, names
