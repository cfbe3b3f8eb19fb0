"""Client-side training: private batches mixed with replay batches.

Each selected client copies the incoming global parameters, then runs
its local epochs. Every private batch is paired with a same-sized replay
batch drawn from classes the client does not hold, and the two
cross-entropy losses are blended by the replay ratio before a single
optimizer step. A ratio of zero takes a code path that never touches
the pool, so such runs are bit-identical to replay-free ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .config import FedConfig
from .data import (
    EmbeddingDataset,
    ReplayPool,
    sample_replay_batch,
    stratified_take,
)
from .errors import ClientDataError, ConfigError

CapturedStep = tuple[np.ndarray, np.ndarray, np.ndarray | None, np.ndarray | None]


@dataclass
class ClientState:
    """One participant: private data plus persistent training state."""

    client_id: int
    local_data: EmbeddingDataset
    rng: np.random.Generator
    local_classes: set[int] = field(init=False)
    params: nn.HeadParams | None = None
    opt_state: nn.AdamWState | None = None

    def __post_init__(self) -> None:
        self.local_classes = set(self.local_data.classes_present())


@dataclass
class LocalTrainResult:
    """Outcome of one client round."""

    params: nn.HeadParams
    step_losses: list[float]
    local_losses: list[float]
    replay_losses: list[float]
    n_samples: int
    captured: list[CapturedStep] | None = None

    @property
    def mean_loss(self) -> float:
        return float(np.mean(self.step_losses)) if self.step_losses else 0.0


def make_client(client_id: int, local_data: EmbeddingDataset,
                cfg: FedConfig) -> ClientState:
    if len(local_data) == 0:
        raise ClientDataError(f"client {client_id} has an empty local dataset")
    return ClientState(client_id=client_id, local_data=local_data,
                       rng=cfg.client_rng(client_id))


def _grow_optimizer(state: nn.AdamWState,
                    params: nn.HeadParams) -> nn.AdamWState:
    """Zero-pad classifier-row moments after the global model gained classes."""
    have = state.m.cls_w.shape[0]
    want = params.cls_w.shape[0]
    if have == want:
        return state

    def pad(tree: nn.HeadParams) -> nn.HeadParams:
        grown = nn.clone(tree)
        extra = want - have
        grown.cls_w = np.vstack(
            [tree.cls_w, np.zeros((extra, tree.cls_w.shape[1]))])
        grown.cls_b = np.concatenate([tree.cls_b, np.zeros(extra)])
        return grown

    return replace(state, m=pad(state.m), v=pad(state.v))


def local_train_round(state: ClientState, global_params: nn.HeadParams,
                      cfg: FedConfig, pool: ReplayPool | None = None,
                      capture_batches: bool = False) -> LocalTrainResult:
    """Run the client's local epochs starting from the broadcast model.

    Mutates ``state`` (params, optimizer, rng stream) and returns the
    trained parameters together with the per-step loss record.
    """
    if not 0.0 <= cfg.replay_ratio <= 1.0:
        raise ConfigError(
            f"replay_ratio must be in [0, 1], got {cfg.replay_ratio}")
    if len(state.local_data) == 0:
        raise ClientDataError(f"client {state.client_id} has no local data")

    lam = cfg.replay_ratio
    use_replay = cfg.replay_enabled and lam > 0.0 and pool is not None

    params = nn.clone(global_params)
    if cfg.persist_optimizer and state.opt_state is not None:
        opt = _grow_optimizer(state.opt_state, params)
    else:
        opt = nn.init_adamw_state(params, lr=cfg.lr,
                                  weight_decay=cfg.weight_decay)

    missing: set[int] = set()
    if use_replay:
        missing = set(pool.classes()) - state.local_classes

    x_all = state.local_data.vectors
    y_all = state.local_data.labels
    n = len(state.local_data)

    step_losses: list[float] = []
    local_losses: list[float] = []
    replay_losses: list[float] = []
    captured: list[CapturedStep] = []

    for _ in range(cfg.local_epochs):
        order = state.rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb = x_all[idx].astype(np.float64)
            yb = y_all[idx]

            logits, _, cache = nn.head_forward_cached(params, xb)
            loss_local, dlogits = nn.cross_entropy(logits, yb)

            if use_replay:
                rx, ry = sample_replay_batch(pool, idx.size, missing, state.rng)
                rxf = rx.astype(np.float64)
                r_logits, _, r_cache = nn.head_forward_cached(params, rxf)
                loss_replay, r_dlogits = nn.cross_entropy(r_logits, ry)
                total = (1.0 - lam) * loss_local + lam * loss_replay
                g_local = nn.head_backward(params, xb, (1.0 - lam) * dlogits,
                                           cache)
                g_replay = nn.head_backward(params, rxf, lam * r_dlogits,
                                            r_cache)
                grads = nn.map_arrays(np.add, g_local, g_replay)
                replay_losses.append(float(loss_replay))
                if capture_batches:
                    captured.append((xb, yb.copy(), rxf, ry.copy()))
            else:
                total = loss_local
                grads = nn.head_backward(params, xb, dlogits, cache)
                if capture_batches:
                    captured.append((xb, yb.copy(), None, None))

            params, opt = nn.adamw_step(params, grads, opt)
            step_losses.append(float(total))
            local_losses.append(float(loss_local))

    state.params = params
    state.opt_state = opt
    return LocalTrainResult(
        params=params,
        step_losses=step_losses,
        local_losses=local_losses,
        replay_losses=replay_losses,
        n_samples=n,
        captured=captured if capture_batches else None,
    )


def extract_share(state: ClientState, share_rate: float,
                  seed: int) -> EmbeddingDataset:
    """The client's replay contribution: a stratified slice of its data.

    Records are value-equal copies of the originals; nothing is
    transformed on the way out.
    """
    if not 0.0 < share_rate <= 1.0:
        raise ConfigError(f"share_rate must be in (0, 1], got {share_rate}")
    ds = state.local_data
    if len(ds) == 0:
        raise ClientDataError(f"client {state.client_id} has no data to share")
    count = max(math.ceil(share_rate * len(ds)), len(ds.classes_present()))
    count = min(count, len(ds))
    rng = np.random.default_rng(
        np.random.SeedSequence([seed, 0x54A2E, state.client_id]))
    idx = stratified_take(ds, count, rng)
    return ds.subset(idx, provenance=f"{ds.provenance} [share]")
