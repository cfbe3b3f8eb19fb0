"""Experiment configuration: one flat record, JSON on disk.

Seed handling: ``seed`` is the master; the data, init, selection, and
per-client streams are derived from it as independent counter-based
substreams unless a specific stream seed is pinned explicitly. Every
random draw in the pipeline flows from one of these four streams, which
is what makes full runs replayable.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError

# substream tags keep the derived generators decorrelated
_TAG_DATA = 0x0D47A
_TAG_INIT = 0x1A17
_TAG_SELECT = 0x5E1EC7
_TAG_CLIENT = 0xC11E27


@dataclass
class FedConfig:
    """All knobs for a federated run; defaults follow the reference setup."""

    rounds: int = 500
    n_clients: int = 5
    local_epochs: int = 1
    batch_size: int = 256
    lr: float = 1e-3
    weight_decay: float = 1e-4
    replay_ratio: float = 0.5        # convex mix between local and replay loss
    share_rate: float = 0.01
    participant_rate: float = 0.6
    warm_epochs: int = 5
    gate_rounds: int = 10
    kd_weight: float = 0.5
    kd_temperature: float = 2.0
    kd_epochs: int = 20

    d_in: int = 512
    d_model: int = 256
    d_ff: int = 1024
    n_layers: int = 2

    replay_enabled: bool = True
    persist_optimizer: bool = True
    size_weighted: bool = False

    seed: int = 1
    seed_data: int | None = None
    seed_init: int | None = None
    seed_select: int | None = None
    seed_clients: int | None = None
    scenario: str = "default"

    def __post_init__(self) -> None:
        if self.seed_data is None:
            self.seed_data = _derive(self.seed, _TAG_DATA)
        if self.seed_init is None:
            self.seed_init = _derive(self.seed, _TAG_INIT)
        if self.seed_select is None:
            self.seed_select = _derive(self.seed, _TAG_SELECT)
        if self.seed_clients is None:
            self.seed_clients = _derive(self.seed, _TAG_CLIENT)
        self.validate()

    def validate(self) -> None:
        def rate(name: str, value: float) -> None:
            if not (0.0 < value <= 1.0):
                raise ConfigError(f"{name} must be in (0, 1], got {value}")

        if self.rounds < 0:
            raise ConfigError(f"rounds must be >= 0, got {self.rounds}")
        if self.n_clients < 1:
            raise ConfigError(f"n_clients must be >= 1, got {self.n_clients}")
        if self.local_epochs < 1:
            raise ConfigError(
                f"local_epochs must be >= 1, got {self.local_epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigError(
                f"weight_decay must be >= 0, got {self.weight_decay}")
        if not 0.0 <= self.replay_ratio <= 1.0:
            raise ConfigError(
                f"replay_ratio must be in [0, 1], got {self.replay_ratio}")
        rate("share_rate", self.share_rate)
        rate("participant_rate", self.participant_rate)
        if self.warm_epochs < 0:
            raise ConfigError(f"warm_epochs must be >= 0, got {self.warm_epochs}")
        if self.gate_rounds < 0:
            raise ConfigError(f"gate_rounds must be >= 0, got {self.gate_rounds}")
        if self.kd_weight < 0:
            raise ConfigError(f"kd_weight must be >= 0, got {self.kd_weight}")
        if self.kd_temperature <= 0:
            raise ConfigError(
                f"kd_temperature must be > 0, got {self.kd_temperature}")
        if self.kd_epochs < 0:
            raise ConfigError(f"kd_epochs must be >= 0, got {self.kd_epochs}")
        if min(self.d_in, self.d_model, self.d_ff, self.n_layers) < 1:
            raise ConfigError(
                f"head dims must be positive, got d_in={self.d_in} "
                f"d_model={self.d_model} d_ff={self.d_ff} "
                f"n_layers={self.n_layers}"
            )

    # -- seed streams ------------------------------------------------------

    def data_rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed_data)

    def init_rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed_init)

    def select_rng(self, round_index: int) -> np.random.Generator:
        return np.random.default_rng([self.seed_select, round_index])

    def client_rng(self, client_id: int) -> np.random.Generator:
        return np.random.default_rng([self.seed_clients, client_id])

    def server_train_rng(self, stage: int) -> np.random.Generator:
        # warm start and KD fine-tune shuffles; keyed off the init stream
        return np.random.default_rng([self.seed_init, 0x7EA1, stage])

    def to_dict(self) -> dict:
        return asdict(self)


def _derive(master: int, tag: int) -> int:
    return int(np.random.SeedSequence([master, tag]).generate_state(1)[0])


def save_config(cfg: FedConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")


def config_from_dict(raw: dict, where: str = "config") -> FedConfig:
    known = {f.name for f in fields(FedConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(
            f"{where} has unrecognized keys: {', '.join(sorted(unknown))}"
        )
    return FedConfig(**raw)


def load_config(path: str | Path) -> FedConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path} is not valid JSON: {err}") from err
    if not isinstance(raw, dict):
        raise ConfigError(f"{path} must hold a JSON object")
    return config_from_dict(raw, where=str(path))
