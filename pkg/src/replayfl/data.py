"""Embedding datasets: binary file format, synthesis, partitioning, replay.

Datasets carry frozen-encoder feature vectors plus integer labels; no
image or pixel path exists anywhere in these types, which is the privacy
surface the replay mechanism relies on. Vectors are float32 (matching
the on-disk format) and are widened to float64 only at the numeric-core
boundary.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .errors import (
    BadMagicError,
    CollectionError,
    ConfigError,
    DatasetFormatError,
    LabelError,
    SamplingError,
    ShapeError,
    TruncatedFileError,
    VersionError,
)

MAGIC = b"FEDR"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHIIQ")   # magic, version, d_in, classes, records
_NAME_LEN = struct.Struct("<H")


class EmbeddingRecord(NamedTuple):
    """One labeled feature vector."""

    label: int
    vector: np.ndarray


@dataclass
class EmbeddingDataset:
    """Labeled feature vectors over a fixed class-name registry.

    ``labels`` index into ``class_names``; ``vectors`` is (N, d_in)
    float32. Instances are treated as immutable after construction.
    """

    class_names: list[str]
    labels: np.ndarray
    vectors: np.ndarray
    provenance: str = ""

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2:
            raise ShapeError(
                f"vectors must be 2-d, got shape {self.vectors.shape}"
            )
        if self.labels.shape != (self.vectors.shape[0],):
            raise ShapeError(
                f"labels shape {self.labels.shape} does not match "
                f"{self.vectors.shape[0]} vectors"
            )
        if self.labels.size:
            bad = np.flatnonzero(
                (self.labels < 0) | (self.labels >= len(self.class_names)))
            if bad.size:
                raise LabelError(
                    f"record {int(bad[0])} has label {int(self.labels[bad[0]])} "
                    f"but only {len(self.class_names)} classes are registered"
                )
        if not np.all(np.isfinite(self.vectors)):
            raise DatasetFormatError("dataset contains non-finite vector values")

    @property
    def d_in(self) -> int:
        return self.vectors.shape[1]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def __len__(self) -> int:
        return self.labels.shape[0]

    def records(self) -> Iterator[EmbeddingRecord]:
        for i in range(len(self)):
            yield EmbeddingRecord(int(self.labels[i]), self.vectors[i])

    def classes_present(self) -> list[int]:
        return sorted(int(c) for c in np.unique(self.labels))

    def subset(self, idx: np.ndarray, provenance: str | None = None) -> "EmbeddingDataset":
        return EmbeddingDataset(
            class_names=list(self.class_names),
            labels=self.labels[idx].copy(),
            vectors=self.vectors[idx].copy(),
            provenance=self.provenance if provenance is None else provenance,
        )


def _record_dtype(d_in: int) -> np.dtype:
    return np.dtype([("label", "<u4"), ("vector", "<f4", (d_in,))])


def save_fedr(ds: EmbeddingDataset, path: str | Path) -> None:
    """Write the binary embedding file plus its sibling JSON manifest."""
    path = Path(path)
    names = [n.encode("utf-8") for n in ds.class_names]
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, FORMAT_VERSION, ds.d_in,
                             len(names), len(ds)))
        for n in names:
            f.write(_NAME_LEN.pack(len(n)))
            f.write(n)
        rec = np.empty(len(ds), dtype=_record_dtype(ds.d_in))
        rec["label"] = ds.labels.astype(np.uint32)
        rec["vector"] = ds.vectors
        f.write(rec.tobytes())
    manifest = {
        "format": MAGIC.decode("ascii"),
        "version": FORMAT_VERSION,
        "d_in": ds.d_in,
        "record_count": len(ds),
        "class_names": ds.class_names,
        "provenance": ds.provenance,
    }
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_fedr(path: str | Path) -> EmbeddingDataset:
    """Read a binary embedding file; the manifest is never consulted."""
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _HEADER.size:
        raise TruncatedFileError(
            f"{path} has {len(blob)} bytes, shorter than the "
            f"{_HEADER.size}-byte header"
        )
    magic, version, d_in, n_classes, n_records = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise BadMagicError(
            f"{path} starts with {magic!r}, expected {MAGIC!r}"
        )
    if version != FORMAT_VERSION:
        raise VersionError(
            f"{path} declares version {version}, this reader handles "
            f"{FORMAT_VERSION}"
        )
    offset = _HEADER.size
    names = []
    for _ in range(n_classes):
        if offset + _NAME_LEN.size > len(blob):
            raise TruncatedFileError(f"{path} ends inside the class-name table")
        (ln,) = _NAME_LEN.unpack_from(blob, offset)
        offset += _NAME_LEN.size
        if offset + ln > len(blob):
            raise TruncatedFileError(f"{path} ends inside a class name")
        names.append(blob[offset:offset + ln].decode("utf-8"))
        offset += ln
    dtype = _record_dtype(d_in)
    expect = n_records * dtype.itemsize
    if len(blob) - offset != expect:
        raise TruncatedFileError(
            f"{path} holds {len(blob) - offset} record bytes, header "
            f"promises {expect} ({n_records} records of {dtype.itemsize} bytes)"
        )
    rec = np.frombuffer(blob, dtype=dtype, count=n_records, offset=offset)
    labels = rec["label"].astype(np.int64)
    if labels.size and labels.max() >= n_classes:
        bad = int(np.argmax(labels >= n_classes))
        raise LabelError(
            f"{path} record {bad} has label {int(labels[bad])} with only "
            f"{n_classes} classes declared"
        )
    manifest = path.with_suffix(".json")
    provenance = ""
    if manifest.exists():
        try:
            provenance = json.loads(manifest.read_text()).get("provenance", "")
        except (OSError, json.JSONDecodeError):
            provenance = ""
    return EmbeddingDataset(
        class_names=names,
        labels=labels,
        vectors=rec["vector"].copy(),
        provenance=provenance,
    )


def gen_synthetic(n_classes: int, per_class: int, d_in: int,
                  spread: float, seed: int,
                  n_families: int | None = None,
                  family_spread: float = 0.5) -> EmbeddingDataset:
    """Gaussian class clusters around unit-norm means.

    ``spread`` scales the expected noise norm; per-coordinate noise is
    spread / sqrt(d_in), so cluster overlap stays comparable across
    embedding widths.

    With ``n_families`` set, class means are grouped: each family gets a
    unit-norm center and its member means are the center plus a
    perturbation of norm ``family_spread``, re-normalized. Members of a
    family are then far harder to tell apart than members of different
    families, which mimics fine-grained real-feature geometry.
    """
    if n_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {n_classes}")
    if per_class < 1 or d_in < 1:
        raise ConfigError(
            f"per_class and d_in must be positive, got {per_class}, {d_in}"
        )
    if spread <= 0:
        raise ConfigError(f"spread must be > 0, got {spread}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDA7A]))
    if n_families is None:
        means = rng.normal(size=(n_classes, d_in))
        means /= np.linalg.norm(means, axis=1, keepdims=True)
    else:
        if not 1 <= n_families <= n_classes:
            raise ConfigError(
                f"n_families must be in [1, {n_classes}], got {n_families}")
        if family_spread <= 0:
            raise ConfigError(
                f"family_spread must be > 0, got {family_spread}")
        centers = rng.normal(size=(n_families, d_in))
        centers /= np.linalg.norm(centers, axis=1, keepdims=True)
        offsets = rng.normal(size=(n_classes, d_in))
        offsets *= family_spread / np.linalg.norm(offsets, axis=1,
                                                  keepdims=True)
        # classes are dealt to families round-robin
        means = centers[np.arange(n_classes) % n_families] + offsets
        means /= np.linalg.norm(means, axis=1, keepdims=True)
    coord_sd = spread / math.sqrt(d_in)
    vectors = np.repeat(means, per_class, axis=0)
    vectors = vectors + rng.normal(size=vectors.shape) * coord_sd
    labels = np.repeat(np.arange(n_classes), per_class)
    family_note = ("" if n_families is None
                   else f", n_families={n_families}, "
                        f"family_spread={family_spread}")
    return EmbeddingDataset(
        class_names=[f"class_{c:02d}" for c in range(n_classes)],
        labels=labels,
        vectors=vectors.astype(np.float32),
        provenance=(
            f"synthetic(n_classes={n_classes}, per_class={per_class}, "
            f"d_in={d_in}, spread={spread}, seed={seed}{family_note})"
        ),
    )


def stratified_split(ds: EmbeddingDataset, holdout_frac: float,
                     seed: int) -> tuple[EmbeddingDataset, EmbeddingDataset]:
    """Split into (train, holdout) keeping per-class proportions."""
    if not 0.0 < holdout_frac < 1.0:
        raise ConfigError(f"holdout fraction must be in (0, 1), got {holdout_frac}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5B117]))
    train_idx, hold_idx = [], []
    for c in ds.classes_present():
        rows = np.flatnonzero(ds.labels == c)
        rows = rng.permutation(rows)
        k = int(round(holdout_frac * rows.size))
        k = min(max(k, 1), rows.size - 1) if rows.size > 1 else 0
        hold_idx.append(rows[:k])
        train_idx.append(rows[k:])
    train = np.sort(np.concatenate(train_idx))
    hold = np.sort(np.concatenate(hold_idx)) if hold_idx else np.array([], dtype=int)
    return ds.subset(train), ds.subset(hold)


# ---------------------------------------------------------------------------
# Partitioning
# ---------------------------------------------------------------------------

@dataclass
class PartitionPlan:
    """Disjoint class ownership across clients plus the routed datasets."""

    n_clients: int
    assignment: dict[int, int]            # class id -> owner client id
    client_datasets: list[EmbeddingDataset]

    def classes_of(self, client_id: int) -> list[int]:
        return sorted(c for c, o in self.assignment.items() if o == client_id)


def partition_non_iid(ds: EmbeddingDataset, n_clients: int,
                      seed: int) -> PartitionPlan:
    """Assign each class to exactly one client and route records there.

    Classes are shuffled, then dealt in contiguous runs; when the split is
    uneven the earlier client ids take one extra class.
    """
    classes = ds.classes_present()
    if n_clients < 1:
        raise ConfigError(f"n_clients must be >= 1, got {n_clients}")
    if n_clients > len(classes):
        raise ConfigError(
            f"{n_clients} clients cannot each own a class from only "
            f"{len(classes)} present classes"
        )
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9A47]))
    order = rng.permutation(np.array(classes))
    base, extra = divmod(len(classes), n_clients)
    assignment: dict[int, int] = {}
    start = 0
    for client in range(n_clients):
        take = base + (1 if client < extra else 0)
        for c in order[start:start + take]:
            assignment[int(c)] = client
        start += take
    owners = np.array([assignment[int(c)] for c in ds.labels])
    datasets = [
        ds.subset(np.flatnonzero(owners == client),
                  provenance=f"{ds.provenance} [client {client}]")
        for client in range(n_clients)
    ]
    return PartitionPlan(n_clients=n_clients, assignment=assignment,
                         client_datasets=datasets)


def partition_iid(ds: EmbeddingDataset, n_clients: int,
                  seed: int) -> list[EmbeddingDataset]:
    """Shuffle all records and deal them round-robin across clients.

    Every client sees (roughly) the full class mix; the contrast case to
    the disjoint-class partition.
    """
    if n_clients < 1:
        raise ConfigError(f"n_clients must be >= 1, got {n_clients}")
    if n_clients > len(ds):
        raise ConfigError(
            f"{n_clients} clients cannot share only {len(ds)} records")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x11D]))
    order = rng.permutation(len(ds))
    return [
        ds.subset(np.sort(order[client::n_clients]),
                  provenance=f"{ds.provenance} [client {client}]")
        for client in range(n_clients)
    ]


# ---------------------------------------------------------------------------
# Replay pool
# ---------------------------------------------------------------------------

@dataclass
class ReplayPool:
    """Shared feature slice spanning every class in the federation."""

    labels: np.ndarray
    vectors: np.ndarray
    share_rate: float
    by_class: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.by_class:
            self.by_class = {
                int(c): np.flatnonzero(self.labels == c)
                for c in np.unique(self.labels)
            }

    def __len__(self) -> int:
        return self.labels.shape[0]

    def classes(self) -> list[int]:
        return sorted(self.by_class)


def stratified_take(ds: EmbeddingDataset, count: int,
                     rng: np.random.Generator) -> np.ndarray:
    """Indices of ``count`` records, at least one from every local class."""
    picked = []
    for c in ds.classes_present():
        rows = np.flatnonzero(ds.labels == c)
        picked.append(rng.choice(rows, size=1, replace=False))
    picked = np.concatenate(picked)
    rest = count - picked.size
    if rest > 0:
        pool = np.setdiff1d(np.arange(len(ds)), picked)
        picked = np.concatenate([picked, rng.choice(pool, size=rest,
                                                    replace=False)])
    return np.sort(picked)


def collect_replay(clients: Sequence[EmbeddingDataset], share_rate: float,
                   seed: int) -> ReplayPool:
    """Pool a stratified share of every client's features.

    Each client contributes ceil(share_rate * |D_i|) records, raised to its
    local class count when the ceiling alone could not cover every class.
    """
    if not 0.0 < share_rate <= 1.0:
        raise ConfigError(f"share_rate must be in (0, 1], got {share_rate}")
    labels_parts, vector_parts = [], []
    for i, ds in enumerate(clients):
        if len(ds) == 0:
            raise CollectionError(f"client {i} has no records to share")
        count = max(math.ceil(share_rate * len(ds)),
                    len(ds.classes_present()))
        count = min(count, len(ds))
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0113C7, i]))
        idx = stratified_take(ds, count, rng)
        labels_parts.append(ds.labels[idx])
        vector_parts.append(ds.vectors[idx])
    return ReplayPool(
        labels=np.concatenate(labels_parts),
        vectors=np.vstack(vector_parts),
        share_rate=share_rate,
    )


def merge_replay(pool: ReplayPool, extra_labels: np.ndarray,
                 extra_vectors: np.ndarray) -> ReplayPool:
    """New pool with additional records appended (used when a client joins)."""
    if extra_vectors.ndim != 2 or extra_vectors.shape[1] != pool.vectors.shape[1]:
        raise ShapeError(
            f"extra vectors {extra_vectors.shape} do not match pool width "
            f"{pool.vectors.shape[1]}"
        )
    return ReplayPool(
        labels=np.concatenate([pool.labels, np.asarray(extra_labels, dtype=np.int64)]),
        vectors=np.vstack([pool.vectors, extra_vectors.astype(np.float32)]),
        share_rate=pool.share_rate,
    )


def sample_replay_batch(pool: ReplayPool, batch_size: int,
                        missing_classes: set[int],
                        rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Class-balanced batch drawn from the pool slice of the given classes.

    Falls back to every pooled class when ``missing_classes`` is empty.
    The batch is split evenly across classes (remainder spread at random)
    and draws within a class use replacement only when its slice is too
    small. Returns (vectors, labels).
    """
    if len(pool) == 0:
        raise SamplingError("replay pool is empty")
    wanted = sorted(missing_classes) if missing_classes else pool.classes()
    for c in wanted:
        if c not in pool.by_class:
            raise SamplingError(f"class {c} is not present in the replay pool")
    if batch_size == 0:
        return (np.empty((0, pool.vectors.shape[1]), dtype=np.float32),
                np.empty((0,), dtype=np.int64))
    k = len(wanted)
    counts = np.full(k, batch_size // k)
    rest = batch_size - counts.sum()
    if rest:
        counts[rng.choice(k, size=rest, replace=False)] += 1
    rows = []
    for c, n in zip(wanted, counts):
        if n == 0:
            continue
        slice_rows = pool.by_class[c]
        rows.append(rng.choice(slice_rows, size=n,
                               replace=slice_rows.size < n))
    idx = np.concatenate(rows)
    idx = rng.permutation(idx)
    return pool.vectors[idx].copy(), pool.labels[idx].copy()
