"""Acceptance suite: every shipped guarantee, one verdict line each.

Each test pins its tolerance inline and prints `[PASS] <name>: <detail>`
on success (run pytest with -s to see the lines). Scenario-scale checks
use the synthetic corpora shipped in configs/; the heavy replay-efficacy
check runs the full-size head for 200 rounds per arm and dominates the
suite's runtime.
"""

from __future__ import annotations

import time

import numpy as np
import pytest

from replayfl import nn
from replayfl.client import local_train_round, make_client
from replayfl.config import FedConfig
from replayfl.data import EmbeddingDataset, ReplayPool, collect_replay
from replayfl.metrics import FULL_MODEL_PARAMS, summarize
from replayfl.server import (
    RowGate,
    aggregate_round,
    expand_classifier,
    fedavg,
    kd_finetune_head,
    make_server,
    row_gated_fedavg,
)
from replayfl.simulate import (
    DatasetSpec,
    make_federation_data,
    make_late_join_data,
    run_late_join,
    run_pulse_probe,
    run_simulation,
)


def verdict(name: str, ok: bool, detail: str) -> None:
    print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, f"{name}: {detail}"


def params_equal(a: nn.HeadParams, b: nn.HeadParams) -> bool:
    return all(np.array_equal(x, y) for (_, x), (_, y)
               in zip(nn.named_arrays(a), nn.named_arrays(b)))


def max_abs_diff(a: nn.HeadParams, b: nn.HeadParams) -> float:
    return max(float(np.max(np.abs(x - y))) if x.size else 0.0
               for (_, x), (_, y)
               in zip(nn.named_arrays(a), nn.named_arrays(b)))


# ---------------------------------------------------------------------------
# 1. Gradient fidelity
# ---------------------------------------------------------------------------

def test_gradient_fidelity():
    """Analytic gradients of the full head match central differences,
    max relative error < 1e-4 over 10 seeds, in under 30 seconds."""
    started = time.perf_counter()
    d_in, d_model, d_ff, n_layers, n_classes, batch = 10, 16, 32, 2, 5, 8
    h = 1e-3
    worst = 0.0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        params = nn.init_head_params(d_in, d_model, d_ff, n_layers,
                                     n_classes, rng)
        x = rng.normal(size=(batch, d_in))
        y = rng.integers(0, n_classes, size=batch)

        logits, _, cache = nn.head_forward_cached(params, x)
        loss0, dlogits = nn.cross_entropy(logits, y)
        analytic = nn.to_vector(nn.head_backward(params, x, dlogits, cache))

        def loss_at(vec: np.ndarray) -> float:
            p = nn.from_vector(params, vec)
            out, _ = nn.head_forward(p, x)
            return nn.cross_entropy(out, y)[0]

        theta = nn.to_vector(params)
        fd = np.empty_like(theta)
        for i in range(theta.size):
            bump = np.zeros_like(theta)
            bump[i] = h
            fd[i] = (loss_at(theta + bump) - loss_at(theta - bump)) / (2 * h)

        # relative error floored at 1% of the loss scale: below that the
        # O(h^2) truncation of the differences dominates any real signal
        floor = 1e-2 * max(abs(loss0), 1.0)
        rel = np.abs(analytic - fd) / np.maximum(np.abs(fd), floor)
        worst = max(worst, float(np.max(rel)))
    elapsed = time.perf_counter() - started
    verdict("gradient fidelity", worst < 1e-4 and elapsed < 30.0,
            f"max rel err {worst:.2e} (< 1e-4), {elapsed:.1f}s (< 30s)")


# ---------------------------------------------------------------------------
# 2. Aggregation oracle
# ---------------------------------------------------------------------------

def test_aggregation_oracle():
    """fedavg equals a naive element loop within 1e-12, is permutation
    invariant, and the single-update mean is exact."""
    rng = np.random.default_rng(3)
    updates = [nn.init_head_params(6, 8, 16, 2, 4, rng) for _ in range(5)]

    merged = fedavg(updates)
    worst = 0.0
    for name, got in nn.named_arrays(merged):
        stack = [dict(nn.named_arrays(u))[name] for u in updates]
        naive = np.zeros_like(stack[0])
        flat_views = [s.reshape(-1) for s in stack]
        out = naive.reshape(-1)
        for i in range(out.size):
            total = 0.0
            for view in flat_views:
                total += view[i]
            out[i] = total / len(flat_views)
        worst = max(worst, float(np.max(np.abs(got - naive))))
    assert worst < 1e-12

    permuted = fedavg([updates[i] for i in (4, 2, 0, 3, 1)])
    perm_diff = max_abs_diff(merged, permuted)
    assert perm_diff < 1e-12

    single = fedavg(updates[:1])
    assert params_equal(single, updates[0])
    verdict("aggregation oracle", True,
            f"naive-loop diff {worst:.1e}, permutation diff {perm_diff:.1e}, "
            f"single-update exact")


# ---------------------------------------------------------------------------
# 4. Replay-ratio degeneracy
# ---------------------------------------------------------------------------

def small_cfg(**overrides) -> FedConfig:
    base = dict(rounds=5, n_clients=3, batch_size=32, d_in=24, d_model=16,
                d_ff=32, n_layers=2, warm_epochs=2, seed=5)
    base.update(overrides)
    return FedConfig(**base)


def test_replay_ratio_degeneracy():
    """ratio 0 runs bitwise identical to a replay-disabled build; at
    ratio 1 a client's update ignores its private labels entirely."""
    spec = DatasetSpec(n_classes=6, per_class=30)
    cfg_zero = small_cfg(replay_ratio=0.0, replay_enabled=True)
    cfg_off = small_cfg(replay_ratio=0.7, replay_enabled=False)
    a = run_simulation(cfg_zero, make_federation_data(cfg_zero, spec))
    b = run_simulation(cfg_off, make_federation_data(cfg_off, spec))
    bitwise = params_equal(a.final_params, b.final_params) and (
        [r.accuracy for r in a.all_reports]
        == [r.accuracy for r in b.all_reports])
    assert bitwise

    # label permutation: shuffle the private labels of one client while
    # keeping the label multiset (so its class set is unchanged)
    cfg = small_cfg(replay_ratio=1.0)
    fed = make_federation_data(cfg, spec)
    ds = fed.clients[0]
    rng = np.random.default_rng(9)
    shuffled = EmbeddingDataset(
        class_names=list(ds.class_names),
        labels=rng.permutation(ds.labels),
        vectors=ds.vectors.copy(),
    )
    pool = collect_replay(fed.clients, cfg.share_rate, cfg.seed_data)
    global_params = nn.init_head_params(cfg.d_in, cfg.d_model, cfg.d_ff,
                                        cfg.n_layers, 6, cfg.init_rng())
    upd_a = local_train_round(make_client(0, ds, cfg), global_params, cfg,
                              pool=pool).params
    upd_b = local_train_round(make_client(0, shuffled, cfg), global_params,
                              cfg, pool=pool).params
    invariant = params_equal(upd_a, upd_b)
    verdict("replay-ratio degeneracy", bitwise and invariant,
            "ratio-0 bitwise == disabled build; ratio-1 update invariant "
            "to private-label permutation")


# ---------------------------------------------------------------------------
# 8. Row-gate exactness
# ---------------------------------------------------------------------------

def test_row_gate_exactness():
    """Perturbing a non-owner's gated rows changes the aggregate by
    exactly zero; after expiry aggregation equals plain fedavg bitwise."""
    rng = np.random.default_rng(11)
    current = nn.init_head_params(6, 8, 16, 2, 5, rng)
    updates = [(cid, nn.init_head_params(6, 8, 16, 2, 5, rng))
               for cid in range(3)]
    gate = RowGate(gated_rows={3, 4}, owners={2}, rounds_remaining=2)

    merged = row_gated_fedavg(updates, gate, current)
    poisoned = []
    for cid, p in updates:
        q = nn.clone(p)
        if cid != 2:
            q.cls_w[3:] = rng.normal(size=q.cls_w[3:].shape) * 1e6
            q.cls_b[3:] = rng.normal(size=2) * 1e6
        poisoned.append((cid, q))
    gate2 = RowGate(gated_rows={3, 4}, owners={2}, rounds_remaining=2)
    merged_poisoned = row_gated_fedavg(poisoned, gate2, current)
    gated_delta = max(
        float(np.max(np.abs(merged.cls_w[3:] - merged_poisoned.cls_w[3:]))),
        float(np.max(np.abs(merged.cls_b[3:] - merged_poisoned.cls_b[3:]))),
    )
    assert gated_delta == 0.0

    # expiry: run R_gate aggregations through a server, then one more
    cfg = FedConfig(rounds=1, n_clients=3, gate_rounds=2, d_in=6, d_model=8,
                    d_ff=16, n_layers=2, batch_size=8, seed=1)
    server = make_server(cfg, [f"c{i}" for i in range(5)])
    server.gate = RowGate(gated_rows={3, 4}, owners={2}, rounds_remaining=2)
    for _ in range(2):
        ups = [(cid, nn.init_head_params(6, 8, 16, 2, 5, rng), 10)
               for cid in range(3)]
        aggregate_round(server, ups, cfg)
    assert server.gate is None
    ups = [(cid, nn.init_head_params(6, 8, 16, 2, 5, rng), 10)
           for cid in range(3)]
    after_expiry = aggregate_round(server, ups, cfg)
    plain = fedavg([p for _, p, _ in ups])
    assert params_equal(after_expiry, plain)
    verdict("row-gate exactness", True,
            "non-owner perturbation delta exactly 0; post-expiry "
            "aggregation bitwise == plain fedavg")


# ---------------------------------------------------------------------------
# 9. Distillation identity
# ---------------------------------------------------------------------------

def test_distillation_identity():
    """Teacher == student on the old logits gives KD loss 0 within 1e-9,
    and the head-only fine-tune leaves every encoder tensor bitwise."""
    rng = np.random.default_rng(13)
    teacher = nn.init_head_params(10, 8, 16, 2, 4, rng)
    protos = {4: rng.normal(size=8), 5: rng.normal(size=8)}
    student = expand_classifier(teacher, protos)

    x = rng.normal(size=(12, 10))
    t_logits, _ = nn.head_forward(teacher, x)
    s_logits, _ = nn.head_forward(student, x)
    kd0, _ = nn.kd_kl(t_logits, s_logits[:, :4], temperature=2.0)
    assert abs(kd0) < 1e-9

    new_pool = EmbeddingDataset(
        class_names=[f"c{i}" for i in range(6)],
        labels=np.array([4, 4, 5, 5]),
        vectors=rng.normal(size=(4, 10)).astype(np.float32),
    )
    old_pool = ReplayPool(labels=np.array([0, 1, 2, 3]),
                          vectors=rng.normal(size=(4, 10)).astype(np.float32),
                          share_rate=0.05)
    cfg = FedConfig(rounds=1, n_clients=2, d_in=10, d_model=8, d_ff=16,
                    n_layers=2, batch_size=8, kd_epochs=10, seed=1)
    tuned = kd_finetune_head(student, teacher, new_pool, old_pool, cfg)
    encoder_untouched = all(
        np.array_equal(a, b)
        for (name, a), (_, b) in zip(nn.named_arrays(tuned),
                                     nn.named_arrays(student))
        if not name.startswith("cls_"))
    classifier_moved = not np.array_equal(tuned.cls_w, student.cls_w)
    verdict("distillation identity",
            encoder_untouched and classifier_moved,
            f"teacher==student KD {abs(kd0):.1e} (< 1e-9); encoder bitwise "
            f"unchanged by fine-tune")


# ---------------------------------------------------------------------------
# Scenario fixtures
#
# Scale-free criteria above run in milliseconds; the directional criteria
# below run whole federations. Desk-scale fixtures (64-d embeddings,
# 20k-parameter head) are used wherever the criterion does not pin the
# full-size configuration; the replay-efficacy check is the exception and
# runs the default head for 200 rounds per arm.
# ---------------------------------------------------------------------------

DESK = dict(d_in=64, d_model=32, d_ff=64, n_layers=2, batch_size=64,
            warm_epochs=5)

# Efficacy corpus: six families of confusable classes, family members
# spread across clients by the round-robin partition, and starved
# participation (one client per round) so between owner visits only the
# shared pool defends a class's fine margins.
EFFICACY_CFG = dict(rounds=200, n_clients=5, participant_rate=0.2,
                    share_rate=0.01, warm_epochs=5)
EFFICACY_DATA = dict(n_classes=30, per_class=200, spread=2.0,
                     n_families=6, family_spread=0.35)


def final_accuracy(cfg: FedConfig, spec: DatasetSpec) -> float:
    result = run_simulation(cfg, make_federation_data(cfg, spec))
    return result.reports[-1].accuracy


# ---------------------------------------------------------------------------
# 3. Replay efficacy
# ---------------------------------------------------------------------------

def test_replay_efficacy():
    """On the default synthetic scenario the replay run's final accuracy
    beats the no-replay run by >= 15 points, on each of 5 seeds."""
    gaps = []
    for seed in (1, 2, 3, 4, 5):
        started = time.perf_counter()
        finals = {}
        for lam in (0.5, 0.0):
            cfg = FedConfig(seed=seed, replay_ratio=lam, **EFFICACY_CFG)
            finals[lam] = final_accuracy(cfg, DatasetSpec(**EFFICACY_DATA))
        gap = finals[0.5] - finals[0.0]
        gaps.append(gap)
        print(f"  seed {seed}: replay {finals[0.5]:.3f} vs plain "
              f"{finals[0.0]:.3f}, gap {100 * gap:+.1f}pt, "
              f"pair {time.perf_counter() - started:.0f}s")
    verdict("replay efficacy", min(gaps) >= 0.15,
            f"min gap {100 * min(gaps):.1f}pt over 5 seeds (>= 15pt)")


# ---------------------------------------------------------------------------
# 5. Share-rate monotonicity
# ---------------------------------------------------------------------------

def test_share_rate_monotonicity():
    """Final accuracy: 3% share >= 1% - 1pt and 9% <= 5% + 3pt (pool
    growth helps early and saturates), averaged over 3 seeds."""
    means = {}
    for share in (0.01, 0.03, 0.05, 0.09):
        finals = []
        for seed in (1, 2, 3):
            cfg = FedConfig(n_clients=5, rounds=100, participant_rate=0.6,
                            replay_ratio=0.5, share_rate=share, seed=seed,
                            **DESK)
            spec = DatasetSpec(n_classes=30, per_class=60, spread=2.0)
            finals.append(final_accuracy(cfg, spec))
        means[share] = float(np.mean(finals))
    rising = means[0.03] >= means[0.01] - 0.01
    saturating = means[0.09] <= means[0.05] + 0.03
    verdict("share-rate monotonicity", rising and saturating,
            "finals " + " ".join(f"{int(s * 100)}%={means[s]:.3f}"
                                 for s in sorted(means)))


# ---------------------------------------------------------------------------
# 6. Participant-rate ordering
# ---------------------------------------------------------------------------

def test_participant_rate_ordering():
    """Mean last-20-round accuracy orders 1.0 >= 0.6 >= 0.2 with 2pt
    tolerance per link, averaged over 3 seeds."""
    means = {}
    for rate in (0.2, 0.6, 1.0):
        tails = []
        for seed in (1, 2, 3):
            cfg = FedConfig(n_clients=5, rounds=60, participant_rate=rate,
                            replay_ratio=0.5, share_rate=0.01, seed=seed,
                            **DESK)
            spec = DatasetSpec(n_classes=30, per_class=60, spread=2.0)
            result = run_simulation(cfg, make_federation_data(cfg, spec))
            tails.append(float(np.mean(
                [r.accuracy for r in result.reports[-20:]])))
        means[rate] = float(np.mean(tails))
    ordered = (means[1.0] >= means[0.6] - 0.02
               and means[0.6] >= means[0.2] - 0.02)
    verdict("participant-rate ordering", ordered,
            f"last-20 means 1.0={means[1.0]:.3f} >= 0.6={means[0.6]:.3f} "
            f">= 0.2={means[0.2]:.3f} (2pt tolerance per link)")


# ---------------------------------------------------------------------------
# 7. Late-join pipeline
# ---------------------------------------------------------------------------

def test_late_join_pipeline():
    """Join at round 200 of a 4-client run: accuracy drops at the join,
    recovers to within 5pt of the pre-join peak within 100 rounds, and
    the distillation fine-tune keeps old-class accuracy within 5pt."""
    cfg = FedConfig(n_clients=4, rounds=300, participant_rate=0.6,
                    replay_ratio=0.5, share_rate=0.01, seed=1, **DESK)
    spec = DatasetSpec(n_classes=30, per_class=60, spread=1.5)
    fed, joiner = make_late_join_data(cfg, spec, n_new_classes=6)
    result = run_late_join(cfg, fed, 200, joiner)
    acc = [r.accuracy for r in result.reports]
    join = result.join
    assert join is not None

    pre_peak = max(acc[:200])
    dropped = acc[200] < acc[199]
    recovered = max(acc[200:]) >= pre_peak - 0.05
    kd_held = (join["old_class_acc_after_kd"]
               >= join["old_class_acc_before_kd"] - 0.05)
    verdict("late-join pipeline", dropped and recovered and kd_held,
            f"peak {pre_peak:.3f}, join {acc[199]:.3f}->{acc[200]:.3f}, "
            f"post-join max {max(acc[200:]):.3f}, old-class KD "
            f"{join['old_class_acc_before_kd']:.3f}->"
            f"{join['old_class_acc_after_kd']:.3f}")


# ---------------------------------------------------------------------------
# 11. Pulse probe
# ---------------------------------------------------------------------------

def test_pulse_probe_shape():
    """In the no-replay non-IID probe with a server fine-tune every 10
    rounds, accuracy rises at the fine-tune and falls within the next 10
    rounds for >= 80% of pulses (complete windows only)."""
    cfg = FedConfig(n_clients=5, rounds=70, participant_rate=0.2,
                    replay_ratio=0.0, seed=1, **DESK)
    spec = DatasetSpec(n_classes=30, per_class=60, spread=2.0)
    result = run_pulse_probe(cfg, make_federation_data(cfg, spec),
                             finetune_every=10)
    acc = [r.accuracy for r in result.reports]
    good = total = 0
    for pulse in result.pulses:
        window = acc[pulse.round_index : pulse.round_index + 10]
        if len(window) < 10:
            continue
        total += 1
        rose = pulse.acc_after > pulse.acc_before
        fell = min(window) < pulse.acc_after
        good += rose and fell
    verdict("pulse probe", total >= 5 and good >= 0.8 * total,
            f"{good}/{total} pulses rose then fell within 10 rounds "
            f"(>= 80% required)")


# ---------------------------------------------------------------------------
# 10. Communication claim
# ---------------------------------------------------------------------------

def test_communication_claim():
    """Default head has 1.6M..2.0M parameters and the reported fraction
    of an 88.8M full model lands in 1.8%..2.3%."""
    cfg = FedConfig()
    count = nn.head_param_count(cfg.d_in, cfg.d_model, cfg.d_ff,
                                cfg.n_layers, 30)
    real = nn.param_count(nn.init_head_params(
        cfg.d_in, cfg.d_model, cfg.d_ff, cfg.n_layers, 30,
        np.random.default_rng(0)))
    assert count == real
    summary = summarize([], cfg, param_count=count)
    fraction = summary["head_fraction_of_full_model"]
    in_range = (1_600_000 <= count <= 2_000_000
                and 0.018 <= fraction <= 0.023)
    verdict("communication claim", in_range,
            f"{count} params; {100 * fraction:.2f}% of "
            f"{FULL_MODEL_PARAMS} (within 1.8%..2.3%)")
