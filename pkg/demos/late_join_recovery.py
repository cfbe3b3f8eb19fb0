"""Late-joining client: expansion, distillation, gated rounds, recovery.

A 4-client federation trains on 24 base classes; at the join round a new
client arrives owning 6 unseen classes. The server builds prototype
rows from the newcomer's shared features, fine-tunes the classifier
under distillation so the old classes survive, and row-gates the new
rows for a few rounds so only their owner shapes them. The printed
timeline shows the accuracy dip at the join (evaluation switches to the
full class set) and the recovery.

Longer CLI variant: replayfl late-join --config configs/late-join.json
"""

import argparse

from replayfl import (
    DatasetSpec,
    FedConfig,
    make_late_join_data,
    run_late_join,
)


def main() -> None:
    ap = argparse.ArgumentParser(
        description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--rounds", type=int, default=180)
    ap.add_argument("--join-round", type=int, default=120, dest="join_round")
    ap.add_argument("--per-class", type=int, default=60, dest="per_class")
    ap.add_argument("--spread", type=float, default=1.5)
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args()

    cfg = FedConfig(
        rounds=args.rounds,
        n_clients=4,
        participant_rate=0.6,
        replay_ratio=0.5,
        share_rate=0.01,
        d_in=64,
        d_model=32,
        d_ff=64,
        batch_size=64,
        seed=args.seed,
    )
    spec = DatasetSpec(n_classes=30, per_class=args.per_class,
                       spread=args.spread)
    fed, joiner = make_late_join_data(cfg, spec, n_new_classes=6)

    print(f"base federation: 4 clients, {len(fed.registry)} classes; "
          f"joiner holds {len(joiner)} records of 6 new classes")
    result = run_late_join(cfg, fed, args.join_round, joiner)
    acc = [r.accuracy for r in result.reports]
    join = result.join

    pre_peak = max(acc[:args.join_round])
    print()
    print(f"{'round':>6} {'accuracy':>9}   (eval set)")
    marks = sorted({1, args.join_round // 2, args.join_round,
                    args.join_round + 1, args.join_round + 10,
                    args.join_round + 40, args.rounds})
    marks = [r for r in marks if 1 <= r <= args.rounds]
    for r in marks:
        which = "base classes" if r <= args.join_round else "all classes"
        print(f"{r:>6} {acc[r - 1]:>9.3f}   ({which})")
    print()
    print(f"pre-join peak (base classes): {pre_peak:.3f}")
    print(f"drop at join: {acc[args.join_round - 1]:.3f} -> "
          f"{acc[args.join_round]:.3f}")
    print(f"best after join: {max(acc[args.join_round:]):.3f}")
    print(f"old-class accuracy around the distillation fine-tune: "
          f"{join['old_class_acc_before_kd']:.3f} -> "
          f"{join['old_class_acc_after_kd']:.3f}")
    print(f"row gate installed for new rows: {join['gate_installed']}, "
          f"shared records: {join['shared_records']}")


if __name__ == "__main__":
    main()
