"""Why plain averaging needs help: the fine-tune pulse probe.

Runs plain federated averaging (no replay, no warm start) over a
non-IID split and lets the server fine-tune the global head on the
centralized training corpus every K rounds. Each fine-tune spikes the
accuracy; the following federated rounds drag it back down as skewed
client updates wash the centralized signal out. The sawtooth trace is
the degradation signature that motivates the replay pool.

Equivalent CLI: replayfl pulse-probe --config configs/pulse.json
"""

import argparse

from replayfl import (
    DatasetSpec,
    FedConfig,
    make_federation_data,
    run_pulse_probe,
)


def main() -> None:
    ap = argparse.ArgumentParser(
        description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--rounds", type=int, default=70)
    ap.add_argument("--every", type=int, default=10,
                    help="fine-tune every K rounds")
    ap.add_argument("--per-class", type=int, default=60, dest="per_class")
    ap.add_argument("--spread", type=float, default=2.0)
    ap.add_argument("--iid", action="store_true",
                    help="use an IID split instead (flatter sawtooth)")
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args()

    cfg = FedConfig(
        rounds=args.rounds,
        n_clients=5,
        participant_rate=0.2,
        replay_ratio=0.0,
        d_in=64,
        d_model=32,
        d_ff=64,
        batch_size=64,
        seed=args.seed,
    )
    spec = DatasetSpec(n_classes=30, per_class=args.per_class,
                       spread=args.spread, iid=args.iid)
    result = run_pulse_probe(cfg, make_federation_data(cfg, spec),
                             finetune_every=args.every)
    acc = [r.accuracy for r in result.reports]

    print(f"{'split':<8} {'pulses':>6}")
    print(f"{'iid' if args.iid else 'non-iid':<8} {len(result.pulses):>6}")
    print()
    print(f"{'round':>6} {'before':>8} {'after':>8} {'low(next 10)':>13}")
    for pulse in result.pulses:
        r = pulse.round_index
        window = acc[r:r + 10]
        low = min(window) if window else float("nan")
        print(f"{r:>6} {pulse.acc_before:>8.3f} {pulse.acc_after:>8.3f} "
              f"{low:>13.3f}")
    print()
    print("bars: each row is one round, '#' length is accuracy")
    for r, a in enumerate(acc, start=1):
        tag = " <- fine-tune" if r % args.every == 0 else ""
        print(f"{r:>5} {'#' * int(a * 50):<50}{tag}")


if __name__ == "__main__":
    main()
