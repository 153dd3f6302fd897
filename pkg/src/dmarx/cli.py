"""Command-line front end: ``dmarx sweep-snr | sweep-bits | design-dump | verify``."""

import argparse
import json
import logging
import sys
from pathlib import Path

from .checks import CHECKS, run_check
from .experiment import (RECEIVERS, SNR_DEFINITION, _trial_draws, design_receivers, emit_results,
                         load_config, run_experiment, snr_to_noise_power)


def _floats(text):
    return tuple(float(v) for v in text.split(",") if v.strip())


def _ints(text):
    return tuple(int(v) for v in text.split(",") if v.strip())


def _receivers(text):
    labels = tuple(v.strip().upper() for v in text.split(",") if v.strip())
    bad = [r for r in labels if r not in RECEIVERS]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown receivers {bad}; choose from {','.join(RECEIVERS)}")
    return labels


def _common(p):
    p.add_argument("--config", type=Path, help="JSON or TOML file overriding the shipped defaults")
    p.add_argument("--seed", type=int)
    p.add_argument("--trials", type=int)
    p.add_argument("--receivers", type=_receivers, help="comma-separated subset of R1..R5")
    p.add_argument("--out", type=Path, help="output file (stdout table when omitted)")
    p.add_argument("--format", choices=("csv", "json"), help="output format (default from --out suffix, else csv)")
    p.add_argument("--workers", type=int, default=1, help="worker processes for the trials")
    p.add_argument("--constellation", choices=("qpsk", "gaussian"))
    p.add_argument("--interleaved", action="store_true", default=None,
                   help="project each microstrip before the next one is designed")


def build_parser():
    parser = argparse.ArgumentParser(prog="dmarx", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sweep-snr", help="MSE/BER against SNR at one bit budget")
    _common(p)
    p.add_argument("--snr", type=_floats, help="comma-separated SNRs in dB (default from config)")
    p.add_argument("--bits", type=int, default=80, help="b_overall (default 80)")

    p = sub.add_parser("sweep-bits", help="MSE/BER against the bit budget at one SNR")
    _common(p)
    p.add_argument("--bits", type=_ints, help="comma-separated b_overall values (default from config)")
    p.add_argument("--snr", type=float, default=8.0, help="SNR in dB (default 8)")

    p = sub.add_parser("design-dump", help="serialize the receivers designed for one trial's channel")
    p.add_argument("--config", type=Path)
    p.add_argument("--seed", type=int)
    p.add_argument("--trial", type=int, default=0)
    p.add_argument("--snr", type=float, default=8.0)
    p.add_argument("--bits", type=int, default=80)
    p.add_argument("--receivers", type=_receivers, default=("R1", "R2", "R3", "R4"))
    p.add_argument("--out", type=Path)

    p = sub.add_parser("verify", help="run the invariant suites")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--checks", type=lambda s: tuple(s.split(",")), default=tuple(CHECKS),
                   help=f"comma-separated subset of {','.join(CHECKS)}")
    return parser


def _print_table(records, stream):
    stream.write(f"{'receiver':8} {'snr_db':>7} {'bits':>5} {'mse':>10} {'ber':>10} "
                 f"{'overload':>9} {'e_o':>10}\n")
    for r in records:
        stream.write(f"{r.receiver:8} {r.snr_db:7.1f} {r.b_overall:5d} {r.mse:10.4g} {r.ber:10.4g} "
                     f"{r.overload:9.4f} {r.e_o:10.4g}\n")


def _sweep(args, snr_db, b_overall):
    cfg = load_config(args.config, seed=args.seed, trials=args.trials, receivers=args.receivers,
                      constellation=args.constellation, interleaved=args.interleaved)
    cfg = cfg.replace(snr_db=snr_db or cfg.snr_db, b_overall=b_overall or cfg.b_overall)
    print(f"# {SNR_DEFINITION}")
    print(f"# seed={cfg.seed} trials={cfg.trials} receivers={','.join(cfg.receivers)} "
          f"snr_db={list(cfg.snr_db)} b_overall={list(cfg.b_overall)}")
    step = max(1, cfg.trials // 10)

    def progress(done):
        if done % step == 0 or done == cfg.trials:
            logging.getLogger("dmarx").info("%d/%d trials", done, cfg.trials)

    records = run_experiment(cfg, workers=args.workers, progress=progress)
    if args.out is None:
        _print_table(records, sys.stdout)
    else:
        fmt = args.format or ("json" if args.out.suffix.lower() == ".json" else "csv")
        emit_results(records, fmt, args.out)
        print(f"# wrote {len(records)} records to {args.out}")
    return 0


def _design_dump(args):
    cfg = load_config(args.config, seed=args.seed)
    cfg = cfg.replace(snr_db=(args.snr,), b_overall=(args.bits,), trials=max(cfg.trials, args.trial + 1))
    ch, _, _ = _trial_draws(cfg, args.trial, 0)
    ch = ch.with_noise_power(snr_to_noise_power(args.snr))
    bank = design_receivers(ch, cfg, cfg.levels(args.bits),
                            [r for r in args.receivers if r != "R5"])
    payload = {"snr_definition": SNR_DEFINITION, "seed": cfg.seed, "trial": args.trial,
               "snr_db": args.snr, "b_overall": args.bits, "e_o": bank.e_o,
               "channel": ch.to_dict(),
               "designs": {k: d.to_dict() for k, d in bank.designs.items()}}
    text = json.dumps(payload)
    if args.out is None:
        sys.stdout.write(text + "\n")
    else:
        try:
            args.out.write_text(text)
        except OSError as exc:
            raise OSError(f"cannot write design to {args.out}: {exc}") from exc
        print(f"# wrote {len(bank.designs)} designs to {args.out}")
    return 0


def _verify(args):
    failed = 0
    for name in args.checks:
        res = run_check(name, seed=args.seed)
        print(res.line(), flush=True)
        failed += not res.passed
    return 1 if failed else 0


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.command == "sweep-snr":
            return _sweep(args, args.snr, (args.bits,))
        if args.command == "sweep-bits":
            return _sweep(args, (args.snr,), args.bits)
        if args.command == "design-dump":
            return _design_dump(args)
        return _verify(args)
    except (OSError, ValueError, KeyError, RuntimeError) as exc:
        print(f"dmarx: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
