"""Command-line entry point.

Every subcommand builds its full output in memory before touching the
filesystem, so a failed run never leaves a partial file behind. Exit
codes: 0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from isdkit import analytics, batch_sim, models, process_sim, train_kit
from isdkit.decoder import PROPOSAL_MODES, StrideConfig, decode
from isdkit.errors import InvalidConfigError, InvalidInputError
from isdkit.prob import RngStream


class UsageError(Exception):
    pass


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _emit(text: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_decode(args: argparse.Namespace) -> int:
    cfg = StrideConfig(
        stride=args.stride,
        tau=args.tau,
        proposal_mode=args.proposal_mode,
        max_new_tokens=args.max_new_tokens,
        stop_tokens=frozenset(args.stop_tokens),
        seed=args.seed,
    )
    anchor = models.load_model(args.model)
    if args.proposal == "mirror":
        source = models.ProposalSource.mirror()
    elif args.proposal == "mixture":
        source = models.ProposalSource.mixture(args.epsilon)
    else:
        if args.proposal_model is None:
            raise UsageError("--proposal independent needs --proposal-model")
        source = models.ProposalSource.independent(models.load_model(args.proposal_model))
    trace = decode(anchor, source, args.prompt, cfg)
    text = trace.to_jsonl()
    Path(args.out).write_text(text)
    summary = trace.summary()
    keys = ("forwards", "committed_tokens", "output_tokens", "tpf", "oh_variable", "oh_fixed", "mean_acceptance", "alpha")
    print(" ".join(f"{k}={summary[k]:.6g}" if isinstance(summary[k], float) else f"{k}={summary[k]}"
                   for k in keys if k in summary))
    return 0


def cmd_analytics(args: argparse.Namespace) -> int:
    if args.break_even:
        root = analytics.break_even_acceptance(args.method, args.N)
        _emit("no-crossing\n" if root is None else f"{root:.6f}\n", args.out)
        return 0
    if args.grid is not None:
        grid = args.grid
    else:
        if args.points < 2:
            raise UsageError("--points must be >= 2")
        grid = np.linspace(0.0, 1.0, args.points).tolist()
    rows = analytics.curve_sweep(args.method, args.N, grid).rows()
    _emit(analytics.write_sweep_csv(rows), args.out)
    return 0


def cmd_simulate(args: argparse.Namespace) -> int:
    for p in args.p:
        if not 0.0 <= p <= 1.0:
            raise InvalidInputError(f"p = {p} outside [0, 1]")
    if args.cycles < 1:
        raise InvalidInputError("--cycles must be >= 1")
    rows = []
    # Row order follows the parameter order; stream ids follow the row index.
    for i, (N, p) in enumerate((N, p) for N in args.N for p in args.p):
        res = process_sim.simulate(args.method, N, p, args.cycles, RngStream(args.seed, i))
        rows.append(res.row())
    _emit(analytics.write_sweep_csv(rows), args.out)
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    config = batch_sim.load_config(args.config)
    reports = config.run(args.seed)
    _emit(batch_sim.write_report_csv(reports), args.out)
    return 0


def cmd_mask(args: argparse.Namespace) -> int:
    spec = train_kit.MaskSpec(args.L, args.B, args.variant, allow_ragged=args.allow_ragged)
    _emit(train_kit.mask_to_text(train_kit.build_mask(spec)), args.out)
    return 0


def cmd_model(args: argparse.Namespace) -> int:
    model = models.random_model(args.vocab_size, args.order, args.concentration, RngStream(args.seed))
    _emit(json.dumps(models.model_to_dict(model), indent=1) + "\n", args.out)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="isdkit", description=__doc__.splitlines()[0], allow_abbrev=False)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, func: Callable, help_text: str) -> argparse.ArgumentParser:
        sp = sub.add_parser(name, help=help_text, allow_abbrev=False)
        sp.set_defaults(func=func)
        return sp

    d = add("decode", cmd_decode, "strided decoding over a tabular model; writes a JSON-lines trace")
    d.add_argument("--model", required=True, help="anchor model JSON")
    d.add_argument("--prompt", type=_int_list, required=True, help="comma-separated prompt tokens")
    d.add_argument("--out", required=True, help="trace output path (JSON lines)")
    d.add_argument("--stride", type=int, default=3)
    d.add_argument("--tau", type=float, default=0.0)
    d.add_argument("--proposal-mode", choices=PROPOSAL_MODES, default="sample")
    d.add_argument("--proposal", choices=("mirror", "mixture", "independent"), default="mirror")
    d.add_argument("--epsilon", type=float, default=0.1, help="uniform weight for --proposal mixture")
    d.add_argument("--proposal-model", help="proposal table JSON for --proposal independent")
    d.add_argument("--max-new-tokens", type=int, default=64)
    d.add_argument("--stop-tokens", type=_int_list, default=[])
    d.add_argument("--seed", type=int, default=0)

    a = add("analytics", cmd_analytics, "closed-form TPF/OH curves or break-even acceptance")
    a.add_argument("--method", choices=analytics.METHODS, required=True)
    a.add_argument("--N", type=int, required=True)
    g = a.add_mutually_exclusive_group()
    g.add_argument("--grid", type=_float_list, help="comma-separated acceptance probabilities")
    g.add_argument("--points", type=int, default=21, help="evenly spaced grid over [0, 1]")
    g.add_argument("--break-even", action="store_true", help="print the efficiency-1 crossing or 'no-crossing'")
    a.add_argument("--out")

    s = add("simulate", cmd_simulate, "Monte Carlo TPF/OH for one paradigm")
    s.add_argument("--method", choices=("isd", "sdar", "tidar"), required=True)
    s.add_argument("--N", type=_int_list, required=True, help="comma-separated strides/block sizes")
    s.add_argument("--p", type=_float_list, required=True, help="comma-separated acceptance probabilities")
    s.add_argument("--cycles", type=int, default=100_000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")

    v = add("serve", cmd_serve, "serving simulation from a JSON config")
    v.add_argument("--config", help="config JSON (default: bundled workload)")
    v.add_argument("--seed", type=int, help="override the config seed")
    v.add_argument("--out")

    m = add("mask", cmd_mask, "training attention mask as a 0/1 bitmap")
    m.add_argument("--variant", choices=train_kit.VARIANTS, required=True)
    m.add_argument("--L", type=int, required=True)
    m.add_argument("--B", type=int, required=True)
    m.add_argument("--allow-ragged", action="store_true")
    m.add_argument("--out")

    r = add("model", cmd_model, "random dense tabular model as JSON")
    r.add_argument("--vocab-size", type=int, required=True)
    r.add_argument("--order", type=int, default=1)
    r.add_argument("--concentration", type=float, default=1.0)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"isdkit {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (InvalidInputError, InvalidConfigError, OSError) as exc:
        print(f"isdkit {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
