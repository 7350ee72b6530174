"""Command line entry point: ``fedclust run|theory|ablate|list-presets``."""
from __future__ import annotations

import argparse
import json
import sys

from .fedsim import DivergenceError
from .harness import (ConfigError, builtin_presets, builtin_theory_presets, get_preset, parse_config,
                      parse_theory_config, run_ablation, run_preset, run_theory)

EXIT_CONFIG = 1
EXIT_DIVERGED = 2


def _experiment(args):
    if args.config:
        return parse_config(args.config)
    return get_preset(args.preset)


def cmd_run(args) -> int:
    preset = _experiment(args)
    if args.repeat is not None:
        preset.repeat = args.repeat
    result = run_preset(preset, args.out)
    for r in result.runs:
        print(f"run {r.index} seed {r.seed}: best_val={r.best_val:.4f} best_test={r.best_test:.4f} K={r.final_k}")
    mean, std = result.aggregate["best_test"]
    print(f"{preset.name}: best_test {mean:.4f} ± {std:.4f} over {preset.repeat} run(s)")
    return 0


def cmd_ablate(args) -> int:
    preset = _experiment(args)
    results = run_ablation(preset, args.metric, args.out)
    for label, res in results.items():
        mean, std = res.aggregate["best_test"]
        k_mean, _ = res.aggregate["final_k"]
        print(f"{label:18s} best_test {mean:.4f} ± {std:.4f}  K {k_mean:.2f}")
    return 0


def cmd_theory(args) -> int:
    if args.config:
        spec = parse_theory_config(args.config)
    else:
        presets = builtin_theory_presets()
        if args.preset not in presets:
            raise ConfigError(f"unknown theory preset {args.preset!r}; available: {', '.join(sorted(presets))}")
        spec = presets[args.preset]
    summary = run_theory(spec, args.out)
    print(json.dumps({k: summary[k] for k in ("fitted_rate", "bound_factor", "passed", "final_dist") if k in summary},
                     indent=2))
    return 0


def cmd_list(args) -> int:
    for name, p in sorted(builtin_presets().items()):
        s = p.scenario
        print(f"{name:18s} M={s.num_clients} C={s.num_classes} concepts={s.concept_count} "
              f"metric={p.run.metric} rho={p.run.rho} repeat={p.repeat}")
    for name, spec in sorted(builtin_theory_presets().items()):
        print(f"{name:18s} d={spec.d} c={spec.c} K={spec.K} M={spec.num_clients} sigma={spec.sigma}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedclust")
    sub = parser.add_subparsers(dest="command", required=True)

    def source(p, default):
        g = p.add_mutually_exclusive_group()
        g.add_argument("--config", help="YAML config file")
        g.add_argument("--preset", default=default, help="built-in preset name")
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("run", help="run an experiment")
    source(p, "quickstart")
    p.add_argument("--repeat", type=int)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="sweep the distance-metric ablations")
    source(p, "quickstart")
    p.add_argument("--metric", choices=("ascp", "cscp"))
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("theory", help="run the linear convergence testbed")
    source(p, "theory-balanced")
    p.set_defaults(func=cmd_theory)

    p = sub.add_parser("list-presets", help="list built-in presets")
    p.set_defaults(func=cmd_list)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
