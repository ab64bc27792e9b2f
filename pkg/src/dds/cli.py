"""Command-line entry point.

Subcommands mirror the pipeline stages: gen-data, train-skills, relabel,
train-hl, eval, replay-skill, sweep.  A JSON config file supplies
defaults; repeated --set key=value flags override it (flags win).  The
DDS_SEED environment variable overrides the config seed; an explicit
--seed flag overrides both.  All artifact paths are relative to --out-dir.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric fault.
"""

from __future__ import annotations

import argparse
import os
import sys

from . import pipeline
from .checkpoint import CheckpointError
from .config import ConfigError, load_config
from .datastore import DataFormatError
from .tensor import NumericFault

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _int_list(text):
    try:
        return [int(x) for x in text.split(",") if x.strip() != ""]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="dds",
        description="Discrete diffusion skills: offline hierarchical RL pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out-dir", default=".", help="artifact directory (default: cwd)")
        p.add_argument("--seed", type=int, help="overrides config and DDS_SEED")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted config override, e.g. iql.tau=0.9")
        p.add_argument("--quiet", action="store_true", help="suppress progress lines")

    p = sub.add_parser("gen-data", help="generate the scripted offline dataset")
    common(p)
    p.add_argument("--episodes", type=int, help="number of episodes")

    p = sub.add_parser("train-skills", help="train encoder, codebook, and decoder")
    common(p)

    p = sub.add_parser("relabel", help="build the skill-level dataset D^H")
    common(p)

    p = sub.add_parser("train-hl", help="train the high-level skill policy")
    common(p)

    p = sub.add_parser("eval", help="evaluate the hierarchical policy")
    common(p)
    p.add_argument("--selection", choices=["greedy", "sample"],
                   help="skill selection at the decision points")
    p.add_argument("--episodes", type=int, help="episodes per seed")
    p.add_argument("--seeds", type=_int_list, help="comma-separated seed list")

    p = sub.add_parser("replay-skill", help="roll fixed-skill episodes")
    common(p)
    p.add_argument("--skill", type=int, help="single skill index (default: all)")
    p.add_argument("--repeats", type=int, default=3, help="episodes per (skill, start)")

    p = sub.add_parser("sweep", help="grid over K and D_z (and optionally H)")
    common(p)
    p.add_argument("--skills", type=_int_list, help="K grid, e.g. 4,8,16")
    p.add_argument("--skill-dims", type=_int_list, help="D_z grid, e.g. 64,128")
    p.add_argument("--horizons", type=_int_list, help="H grid for the horizon curve")

    return parser


def _config_from_args(args):
    config = load_config(args.config, overrides=args.set)
    if args.seed is not None:
        config["seed"] = args.seed
    if args.command == "gen-data" and args.episodes is not None:
        config["num_episodes"] = args.episodes
    if args.command == "eval":
        ev = dict(config["eval"])
        if args.selection is not None:
            ev["selection"] = args.selection
        if args.episodes is not None:
            ev["episodes"] = args.episodes
        if args.seeds is not None:
            ev["seeds"] = args.seeds
        config["eval"] = ev
    if args.command == "sweep":
        sweep = dict(config.get("sweep", {}))
        if args.skills is not None:
            sweep["num_skills"] = args.skills
        if args.skill_dims is not None:
            sweep["skill_dims"] = args.skill_dims
        if args.horizons is not None:
            sweep["horizons"] = args.horizons
        config["sweep"] = sweep
    return config


def run_command(args):
    config = _config_from_args(args)
    out_dir = args.out_dir
    os.makedirs(out_dir, exist_ok=True)
    quiet = args.quiet

    if args.command == "gen-data":
        path = pipeline.stage_gen_data(config, out_dir)
        print(f"wrote {path} ({config['num_episodes']} episodes, seed {config['seed']})")
    elif args.command == "train-skills":
        path = pipeline.stage_train_skills(config, out_dir, log_quiet=quiet)
        print(f"wrote {path}")
    elif args.command == "relabel":
        path = pipeline.stage_relabel(config, out_dir)
        print(f"wrote {path}")
    elif args.command == "train-hl":
        path = pipeline.stage_train_hl(config, out_dir, log_quiet=quiet)
        print(f"wrote {path}")
    elif args.command == "eval":
        summary = pipeline.stage_eval(config, out_dir, log_quiet=quiet)
        print(f"success {summary['success_mean']:.3f} +- {summary['success_std']:.3f} "
              f"over {len(summary['per_seed_success'])} seeds")
    elif args.command == "replay-skill":
        skills = None if args.skill is None else [args.skill]
        pipeline.stage_replay_skill(config, out_dir, skills=skills, repeats=args.repeats)
        print(f"wrote {os.path.join(out_dir, pipeline.REPLAY_ENDPOINTS)}")
    elif args.command == "sweep":
        pipeline.stage_sweep(config, out_dir, log_quiet=quiet)
        print(f"wrote {os.path.join(out_dir, pipeline.SWEEP_RESULTS)}")
    else:   # unreachable with required=True
        raise ConfigError(f"unknown command {args.command!r}")
    return EXIT_OK


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return run_command(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, CheckpointError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as e:
        print(f"data error: missing file {e.filename or e}", file=sys.stderr)
        return EXIT_DATA
    except NumericFault as e:
        print(f"numeric fault: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
