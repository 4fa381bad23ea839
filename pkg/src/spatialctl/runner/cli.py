"""Command line entry point: ``spatialctl {train,gen,prep,analyze,ablate}``.

Exit codes: 0 success, 1 user error (bad arguments, config or input files),
2 internal failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Sequence

log = logging.getLogger("spatialctl")

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2
EVAL_DATA_SEED = 777


class UserError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USER, f"{self.prog}: error: {message}\n")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", default="paper-default", help="named preset (paper-default, synchronous, disabled)")
    p.add_argument("--config", type=Path, help="INI file layered over the preset")
    p.add_argument("--set", dest="settings", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value; repeatable")
    p.add_argument("--seed", type=int, help="shorthand for --set run.seed=N")
    p.add_argument("--weights", type=Path, help="denoiser weights (default: cached standard model)")


def _config(args):
    from .config import load_config

    settings = list(args.settings)
    if getattr(args, "seed", None) is not None:
        settings.append(f"run.seed={args.seed}")
    if getattr(args, "weights", None) is not None:
        settings.append(f"run.weights={args.weights}")
    return load_config(args.preset, args.config, settings)


def _denoiser(cfg):
    from .models import load_denoiser

    return load_denoiser(cfg.run.weights)


def _eval_pairs(n: int, size: int, kinds: Sequence[str], seed: int):
    from ..denoiser import generate_dataset

    return generate_dataset(n, size, seed=seed, kinds=tuple(kinds))


def cmd_train(args) -> int:
    from .models import Recipe, train_recipe, weights_path

    recipe = Recipe(scenes=args.scenes, epochs=args.epochs, data_seed=args.data_seed,
                    seed=args.seed if args.seed is not None else 0)
    out = args.out or weights_path(recipe)
    weights = train_recipe(recipe)
    weights.save(Path(out))
    history = weights.meta["loss_history"]
    print(json.dumps({"weights": str(out), "recipe": asdict(recipe), "final_loss": history[-1]}))
    return EXIT_OK


def cmd_gen(args) -> int:
    from .generate import generate

    cfg = _config(args)
    if args.cond is not None and not args.cond.is_file():
        raise UserError(f"condition image {args.cond} does not exist")
    record = generate(args.cond, args.prompt, cfg, args.out, _denoiser(cfg))
    print(json.dumps({"prompt_app": record.prompt_app, "calls": record.calls, "cache": record.cache,
                      "images": record.images, "metrics": record.metrics}))
    return EXIT_OK


def cmd_prep(args) -> int:
    from .. import condprep
    from ..denoiser.dataset import load_png, save_png

    if not args.input.is_file():
        raise UserError(f"input image {args.input} does not exist")
    cfg = _config(args).condprep.prep
    result = condprep.prepare(load_png(args.input), cfg)
    save_png(args.output, result.image)
    print(json.dumps(result.metadata(cfg)))
    return EXIT_OK


def cmd_analyze(args) -> int:
    from .. import analysis

    cfg = _config(args)
    pairs = _eval_pairs(args.pairs, cfg.run.size, args.kinds, args.data_seed)
    grid = analysis.default_grid(args.points, cfg.schedule.build())
    curve = analysis.gap_curves(pairs, _denoiser(cfg), grid, layer=args.layer, seed=cfg.run.seed,
                                schedule=cfg.schedule.build())
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "gaps.csv").write_text(curve.to_csv())
    (args.out / "summary.json").write_text(json.dumps(curve.summary(), indent=2))
    print(json.dumps(curve.summary()["spearman"]))
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .ablate import AXES, ablate

    if args.axis not in AXES:
        raise UserError(f"unknown axis {args.axis!r}; expected one of {AXES}")
    cfg = _config(args)
    pairs = _eval_pairs(args.pairs, cfg.run.size, (args.kind,), args.data_seed)
    report = ablate(args.axis, args.grid, pairs, cfg, _denoiser(cfg))
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / f"{args.axis}.csv").write_text(report.to_csv())
    (args.out / f"{args.axis}.json").write_text(report.to_json())
    sys.stdout.write(report.to_csv())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="spatialctl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train the toy denoiser")
    p.add_argument("--scenes", type=int, default=2048)
    p.add_argument("--epochs", type=int, default=14)
    p.add_argument("--data-seed", type=int, default=1)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, help="weights file (default: the cache path for this recipe)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gen", help="generate one controlled image")
    p.add_argument("--cond", type=Path, help="condition image (PNG, run.size square); omit for no control")
    p.add_argument("--prompt", required=True)
    p.add_argument("--out", type=Path, help="run directory (default: under run.output_dir)")
    _add_config_flags(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("prep", help="preprocess a condition image")
    p.add_argument("input", type=Path)
    p.add_argument("output", type=Path)
    _add_config_flags(p)
    p.set_defaults(func=cmd_prep)

    p = sub.add_parser("analyze", help="domain-gap curves over a timestep grid")
    p.add_argument("--pairs", type=int, default=60, help="number of generated scenes")
    p.add_argument("--kinds", nargs="+", default=["edge", "silhouette", "mask"])
    p.add_argument("--points", type=int, default=10)
    p.add_argument("--layer", default="dec1")
    p.add_argument("--data-seed", type=int, default=EVAL_DATA_SEED)
    p.add_argument("--out", type=Path, default=Path("analysis"))
    _add_config_flags(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("ablate", help="paired-seed ablation over one axis")
    p.add_argument("axis", help="injection_C, restart_on_off or arp_on_off")
    p.add_argument("--grid", type=int, nargs="+", default=[0, 200, 400, 600, 800],
                   help="structure-branch timesteps (injection_C only; 0 is the clean condition)")
    p.add_argument("--pairs", type=int, default=10)
    p.add_argument("--kind", default="edge")
    p.add_argument("--data-seed", type=int, default=EVAL_DATA_SEED)
    p.add_argument("--out", type=Path, default=Path("ablations"))
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    from ..arp import LlmError
    from ..restart import RestartConfigError
    from .config import ConfigError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UserError, ConfigError, RestartConfigError, LlmError, FileNotFoundError) as exc:
        print(f"spatialctl: error: {exc}", file=sys.stderr)
        return EXIT_USER
    except Exception:
        log.exception("internal error")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
