"""Command-line entry point.

Exit codes: 0 success, 1 domain error (bad file, failed check, divergence),
2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import difflib
import os
import sys
from dataclasses import fields

from .harness.config import FIELD_TYPES, ConfigError, RunConfig, parse_value
from .harness.io import CheckpointError, SceneFormatError

_ALIASES = {"agents": "n_agents"}


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    """Raises instead of exiting, and suggests the closest known flag."""

    def error(self, message):
        if "unrecognized arguments" in message:
            known = _flags(self)
            for tok in message.split(":", 1)[1].split():
                flag = tok.split("=", 1)[0]
                close = difflib.get_close_matches(flag, known, n=1)
                if close:
                    message += f" (did you mean {close[0]}?)"
                    break
        raise UsageError(f"{self.prog}: {message}")


def _flags(parser):
    out = []
    for a in parser._actions:
        out += a.option_strings
        if isinstance(a, argparse._SubParsersAction):
            for sub in a.choices.values():
                out += _flags(sub)
    return sorted(set(out))


def _add_config_flags(p):
    g = p.add_argument_group("config overrides")
    g.add_argument("--config", help="key = value file applied before flags")
    for f in fields(RunConfig):
        names = [f"--{f.name}"] + [f"--{a}" for a, t in _ALIASES.items() if t == f.name]
        g.add_argument(*names, dest=f.name, default=None, metavar=FIELD_TYPES[f.name].__name__.upper())


def _config(args):
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    kw = {f.name: parse_value(f.name, getattr(args, f.name))
          for f in fields(RunConfig) if getattr(args, f.name, None) is not None}
    return cfg.replace(**kw) if kw else cfg


def build_parser():
    p = Parser(prog="psfcast", description="Panoptic segmentation forecasting toolkit")
    sub = p.add_subparsers(dest="cmd", parser_class=Parser)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    g.add_argument("--seed", type=int, default=0, help="first seed")
    g.add_argument("--seeds", type=int, default=10, help="number of seeds")

    g = sub.add_parser("gen", help="generate synthetic scene files")
    g.add_argument("--out", required=True, help="scene file, or directory with --count > 1")
    g.add_argument("--count", type=int, default=1)
    _add_config_flags(g)

    g = sub.add_parser("train", help="two-stage training")
    g.add_argument("--scenes", nargs="+", required=True)
    g.add_argument("--out", required=True, help="directory for checkpoint.txt and loss_log.csv")
    _add_config_flags(g)

    g = sub.add_parser("forecast", help="forecast a scene and render outputs")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--scene", required=True)
    g.add_argument("--out", required=True)

    g = sub.add_parser("eval", help="PQ / PQID between two panoptic maps")
    g.add_argument("--pred", required=True, help="panoptic.json or scene file")
    g.add_argument("--target", required=True, help="panoptic.json or scene file")
    g.add_argument("--out", help="CSV report path")
    g.add_argument("--pq_threshold", type=float, default=0.5)
    g.add_argument("--pq_strict", action="store_true", help="require IoU > threshold")

    g = sub.add_parser("reproject", help="render reprojected background maps")
    g.add_argument("--scene", required=True)
    g.add_argument("--out", required=True)
    return p


# ----------------------------------------------------------------------------


def cmd_gradcheck(args, out):
    from .harness.gradcheck import run_suite, summarize
    results, secs = run_suite(range(args.seed, args.seed + args.seeds))
    worst = summarize(results)
    for name, r in worst.items():
        print(f"{'PASS' if r.passed else 'FAIL'} {name}: worst rel error {r.error:.3e} "
              f"(seed {r.seed}, tol {r.tol:.0e})", file=out)
    top = max(results, key=lambda r: r.error / r.tol)
    print(f"worst relative error {top.error:.3e} ({top.name}); {len(results)} checks in {secs:.1f} s", file=out)
    return 0 if all(r.passed for r in results) else 1


def cmd_gen(args, out):
    from .harness.experiment import make_scene
    from .harness.io import save_scene
    cfg = _config(args)
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    if args.count == 1:
        os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
        save_scene(make_scene(cfg.seed, cfg), args.out)
        print(args.out, file=out)
        return 0
    os.makedirs(args.out, exist_ok=True)
    for i in range(args.count):
        path = os.path.join(args.out, f"scene_{i:03d}.json")
        save_scene(make_scene(cfg.seed + i, cfg), path)
        print(path, file=out)
    return 0


def cmd_train(args, out):
    from .harness.io import load_scene
    from .harness.train import train
    cfg = _config(args)
    scenes = [load_scene(p) for p in args.scenes]
    res = train(cfg, scenes, out_dir=args.out)
    last = {row[0]: row for row in res.log}
    for stage, row in sorted(last.items()):
        print(f"stage {stage}: {row[1] + 1} steps, final row {row[3:]}", file=out)
    print(os.path.join(args.out, "checkpoint.txt"), file=out)
    return 0


def cmd_forecast(args, out):
    from .harness.io import load_scene
    from .harness.render import forecast_and_render
    pred = forecast_and_render(args.checkpoint, load_scene(args.scene), args.out)
    print(f"{len(pred.agents)} agents forecast, {len(pred.kept)} kept; outputs in {args.out}", file=out)
    return 0


def cmd_eval(args, out):
    from .harness.render import load_panoptic
    from .metrics import CSV_HEADER, evaluate, report_rows, write_csv
    pred, things_p = load_panoptic(args.pred)
    target, things_t = load_panoptic(args.target)
    things = things_t or things_p
    plain, ident = evaluate(pred, target, things, args.pq_threshold, args.pq_strict)
    w = csv.writer(out)
    w.writerow(CSV_HEADER)
    for row in report_rows(plain, ident):
        w.writerow([f"{v:.6f}" if isinstance(v, float) else v for v in row])
    if args.out:
        write_csv(args.out, plain, ident)
    return 0


def cmd_reproject(args, out):
    from .harness.io import load_scene
    from .harness.render import render_reprojection
    rep = render_reprojection(load_scene(args.scene), args.out)
    print(f"coverage {rep.Q.mean():.3f}; outputs in {args.out}", file=out)
    return 0


COMMANDS = {"gradcheck": cmd_gradcheck, "gen": cmd_gen, "train": cmd_train, "forecast": cmd_forecast,
            "eval": cmd_eval, "reproject": cmd_reproject}


def main(argv=None, out=None, err=None):
    out = out or sys.stdout
    err = err or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.cmd is None:
            raise UsageError("psfcast: a subcommand is required (" + ", ".join(COMMANDS) + ")")
        return COMMANDS[args.cmd](args, out)
    except UsageError as e:
        print(f"usage error: {e}", file=err)
        return 2
    except ConfigError as e:
        print(f"config error: {e}", file=err)
        return 2
    except (SceneFormatError, CheckpointError, OSError, ValueError, RuntimeError) as e:
        print(f"error: {e}", file=err)
        return 1


def run():
    sys.exit(main())


if __name__ == "__main__":
    run()
