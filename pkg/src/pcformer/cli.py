"""Command-line entry point: ``pcformer <subcommand> ...``.

Exit codes: 0 success, 2 usage error, 3 numeric failure, 4 validation failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .counts import PAPER_HEAD_WIDTHS, head_param_count
from .state import StateError, load_trajectory, save_trajectory
from .toy_data import SCENARIOS, read_manifest, write_dataset

# torch-backed modules are imported inside the subcommands that need them,
# so light commands (count-params --paper-head, --help) start quickly

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_VALIDATION = 0, 2, 3, 4

log = logging.getLogger("pcformer")


class CommandError(Exception):
    """Failure with a module/operation tag and an exit code."""

    def __init__(self, where: str, message: str, code: int = EXIT_VALIDATION):
        super().__init__(f"{where}: {message}")
        self.code = code


# -- checkpoints -------------------------------------------------------------

def config_sidecar(ckpt) -> Path:
    return Path(str(ckpt) + ".config")


def save_model(model, path) -> None:
    from .config import dump_config
    from .substrate import ParamStore
    ParamStore(model).save(path)
    config_sidecar(path).write_text(dump_config(model.cfg))


def load_model(path):
    from .config import load_config
    from .model import Corrector
    from .substrate import ParamStore
    side = config_sidecar(path)
    if not side.exists():
        raise CommandError("checkpoint.load", f"missing config sidecar {side}")
    cfg, _ = load_config(side)
    model = Corrector(cfg)
    ParamStore(model).load_file(path)
    return model


# -- subcommands -------------------------------------------------------------

def cmd_generate(args):
    kw = {}
    if args.particles is not None:
        kw["particles"] = args.particles
    if args.frames is not None:
        kw["frames"] = args.frames
    manifest = write_dataset(args.out, args.scenario, args.count, args.seed, workers=args.threads, **kw)
    print(f"wrote {args.count} trajectories, manifest {manifest}")


def _read_configs(args):
    from .config import load_config
    from .model import ModelConfig
    from .training import TrainConfig
    if args.config is None:
        return ModelConfig(), TrainConfig()
    return load_config(args.config)


def cmd_train(args):
    from .config import dump_config
    from .model import Corrector
    from .training import attribute_stats, train
    mcfg, tcfg = _read_configs(args)
    if args.seed is not None:
        tcfg.seed = args.seed
    if args.dump_config:
        sys.stdout.write(dump_config(mcfg, tcfg))
        return
    splits = read_manifest(args.data)
    train_set = [load_trajectory(p) for p in splits["train"]]
    val_set = [load_trajectory(p) for p in splits["val"]]
    if not train_set:
        raise CommandError("train.data", f"no training trajectories listed in {args.data}")
    if not mcfg.attr_shift and not mcfg.attr_scale:
        shift, scale = attribute_stats(train_set)
        mcfg = dataclasses.replace(mcfg, attr_shift=shift, attr_scale=scale)
    model = Corrector(mcfg)
    result = train(model, train_set, tcfg, val_set or None,
                   progress=lambda e, s, tr, va: log.info("epoch %d step %d train %.4e val %.4e", e, s, tr, va),
                   workers=args.threads)
    save_model(model, args.out)
    curve = args.curve or str(args.out) + ".csv"
    result.write_csv(curve)
    print(f"best_step = {result.best_step}")
    print(f"best_val = {result.best_val:.9g}")


def cmd_rollout(args):
    from .simulator import rollout
    model = load_model(args.ckpt)
    init = load_trajectory(args.init)
    if args.steps < 2:
        raise CommandError("rollout.args", "--steps must be >= 2")
    # forces for the W-1 steps come from the initial trajectory, the last frame held if it is shorter
    idx = np.minimum(np.arange(args.steps - 1), init.frame_count - 1)
    forces = init.forces[idx]
    t0 = time.perf_counter()
    pred = rollout(init.frame(0), forces, init.topology, init.boundary, init.dt, args.steps, model)
    seconds = time.perf_counter() - t0
    out = type(pred)(init.dt, np.concatenate([init.positions[:1], pred.positions]),
                     np.concatenate([init.velocities[:1], pred.velocities]),
                     np.concatenate([init.forces[:1], pred.forces]), init.attributes, init.boundary,
                     init.topology, init.rest_positions)
    save_trajectory(out, args.out)
    Path(str(args.out) + ".timing").write_text(f"seconds = {seconds:.9g}\nsteps = {args.steps - 1}\n")
    print(f"wrote {out.frame_count} frames ({args.steps - 1} predicted) in {seconds:.3f}s")


def _timing(pred_path):
    side = Path(str(pred_path) + ".timing")
    if not side.exists():
        return None
    vals = dict(line.split(" = ") for line in side.read_text().splitlines() if " = " in line)
    return float(vals["seconds"])


def cmd_eval(args):
    from .losses import eval_metrics, write_report
    pred, ref = load_trajectory(args.pred), load_trajectory(args.ref)
    if ref.frame_count < pred.frame_count:
        raise CommandError("eval.align", f"reference has {ref.frame_count} frames, prediction {pred.frame_count}")
    if pred.count != ref.count:
        raise CommandError("eval.align", f"particle counts differ: {pred.count} vs {ref.count}")
    ref = ref.window(0, pred.frame_count)
    # frame 0 is the shared initial condition; score predicted frames only
    if not args.include_initial and pred.frame_count > 1:
        pred, ref = pred.window(1, pred.frame_count - 1), ref.window(1, ref.frame_count - 1)
    report = eval_metrics(pred, ref, _timing(args.pred))
    sys.stdout.write(write_report(report, args.out))


def cmd_gradcheck(args):
    from .checks import run_suite
    from .config import load_config
    mcfg = load_config(args.config)[0] if args.config else None
    modules = [args.module] if args.module else None
    reports = run_suite(modules, max_entries=args.max_entries, tol=args.tol, model_cfg=mcfg)
    if not reports:
        raise CommandError("gradcheck", f"no checks match module {args.module!r}", EXIT_USAGE)
    failed = []
    for name, rep in reports.items():
        for line in rep.lines():
            print(f"{name}.{line}")
        if not rep.passed:
            failed.append(name)
    if failed:
        raise CommandError("gradcheck", "failed: " + ", ".join(failed))
    print(f"all {len(reports)} checks passed")


def cmd_count_params(args):
    if args.paper_head:
        print(head_param_count(PAPER_HEAD_WIDTHS))
        return
    from .config import dump_config, load_config
    from .model import Corrector, ModelConfig, count_params
    mcfg = load_config(args.config)[0] if args.config else ModelConfig()
    if args.dump_config:
        sys.stdout.write(dump_config(mcfg))
        return
    counts = count_params(mcfg)
    built = sum(p.numel() for p in Corrector(mcfg).parameters())
    if built != counts["total"]:
        raise CommandError("count-params", f"analytic total {counts['total']} != instantiated {built}")
    for k, v in counts.items():
        print(f"{k} = {v}")


def cmd_inverse_design(args):
    from .training import inverse_design
    model = load_model(args.ckpt)
    scene = load_trajectory(args.scene)
    res = inverse_design(model, scene, args.target, args.mu0, args.iters, channel=args.channel,
                         steps=args.steps, lo=args.lo, hi=args.hi, lr=args.lr, body_z_max=args.body_z_max)
    curve = args.curve or str(args.scene) + ".inverse.csv"
    res.write_csv(curve)
    print(f"mu = {res.mu:.9g}")
    print(f"final_objective = {res.losses[-1]:.9g}" if res.losses else "final_objective = nan")


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pcformer", description="Prediction-correction particle simulator")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("--threads", type=int, default=1,
                    help="worker threads for independent sequences and windows (results do not change)")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a toy dataset plus manifest")
    g.add_argument("--scenario", choices=sorted(SCENARIOS), required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int, default=10)
    g.add_argument("--particles", type=int, default=None)
    g.add_argument("--frames", type=int, default=None)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a corrector on a dataset directory")
    t.add_argument("--data")
    t.add_argument("--config")
    t.add_argument("--out")
    t.add_argument("--curve", help="CSV path for the loss curve (default: <out>.csv)")
    t.add_argument("--seed", type=int, default=None, help="override the config seed")
    t.add_argument("--dump-config", action="store_true", help="print the parsed config and exit")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("rollout", help="roll a checkpoint forward from frame 0 of a trajectory")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--init", required=True)
    r.add_argument("--steps", type=int, required=True, help="window W; W-1 steps are predicted")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_rollout)

    e = sub.add_parser("eval", help="compare a predicted trajectory with a reference")
    e.add_argument("--pred", required=True)
    e.add_argument("--ref", required=True)
    e.add_argument("--out", help="also write the report here")
    e.add_argument("--include-initial", action="store_true", help="score frame 0 as well")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    c.add_argument("--config")
    c.add_argument("--module", help="prefix: substrate, attention, tokenizer, encoder, corrector, rollout")
    c.add_argument("--max-entries", type=int, default=6)
    c.add_argument("--tol", type=float, default=1e-4)
    c.set_defaults(func=cmd_gradcheck)

    n = sub.add_parser("count-params", help="per-module parameter counts")
    n.add_argument("--config")
    n.add_argument("--paper-head", action="store_true", help="print the 1152-512x4-6 head count")
    n.add_argument("--dump-config", action="store_true")
    n.set_defaults(func=cmd_count_params)

    i = sub.add_parser("inverse-design", help="recover an attribute from a target terminal position")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--scene", required=True)
    i.add_argument("--target", type=float, required=True)
    i.add_argument("--mu0", type=float, required=True)
    i.add_argument("--iters", type=int, required=True)
    i.add_argument("--channel", type=int, default=1)
    i.add_argument("--steps", type=int, default=None)
    i.add_argument("--lo", type=float, default=0.1)
    i.add_argument("--hi", type=float, default=0.5)
    i.add_argument("--lr", type=float, default=1.0)
    i.add_argument("--body-z-max", type=float, default=0.2)
    i.add_argument("--curve")
    i.set_defaults(func=cmd_inverse_design)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        ap.error("--threads must be >= 1")
    if args.command == "train" and not args.dump_config and not (args.data and args.out):
        ap.error("train requires --data and --out")
    if args.command == "count-params" and args.paper_head:
        return _run(args, ())
    import torch

    from .config import ConfigError
    from .simulator import RolloutDivergence
    from .substrate import OpError
    from .training import TrainingDivergence
    # numerics always run with one intra-op thread: torch splits reductions by
    # thread count, which would make results depend on --threads
    torch.set_num_threads(1)
    return _run(args, (RolloutDivergence, TrainingDivergence), (ConfigError, OpError))


def _run(args, numeric, invalid=()) -> int:
    try:
        args.func(args)
    except CommandError as err:
        print(f"pcformer {args.command}: {err}", file=sys.stderr)
        return err.code
    except (*numeric, FloatingPointError) as err:
        print(f"pcformer {args.command}: {type(err).__module__}.{type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (*invalid, StateError, ValueError, OSError) as err:
        print(f"pcformer {args.command}: {type(err).__module__}.{type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
