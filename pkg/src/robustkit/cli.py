"""Command-line entry points: train, eval, attack, surface, export, params.

Exit codes: 0 on success, 1 on configuration/usage errors, 2 on runtime
errors.  All output files are deterministic functions of (argv, input files,
seeds).
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

import numpy as np

from .attacks import parse_attack, perturb
from .checkpoint import load_checkpoint
from .config import load_config
from .data import parse_dataset_spec
from .errors import ConfigError, ParseError, RobustkitError, UsageError, ValidationError
from .evaluation import export_large_eps, loss_surface, robust_accuracy
from .images import write_image
from .models import build_wrn, parse_arch
from .training import train

_CONFIG_ERRORS = (ConfigError, UsageError, ValidationError, ParseError)


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems via exceptions, not sys.exit."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _build_parser() -> _Parser:
    p = _Parser(prog="robustkit", description=__doc__)
    sub = p.add_subparsers(dest="command", metavar="COMMAND")

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("--config", required=True, help="experiment config path (key = value lines)")
    t.add_argument("--init", default=None, help="checkpoint to initialize parameters from")
    t.add_argument("--out", default=".", help="output directory for checkpoints and the report CSV")

    e = sub.add_parser("eval", help="natural + robust accuracy of a checkpointed model")
    e.add_argument("--model", required=True, help="checkpoint path")
    e.add_argument("--data", required=True, help="dataset spec (synth:.../idx:.../cifar10:...)")
    e.add_argument("--attack", required=True, help="attack spec, e.g. pgd:k=20,eps=8,step=2")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", default=None, help="write the report CSV here (default: stdout only)")

    a = sub.add_parser("attack", help="generate adversarial examples and dump them as images")
    a.add_argument("--model", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--spec", required=True, help="attack spec string")
    a.add_argument("--n", type=int, default=16, help="number of samples to perturb")
    a.add_argument("--out", required=True, help="output directory")
    a.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("surface", help="loss-surface grid around one validation sample")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--index", type=int, required=True, help="sample index")
    s.add_argument("--extent", type=float, default=8.0, help="grid half-width in pixel levels")
    s.add_argument("--res", type=int, default=51, help="odd grid resolution")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default=None, help="write the grid CSV here (default: stdout)")

    x = sub.add_parser("export", help="large-perturbation adversarial images (PGD-50, eps=30)")
    x.add_argument("--model", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--eps", type=float, default=30.0)
    x.add_argument("--k", type=int, default=50)
    x.add_argument("--n", type=int, default=16)
    x.add_argument("--step", type=float, default=2.0)
    x.add_argument("--seed", type=int, default=0)
    x.add_argument("--out", required=True, help="output directory")

    pa = sub.add_parser("params", help="print the exact trainable parameter count")
    pa.add_argument("--arch", required=True, help="wrn-<depth>-<widen>[-adaptive]")
    pa.add_argument("--classes", type=int, required=True)
    pa.add_argument("--channels", type=int, default=3)
    pa.add_argument("--size", type=int, default=32)
    return p


def _cmd_train(args) -> int:
    import os

    cfg = load_config(args.config)
    tcfg = cfg.train_config()
    if args.init:
        tcfg = replace(tcfg, init_checkpoint=args.init)
    train_ds = cfg.load_train_data()
    val_ds = cfg.load_val_data()
    model = build_wrn(cfg.wrn_spec(), seed=cfg.seed,
                      mean=train_ds.mean, std=train_ds.std)
    os.makedirs(args.out, exist_ok=True)
    _, report = train(model, train_ds, tcfg, val_ds=val_ds, checkpoint_dir=args.out)
    report.write_csv(os.path.join(args.out, "train_report.csv"))
    print(report.to_csv(), end="")
    return 0


def _cmd_eval(args) -> int:
    model, _ = load_checkpoint(args.model)
    dataset = parse_dataset_spec(args.data)
    attack = parse_attack(args.attack)
    report = robust_accuracy(model, dataset, attack, seed=args.seed)
    if args.out:
        report.write_csv(args.out)
    print(report.to_csv(), end="")
    return 0


def _cmd_attack(args) -> int:
    import os

    model, _ = load_checkpoint(args.model)
    dataset = parse_dataset_spec(args.data)
    cfg = parse_attack(args.spec, seed=args.seed)
    n = min(args.n, dataset.n)
    x = dataset.images[:n]
    y = dataset.labels[:n]
    model.eval()
    delta = perturb(model, x, y, cfg, batch_stats=False, indices=np.arange(n)).delta
    os.makedirs(args.out, exist_ok=True)
    ext = "pgm" if dataset.channels == 1 else "ppm"
    adv_pred = model.predict(x + delta)
    clean_pred = model.predict(x)
    with open(os.path.join(args.out, "predictions.csv"), "w") as f:
        f.write("index,true,clean_pred,adv_pred\n")
        for i in range(n):
            write_image(x[i] + delta[i], os.path.join(args.out, f"adv_{i:03d}.{ext}"))
            f.write(f"{i},{int(y[i])},{int(clean_pred[i])},{int(adv_pred[i])}\n")
    print(f"wrote {n} adversarial images to {args.out}")
    return 0


def _cmd_surface(args) -> int:
    model, _ = load_checkpoint(args.model)
    dataset = parse_dataset_spec(args.data)
    if not 0 <= args.index < dataset.n:
        raise ConfigError(f"sample index {args.index} out of range [0, {dataset.n})")
    grid = loss_surface(model, dataset.images[args.index], int(dataset.labels[args.index]),
                        extent=args.extent, resolution=args.res, seed=args.seed)
    if args.out:
        grid.write_csv(args.out)
        print(f"wrote {args.res}x{args.res} grid to {args.out}")
    else:
        print(grid.to_csv(), end="")
    return 0


def _cmd_export(args) -> int:
    model, _ = load_checkpoint(args.model)
    dataset = parse_dataset_spec(args.data)
    table = export_large_eps(model, dataset, args.out, n=args.n, eps=args.eps,
                             k=args.k, step=args.step, seed=args.seed)
    flips = sum(1 for _, _, c, a in table if c != a)
    print(f"exported {len(table)} samples to {args.out}; {flips} predictions changed")
    return 0


def _cmd_params(args) -> int:
    spec = parse_arch(args.arch, args.classes, input_channels=args.channels, input_size=args.size)
    model = build_wrn(spec)
    print(model.param_count())
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "attack": _cmd_attack,
    "surface": _cmd_surface,
    "export": _cmd_export,
    "params": _cmd_params,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage())
        return _COMMANDS[args.command](args)
    except _CONFIG_ERRORS as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except RobustkitError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except OSError as exc:
        print(str(exc), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
