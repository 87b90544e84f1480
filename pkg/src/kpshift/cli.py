"""``kpshift`` command line.

Exit codes: 0 ok, 1 check failure, 2 I/O or format error, 3 configuration error.
``KPSHIFT_THREADS`` overrides ``--threads``.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, format_run_config, load_run_config, parse_run_config
from .errors import ConfigError, DivergenceError, FormatError, ShapeError
from .grad import run_gradcheck
from .partition import SeparationNet
from .head import KpsemParams, check_params, init_params, kpsem_forward
from .synth import CLASSES, SyntheticVideoSpec, generate_dataset
from .tensor import tensor_io_read, tensor_io_write
from .train import TINY_RUN_CONFIG, TrainConfig, save_model, train, write_trace_csv
from .viz import build_scene, write_svg

EXIT_OK, EXIT_CHECK, EXIT_IO, EXIT_CONFIG = 0, 1, 2, 3
SWEEP_PARAMS = ("K", "G", "embed_dim", "position")

log = logging.getLogger("kpshift")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # usage errors are configuration errors (exit 3), not argparse's default 2
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _threads(args):
    env = os.environ.get("KPSHIFT_THREADS")
    if env is not None:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"KPSHIFT_THREADS must be an integer, got {env!r}") from None
    else:
        n = args.threads
    if n < 1:
        raise ConfigError(f"thread count must be >= 1, got {n}")
    return n


def _read_video(path):
    x = tensor_io_read(path)
    if x.ndim != 4:
        raise ShapeError(f"{path}: expected rank 4 (C, T, H, W), got rank {x.ndim}")
    return x


def _run_config(path, fallback):
    return load_run_config(path) if path else fallback


def _load_params(directory):
    """KPSEM parameters and any run config saved alongside them.

    Accepts both a bare parameter checkpoint and a trained model checkpoint
    (whose KPSEM tensors carry a ``kpsem.`` prefix).
    """
    tensors, config = load_checkpoint(directory)
    if any(k.startswith("kpsem.") for k in tensors):
        tensors = {k[len("kpsem."):]: v for k, v in tensors.items() if k.startswith("kpsem.")}
    try:
        params = KpsemParams.from_named(tensors)
    except KeyError as exc:
        raise FormatError(f"{directory}: incomplete parameter set ({exc})") from None
    cfg = None
    run_keys = {k: v for k, v in config.items() if not k.startswith("train.")}
    if run_keys:
        text = "".join(f"{k}={v}\n" for k, v in run_keys.items())
        cfg = parse_run_config(text, source=str(Path(directory) / "config.txt"))
    return params, cfg


def _params_for(args, channels, default_cfg):
    if args.params:
        params, saved = _load_params(args.params)
        cfg = _run_config(args.config, saved or default_cfg)
    else:
        cfg = _run_config(args.config, default_cfg)
        params = init_params(channels, cfg, np.random.default_rng(cfg.seed))
    check_params(params, cfg, channels)
    return params, cfg


# --- commands ----------------------------------------------------------------------------

def cmd_forward(args):
    threads = _threads(args)
    x = _read_video(args.input)
    C, T, H, W = x.shape
    params, cfg = _params_for(args, C, RunConfig())
    if args.save_params:
        save_checkpoint(args.save_params, params.named(),
                        dict(line.split("=", 1) for line in format_run_config(cfg).splitlines()))
    t0 = time.perf_counter()
    p = kpsem_forward(x.astype(np.float64), params, cfg, threads=threads)
    dt = time.perf_counter() - t0
    tensor_io_write(p, args.out)
    print(f"input {C}x{T}x{H}x{W} -> temporal feature {p.shape[0]}")
    if not args.no_timing:
        print(f"forward {dt:.4f} s ({threads} thread{'s' if threads > 1 else ''})")
    return EXIT_OK


def cmd_gradcheck(args):
    if args.eps <= 0:
        raise ConfigError(f"--eps must be > 0, got {args.eps}")
    if args.tol < 0:
        raise ConfigError(f"--tol must be >= 0, got {args.tol}")
    report = run_gradcheck(seed=args.seed, mode=args.mode, h=args.eps, tol=args.tol)
    print(report.text(), end="")
    return EXIT_OK if report.passed else EXIT_CHECK


def _dataset(args):
    spec = SyntheticVideoSpec(noise=args.noise)
    return generate_dataset(spec, args.n_train, args.n_test, args.data_seed)


def _train_cfg(args, **overrides):
    kw = dict(lr=args.lr, momentum=args.momentum, weight_decay=args.weight_decay,
              batch_size=args.batch_size, epochs=args.epochs, seed=args.seed,
              mode=args.mode, use_kpsem=not args.no_kpsem, position=args.position)
    kw.update(overrides)
    return TrainConfig(**kw)


def cmd_train(args):
    run_cfg = _run_config(args.config, TINY_RUN_CONFIG)
    tcfg = _train_cfg(args)
    ds = _dataset(args)

    def progress(m):
        per = " ".join(f"{c}={a:.3f}" for c, a in zip(CLASSES, m.per_class))
        print(f"epoch {m.epoch:3d} loss {m.train_loss:.4f} test_acc {m.test_acc:.4f} {per}",
              flush=True)

    model, trace = train(ds, tcfg, run_cfg, progress)
    if args.trace:
        write_trace_csv(args.trace, trace)
    if args.out:
        save_model(model, args.out)
    print(f"final test_acc {trace[-1].test_acc:.4f} params {model.param_count()}")
    return EXIT_OK


def _parse_values(text):
    items = [s.strip() for s in (text or "").split(",") if s.strip()]
    if not items:
        raise UsageError("--values needs at least one value")
    return items


def cmd_sweep(args):
    values = _parse_values(args.values)
    base_run = _run_config(args.config, TINY_RUN_CONFIG)
    ds = _dataset(args)
    rows = []

    def run(label, tcfg, rcfg):
        t0 = time.perf_counter()
        model, trace = train(ds, tcfg, rcfg)
        wall = time.perf_counter() - t0
        wall_text = "" if args.no_timing else f"{wall:.2f}"
        rows.append([args.param, label, f"{trace[-1].test_acc:.4f}", model.param_count(),
                     wall_text, "ok"])
        print(f"{args.param}={label} test_acc {trace[-1].test_acc:.4f}", file=sys.stderr,
              flush=True)

    if args.baseline:
        run("baseline", _train_cfg(args, use_kpsem=False), base_run)
    for raw in values:
        try:
            v = int(raw)
            if args.param == "position":
                tcfg, rcfg = _train_cfg(args, position=v, use_kpsem=True), base_run
            else:
                tcfg, rcfg = _train_cfg(args, use_kpsem=True), base_run.replace(**{args.param: v})
        except (ValueError, ConfigError) as exc:
            msg = str(exc).replace("\n", " ")
            print(f"warning: skipping {args.param}={raw}: {msg}", file=sys.stderr)
            rows.append([args.param, raw, "", "", "", f"skipped: {msg}"])
            continue
        run(raw, tcfg, rcfg)

    out = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["param", "value", "test_acc", "param_count", "wall_time_s", "status"])
        w.writerows(rows)
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def _parse_channels(text):
    try:
        chans = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--channels must be a comma-separated list of integers, got {text!r}")
    if not chans:
        raise ConfigError("--channels is empty")
    return chans


def cmd_viz(args):
    x = _read_video(args.video)
    C = x.shape[0]
    if args.params:
        params, saved = _load_params(args.params)
        cfg = _run_config(args.config, saved or RunConfig())
        nets = params.sep
    else:
        # only the partition is drawn, so a seeded separation net suffices
        cfg = _run_config(args.config, RunConfig())
        rng = np.random.default_rng(cfg.seed)
        nets = [SeparationNet.init(C, rng) for _ in range(cfg.G)]
    if not 0 <= args.set < len(nets):
        raise ConfigError(f"--set {args.set} out of range for G={len(nets)}")
    scene = build_scene(x, nets[args.set], cfg, _parse_channels(args.channels))
    write_svg(scene, args.out)
    print(f"wrote {args.out}: {scene.T} panels, {scene.arrow_count} arrows")
    return EXIT_OK


# --- parser ------------------------------------------------------------------------------

def _add_train_options(p):
    p.add_argument("--config", help="run config file (key=value lines)")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=0.005)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0, help="initialisation and shuffling seed")
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--mode", choices=("hard", "soft"), default="hard")
    p.add_argument("--no-kpsem", action="store_true", help="spatial branch only")
    p.add_argument("--position", type=int, default=2, help="backbone stage feeding KPSEM")
    p.add_argument("--n-train", type=int, default=2000)
    p.add_argument("--n-test", type=int, default=400)
    p.add_argument("--noise", type=float, default=0.05)


def build_parser():
    parser = _Parser(prog="kpshift", description="Key point shift temporal features.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("forward", help="temporal feature for one C x T x H x W tensor")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--params", help="parameter checkpoint directory (default: seeded init)")
    p.add_argument("--save-params", help="write the parameters used to this directory")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--no-timing", action="store_true", help="omit the timing line")
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("gradcheck", help="finite-difference check on a random tiny instance")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--mode", choices=("hard", "soft"), default="soft")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train", help="train on the synthetic motion dataset")
    _add_train_options(p)
    p.add_argument("--out", help="checkpoint directory")
    p.add_argument("--trace", help="per-epoch metrics CSV")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="one training run per value of a setting")
    _add_train_options(p)
    p.add_argument("--param", required=True, choices=SWEEP_PARAMS)
    p.add_argument("--values", required=True, help="comma-separated list")
    p.add_argument("--baseline", action="store_true", help="add a spatial-only row")
    p.add_argument("--out", help="CSV path (default: stdout)")
    p.add_argument("--no-timing", action="store_true", help="leave the wall_time_s column empty")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("viz", help="SVG of key points and shifts")
    p.add_argument("--video", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--channels", default="0")
    p.add_argument("--set", type=int, default=0, help="which extractor set to draw")
    p.add_argument("--config")
    p.add_argument("--params")
    p.set_defaults(func=cmd_viz)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"kpshift: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as exc:
        print(f"kpshift: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, ShapeError, OSError) as exc:
        print(f"kpshift: error: {exc}", file=sys.stderr)
        return EXIT_IO
    except DivergenceError as exc:
        print(f"kpshift: training diverged: {exc}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
