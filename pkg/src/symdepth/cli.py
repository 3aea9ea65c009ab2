"""``symdepth`` command line: augment, gradcheck, train, eval.

Exit codes: 0 success, 1 validation or check failure, 2 numerical
divergence, 64 bad usage.
"""

from __future__ import annotations

import argparse
import contextlib
import sys
from pathlib import Path

import numpy as np

from . import data_io
from .augment import mix_batch
from .config import RunConfig
from .gradcheck import run_suite
from .model import ConfigError, init_params
from .tensor import inject_backward_fault
from .training import DivergenceError, evaluate, train

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_DIVERGED = 2
EXIT_USAGE = 64


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _seed(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {text!r}") from None
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="symdepth", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", type=Path, help="JSON run configuration (defaults apply when omitted)")
        p.add_argument("--seed", type=_seed, help="overrides the seed stored in the config")

    p = sub.add_parser("augment", help="write a NearFarMix-augmented copy of a dataset")
    common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    common(p)
    p.add_argument(
        "--corrupt-backward", metavar="OP",
        help="scale OP's backward rule by 1.5 (negative control for the checker)",
    )
    p.add_argument("--ops", help="comma-separated subset of case names to check")

    p = sub.add_parser("train", help="toy training run")
    common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out-params", type=Path, required=True, help="directory for the trained parameters")
    p.add_argument("--steps", type=int, help="overrides the step count in the config")

    p = sub.add_parser("eval", help="print depth metrics and mIoU over a dataset")
    common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--params", type=Path, help="parameter directory written by train")
    p.add_argument(
        "--gt-as-prediction", action="store_true",
        help="score the labels against themselves (identity check, no model run)",
    )
    return parser


def _err(msg: str) -> None:
    print(f"symdepth: {msg}", file=sys.stderr)


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config is not None else RunConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        changes["steps"] = args.steps
    if changes:
        cfg = RunConfig.from_dict({**cfg.to_dict(), **changes})
    return cfg


def _bounds(cfg: RunConfig, manifest: data_io.Manifest) -> tuple[float, float] | None:
    a = cfg.augmentation
    lo = a.D_min if a.D_min is not None else manifest.d_min
    hi = a.D_max if a.D_max is not None else manifest.d_max
    if lo is None or hi is None:
        return None
    if not lo < hi:
        raise ConfigError(f"depth bounds D_min {lo} and D_max {hi} are not ordered")
    return lo, hi


def cmd_augment(args, cfg: RunConfig) -> int:
    manifest = data_io.load_manifest(args.manifest)
    samples = data_io.load_samples(manifest, cfg.model.class_count)
    bounds = _bounds(cfg, manifest)
    if bounds is None and cfg.augmentation.p_apply > 0:
        _err("NearFarMix needs D_min/D_max in the config or the manifest")
        return EXIT_FAIL
    rng = np.random.default_rng(cfg.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    records, rows = [], ["# index\tpartner\tthr"]
    for start in range(0, len(samples), cfg.batch_size):
        batch = samples[start : start + cfg.batch_size]
        if cfg.augmentation.p_apply > 0:
            mixed, thrs = mix_batch(batch, bounds, cfg.augmentation.p_apply, rng)
        else:
            mixed, thrs = list(batch), [None] * len(batch)
        for j, (s, thr) in enumerate(zip(mixed, thrs)):
            i = start + j
            records.append(data_io.save_sample(args.out, f"a{i:04d}", s))
            partner = start + (j - 1) % len(batch)
            rows.append(f"{i}\t-\t-" if thr is None else f"{i}\t{partner}\t{thr!r}")
    data_io.write_manifest(
        args.out / "manifest.tsv",
        data_io.Manifest(tuple(records), manifest.d_min, manifest.d_max, manifest.max_depth),
    )
    (args.out / "provenance.tsv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    mixed_count = sum(1 for r in rows[1:] if not r.endswith("\t-"))
    print(f"wrote {len(records)} samples ({mixed_count} mixed) to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    fault = inject_backward_fault(args.corrupt_backward) if args.corrupt_backward else contextlib.nullcontext()
    with fault:
        only = [o.strip() for o in args.ops.split(",") if o.strip()] if args.ops else None
        reports = run_suite(seed=cfg.seed, log=print, only=only)
    failed = [r for r in reports if not r.passed]
    print(f"checked {len(reports)} ops, {len(failed)} failed")
    if failed:
        worst = max(failed, key=lambda r: r.max_rel_err)
        _err(f"gradient check failed; worst offender {worst.op_name} rel={worst.max_rel_err:.3e} {worst.message}")
        return EXIT_FAIL
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    manifest = data_io.load_manifest(args.manifest)
    samples = data_io.load_samples(manifest, cfg.model.class_count)
    try:
        result = train(samples, cfg, _bounds(cfg, manifest), log=print)
    except DivergenceError as exc:
        _err(str(exc))
        return EXIT_DIVERGED
    data_io.save_params(args.out_params, result.params)
    ratio = result.final.total_loss / result.initial.total_loss
    print(
        f"initial_total_loss={result.initial.total_loss:.6f} "
        f"final_total_loss={result.final.total_loss:.6f} ratio={ratio:.6f}"
    )
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    manifest = data_io.load_manifest(args.manifest)
    samples = data_io.load_samples(manifest, cfg.model.class_count)
    params = None
    if not args.gt_as_prediction:
        if args.params is None:
            _err("eval needs --params unless --gt-as-prediction is given")
            return EXIT_USAGE
        try:
            params = data_io.load_params(args.params)
        except FileNotFoundError as exc:
            _err(str(exc))
            return EXIT_FAIL
        reference = init_params(cfg.model, np.random.default_rng(0))
        bad = sorted(
            k for k in reference.keys() | params.keys()
            if k not in params or k not in reference or params[k].shape != reference[k].shape
        )
        if bad:
            _err(f"parameters do not match the model config ({len(bad)} entries, first {bad[0]!r})")
            return EXIT_FAIL
    report = evaluate(samples, cfg, params, gt_as_prediction=args.gt_as_prediction)
    sys.stdout.write(report.to_text())
    return EXIT_OK


COMMANDS = {"augment": cmd_augment, "gradcheck": cmd_gradcheck, "train": cmd_train, "eval": cmd_eval}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = _load_config(args)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, data_io.ManifestError, data_io.FormatError) as exc:
        _err(str(exc))
        return EXIT_FAIL
    except (OSError, ValueError, TypeError) as exc:
        _err(f"{type(exc).__name__}: {exc}")
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
