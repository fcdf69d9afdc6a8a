"""Command-line entry point.

Exit codes: 0 success, 1 usage or validation error, 2 runtime failure.
The resolved configuration goes to stderr before any work starts; results
meant for scripts go to stdout as ``key=value`` lines.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import formats, gradcheck, nn, synth, trainer
from .features import FeatureTensor, whiten
from .iva import run_iva

logger = logging.getLogger("ivafuse")

IVA_GRAD_TOL = 1e-5
IVA_HESS_TOL = 1e-4
NN_GRAD_TOL = 1e-3
ISI_THRESHOLD = 0.05


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n\n{self.format_usage()}")


def _emit(**values) -> None:
    for key, value in values.items():
        print(f"{key}={value}")


def _show_config(values: dict) -> None:
    for key, value in values.items():
        print(f"# {key}={value}", file=sys.stderr)


def _run_config(args, **overrides) -> trainer.RunConfig:
    """Defaults, then the config file, then explicit flags; invalid values are usage errors."""
    try:
        values = trainer.read_config_file(args.config) if getattr(args, "config", None) else {}
        values.update({k: v for k, v in overrides.items() if v is not None})
        return trainer.RunConfig.from_flat(values)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc


# --- subcommands ----------------------------------------------------------------


def cmd_extract(args) -> int:
    cfg = _run_config(args, seed=args.seed, shared_demixing=args.shared_demixing or None,
                      **{"iva.max_iters": args.max_iters})
    _show_config({"manifest": args.manifest, "out": args.out, **cfg.flat()})
    manifest = trainer.read_manifest(args.manifest)
    store = trainer.prepare_dataset(manifest, cfg, args.out, workers=args.workers)
    _emit(sentences=len(store.ids), failed=len(manifest.records) - len(store.ids), cache=args.out)
    return 0


def cmd_iva(args) -> int:
    cfg = _run_config(args, seed=args.seed, **{"iva.max_iters": args.max_iters})
    _show_config({"input": args.input, "out": args.out, **cfg.flat()})
    if args.input.endswith(".wav"):
        X = trainer.extract_features(args.input, cfg, seed=cfg.seed)
    else:
        X = formats.read_tensor(args.input)
    white, transform = whiten(FeatureTensor.from_array(X))
    res = run_iva(white.data, replace(cfg.iva, seed=cfg.seed))
    W = res.W @ transform.matrices
    if args.out:
        formats.write_demixing(args.out, W)
    if args.trace:
        with open(args.trace, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["iter", "eta", "cost"])
            writer.writerows((i, repr(e), repr(c)) for i, e, c in res.trace)
    _emit(iters=res.n_iters, rejected=res.n_rejected, final_cost=repr(res.final_cost), stop=res.stop_reason)
    return 0


def _validate_network(cfg: trainer.RunConfig) -> None:
    """Check layer heights before any data is touched."""
    n_features = 3 * cfg.lpc_order
    trainer.build_spec(cfg, 2, n_features, cfg.frame.target_frames)


def cmd_train(args) -> int:
    net = {k: getattr(args, k) for k in trainer.NET_KEYS if getattr(args, k, None) is not None}
    cfg = _run_config(args, variant=args.variant, feature_mode=args.feature_mode, epochs=args.epochs,
                      batch_size=args.batch_size, lr=args.lr, seed=args.seed,
                      **{f"net.{k}": v for k, v in net.items()})
    _show_config({"cache": args.cache, **cfg.flat()})
    try:
        _validate_network(cfg)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    store = trainer.FeatureStore.load(args.cache)
    result = trainer.train(store, cfg, metrics_path=args.metrics)
    if args.checkpoint:
        trainer.save_checkpoint(args.checkpoint, result.state, cfg)
    last = result.metrics[-1]
    _emit(epochs=len(result.metrics), loss=repr(last["loss"]),
          train_acc=max(r["train_acc"] for r in result.metrics),
          eval_acc="" if last["eval_acc"] is None else trainer.evaluate_acc(result.state, store, cfg.feature_mode))
    return 0


def cmd_eval(args) -> int:
    _show_config({"cache": args.cache, "checkpoint": args.checkpoint, "split": args.split})
    state, meta = trainer.load_checkpoint(args.checkpoint)
    store = trainer.FeatureStore.load(args.cache)
    mode = trainer.FeatureMode(args.feature_mode or meta.get("feature_mode", "Y_pair"))
    _emit(acc=trainer.evaluate_acc(state, store, mode, args.split))
    return 0


def cmd_synth(args) -> int:
    _show_config(vars(args) | {"func": args.kind})
    if args.kind == "speakers":
        path = synth.gen_synth_speakers(args.out, args.speakers, args.sentences, seed=args.seed, n_test=args.test)
        _emit(manifest=path)
    else:
        mix = synth.gen_scv_mixture(args.N, args.K, args.T, args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        formats.write_tensor(out / "x.bin", mix.X)
        formats.write_tensor(out / "s.bin", mix.S)
        formats.write_demixing(out / "a.bin", mix.A)
        _emit(features=out / "x.bin", sources=out / "s.bin", mixing=out / "a.bin")
    return 0


def cmd_gradcheck(args) -> int:
    _show_config({"target": args.target, "seed": args.seed, "instances": args.instances})
    if args.target == "iva":
        g, h = gradcheck.check_iva(args.instances, args.seed)
        _emit(max_rel_error=repr(g), max_rel_error_hessian=repr(h))
        ok = g < IVA_GRAD_TOL and h < IVA_HESS_TOL
    else:
        errors = gradcheck.check_network(seed=args.seed)
        worst = max(errors.values())
        _emit(max_rel_error=repr(worst), parameters=len(errors))
        ok = worst < NN_GRAD_TOL
    if not ok:
        print("gradient check failed", file=sys.stderr)
    return 0 if ok else 2


def cmd_isi_bench(args) -> int:
    cfg = _run_config(args, **{"iva.max_iters": args.max_iters})
    _show_config({"trials": args.trials, "first_seed": args.first_seed, "T": args.T, **cfg.flat()})
    rows, times = [], []
    for seed in range(args.first_seed, args.first_seed + args.trials):
        start = time.perf_counter()
        rows.append(synth.separation_trial(seed, N=3 + seed % 3, T=args.T, cfg=replace(cfg.iva, seed=seed)))
        times.append(time.perf_counter() - start)
    if args.out:
        synth.write_isi_csv(args.out, rows)
    passed = sum(r["joint_isi"] < ISI_THRESHOLD for r in rows)
    _emit(trials=args.trials, passed=passed, median_isi=repr(float(np.median([r["joint_isi"] for r in rows]))),
          median_seconds=f"{np.median(times):.3f}")
    return 0


# --- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ivafuse", description="IVA feature fusion for speaker identification")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def with_config(p):
        p.add_argument("--config", help="flat key=value file overriding defaults")
        return p

    p = with_config(sub.add_parser("extract", help="features and per-sentence IVA for a manifest"))
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int, help="defaults to IVAFUSE_THREADS or the CPU count")
    p.add_argument("--max-iters", type=int)
    p.add_argument("--shared-demixing", action="store_true",
                   help="experimental: one demixing tensor per speaker (uses test labels)")
    p.set_defaults(func=cmd_extract)

    p = with_config(sub.add_parser("iva", help="run IVA on one WAV or IVFT file"))
    p.add_argument("--input", required=True)
    p.add_argument("--out")
    p.add_argument("--trace", help="write the accepted-cost trace as CSV")
    p.add_argument("--seed", type=int)
    p.add_argument("--max-iters", type=int)
    p.set_defaults(func=cmd_iva)

    p = with_config(sub.add_parser("train", help="train a network on a feature cache"))
    p.add_argument("--cache", required=True)
    p.add_argument("--variant", choices=[v.value for v in nn.Variant])
    p.add_argument("--feature-mode", choices=[m.value for m in trainer.FeatureMode])
    for key in trainer.NET_KEYS:
        p.add_argument(f"--{key}", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--metrics", help="per-epoch CSV log")
    p.add_argument("--checkpoint", help="write the best model here (IVFN)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="ACC of a checkpoint on a cache split")
    p.add_argument("--cache", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--feature-mode", choices=[m.value for m in trainer.FeatureMode])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="synthetic speakers or SCV mixtures")
    kinds = p.add_subparsers(dest="kind", parser_class=_Parser, required=True)
    s = kinds.add_parser("speakers")
    s.add_argument("--out", required=True)
    s.add_argument("--speakers", type=int, default=4)
    s.add_argument("--sentences", type=int, default=10)
    s.add_argument("--test", type=int, default=0, help="sentences per speaker marked test")
    s.add_argument("--seed", type=int, default=0)
    s = kinds.add_parser("mixture")
    s.add_argument("--out", required=True)
    s.add_argument("-N", type=int, default=3)
    s.add_argument("-K", type=int, default=2)
    s.add_argument("-T", type=int, default=2000)
    s.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("gradcheck", help="finite-difference derivative checks")
    p.add_argument("--target", choices=["iva", "nn"], required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=20)
    p.set_defaults(func=cmd_gradcheck)

    p = with_config(sub.add_parser("isi-bench", help="IVA separation trials on synthetic mixtures"))
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--first-seed", type=int, default=0)
    p.add_argument("-T", type=int, default=2000)
    p.add_argument("--max-iters", type=int)
    p.add_argument("--out", help="per-trial CSV")
    p.set_defaults(func=cmd_isi_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        return args.func(args)
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError, ArithmeticError, RuntimeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
