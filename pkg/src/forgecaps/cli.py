"""Command-line entry point: train, eval, predict, inspect, gradcheck,
make-synthetic.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical
failure. Every command prints its fully resolved configuration before
doing any work, so a run is reproducible from its output plus input files.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .archive import ArchiveError
from .capsnet import (
    CapsuleModel,
    RoutingConfig,
    load_checkpoint,
    save_checkpoint,
)
from .data import DataError, SampleManifest, load_image, make_synthetic, preprocess
from .extractor import make_extractor
from .gradcheck import run_gradcheck_suite
from .pipeline import (
    NumericalError,
    TrainConfig,
    evaluate,
    format_report,
    seed_streams,
    train,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage problems; the contract wants 1
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


class UsageError(Exception):
    pass


def _print_config(args: argparse.Namespace) -> None:
    for key in sorted(vars(args)):
        if key == "func":
            continue
        print(f"config {key}={getattr(args, key)}")


def _dtype(name: str):
    return np.float32 if name == "float32" else np.float64


def _add_seed(parser, default=0):
    parser.add_argument("--seed", type=int, default=default,
                        help="master seed; init/noise/shuffle streams derive from it")


def _load_model_for_scoring(args) -> CapsuleModel:
    if not args.checkpoint:
        raise UsageError("checkpoint required")
    return load_checkpoint(args.checkpoint, dtype=_dtype(args.dtype))


def _cmd_train(args) -> int:
    overrides = {}
    if args.config:
        overrides = json.loads(Path(args.config).read_text())
        unknown = set(overrides) - set(TrainConfig.__dataclass_fields__)
        if unknown:
            raise UsageError(f"unknown config keys in {args.config}: {sorted(unknown)}")
    cfg = TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size,
        learning_rate=args.learning_rate, seed=args.seed,
        checkpoint_every=args.checkpoint_every,
        checkpoint_dir=args.checkpoint_dir, **overrides)
    manifest = SampleManifest.read(args.manifest)
    streams = seed_streams(cfg.seed)
    dtype = _dtype(args.dtype)
    extractor = make_extractor(args.extractor, channels=args.extractor_channels,
                               rng=streams["init"], archive_path=args.vgg_archive,
                               dtype=dtype)
    routing = RoutingConfig(iterations=args.routing_iterations,
                            noise_sigma=args.noise_sigma)
    model = CapsuleModel(extractor, routing=routing, rng=streams["init"], dtype=dtype)
    budget = model.parameter_budget()
    print(f"parameters: frozen={budget.frozen} trainable={budget.trainable} "
          f"total={budget.total}")
    result = train(manifest, model, cfg, verbose=True)
    save_checkpoint(args.out, model)
    print(f"checkpoint written to {args.out} after {result.epochs_run} epochs")
    return EXIT_OK


def _cmd_eval(args) -> int:
    model = _load_model_for_scoring(args)
    manifest = SampleManifest.read(args.manifest)
    report = evaluate(manifest, model, threshold=args.threshold, split=args.split,
                      level=args.level, max_frames=args.max_frames)
    text = format_report(report)
    print(text)
    if args.out_report:
        Path(args.out_report).write_text(text + "\n")
    return EXIT_OK


def _score_image(model: CapsuleModel, path, return_state=False):
    raster = load_image(path)
    x = preprocess(raster, model.input_norm, dtype=model.dtype)
    features = model.extractor.extract(x)
    return model.forward(features, return_state=return_state)


def _cmd_predict(args) -> int:
    model = _load_model_for_scoring(args)
    pred = _score_image(model, args.input)
    y_hat = pred.y_hat.item()
    label = "fake" if y_hat >= args.threshold else "real"
    print(f"y_hat={y_hat!r}")
    print(f"label={label} (threshold {args.threshold})")
    return EXIT_OK


def _cmd_inspect(args) -> int:
    model = _load_model_for_scoring(args)
    pred, state = _score_image(model, args.input, return_state=True)
    u = state.capsule_outputs
    for i in range(u.shape[0]):
        print(f"capsule{i} mean|u|={np.mean(np.abs(u[i])):.6f} u={np.round(u[i], 4).tolist()}")
    couplings = state.routing.couplings
    for i in range(couplings.shape[0]):
        print(f"couplings capsule{i} -> {np.round(couplings[i], 4).tolist()}")
    v = state.routing.outputs
    for j, name in enumerate(("real", "fake")[: v.shape[0]]):
        print(f"output[{name}] norm={np.linalg.norm(v[j]):.6f}")
    print(f"y_hat={pred.y_hat.item()!r}")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    results = run_gradcheck_suite(args.seed)
    worst_name, worst = max(results.items(), key=lambda kv: kv[1])
    for name, err in sorted(results.items()):
        print(f"gradcheck {name}: {err:.3e}")
    print(f"max relative error: {worst:.3e} ({worst_name})")
    if worst > args.tolerance:
        raise NumericalError(
            f"gradient check failed: {worst:.3e} > tolerance {args.tolerance:.1e}")
    print(f"gradcheck passed at tolerance {args.tolerance:.1e}")
    return EXIT_OK


def _cmd_make_synthetic(args) -> int:
    streams = seed_streams(args.seed)
    path = make_synthetic(args.out, n_train=args.train, n_test=args.test,
                          frames_per_group=args.frames_per_group, rng=streams["data"])
    print(f"manifest written to {path}")
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="forgecaps",
                     description="Capsule-network forgery detection toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[], help="train a model on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=25)
    p.add_argument("--learning-rate", type=float, default=5e-4)
    p.add_argument("--routing-iterations", "-r", type=int, default=2)
    p.add_argument("--noise-sigma", type=float, default=0.01)
    p.add_argument("--extractor", choices=("toy", "vgg19_front"), default="toy")
    p.add_argument("--extractor-channels", type=int, default=32)
    p.add_argument("--vgg-archive", help="weight archive for the vgg19_front extractor")
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--checkpoint-dir")
    p.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    p.add_argument("--config", help="JSON file with TrainConfig overrides")
    _add_seed(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--split", default="test")
    p.add_argument("--level", choices=("frame", "group"), default="frame")
    p.add_argument("--max-frames", type=int)
    p.add_argument("--out-report")
    p.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("predict", help="score a single image")
    p.add_argument("--input", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("inspect", help="print capsule activations for an image")
    p.add_argument("--input", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    p.set_defaults(func=_cmd_inspect)

    p = sub.add_parser("gradcheck",
                       help="verify analytic gradients against finite differences")
    p.add_argument("--tolerance", type=float, default=1e-4)
    _add_seed(p, default=7)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("make-synthetic", help="generate the synthetic image corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--train", type=int, default=200)
    p.add_argument("--test", type=int, default=100)
    p.add_argument("--frames-per-group", type=int, default=5)
    _add_seed(p)
    p.set_defaults(func=_cmd_make_synthetic)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _print_config(args)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ArchiveError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
