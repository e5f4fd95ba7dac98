"""capsroute: route / train / eval / bench / gradcheck / config.

Exit codes: 0 success, 1 threshold or acceptance failure (gradcheck), 2
usage or input error, 3 numeric abort (non-finite loss).  All randomness
derives from --seed through named streams, so outputs are stable across
refactors and runs.
"""

import argparse
import json
import sys

import numpy as np
from threadpoolctl import threadpool_limits

from . import bench as bench_mod
from . import config as config_mod
from . import data as data_mod
from . import gradcheck as gradcheck_mod
from . import tensor
from . import training
from .errors import CapsrouteError, ConfigError, TrainAbortError
from .kernels import KernelSpec
from .routing import (
    RoutingConfig,
    RoutingDiagnostics,
    compute_activation,
    compute_votes,
    em_route_baseline,
    frem_route,
    frms_route,
    init_activation_params,
    rba_activation,
    rba_variant_route,
)

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_USAGE = 2
EXIT_NUMERIC = 3


def _routing_config(args) -> RoutingConfig:
    return RoutingConfig(iterations=args.iters, alpha=args.alpha,
                         normalization=args.normalization,
                         kernel=KernelSpec(args.kernel, args.metric))


# ---------------------------------------------------------------------------
# route
# ---------------------------------------------------------------------------

def cmd_route(args) -> int:
    archive = tensor.load_archive(args.input)
    if "poses" not in archive or "activations" not in archive:
        raise ConfigError(f"{args.input}: archive needs 'poses' and 'activations'")
    poses = archive["poses"]
    acts = archive["activations"]
    if "transforms" in archive:
        transforms = archive["transforms"]
    else:
        transforms = np.broadcast_to(np.eye(4, dtype=poses.dtype),
                                     (poses.shape[0], args.outputs, 4, 4)).copy()
    votes = compute_votes(poses, acts, transforms)
    cfg = _routing_config(args)
    diagnostics = RoutingDiagnostics()
    v_init = archive.get("v_init")

    if args.method == "rba":
        print("note: rba is a diagnostic-only method and is excluded from "
              "the training path", file=sys.stderr)
        cfg = RoutingConfig(iterations=args.iters, alpha=args.alpha,
                            normalization=args.normalization,
                            kernel=KernelSpec(args.kernel, "cosine"))
        state = rba_variant_route(votes, cfg)
        activations = rba_activation(votes, state)
    elif args.method == "frms":
        state = frms_route(votes, cfg, v_init=v_init, diagnostics=diagnostics)
        activations = compute_activation(votes, state,
                                         init_activation_params(votes.n_outputs),
                                         cfg.kernel)
    elif args.method == "frem":
        state = frem_route(votes, cfg, diagnostics=diagnostics)
        activations = compute_activation(votes, state,
                                         init_activation_params(votes.n_outputs),
                                         cfg.kernel)
    elif args.method == "em":
        state, activations = em_route_baseline(
            votes, cfg, init_activation_params(votes.n_outputs),
            diagnostics=diagnostics)
    else:
        raise ConfigError(f"unknown method {args.method!r}")

    print(f"routed {votes.n_inputs} capsules -> {votes.n_outputs} outputs "
          f"({args.method}, {args.iters} iterations)")
    print(f"degenerate clusters: {diagnostics.degenerate_windows}")
    np.set_printoptions(precision=4, suppress=True)
    print("output poses v:")
    print(state.v)
    print("normalized routing weights r_norm (rows = inputs):")
    print(state.r_norm)
    print("activations:")
    print(activations)
    if args.dump:
        dump = {"r": state.r, "r_norm": state.r_norm, "v": state.v,
                "activations": np.asarray(activations)}
        if state.pi is not None:
            dump["pi"] = state.pi
        if state.sigma is not None:
            dump["sigma"] = state.sigma
        tensor.save_archive(args.dump, dump)
        print(f"state dumped to {args.dump}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train / eval
# ---------------------------------------------------------------------------

def _load_dataset(data_cfg, args, split):
    dataset_name = args.dataset or data_cfg.get("dataset", "synth")
    seed = args.seed if args.seed is not None else 0
    if dataset_name == "synth":
        classes = int(data_cfg.get("synth_classes", 5))
        if split == "train":
            count = int(data_cfg.get("synth_train", 2000))
            return data_mod.synth_affine_glyphs(classes, count // classes,
                                                seed=seed, split="train")
        count = int(data_cfg.get("synth_test", 500))
        return data_mod.synth_affine_glyphs(classes, count // classes,
                                            seed=seed + 1, split="test")
    if dataset_name == "mnist":
        data_dir = args.data_dir or data_cfg.get("data_dir", ".")
        prefix = "train" if split == "train" else "t10k"
        images = _find_idx(data_dir, f"{prefix}-images-idx3-ubyte")
        labels = _find_idx(data_dir, f"{prefix}-labels-idx1-ubyte")
        ds = data_mod.load_idx(images, labels, classes=10, split=split)
        limit = int(data_cfg.get(f"{split}_limit", 0))
        if limit:
            ds = ds.subset(np.arange(min(limit, len(ds))))
        return ds
    raise ConfigError(f"unknown dataset {dataset_name!r}")


def _find_idx(data_dir, stem):
    import os
    for name in (stem, stem.replace("-idx", ".idx"), stem + ".gz",
                 stem.replace("-idx", ".idx") + ".gz"):
        path = os.path.join(data_dir, name)
        if os.path.exists(path):
            return path
    raise ConfigError(f"no {stem}[.gz] under {data_dir}")


def _prepare(spec, dataset):
    images = data_mod.preprocess(dataset.images, target=spec.input_size)
    return data_mod.Dataset(images, dataset.labels, dataset.classes, dataset.split)


def cmd_train(args) -> int:
    with open(args.config) as f:
        cfg_dict = json.load(f)
    spec, train_cfg, data_cfg = config_mod.parse_config(cfg_dict)
    if args.seed is not None:
        train_cfg.seed = args.seed
    if args.epochs is not None:
        train_cfg.epochs = args.epochs
    train_ds = _prepare(spec, _load_dataset(data_cfg, args, "train"))
    eval_ds = _prepare(spec, _load_dataset(data_cfg, args, "test"))
    params, report = training.train(spec, train_ds, train_cfg,
                                    eval_dataset=eval_ds, verbose=True)
    tensor.save_archive(args.out, params)
    print(f"parameters saved to {args.out}")
    if args.report:
        training.report_to_csv(report, args.report)
        print(f"report saved to {args.report}")
    print(f"final test error: {report.test_error:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    with open(args.config) as f:
        cfg_dict = json.load(f)
    spec, _, data_cfg = config_mod.parse_config(cfg_dict)
    params = tensor.load_archive(args.params)
    eval_ds = _prepare(spec, _load_dataset(data_cfg, args, "test"))
    error = training.evaluate(spec, params, eval_ds)
    print(f"test error: {error:.4f} over {len(eval_ds)} examples")
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------

def _parse_case(text):
    fields = {}
    for part in text.split(","):
        key, _, value = part.partition("=")
        fields[key.strip()] = int(value)
    return fields


def cmd_bench(args) -> int:
    fields = _parse_case(args.case)
    methods = [m.strip() for m in args.methods.split(",")]
    cases = [bench_mod.BenchCase(n_inputs=fields.get("n_l", 72),
                                 n_outputs=fields.get("n_out", 16),
                                 iterations=fields.get("iters", 2),
                                 batch=args.batch, reps=args.reps,
                                 warmup=args.warmup, method=m)
             for m in methods]
    text, rows = bench_mod.compare_report(cases, seed=args.seed or 0)
    print(text)
    if args.csv:
        bench_mod.rows_to_csv(rows, args.csv)
        print(f"csv saved to {args.csv}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck / config
# ---------------------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    if bool(args.op) == bool(args.network):
        raise ConfigError("pass exactly one of --op or --network")
    if args.op:
        report = gradcheck_mod.run_op_check(args.op, epsilon=args.eps,
                                            seed=args.seed or 0)
    else:
        spec, _, _ = config_mod.load_config(args.network)
        report = gradcheck_mod.network_check(spec, epsilon=args.eps,
                                             seed=args.seed or 0,
                                             samples_per_tensor=args.samples)
    worst = max(report.values())
    print(f"{'parameter':<28} {'max_rel_error':>14}")
    for name, err in sorted(report.items()):
        print(f"{name:<28} {err:>14.3e}")
    print(f"{'WORST':<28} {worst:>14.3e}  (threshold {args.threshold:.1e})")
    if worst > args.threshold:
        print("gradcheck FAILED", file=sys.stderr)
        return EXIT_FAIL
    print("gradcheck passed")
    return EXIT_OK


def cmd_config(args) -> int:
    if not args.print_defaults:
        raise ConfigError("nothing to do: pass --print-defaults")
    cfg = config_mod.default_config(classes=args.classes,
                                    base_capsules=args.base_capsules,
                                    stem_channels=args.stem_channels,
                                    routing_method=args.method)
    if args.cnn:
        cfg = config_mod.baseline_cnn_config(cfg)
    print(config_mod.dump_config(cfg))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="capsroute",
        description="Weighted-KDE dynamic routing for capsule networks: "
                    "standalone routing, training, evaluation, benchmarking, "
                    "and gradient checking.")
    parser.add_argument("--threads", type=int, default=1,
                        help="BLAS thread cap (default 1, deterministic)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("route", help="run one routing call on a capsule archive")
    p.add_argument("--input", required=True,
                   help="tensor archive with poses [n,4,4] and activations [n] "
                        "(optional transforms [n,m,4,4], v_init [m,16])")
    p.add_argument("--method", default="frem", choices=["frms", "frem", "em", "rba"])
    p.add_argument("--outputs", type=int, default=1,
                   help="output capsules when no transforms are given (default 1)")
    p.add_argument("--kernel", default="epanechnikov", choices=["gaussian", "epanechnikov"])
    p.add_argument("--metric", default="l1", choices=["l1", "l2sq"])
    p.add_argument("--iters", type=int, default=2, help="routing iterations (default 2)")
    p.add_argument("--alpha", type=float, default=1.0, help="r step size (default 1)")
    p.add_argument("--normalization", default="softmax", choices=["softmax", "plain"])
    p.add_argument("--dump", default=None, help="write the routing state archive here")
    p.set_defaults(func=cmd_route)

    p = sub.add_parser("train", help="train a network from a config file")
    p.add_argument("--config", required=True, help="JSON config file")
    p.add_argument("--out", required=True, help="parameter archive output path")
    p.add_argument("--report", default=None, help="per-step CSV report path")
    p.add_argument("--data-dir", default=None, help="IDX dataset directory")
    p.add_argument("--dataset", default=None, choices=["mnist", "synth"])
    p.add_argument("--seed", type=int, default=None, help="root seed override")
    p.add_argument("--epochs", type=int, default=None, help="epoch override")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate saved parameters")
    p.add_argument("--config", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--data-dir", default=None)
    p.add_argument("--dataset", default=None, choices=["mnist", "synth"])
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="time routing methods at one shape")
    p.add_argument("--case", default="n_l=72,n_out=16,iters=2",
                   help="shape, e.g. n_l=72,n_out=16,iters=2")
    p.add_argument("--methods", default="frms,frem,em")
    p.add_argument("--reps", type=int, default=100)
    p.add_argument("--batch", type=int, default=64, help="windows per call")
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--csv", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--op", default=None,
                   help=f"op check name, one of: {', '.join(sorted(gradcheck_mod.OP_CHECKS))}")
    p.add_argument("--network", default=None, help="network config JSON to check")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--samples", type=int, default=256,
                   help="sampled coordinates per parameter tensor")
    p.add_argument("--threshold", type=float, default=1e-4,
                   help="exit nonzero above this max relative error")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("config", help="print the default config")
    p.add_argument("--print-defaults", action="store_true")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--base-capsules", type=int, default=8)
    p.add_argument("--stem-channels", type=int, default=32)
    p.add_argument("--method", default="frem", choices=["frms", "frem", "em"])
    p.add_argument("--cnn", action="store_true",
                   help="print the matched baseline CNN config instead")
    p.set_defaults(func=cmd_config)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except TrainAbortError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CapsrouteError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
