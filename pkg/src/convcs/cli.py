"""Command-line pipeline driver.

Subcommands: train-dict, measure, reconstruct, classify, benchmark.
Exit codes: 0 success, 1 numeric failure (divergence, or CG warnings when
--strict), 2 usage/parameter errors.

Option precedence is flags > --config file (key=value lines) > preset >
built-in default. Every command writes a plain-text key=value manifest
next to its primary output; primary outputs themselves are byte-identical
across runs with identical flags and seed.
"""

import argparse
import os
import sys
from datetime import datetime, timezone

import numpy as np

from . import multilayer
from ._engine import DivergenceError
from .csrecon import (
    MeasurementSet,
    load_measurements,
    measure_images,
    reconstruct_insitu,
    reconstruct_prelearned,
    save_measurements,
)
from .dataio import Dataset, load_idx, psnr, save_image_pgm, write_metrics_csv
from .dictionary_learning import (
    SolverConfig,
    load_dictionary,
    save_dictionary,
    sparse_code,
    train_dictionary,
)
from .multilayer import LayerConfig, TwoLayerPlan, save_two_layer
from .sensing import make_gaussian, make_permuted_hadamard, measurement_count
from .softmax import accuracy, extract_features, save_softmax, softmax_train

PRESETS = {
    # single-layer 28x28 digits: 16 atoms of 7x7, Gaussian sensing
    "mnist": {"atoms": 16, "kernel": "7", "matrix": "gaussian"},
    # single-layer 64x64 grayscale images: 16 atoms of 13x13, permuted Hadamard
    "generic-64": {"atoms": 16, "kernel": "13", "matrix": "hadamard"},
    # two-layer 28x28 digits: 9x9x16 with 3x3 pooling, then 7x7x64
    "mnist-deep": {"atoms": 16, "kernel": "9", "layer2": 64, "kernel2": "7",
                   "pool": 3, "matrix": "gaussian"},
}

_EXIT_NUMERIC = 1
_EXIT_USAGE = 2


def _default_threads():
    env = os.environ.get("CONVCS_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return os.cpu_count() or 1


def _parse_kernel(text):
    parts = str(text).lower().split("x")
    if len(parts) == 1:
        return (int(parts[0]), int(parts[0]))
    if len(parts) == 2:
        return (int(parts[0]), int(parts[1]))
    raise ValueError(f"kernel must be H or HxW, got {text!r}")


def _read_config_file(path):
    values = {}
    with open(path) as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}: expected key=value, got {line!r}")
            key, _, value = line.partition("=")
            values[key.strip().replace("-", "_")] = value.strip()
    return values


def _resolve(args, key, default=None, cast=None):
    """flags > config file > preset > default."""
    value = getattr(args, key.replace("-", "_"), None)
    if value is None:
        value = args._config_values.get(key.replace("-", "_"))
    if value is None:
        preset = PRESETS.get(getattr(args, "preset", None) or "", {})
        value = preset.get(key)
    if value is None:
        value = default
    if value is not None and cast is not None:
        value = cast(value)
    return value


def _solver_config(args, **overrides):
    fields = dict(
        beta=_resolve(args, "beta", 1e-7, float),
        eta0=_resolve(args, "eta0", 1e-3, float),
        eta_max=_resolve(args, "eta_max", 5.0, float),
        eta_growth=_resolve(args, "eta_growth", 1.1, float),
        max_outer=_resolve(args, "iters", 200, int),
        rel_tol=_resolve(args, "rel_tol", 1e-5, float),
        cg_tol=_resolve(args, "cg_tol", 1e-6, float),
        cg_max_iter=_resolve(args, "cg_max_iter", 200, int),
        sparsity_target=_resolve(args, "sparsity", 0.05, float),
        seed=_resolve(args, "seed", 0, int),
        threads=_resolve(args, "threads", _default_threads(), int),
    )
    fields.update(overrides)
    return SolverConfig(**fields)


def _write_manifest(path, command, values):
    lines = [f"command={command}"]
    for key in sorted(values):
        lines.append(f"{key}={values[key]}")
    lines.append(f"timestamp={datetime.now(timezone.utc).isoformat()}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _load_images(path, count=None):
    ds = load_idx(path)
    if count is not None:
        if count < 1 or count > len(ds):
            raise ValueError(f"--count {count} outside [1, {len(ds)}]")
        return Dataset(images=ds.images[:count], source=ds.source)
    return ds


def _make_operator(matrix, csr, pixels, seed):
    M = measurement_count(csr, pixels)
    if matrix == "gaussian":
        return make_gaussian(M, pixels, seed)
    if matrix == "hadamard":
        return make_permuted_hadamard(M, pixels, seed)
    raise ValueError(f"unknown matrix type {matrix!r}")


def _write_trace_csv(trace, path):
    rows = [{"iter": r.iter, "objective": r.objective, "recon_err": r.recon_err,
             "primal_residual": r.primal_residual, "eta": r.eta} for r in trace]
    write_metrics_csv(rows, path,
                      fieldnames=["iter", "objective", "recon_err",
                                  "primal_residual", "eta"])


def cmd_train_dict(args):
    images = _load_images(args.images, _resolve(args, "count", None, int))
    kernel = _parse_kernel(_resolve(args, "kernel", "7"))
    n_atoms = _resolve(args, "atoms", 16, int)
    config = _solver_config(args)
    layer2 = _resolve(args, "layer2", None, int)

    manifest = {
        "images": args.images, "count": len(images), "atoms": n_atoms,
        "kernel": f"{kernel[0]}x{kernel[1]}", "iters": config.max_outer,
        "sparsity": config.sparsity_target, "beta": config.beta,
        "seed": config.seed, "out": args.out,
    }
    if layer2 is None:
        result = train_dictionary(images.images, n_atoms, kernel, config)
        save_dictionary(result.dictionary, args.out)
        _write_trace_csv(result.trace, args.out + ".trace.csv")
        cg_failures = result.cg_failures
    else:
        kernel2 = _parse_kernel(_resolve(args, "kernel2", "7"))
        pool = _resolve(args, "pool", 3, int)
        plan = TwoLayerPlan(
            image_shape=images.images.shape[1:3],
            layer1=LayerConfig(n_atoms, kernel, (pool, pool)),
            layer2=LayerConfig(layer2, kernel2))
        model, info = multilayer.train_two_layer(plan, config,
                                                 images=images.images)
        save_two_layer(model, args.out)
        _write_trace_csv(info["stage1"].trace, args.out + ".trace.csv")
        _write_trace_csv(info["stage2"].trace, args.out + ".trace2.csv")
        manifest.update({"layer2": layer2, "kernel2": f"{kernel2[0]}x{kernel2[1]}",
                         "pool": pool})
        cg_failures = info["stage1"].cg_failures + info["stage2"].cg_failures
    _write_manifest(args.out + ".manifest", "train-dict", manifest)
    if args.strict and cg_failures:
        print(f"convcs: {cg_failures} CG solves missed tolerance", file=sys.stderr)
        return _EXIT_NUMERIC
    return 0


def cmd_measure(args):
    csr = _resolve(args, "csr", None, float)
    if csr is None:
        raise ValueError("--csr is required")
    count = _resolve(args, "count", None, int)
    images = _load_images(args.images, count)
    H, W = images.images.shape[1:3]
    seed = _resolve(args, "seed", 0, int)
    matrix = _resolve(args, "matrix", "gaussian")
    operator = _make_operator(matrix, csr, H * W, seed)
    ms = measure_images(images.images, operator)
    save_measurements(ms, args.out)
    _write_manifest(args.out + ".manifest", "measure", {
        "images": args.images, "count": len(images), "csr": csr,
        "matrix": matrix, "seed": seed, "M": operator.M, "N": operator.N,
        "out": args.out,
    })
    return 0


def cmd_reconstruct(args):
    if args.dict and args.in_situ:
        raise ValueError("--dict and --in-situ are mutually exclusive")
    if args.projected_dict and (args.dict or args.in_situ):
        raise ValueError("--projected-dict cannot be combined with --dict/--in-situ")
    if not (args.dict or args.in_situ or args.projected_dict):
        raise ValueError("one of --dict, --in-situ or --projected-dict is required")
    ms = load_measurements(args.measurements)
    config = _solver_config(args)
    os.makedirs(args.out, exist_ok=True)

    if args.in_situ:
        n_atoms = _resolve(args, "atoms", 16, int)
        kernel = _parse_kernel(_resolve(args, "kernel", "7"))
        result = reconstruct_insitu(ms, n_atoms, kernel, config)
        mode = "in-situ"
    else:
        dict_path = args.dict or args.projected_dict
        dictionary = load_dictionary(dict_path)
        if args.projected_dict:
            result = multilayer.reconstruct_projected(ms, dictionary, config)
            mode = "projected"
        else:
            result = reconstruct_prelearned(ms, dictionary, config)
            mode = "prelearned"

    truth = None
    if args.truth:
        truth = _load_images(args.truth, ms.n_images).images
    rel_errs = result.rel_measurement_errors(ms)
    rows = []
    for i in range(ms.n_images):
        save_image_pgm(np.clip(result.images[i, :, :, 0], 0.0, 1.0),
                       os.path.join(args.out, f"recon_{i:04d}.pgm"))
        value = psnr(truth[i], result.images[i]) if truth is not None else ""
        rows.append({"index": i, "psnr": value,
                     "rel_meas_err": rel_errs[i], "iters": result.iterations})
    write_metrics_csv(rows, os.path.join(args.out, "metrics.csv"),
                      fieldnames=["index", "psnr", "rel_meas_err", "iters"])
    _write_manifest(os.path.join(args.out, "manifest"), "reconstruct", {
        "measurements": args.measurements, "mode": mode,
        "dict": args.dict or args.projected_dict or "",
        "atoms": _resolve(args, "atoms", "", str),
        "iters": config.max_outer, "seed": config.seed, "out": args.out,
    })
    if args.strict and result.cg_failures:
        print(f"convcs: {result.cg_failures} CG solves missed tolerance",
              file=sys.stderr)
        return _EXIT_NUMERIC
    return 0


def _load_features_npz(path):
    data = np.load(path)
    if "features" not in data or "labels" not in data:
        raise ValueError(f"{path}: expected arrays 'features' and 'labels'")
    return data["features"], data["labels"]


def cmd_classify(args):
    epochs = _resolve(args, "epochs", 500, int)
    step = _resolve(args, "step", 0.5, float)
    l2 = _resolve(args, "l2", 1e-4, float)
    seed = _resolve(args, "seed", 0, int)
    csr = _resolve(args, "csr", None, float)

    if args.train_features:
        if not args.test_features:
            raise ValueError("--train-features needs --test-features")
        train_x, train_y = _load_features_npz(args.train_features)
        test_x, test_y = _load_features_npz(args.test_features)
    else:
        for flag in ("images", "labels", "test_images", "test_labels", "dict"):
            if getattr(args, flag) is None:
                raise ValueError(f"end-to-end classify needs --{flag.replace('_', '-')}")
        dictionary = load_dictionary(args.dict)
        config = _solver_config(args)
        n_train = _resolve(args, "train_count", 100, int)
        n_test = _resolve(args, "test_count", 50, int)
        train = load_idx(args.images, args.labels)
        test = load_idx(args.test_images, args.test_labels)
        train_x = extract_features(dictionary, images=train.images[:n_train],
                                   config=config)
        train_y = train.labels[:n_train]
        test_images = test.images[:n_test]
        if csr is not None:
            H, W = test_images.shape[1:3]
            matrix = _resolve(args, "matrix", "gaussian")
            operator = _make_operator(matrix, csr, H * W, seed)
            ms = measure_images(test_images, operator)
            test_x = extract_features(dictionary, measurements=ms, config=config)
        else:
            test_x = extract_features(dictionary, images=test_images,
                                      config=config)
        test_y = test.labels[:n_test]
        if args.features_out:
            np.savez(args.features_out,
                     features=train_x, labels=train_y,
                     test_features=test_x, test_labels=test_y)

    model, _ = softmax_train(train_x, train_y, epochs=epochs, step=step, l2=l2)
    acc = accuracy(model, test_x, test_y)
    write_metrics_csv(
        [{"csr": "" if csr is None else csr, "accuracy": acc,
          "n_train": len(train_y), "n_test": len(test_y), "seed": seed}],
        args.out, fieldnames=["csr", "accuracy", "n_train", "n_test", "seed"])
    if args.model_out:
        save_softmax(model, args.model_out)
    _write_manifest(args.out + ".manifest", "classify", {
        "out": args.out, "epochs": epochs, "step": step, "l2": l2,
        "seed": seed, "csr": "" if csr is None else csr,
    })
    return 0


def cmd_benchmark(args):
    csr_text = _resolve(args, "csr_list", "")
    csr_values = [float(v) for v in str(csr_text).split(",") if v.strip()]
    if not csr_values:
        raise ValueError("--csr-list must name at least one ratio")
    dictionary = load_dictionary(args.dict)
    seed = _resolve(args, "seed", 0, int)
    matrix = _resolve(args, "matrix", "gaussian")
    n_recon = _resolve(args, "recon_count", 20, int)
    n_train = _resolve(args, "train_count", 100, int)
    n_test = _resolve(args, "test_count", 50, int)
    config = _solver_config(args)

    train = load_idx(args.train_images, args.train_labels)
    test = load_idx(args.test_images, args.test_labels)
    train_x = extract_features(dictionary, images=train.images[:n_train],
                               config=config)
    model, _ = softmax_train(train_x, train.labels[:n_train],
                             epochs=_resolve(args, "epochs", 500, int),
                             step=_resolve(args, "step", 0.5, float),
                             l2=_resolve(args, "l2", 1e-4, float))

    truth = test.images[:max(n_recon, n_test)]
    H, W = truth.shape[1:3]
    rows = []
    for csr in csr_values:
        operator = _make_operator(matrix, csr, H * W, seed)
        ms = measure_images(truth[:n_test], operator)
        result = reconstruct_prelearned(ms, dictionary, config)
        psnrs = [psnr(truth[i], result.images[i]) for i in range(min(n_recon, n_test))]
        feats = result.features.reshape(result.features.shape[0], -1)
        acc = accuracy(model, feats, test.labels[:n_test])
        rows.append({"csr": csr, "psnr": float(np.mean(psnrs)),
                     "softmax_acc": acc})
    write_metrics_csv(rows, args.out, fieldnames=["csr", "psnr", "softmax_acc"])
    _write_manifest(args.out + ".manifest", "benchmark", {
        "csr_list": ",".join(str(v) for v in csr_values), "dict": args.dict,
        "seed": seed, "matrix": matrix, "recon_count": n_recon,
        "train_count": n_train, "test_count": n_test, "out": args.out,
    })
    return 0


def _add_common(sub):
    sub.add_argument("--seed", type=int, default=None)
    sub.add_argument("--threads", type=int, default=None)
    sub.add_argument("--config", default=None, help="key=value option file")
    sub.add_argument("--preset", choices=sorted(PRESETS), default=None)
    sub.add_argument("--strict", action="store_true",
                     help="treat CG tolerance misses as failures (exit 1)")
    sub.add_argument("--iters", type=int, default=None)
    sub.add_argument("--sparsity", type=float, default=None)
    sub.add_argument("--beta", type=float, default=None)
    sub.add_argument("--eta0", type=float, default=None)
    sub.add_argument("--eta-max", type=float, default=None)
    sub.add_argument("--eta-growth", type=float, default=None)
    sub.add_argument("--rel-tol", type=float, default=None)
    sub.add_argument("--cg-tol", type=float, default=None)
    sub.add_argument("--cg-max-iter", type=int, default=None)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="convcs",
        description="Convolutional sparse coding for compressive sensing")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("train-dict", help="learn a convolutional dictionary")
    p.add_argument("--images", required=True)
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--atoms", type=int, default=None)
    p.add_argument("--kernel", default=None, help="H or HxW")
    p.add_argument("--out", required=True)
    p.add_argument("--layer2", type=int, default=None,
                   help="train a two-layer model with this many layer-2 atoms")
    p.add_argument("--kernel2", default=None)
    p.add_argument("--pool", type=int, default=None)
    _add_common(p)
    p.set_defaults(func=cmd_train_dict)

    p = subs.add_parser("measure", help="compress images into measurements")
    p.add_argument("--images", required=True)
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--csr", type=float, default=None)
    p.add_argument("--matrix", choices=["gaussian", "hadamard"], default=None)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_measure)

    p = subs.add_parser("reconstruct", help="recover images from measurements")
    p.add_argument("--measurements", required=True)
    p.add_argument("--dict", default=None)
    p.add_argument("--in-situ", action="store_true")
    p.add_argument("--projected-dict", default=None)
    p.add_argument("--atoms", type=int, default=None)
    p.add_argument("--kernel", default=None)
    p.add_argument("--truth", default=None, help="IDX file for PSNR metrics")
    p.add_argument("--out", required=True, help="output directory")
    _add_common(p)
    p.set_defaults(func=cmd_reconstruct)

    p = subs.add_parser("classify", help="train/evaluate the softmax classifier")
    p.add_argument("--train-features", default=None, help="npz with features+labels")
    p.add_argument("--test-features", default=None)
    p.add_argument("--images", default=None)
    p.add_argument("--labels", default=None)
    p.add_argument("--test-images", default=None)
    p.add_argument("--test-labels", default=None)
    p.add_argument("--dict", default=None)
    p.add_argument("--train-count", type=int, default=None)
    p.add_argument("--test-count", type=int, default=None)
    p.add_argument("--csr", type=float, default=None)
    p.add_argument("--matrix", choices=["gaussian", "hadamard"], default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--step", type=float, default=None)
    p.add_argument("--l2", type=float, default=None)
    p.add_argument("--features-out", default=None)
    p.add_argument("--model-out", default=None)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_classify)

    p = subs.add_parser("benchmark", help="csr sweep: measure, reconstruct, classify")
    p.add_argument("--train-images", required=True)
    p.add_argument("--train-labels", required=True)
    p.add_argument("--test-images", required=True)
    p.add_argument("--test-labels", required=True)
    p.add_argument("--dict", required=True)
    p.add_argument("--csr-list", default=None)
    p.add_argument("--matrix", choices=["gaussian", "hadamard"], default=None)
    p.add_argument("--recon-count", type=int, default=None)
    p.add_argument("--train-count", type=int, default=None)
    p.add_argument("--test-count", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--step", type=float, default=None)
    p.add_argument("--l2", type=float, default=None)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_benchmark)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args._config_values = (_read_config_file(args.config)
                               if args.config else {})
    except (OSError, ValueError) as exc:
        print(f"convcs: {exc}", file=sys.stderr)
        return _EXIT_USAGE
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"convcs: numeric failure: {exc}", file=sys.stderr)
        return _EXIT_NUMERIC
    except (OSError, ValueError) as exc:
        print(f"convcs: {exc}", file=sys.stderr)
        return _EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
