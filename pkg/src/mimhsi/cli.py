"""Command-line entry points.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
The MIM_SEED environment variable overrides the seed found in a config file.
Heavy imports happen inside command handlers so --threads can pin the BLAS
thread pools before numpy loads.
"""

from __future__ import annotations

import argparse
import configparser
import os
import sys


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parse_hw(text):
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError as exc:
        raise UsageError(f"--hw expects HxW, got '{text}'") from exc


# -- run configuration ------------------------------------------------------------

_CONFIG_SCHEMA = {
    "data": {"cube", "labels", "manifest"},
    "model": {
        "patch", "pca_bands", "embed_dim", "hidden_dim", "state_dim", "depth",
        "conv_width", "scan_design", "scan_types", "fusion", "use_stl",
        "use_gdm", "use_stf", "cascade", "classes",
    },
    "train": {"seed", "epochs", "batch_size", "lr", "weight_decay", "out_dir"},
}

_BOOLS = {"true": True, "false": False, "yes": True, "no": False, "1": True, "0": False}


def _get(cp, section, key, cast, default=None, required=False):
    if not cp.has_option(section, key):
        if required:
            raise UsageError(f"config missing required key [{section}] {key}")
        return default
    raw = cp.get(section, key)
    try:
        if cast is bool:
            return _BOOLS[raw.strip().lower()]
        return cast(raw)
    except (ValueError, KeyError) as exc:
        raise UsageError(f"bad value for [{section}] {key}: '{raw}'") from exc


def load_run_config(path):
    """Strict key/value-with-sections run configuration; unknown keys are
    rejected so ablation grids cannot be silently mistyped."""
    if not os.path.isfile(path):
        from .data import DataError

        raise DataError(f"config file not found: {path}")
    cp = configparser.ConfigParser()
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except configparser.Error as exc:
        raise UsageError(f"cannot parse config: {exc}") from exc
    for section in cp.sections():
        if section not in _CONFIG_SCHEMA:
            raise UsageError(f"unknown config section [{section}]")
        for key in cp.options(section):
            if key not in _CONFIG_SCHEMA[section]:
                raise UsageError(f"unknown config key [{section}] {key}")
    paths = {
        "cube": _get(cp, "data", "cube", str, required=True),
        "labels": _get(cp, "data", "labels", str, required=True),
        "manifest": _get(cp, "data", "manifest", str, required=True),
    }
    model_kw = {
        "patch": _get(cp, "model", "patch", int, 7),
        "pca_bands": _get(cp, "model", "pca_bands", int, 60),
        "embed_dim": _get(cp, "model", "embed_dim", int, 64),
        "hidden_dim": _get(cp, "model", "hidden_dim", int, 64),
        "state_dim": _get(cp, "model", "state_dim", int, 16),
        "depth": _get(cp, "model", "depth", int, 2),
        "conv_width": _get(cp, "model", "conv_width", int, 4),
        "scan_design": _get(cp, "model", "scan_design", str, "mamba"),
        "scan_types": _get(cp, "model", "scan_types", int, 4),
        "fusion": _get(cp, "model", "fusion", str, "pre-merge"),
        "use_stl": _get(cp, "model", "use_stl", bool, True),
        "use_gdm": _get(cp, "model", "use_gdm", bool, True),
        "use_stf": _get(cp, "model", "use_stf", bool, True),
        "cascade": _get(cp, "model", "cascade", str, "fused"),
        "classes": _get(cp, "model", "classes", int, None),
    }
    train_kw = {
        "seed": _get(cp, "train", "seed", int, 0),
        "epochs": _get(cp, "train", "epochs", int, 300),
        "batch_size": _get(cp, "train", "batch_size", int, 64),
        "lr": _get(cp, "train", "lr", float, 5e-4),
        "weight_decay": _get(cp, "train", "weight_decay", float, 0.01),
        "out_dir": _get(cp, "train", "out_dir", str, "."),
    }
    return paths, model_kw, train_kw


def _require_files(*paths):
    from .data import DataError

    for p in paths:
        if not os.path.isfile(p):
            raise DataError(f"file not found: {p}")


def _load_scene(cube_path, labels_path, pca_bands):
    from .data import DataError, load_cube, load_labels, pca_reduce

    cube = load_cube(cube_path)
    labels = None
    if labels_path is not None:
        labels = load_labels(labels_path)
        if labels.data.shape != (cube.h, cube.w):
            raise DataError("label map shape does not match the cube")
    return pca_reduce(cube, pca_bands), labels


# -- commands ----------------------------------------------------------------------


def cmd_synth(args):
    from .data import LabelMap, make_split, save_cube, save_labels, save_manifest, synth_generate

    if args.classes < 2:
        raise UsageError("K >= 2 classes required")
    h, w = _parse_hw(args.hw)
    cube, labels = synth_generate(args.seed, h, w, args.bands, args.classes, noise=args.noise)
    manifest = make_split(labels, args.train_per_class, args.seed)
    os.makedirs(args.out, exist_ok=True)
    save_cube(os.path.join(args.out, "cube.hsic"), cube)
    save_labels(os.path.join(args.out, "labels.hsil"), labels)
    save_manifest(os.path.join(args.out, "manifest.txt"), manifest)
    import numpy as np

    print(f"wrote cube.hsic labels.hsil manifest.txt to {args.out}")
    for cls in range(1, args.classes + 1):
        total = int(np.count_nonzero(labels.data == cls))
        print(f"class {cls}: {total} pixels ({len(manifest.train[cls])} train)")
    return 0


def _resolve_classes(model_kw, labels, manifest):
    from .data import DataError

    observed = labels.n_classes
    configured = model_kw.pop("classes")
    n_classes = configured if configured is not None else observed
    if n_classes < 2 or observed > n_classes:
        raise DataError(f"label map has {observed} classes but config says {n_classes}")
    if manifest is not None and manifest.train and max(manifest.train) > n_classes:
        raise DataError("manifest references classes beyond the configured count")
    return n_classes


def cmd_train(args):
    from .data import load_manifest
    from .model import MimConfig, save_checkpoint, train_model

    paths, model_kw, train_kw = load_run_config(args.config)
    _require_files(paths["cube"], paths["labels"], paths["manifest"])
    seed = int(os.environ["MIM_SEED"]) if os.environ.get("MIM_SEED") else train_kw["seed"]

    pca_bands = model_kw.pop("pca_bands")
    cube, labels = _load_scene(paths["cube"], paths["labels"], pca_bands)
    manifest = load_manifest(paths["manifest"])
    n_classes = _resolve_classes(model_kw, labels, manifest)
    cfg = MimConfig(bands=cube.c, n_classes=n_classes, **model_kw).validate()

    out_dir = train_kw["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    model, history = train_model(
        cube, labels, manifest, cfg,
        seed=seed, epochs=train_kw["epochs"], batch_size=train_kw["batch_size"],
        lr=train_kw["lr"], weight_decay=train_kw["weight_decay"], log=print,
    )
    ckpt_path = os.path.join(out_dir, "checkpoint.mimc")
    save_checkpoint(ckpt_path, model, seed)
    with open(os.path.join(out_dir, "metrics.csv"), "w") as fh:
        n_scales = len(cfg.scale_sizes)
        scale_cols = ",".join(f"loss_scale{i}" for i in range(n_scales))
        fh.write(f"epoch,loss,{scale_cols},train_oa\n")
        for row in history:
            scales = ",".join(f"{v:.10g}" for v in row["scale_losses"])
            fh.write(f"{row['epoch']},{row['loss']:.10g},{scales},{row['train_oa']:.10g}\n")
    print(f"checkpoint written to {ckpt_path}")
    return 0


def _evaluate(model, cube, manifest):
    import numpy as np

    from .data import confusion_matrix
    from .model import predict_classes

    coords, true = [], []
    for cls in sorted(manifest.test):
        for rc in manifest.test[cls]:
            coords.append(rc)
            true.append(cls)
    pred = predict_classes(model, cube, np.asarray(coords))
    return confusion_matrix(np.asarray(true), pred, model.cfg.n_classes)


def cmd_eval(args):
    import numpy as np

    from .data import DataError, load_manifest, metrics
    from .model import load_checkpoint

    _require_files(args.checkpoint, args.data, args.labels, args.manifest)
    model, _ = load_checkpoint(args.checkpoint)
    cube, labels = _load_scene(args.data, args.labels, model.cfg.bands)
    if cube.c != model.cfg.bands:
        raise DataError("cube band count does not match the checkpoint")
    if labels.n_classes > model.cfg.n_classes:
        raise DataError(
            f"label map has {labels.n_classes} classes, checkpoint expects {model.cfg.n_classes}"
        )
    manifest = load_manifest(args.manifest)
    cm = _evaluate(model, cube, manifest)
    m = metrics(cm)
    print("class  accuracy")
    for cls, acc in enumerate(m["per_class"], start=1):
        print(f"{cls:5d}  {acc:.4f}" if np.isfinite(acc) else f"{cls:5d}  n/a")
    print(f"OA    {m['oa']:.6f}")
    print(f"AA    {m['aa']:.6f}")
    print(f"kappa {m['kappa']:.6f}")
    np.savetxt(args.confusion_out, cm, fmt="%d", delimiter=",")
    print(f"confusion matrix written to {args.confusion_out}")
    return 0


def cmd_predict_map(args):
    from .data import write_class_map_ppm
    from .model import load_checkpoint, predict_map

    _require_files(args.checkpoint, args.data)
    if args.labels:
        _require_files(args.labels)
    model, _ = load_checkpoint(args.checkpoint)
    cube, labels = _load_scene(args.data, args.labels, model.cfg.bands)
    class_map = predict_map(model, cube, label_map=None if args.all else labels)
    write_class_map_ppm(args.out, class_map)
    print(f"classification map written to {args.out}")
    return 0


def cmd_scan_viz(args):
    from .scan import continuity_stats, scan_map

    try:
        m = scan_map(args.p, args.design, args.type)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    for k, (r, c) in enumerate(m.order):
        print(f"{k} {r} {c}")
    jumps, mean_step = continuity_stats(m)
    print(f"jumps={jumps} mean_step_distance={mean_step:.4f}")
    return 0


def cmd_gradcheck(args):
    from .autodiff import NumericError
    from .gradcheck import run_all

    results = run_all(seed=args.seed, corrupt=args.corrupt, n_trials=args.trials)
    failed = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"[{status}] {r.suite:15s} {r.op:35s} max_rel_err={r.max_rel_err:.3e} (tol {r.threshold:g})")
        failed += not r.passed
    if failed:
        raise NumericError(f"{failed} gradient check(s) above tolerance")
    print("all gradient checks passed")
    return 0


_ABLATION_COMPONENTS = {
    "none": (False, False, False),
    "stl": (True, False, False),
    "gdm": (False, True, False),
    "stf": (False, False, True),
    "stl+gdm": (True, True, False),
    "stl+stf": (True, False, True),
    "gdm+stf": (False, True, True),
    "stl+gdm+stf": (True, True, True),
}


def ablation_recipe(seed, *, epochs, variant=None, design="mamba", scan_types=4):
    """One micro-scale synthetic training run; returns (oa, aa, kappa)."""
    from .data import make_split, metrics, pca_reduce, synth_generate
    from .model import MimConfig, train_model

    cube, labels = synth_generate(seed, 24, 24, 12, 4, noise=0.05)
    cube = pca_reduce(cube, 6)
    manifest = make_split(labels, 10, seed)
    use_stl, use_gdm, use_stf = _ABLATION_COMPONENTS[variant or "stl+gdm+stf"]
    cfg = MimConfig(
        patch=5, bands=cube.c, embed_dim=16, hidden_dim=16, n_classes=4,
        depth=1, state_dim=4, conv_width=4, scan_design=design, scan_types=scan_types,
        use_stl=use_stl, use_gdm=use_gdm, use_stf=use_stf,
    )
    model, _ = train_model(cube, labels, manifest, cfg, seed=seed, epochs=epochs,
                           batch_size=16, lr=2e-3)
    m = metrics(_evaluate(model, cube, manifest))
    return m["oa"], m["aa"], m["kappa"]


def cmd_ablate(args):
    rows = []
    if args.grid == "components":
        variants = list(_ABLATION_COMPONENTS) if not args.variants else args.variants.split(",")
        for bad in set(variants) - set(_ABLATION_COMPONENTS):
            raise UsageError(f"unknown component variant '{bad}'")
        for variant in variants:
            for seed in range(args.seeds):
                oa, aa, kappa = ablation_recipe(seed, epochs=args.epochs, variant=variant)
                rows.append((variant, seed, oa, aa, kappa))
                print(f"{variant:12s} seed={seed} OA={oa:.4f} AA={aa:.4f} kappa={kappa:.4f}")
    else:
        from .scan import DESIGNS

        for design in DESIGNS:
            for n_types in (1, 2, 3, 4):
                for seed in range(args.seeds):
                    oa, aa, kappa = ablation_recipe(
                        seed, epochs=args.epochs, design=design, scan_types=n_types
                    )
                    rows.append((f"{design}/{n_types}", seed, oa, aa, kappa))
                    print(f"{design:9s} types={n_types} seed={seed} OA={oa:.4f}")
    with open(args.out, "w") as fh:
        fh.write("variant,seed,oa,aa,kappa\n")
        for variant, seed, oa, aa, kappa in rows:
            fh.write(f"{variant},{seed},{oa:.6f},{aa:.6f},{kappa:.6f}\n")
    print(f"ablation grid written to {args.out}")
    return 0


# -- parser ------------------------------------------------------------------------


def build_parser():
    parser = _Parser(prog="mimhsi", description=__doc__)
    parser.add_argument("--threads", type=int, default=1,
                        help="BLAS thread cap; 1 (default) is the deterministic CI mode")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic labeled cube")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--hw", default="64x64", help="scene size HxW")
    p.add_argument("--bands", type=int, default=32)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--train-per-class", type=int, default=20)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train from a run-config file")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the manifest's test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--confusion-out", default="confusion.csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict-map", help="write a P6 PPM classification map")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--labels", help="restrict prediction to labeled pixels")
    p.add_argument("--all", action="store_true", help="classify every pixel")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict_map)

    p = sub.add_parser("scan-viz", help="print a scan order and its continuity stats")
    p.add_argument("--p", type=int, required=True)
    p.add_argument("--design", default="mamba")
    p.add_argument("--type", type=int, default=1)
    p.set_defaults(func=cmd_scan_viz)

    p = sub.add_parser("gradcheck", help="run the finite-difference suites")
    p.add_argument("--preset", choices=["tiny"], default="tiny")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=20, help="random draws per primitive")
    p.add_argument("--corrupt", action="store_true",
                   help="test hook: inject a broken backward (suite must fail)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train an ablation grid on the synthetic recipe")
    p.add_argument("--grid", choices=["components", "scans"], required=True)
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--epochs", type=int, default=12)
    p.add_argument("--variants", help="comma list restricting the components grid")
    p.add_argument("--out", default="ablation.csv")
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(args.threads)
    from .autodiff import NumericError
    from .data import DataError

    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
