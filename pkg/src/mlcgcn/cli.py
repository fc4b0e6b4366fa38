"""Command-line entry point.

Subcommands: synth, train, eval, ablate, gradcheck, export. Configuration
comes from a flat "key = value" file with dotted keys (model.levels,
train.learning_rate, synth.noise); repeated --set key=value flags override
file values, and every run writes a resolved-config snapshot to its output
directory. Exit codes: 0 success, 1 verification/metric failure, 2
usage/config error. Logs go to stderr, data to files and stdout.
"""

import argparse
import dataclasses
import logging
import os
import sys
import time
from pathlib import Path

from . import autodiff as ad
from .autodiff import Tensor
from .data import (
    DatasetManifest,
    SyntheticSpec,
    export_connectome,
    generate_synthetic,
    load_dataset,
    load_manifest,
    mean_graph,
    node_importance,
    top_edges,
    write_dataset,
)
from .errors import (
    ConfigError,
    ContractError,
    DataError,
    ForwardError,
    OracleError,
    ShapeError,
    TrainingError,
)
from .losses import BatchTargets, cross_entropy, group_loss, total_loss
from .metrics import compute_metrics
from .model import MLCGCN, ModelConfig, predict
from .seeding import derive_rng
from .training import (
    TABLE_VARIANTS,
    TrainConfig,
    ablation_table,
    evaluate_model,
    run_ablation,
    run_cv,
)

log = logging.getLogger("mlcgcn")

OUTPUT_ENV = "MLCGCN_OUT"


def _bool(text):
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _level_subset(text):
    low = str(text).strip().lower()
    if low in ("", "all", "none"):
        return None
    return tuple(int(v) for v in low.split("+"))


_MODEL_KEYS = {
    "model.n_rois": int,
    "model.series_len": int,
    "model.embed_len": int,
    "model.conv_kernels": int,
    "model.kernel_size": int,
    "model.hidden_size": int,
    "model.levels": int,
    "model.attention_heads": int,
    "model.gcn_layers": int,
    "model.gcn_hidden": int,
    "model.readout_dim": int,
    "model.classes": int,
    "model.dropout_rate": float,
    "model.use_sfe": _bool,
    "model.use_tfe": _bool,
    "model.use_positional_encoding": _bool,
    "model.normalize_adjacency": _bool,
    "model.readout_mode": str,
    "model.level_subset": _level_subset,
}
_TRAIN_KEYS = {
    "train.learning_rate": float,
    "train.weight_decay": float,
    "train.epochs": int,
    "train.batch_size": int,
    "train.mixup_alpha": float,
    "train.alpha": float,
    "train.seed": int,
    "train.folds": int,
}
_SYNTH_KEYS = {
    "synth.classes": int,
    "synth.per_class": int,
    "synth.n_rois": int,
    "synth.series_len": int,
    "synth.latent_rank": int,
    "synth.strength": float,
    "synth.noise": float,
    "synth.seed": int,
    "synth.hubs": int,
    "synth.hub_gain": float,
}
_KNOWN_KEYS = {**_MODEL_KEYS, **_TRAIN_KEYS, **_SYNTH_KEYS}


def parse_config_file(path):
    """Read "key = value" lines; '#' starts a comment; unknown keys rejected."""
    raw = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = stripped.partition("=")
        raw[key.strip()] = value.strip()
    return raw


def resolve_config(args):
    """Merge config file and --set overrides into a typed key->value dict."""
    raw = {}
    if getattr(args, "config", None):
        raw.update(parse_config_file(args.config))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        raw[key.strip()] = value.strip()
    typed = {}
    for key, value in raw.items():
        if key.startswith("run."):
            continue  # snapshot bookkeeping keys are ignored on input
        if key not in _KNOWN_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            typed[key] = _KNOWN_KEYS[key](value)
        except ValueError as exc:
            raise ConfigError(f"config key {key}: {exc}") from exc
    return typed


def _dataclass_from_keys(cls, prefix, typed, extra=None):
    kwargs = dict(extra or {})
    for key, value in typed.items():
        if key.startswith(prefix):
            kwargs[key[len(prefix):]] = value
    return cls(**kwargs)


def _out_dir(args):
    out = args.out or os.environ.get(OUTPUT_ENV) or "out"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_snapshot(outdir, subcommand, typed, run_extras=None):
    """Persist every resolved key so the run can be reproduced from the file."""
    lines = [f"run.subcommand = {subcommand}"]
    for key, value in (run_extras or {}).items():
        lines.append(f"run.{key} = {value}")
    for key in sorted(typed):
        value = typed[key]
        if isinstance(value, tuple):
            value = "+".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    (Path(outdir) / "resolved.cfg").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _fill_model_defaults(typed, manifest):
    """Model geometry follows the dataset; explicit conflicting keys fail fast."""
    derived = {
        "model.n_rois": manifest.n_rois,
        "model.series_len": manifest.series_len,
        "model.classes": len(manifest.classes),
    }
    for key, value in derived.items():
        if key in typed and typed[key] != value:
            raise ConfigError(
                f"{key}={typed[key]} conflicts with the manifest value {value}"
            )
        typed[key] = value
    return typed


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args):
    typed = resolve_config(args)
    spec = _dataclass_from_keys(SyntheticSpec, "synth.", typed)
    outdir = _out_dir(args)
    samples, truth = generate_synthetic(spec)
    manifest = DatasetManifest(
        classes=spec.class_names(), n_rois=spec.n_rois, series_len=spec.series_len
    )
    manifest_path = write_dataset(samples, truth, manifest, outdir, force=args.force)
    typed.update({f"synth.{f.name}": getattr(spec, f.name) for f in dataclasses.fields(spec)})
    write_snapshot(outdir, "synth", typed)
    per_class = {name: sum(1 for s in samples if spec.class_names()[s.label] == name)
                 for name in spec.class_names()}
    print(f"wrote {len(samples)} scans to {manifest_path}")
    for name, count in per_class.items():
        print(f"  {name}: {count}")
    return 0


def _build_configs(args, manifest):
    typed = resolve_config(args)
    typed = _fill_model_defaults(typed, manifest)
    if getattr(args, "levels", None) is not None:
        typed["model.levels"] = args.levels
    if getattr(args, "ablate", None):
        ablate_keys = {
            "no-sfe": {"model.use_sfe": False},
            "no-tfe": {"model.use_tfe": False},
            "no-group": {"train.alpha": 0.0},
        }
        if args.ablate not in ablate_keys:
            raise ConfigError(f"--ablate must be one of {sorted(ablate_keys)}, got {args.ablate!r}")
        typed.update(ablate_keys[args.ablate])
    model_cfg = _dataclass_from_keys(ModelConfig, "model.", typed)
    train_cfg = _dataclass_from_keys(TrainConfig, "train.", typed)
    return typed, model_cfg, train_cfg


def cmd_train(args):
    samples = load_dataset(args.manifest)
    manifest = load_manifest(args.manifest)
    typed, model_cfg, train_cfg = _build_configs(args, manifest)
    outdir = _out_dir(args)
    typed.update({f"model.{f.name}": getattr(model_cfg, f.name) for f in dataclasses.fields(model_cfg)})
    typed.update({f"train.{f.name}": getattr(train_cfg, f.name) for f in dataclasses.fields(train_cfg)})
    typed["model.level_subset"] = model_cfg.level_subset or "all"
    write_snapshot(outdir, "train", typed, {"manifest": args.manifest})

    result = run_cv(samples, model_cfg, train_cfg)
    for fold, model in enumerate(result.models):
        model.save(outdir / f"fold{fold}.ckpt")
    (outdir / "fold_report.txt").write_text(result.report.to_text(), encoding="utf-8")
    (outdir / "fold_report.json").write_text(result.report.to_json(), encoding="utf-8")
    print(result.report.to_text(), end="")
    return 0


def cmd_eval(args):
    model = MLCGCN.load(args.checkpoint)
    manifest = load_manifest(args.manifest)
    cfg = model.config
    mismatches = []
    if cfg.n_rois != manifest.n_rois:
        mismatches.append(f"n_rois: checkpoint {cfg.n_rois} vs manifest {manifest.n_rois}")
    if cfg.series_len != manifest.series_len:
        mismatches.append(
            f"series_len: checkpoint {cfg.series_len} vs manifest {manifest.series_len}"
        )
    if cfg.classes != len(manifest.classes):
        mismatches.append(
            f"classes: checkpoint {cfg.classes} vs manifest {len(manifest.classes)}"
        )
    if mismatches:
        raise ConfigError("checkpoint/manifest mismatch: " + "; ".join(mismatches))
    samples = load_dataset(args.manifest)
    probs, truth = evaluate_model(model, samples)
    report = compute_metrics(probs, truth)
    outdir = _out_dir(args)
    write_snapshot(outdir, "eval", resolve_config(args),
                   {"manifest": args.manifest, "checkpoint": args.checkpoint})
    lines = [f"{name} = {100.0 * value:.2f}" for name, value in
             zip(("Acc", "AUC", "Spe", "Sen", "F1"), report.values())]
    text = "\n".join(lines) + "\n"
    (outdir / "metrics.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


def cmd_ablate(args):
    samples = load_dataset(args.manifest)
    manifest = load_manifest(args.manifest)
    typed, model_cfg, train_cfg = _build_configs(args, manifest)
    outdir = _out_dir(args)
    write_snapshot(outdir, "ablate", typed, {"manifest": args.manifest})
    variants = TABLE_VARIANTS
    if args.variant:
        variants = []
        for spec in args.variant:
            name, _, rest = spec.partition(":")
            deltas = {}
            if rest:
                for pair in rest.split(","):
                    key, _, value = pair.partition("=")
                    if key not in _KNOWN_KEYS:
                        raise ConfigError(f"unknown variant key {key!r}")
                    deltas[key] = _KNOWN_KEYS[key](value)
            variants.append((name, deltas))
    rows = run_ablation(samples, model_cfg, train_cfg, variants)
    table = ablation_table(rows)
    (outdir / "ablation.txt").write_text(table, encoding="utf-8")
    print(table, end="")
    return 1 if any(row.failed for row in rows) else 0


GRADCHECK_LIMITS = {"n_rois": 8, "series_len": 32, "levels": 2}


def gradcheck_config(n_rois=6, series_len=20, embed_len=8, levels=2, classes=3):
    return ModelConfig(
        series_len=series_len,
        classes=classes,
        n_rois=n_rois,
        embed_len=embed_len,
        conv_kernels=4,
        kernel_size=5,
        hidden_size=8,
        levels=levels,
        attention_heads=2,
        gcn_hidden=8,
        readout_dim=8,
        dropout_rate=0.2,
    )


def gradcheck_loss_builder(cfg: ModelConfig, seed=0, samples_per_class=2):
    """Deterministic composite-loss closure over a tiny labelled batch."""
    rng = derive_rng(seed, "gradcheck-data")
    series = []
    labels = []
    for cls in range(cfg.classes):
        for _ in range(samples_per_class):
            series.append(rng.normal(size=(cfg.n_rois, cfg.series_len)))
            labels.append(cls)
    targets = BatchTargets.from_labels(labels, cfg.classes)

    def loss_of(params):
        rows = []
        graphs = []
        for s in series:
            probs, levels = predict(Tensor(s), params, cfg, training=False)
            rows.append(probs)
            graphs.append(levels.adjacencies)
        ce = cross_entropy(ad.stack_rows(rows), targets)
        grp = group_loss(graphs, targets.dominant, cfg.levels)
        return total_loss(ce, grp, 1.0)

    return loss_of


def run_gradcheck(cfg: ModelConfig, tolerance, seed=0, eps=1e-6):
    """Finite-difference check of every parameter block; returns result rows."""
    model = MLCGCN(cfg, rng=derive_rng(seed, "gradcheck-init"))
    loss_of = gradcheck_loss_builder(cfg, seed=seed)

    base_params = model.params
    results = []
    for name, tensor in sorted(base_params.items()):
        def block_loss(p, _name=name):
            return loss_of({**base_params, _name: p})

        err = ad.finite_diff_check(block_loss, tensor, eps=eps)
        results.append((name, err, err < tolerance))
    return results


def cmd_gradcheck(args):
    cfg = gradcheck_config(
        n_rois=args.n_rois, series_len=args.series_len,
        embed_len=args.embed_len, levels=args.levels,
    )
    for field_name, limit in GRADCHECK_LIMITS.items():
        if getattr(cfg, field_name) > limit:
            raise ConfigError(
                f"gradcheck enforces a tiny config: {field_name} <= {limit}, "
                f"got {getattr(cfg, field_name)}"
            )
    t0 = time.perf_counter()
    results = run_gradcheck(cfg, args.tolerance, seed=args.seed)
    elapsed = time.perf_counter() - t0
    outdir = _out_dir(args)
    write_snapshot(outdir, "gradcheck", {}, {"tolerance": args.tolerance, "seed": args.seed})
    width = max(len(name) for name, _, _ in results)
    lines = []
    for name, err, ok in results:
        lines.append(f"{name.ljust(width)}  {err:.3e}  {'PASS' if ok else 'FAIL'}")
    table = "\n".join(lines) + "\n"
    (outdir / "gradcheck.txt").write_text(table, encoding="utf-8")
    print(table, end="")
    worst_name, worst_err, _ = max(results, key=lambda r: r[1])
    print(f"worst block: {worst_name} ({worst_err:.3e}); elapsed {elapsed:.1f}s")
    if all(ok for _, _, ok in results):
        return 0
    print(f"gradcheck FAILED: {worst_name} error {worst_err:.3e} >= {args.tolerance}",
          file=sys.stderr)
    return 1


def cmd_export(args):
    model = MLCGCN.load(args.checkpoint)
    samples = load_dataset(args.manifest)
    if not samples:
        raise DataError("export needs at least one scan")
    outputs = [model.predict(Tensor(s.series))[1] for s in samples]
    outdir = _out_dir(args)
    write_snapshot(outdir, "export", {}, {
        "manifest": args.manifest, "checkpoint": args.checkpoint,
        "what": args.what, "level": args.level,
    })
    mean = mean_graph(outputs, args.level)
    written = []
    if args.what == "mean-graph":
        path = outdir / "mean_graph.csv"
        export_connectome(mean, path, fmt="matrix")
        written.append(path)
    elif args.what == "top-edges":
        path = outdir / "top_edges.csv"
        lines = ["i,j,weight"]
        for i, j, w in top_edges(mean, args.fraction):
            lines.append(f"{i},{j},{w:.17g}")
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        written.append(path)
    elif args.what == "node-importance":
        path = outdir / "node_importance.csv"
        ranked = node_importance(mean)[: args.top]
        lines = ["roi,score"]
        for roi, score in ranked:
            lines.append(f"{roi},{score:.17g}")
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        written.append(path)
    for path in written:
        print(path)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mlcgcn",
        description="Multi-level connectome GCN: synthesize data, train, "
        "evaluate, ablate, gradient-check, and export connectomes.",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def common(p):
        p.add_argument("--out", default=None,
                       help=f"output directory (default ${OUTPUT_ENV} or ./out)")
        p.add_argument("--config", default=None, help="flat key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config key (repeatable)")

    p = sub.add_parser("synth", help="generate a synthetic dataset on disk")
    common(p)
    p.add_argument("--force", action="store_true", help="overwrite a non-empty directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="cross-validated training from a manifest")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--levels", type=int, default=None, help="feature levels K")
    p.add_argument("--ablate", default=None, choices=("no-sfe", "no-tfe", "no-group"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the module-ablation table")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--variant", action="append", metavar="NAME:KEY=VALUE,...",
                   help="custom variant rows (default: the six module rows)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every parameter block")
    common(p)
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-rois", type=int, default=6, dest="n_rois")
    p.add_argument("--series-len", type=int, default=20, dest="series_len")
    p.add_argument("--embed-len", type=int, default=8, dest="embed_len")
    p.add_argument("--levels", type=int, default=2)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export", help="export connectome summaries from a trained model")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--what", required=True,
                   choices=("mean-graph", "top-edges", "node-importance"))
    p.add_argument("--level", default="all",
                   help="level selector: a 1-based index, 'all', or 'pearson'")
    p.add_argument("--fraction", type=float, default=0.01)
    p.add_argument("--top", type=int, default=20)
    p.set_defaults(func=cmd_export)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse uses exit code 2 for usage errors
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigError, ContractError, DataError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, ForwardError, OracleError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
