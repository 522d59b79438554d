"""Command-line entry points.

Subcommands cover the whole workflow: generate a synthetic corpus, train the
decomposition, train a task head against it, evaluate, run the full
cross-domain grid (optionally at several unlabeled-data sizes), benchmark the
MI estimators on correlated Gaussians, and project features to 2-D for
plotting. Options may come from a JSON config file, and explicit flags win
over the file. Outputs contain no timestamps, so equal seeds give
byte-identical artifacts.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import dataio, mi, pipeline
from .dataio import SynthConfig, load_manifest, save_datasets, synth_generate
from .decomp import load_ufd, save_ufd
from .nn import UfdError
from .pipeline import ExperimentConfig
from .task import load_classifier, save_classifier


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON file with ExperimentConfig fields")
    parser.add_argument("--seed", type=int, help="master seed")
    parser.add_argument("--dim", type=int, help="embedding dimension")
    parser.add_argument("--n-classes", type=int, dest="n_classes")
    parser.add_argument(
        "--ablation",
        dest="ablation_mode",
        choices=["max-mi", "max-min-mi", "2max-min-mi", "max-2min", "2max-2min"],
        help="which loss terms are active",
    )
    parser.add_argument(
        "--input-mode",
        dest="input_mode",
        choices=["invariant", "invariant-specific"],
        help="classifier input wiring",
    )
    parser.add_argument("--learning-rate", type=float, dest="learning_rate")
    parser.add_argument("--ufd-epochs", type=int, dest="ufd_epochs")
    parser.add_argument("--task-epochs", type=int, dest="task_epochs")
    parser.add_argument("--ufd-batch", type=int, dest="ufd_batch")
    parser.add_argument("--task-batch", type=int, dest="task_batch")
    parser.add_argument(
        "--unlabeled-per-domain", type=int, dest="unlabeled_per_domain"
    )
    parser.add_argument("--validation-size", type=int, dest="validation_size")
    parser.add_argument("--seeds-per-pair", type=int, dest="seeds_per_pair")
    parser.add_argument("--select-by", dest="select_by", choices=["loss", "accuracy"])
    parser.add_argument("--alpha", type=float, help="weight of the h/f_s term")
    parser.add_argument("--beta", type=float, help="weight of the v_s/f_s term")
    parser.add_argument("--gamma", type=float, help="weight of the f_s/f_p term")
    parser.add_argument("--delta", type=float, help="weight of the v_s/v_p term")


_CONFIG_FIELDS = {f.name for f in dataclasses.fields(ExperimentConfig)}


def _build_config(args, default_dim: int | None = None) -> ExperimentConfig:
    """Defaults < config file < explicit flags. default_dim fills `dim` when
    neither the file nor a flag pins it (e.g. from a manifest)."""
    data: dict = {}
    if getattr(args, "config", None):
        data.update(json.loads(Path(args.config).read_text()))
    for name in _CONFIG_FIELDS:
        val = getattr(args, name, None)
        if val is not None:
            data[name] = val
    weights = dict(data.get("weights") or {})
    for wname in ("alpha", "beta", "gamma", "delta"):
        val = getattr(args, wname, None)
        if val is not None:
            weights[wname] = val
    if weights:
        data["weights"] = weights
    if "dim" not in data and default_dim is not None:
        data["dim"] = default_dim
    return ExperimentConfig.from_dict(data)


def _echo_config(config: ExperimentConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(
        json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n"
    )


def _write_history(history: list[dict[str, float]], path: Path) -> None:
    term_cols = [
        k
        for k in ("loss_s", "loss_r", "loss_p", "loss_m")
        if history and k in history[0]
    ]
    lines = [",".join(["step", "epoch", "total", *term_cols])]
    for step, entry in enumerate(history):
        row = [str(step), str(int(entry["epoch"])), repr(entry["total"])]
        row.extend(repr(entry[c]) for c in term_cols)
        lines.append(",".join(row))
    path.write_text("\n".join(lines) + "\n")


def _cmd_synth_gen(args) -> int:
    cfg = SynthConfig(
        dim=args.dim,
        shared_dim=args.shared_dim,
        private_dim=args.private_dim,
        n_domains=args.domains,
        offset=args.offset,
        mean_task_overlap=args.mean_task_overlap,
        noise_sigma=args.noise_sigma,
        unlabeled_rows=args.unlabeled_rows,
        train_rows=args.train_rows,
        validation_rows=args.validation_rows,
        test_rows=args.test_rows,
        source_language=args.source_language,
        target_language=args.target_language,
        seed=args.seed,
    )
    data = synth_generate(cfg)
    manifest_path = save_datasets(
        args.out, data.datasets, classes=2, source_language=cfg.source_language
    )
    print(f"wrote {len(data.datasets)} datasets and {manifest_path}")
    return 0


def _cmd_train_ufd(args) -> int:
    manifest = load_manifest(args.manifest)
    config = _build_config(args, default_dim=manifest.dimension)
    if config.dim != manifest.dimension:
        raise UfdError(
            f"config dim {config.dim} does not match manifest dimension "
            f"{manifest.dimension}"
        )
    src = manifest.source_language
    unlabeled = [manifest.get(src, d, "unlabeled") for d in manifest.domains(src, "unlabeled")]
    if not unlabeled:
        raise UfdError(f"manifest has no unlabeled {src!r} datasets")
    model, history = pipeline.train_ufd_stage(config, unlabeled)
    out_dir = Path(args.out)
    _echo_config(config, out_dir)
    save_ufd(model, out_dir / "ufd.ckpt")
    _write_history(history, out_dir / "ufd_history.csv")
    print(f"trained on {sum(ds.n for ds in unlabeled)} rows; wrote {out_dir / 'ufd.ckpt'}")
    return 0


def _cmd_train_task(args) -> int:
    manifest = load_manifest(args.manifest)
    config = _build_config(args, default_dim=manifest.dimension)
    model = load_ufd(args.ufd, learning_rate=config.learning_rate)
    if model.dim != manifest.dimension:
        raise UfdError(
            f"checkpoint dim {model.dim} does not match manifest dimension "
            f"{manifest.dimension}"
        )
    if config.dim != model.dim:
        raise UfdError(f"config dim {config.dim} does not match checkpoint dim {model.dim}")
    model.freeze()
    train = manifest.get(manifest.source_language, args.source_domain, "train")
    validation = manifest.get(args.target_language, args.target_domain, "validation")
    clf, info = pipeline.train_task_stage(config, model, train, validation)
    out_dir = Path(args.out)
    _echo_config(config, out_dir)
    save_classifier(clf, out_dir / "classifier.ckpt")
    (out_dir / "selection.json").write_text(
        json.dumps(
            {
                "best_epoch": info.best_epoch,
                "best_val_loss": info.best_val_loss,
                "best_val_accuracy": info.best_val_accuracy,
                "val_losses": info.val_losses,
                "val_accuracies": info.val_accuracies,
            },
            indent=2,
            sort_keys=True,
        )
        + "\n"
    )
    print(
        f"selected epoch {info.best_epoch} "
        f"(val_loss={info.best_val_loss:.6f}, val_acc={info.best_val_accuracy:.4f}); "
        f"wrote {out_dir / 'classifier.ckpt'}"
    )
    return 0


def _cmd_eval(args) -> int:
    manifest = load_manifest(args.manifest)
    model = load_ufd(args.ufd)
    if model.dim != manifest.dimension:
        raise UfdError(
            f"checkpoint dim {model.dim} does not match manifest dimension "
            f"{manifest.dimension}"
        )
    clf = load_classifier(args.classifier)
    if clf.dim != model.dim:
        raise UfdError(
            f"classifier dim {clf.dim} does not match checkpoint dim {model.dim}"
        )
    model.freeze()
    test = manifest.get(args.target_language, args.target_domain, args.split)
    acc = pipeline.evaluate(model, clf, test)
    print(
        f"{args.target_language}-{args.target_domain} {args.split} "
        f"accuracy: {acc:.4f} ({test.n} rows)"
    )
    return 0


def _cmd_grid(args) -> int:
    manifest = load_manifest(args.manifest)
    config = _build_config(args, default_dim=manifest.dimension)
    out_dir = Path(args.out)
    _echo_config(config, out_dir)
    if args.sizes:
        sizes = [int(s) for s in args.sizes.split(",") if s]
        points = pipeline.run_size_sweep(config, manifest, sizes)
        summary = ["size,overall_mean_accuracy"]
        for size, report in points:
            sub = out_dir / f"size_{size}"
            pipeline.write_report(report, sub)
            summary.append(f"{size},{report.overall_mean()!r}")
            print(f"size {size}: mean accuracy {report.overall_mean():.4f}")
        (out_dir / "sweep.csv").write_text("\n".join(summary) + "\n")
        return 0
    report = pipeline.run_experiment_grid(config, manifest)
    pipeline.write_report(report, out_dir)
    print(report_tail(report))
    return 0


def report_tail(report) -> str:
    cells = ", ".join(
        f"{lang}-{dom}={report.cell_mean(lang, dom):.4f}" for lang, dom in report.cells()
    )
    return f"cells: {cells}; overall mean accuracy {report.overall_mean():.4f}"


def _cmd_mi_bench(args) -> int:
    rhos = [float(r) for r in args.rhos.split(",") if r]
    means = mi.mi_benchmark(
        rhos=rhos,
        seeds=args.seeds,
        steps=args.steps,
        batch=args.batch,
        learning_rate=args.learning_rate,
        hidden=args.hidden,
        base_seed=args.seed,
    )
    lines = ["estimator,rho,mean_estimate,analytic_mi"]
    for estimator in ("jsd", "dv"):
        for rho in rhos:
            est = means[estimator][rho]
            ana = mi.gaussian_analytic_mi(rho)
            lines.append(f"{estimator},{rho!r},{est!r},{ana!r}")
            print(f"{estimator:>4} rho={rho:<4} estimate={est: .4f} analytic={ana:.4f}")
    if args.out:
        Path(args.out).write_text("\n".join(lines) + "\n")
    return 0


def _cmd_project(args) -> int:
    features = dataio.read_embeddings(args.embeddings)
    if args.tags:
        tags = Path(args.tags).read_text().splitlines()
        if len(tags) != features.shape[0]:
            raise UfdError(
                f"{len(tags)} tags for {features.shape[0]} rows in {args.embeddings}"
            )
    else:
        tags = ["row"] * features.shape[0]
    coords, _ = dataio.pca_project_2d(features, seed=args.seed)
    dataio.write_projection(args.out, coords, tags)
    print(f"wrote {coords.shape[0]} projected rows to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ufd",
        description="Decompose document embeddings into domain-invariant and "
        "domain-specific features; train and evaluate cross-domain transfer.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", help="generate a synthetic cross-domain corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--shared-dim", type=int, default=8)
    p.add_argument("--private-dim", type=int, default=8)
    p.add_argument("--domains", type=int, default=2)
    p.add_argument("--offset", type=float, default=6.0)
    p.add_argument("--mean-task-overlap", type=float, default=0.5)
    p.add_argument("--noise-sigma", type=float, default=0.5)
    p.add_argument("--unlabeled-rows", type=int, default=2000)
    p.add_argument("--train-rows", type=int, default=1000)
    p.add_argument("--validation-rows", type=int, default=100)
    p.add_argument("--test-rows", type=int, default=1000)
    p.add_argument("--source-language", default="src")
    p.add_argument("--target-language", default="tgt")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_synth_gen)

    p = sub.add_parser("train-ufd", help="stage 1: fit the decomposition")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=_cmd_train_ufd)

    p = sub.add_parser("train-task", help="stage 2: fit a task head on frozen features")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ufd", required=True, help="stage-1 checkpoint")
    p.add_argument("--source-domain", required=True)
    p.add_argument("--target-language", required=True)
    p.add_argument("--target-domain", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=_cmd_train_task)

    p = sub.add_parser("eval", help="accuracy of a trained head on a test split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ufd", required=True)
    p.add_argument("--classifier", required=True)
    p.add_argument("--target-language", required=True)
    p.add_argument("--target-domain", required=True)
    p.add_argument("--split", default="test")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("grid", help="all cross-domain pairs, several seeds")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sizes", help="comma-separated unlabeled sizes for a sweep")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_grid)

    p = sub.add_parser("mi-bench", help="estimator check on correlated Gaussians")
    p.add_argument("--rhos", default="0,0.5,0.9")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--learning-rate", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="optional CSV path")
    p.set_defaults(func=_cmd_mi_bench)

    p = sub.add_parser("project", help="2-D projection of an embedding file")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--tags", help="text file, one tag per row")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_project)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UfdError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
