"""Command-line orchestration: data, training, factorization, search, reports.

Every command writes a run manifest (flags, seed, model checksums, tool
version, timestamps) next to its outputs; all content-addressed outputs
are reproducible byte-for-byte from the same flags, wall times aside.
Exit codes: 0 success, 2 usage error, 3 data or model error, 4 internal
invariant violation.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, nn
from .models import ModelBundle, ModelConfig
from .pgm import PgmError, read_pgm, write_pgm
from .phantom import (
    GenerationError,
    InvalidParameterError,
    PATHOLOGIES,
    generate_dataset,
    load_dataset,
    save_dataset,
)
from .reporting import (
    ReportError,
    grid_array,
    load_result_json,
    markdown_report,
    probe_report,
    render_grid_png,
)
from .rng import Rng, derive_seed
from .search import (
    InvariantError,
    PreconditionError,
    SearchConfig,
    att_find,
    eigen_find,
)
from .stylespace import FactorizationError, sefa_factorize
from .training import (
    ConfigurationError,
    FrozenModelError,
    TrainConfig,
    evaluate_classifier,
    evaluate_generator,
    train_classifier,
    train_generator_encoder,
)
from .weights import WeightFileError, read_weights, write_weights


class UsageError(ValueError):
    pass


class DataError(RuntimeError):
    pass


def _utc_now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


def _write_manifest(
    out_dir: Path,
    command: str,
    args: argparse.Namespace,
    started: str,
    checksums: dict[str, str] | None = None,
    extra: dict | None = None,
) -> None:
    flags = {k: v for k, v in vars(args).items() if k != "func"}
    manifest = {
        "command": command,
        "flags": flags,
        "seed": flags.get("seed"),
        "model_checksums": checksums or {},
        "tool_version": __version__,
        "started_at": started,
        "finished_at": _utc_now(),
    }
    if extra:
        manifest.update(extra)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def _load_images_labels(data_dir: str) -> tuple[list, np.ndarray, np.ndarray]:
    items = load_dataset(data_dir)
    images = np.stack([it.image for it in items])
    labels = np.array([it.label for it in items], dtype=np.int64)
    return items, images, labels


def _dataset_pathology(data_dir: str) -> str | None:
    manifest = Path(data_dir) / "run_manifest.json"
    if manifest.exists():
        try:
            return json.loads(manifest.read_text())["flags"].get("pathology")
        except (json.JSONDecodeError, KeyError):
            return None
    return None


# --- subcommands ---


def cmd_gen_data(args: argparse.Namespace) -> None:
    if args.n < 1:
        raise UsageError(f"--n must be >= 1, got {args.n}")
    if not (0.0 < args.balance < 1.0):
        raise UsageError(f"--balance must be in (0, 1), got {args.balance}")
    started = _utc_now()
    items = generate_dataset(
        args.n, args.pathology, args.seed, class_balance=args.balance,
        noise=not args.no_noise,
    )
    out = Path(args.out)
    save_dataset(items, out)
    _write_manifest(out, "gen-data", args, started)
    n_pos = sum(it.label for it in items)
    print(f"wrote {len(items)} images ({n_pos} positive) to {out}")


def cmd_train_classifier(args: argparse.Namespace) -> None:
    started = _utc_now()
    _, images, labels = _load_images_labels(args.data)
    config = TrainConfig(
        iterations=args.iterations, seed=args.seed, batch_size=args.batch_size,
        classifier_lr=args.lr,
    )
    clf, log = train_classifier(images, labels, config, log_path=args.log)
    tensors = {}
    for i, layer in enumerate(clf.mlp.layers):
        tensors[f"classifier.{i}.weight"] = layer.weight
        tensors[f"classifier.{i}.bias"] = layer.bias
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_weights(out, tensors)
    acc = log[-1]["train_accuracy"] if log else float("nan")
    _write_manifest(out.parent, "train-classifier", args, started,
                    extra={"final_train_accuracy": acc})
    print(f"classifier saved to {out} (train accuracy {acc:.4f})")


def _load_classifier_file(path: str) -> "ModelBundle":
    from .models import Classifier, _mlp_from_tensors, _layer_indices

    tensors = read_weights(path)
    if not _layer_indices(tensors, "classifier"):
        raise DataError(f"{path} holds no classifier tensors")
    mlp = _mlp_from_tensors(tensors, "classifier")
    pixels = mlp.layers[0].in_dim
    size = int(round(np.sqrt(pixels)))
    hidden = tuple(l.out_dim for l in mlp.layers[:-1])
    return Classifier(mlp, ModelConfig(image_size=size, classifier_hidden=hidden))


def cmd_train_gan(args: argparse.Namespace) -> None:
    started = _utc_now()
    _, images, _ = _load_images_labels(args.data)
    classifier = _load_classifier_file(args.classifier)
    if classifier.mlp.layers[0].in_dim != images.shape[1]:
        raise DataError(
            f"classifier expects {classifier.mlp.layers[0].in_dim} pixels, "
            f"dataset has {images.shape[1]}"
        )
    config = TrainConfig(
        iterations=args.iterations, seed=args.seed,
        lambda_rec=args.lambda_rec, lambda_cls=args.lambda_cls,
    )
    model_config = ModelConfig(classifier_hidden=classifier.config.classifier_hidden)
    gen, enc, log = train_generator_encoder(
        images, classifier, config, model_config, log_path=args.log
    )
    bundle = ModelBundle(classifier, gen, enc, model_config)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    bundle.save(out)
    metrics = evaluate_generator(classifier, gen, enc, images)
    _write_manifest(out.parent, "train-gan", args, started,
                    checksums={"models": bundle.checksum()}, extra={"train_metrics": metrics})
    print(
        f"models saved to {out} (train recon L1 {metrics['recon_l1']:.4f}, "
        f"label consistency {metrics['label_consistency']:.3f})"
    )


def cmd_factorize(args: argparse.Namespace) -> None:
    started = _utc_now()
    bundle = ModelBundle.load(args.models)
    basis = sefa_factorize(
        bundle.generator, args.k, empirical=args.empirical,
        n_samples=args.samples, seed=args.seed,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    basis.save(out)
    _write_manifest(out.parent, "factorize", args, started,
                    checksums={"models": bundle.checksum()})
    print(f"style basis (k={basis.k}) saved to {out}")
    print("eigenvalues:", " ".join(f"{v:.4g}" for v in basis.eigenvalues))


def _write_counterfactuals(result, cf_dir: Path) -> None:
    cf_dir.mkdir(parents=True, exist_ok=True)
    size = int(round(np.sqrt(result.explained[0].counterfactual.shape[0]))) if result.explained else 0
    for e in result.explained:
        write_pgm(cf_dir / f"cf_{e.image_id}.pgm", e.counterfactual.reshape(size, size))


def _write_grid(originals, counterfactuals, ids, pgm_path: Path, png_path: Path | None) -> None:
    grid = grid_array(originals, counterfactuals)
    write_pgm(pgm_path, grid)
    if png_path is not None:
        render_grid_png(originals, counterfactuals, ids, png_path)


def _grid_selection(result, images_by_id: dict[int, np.ndarray], columns: int):
    chosen = sorted(result.explained, key=lambda e: e.image_id)[:columns]
    originals = [images_by_id[e.image_id] for e in chosen]
    cfs = [e.counterfactual for e in chosen]
    ids = [e.image_id for e in chosen]
    return originals, cfs, ids


def cmd_explain(args: argparse.Namespace) -> None:
    if args.n < 1:
        raise UsageError(f"--n must be >= 1, got {args.n}")
    started = _utc_now()
    bundle = ModelBundle.load(args.models)
    _, images, _ = _load_images_labels(args.data)
    pathology = args.pathology or _dataset_pathology(args.data)

    y = 0 if args.from_label == "healthy" else 1
    _, preds = bundle.classifier.classify(images)
    pool = np.nonzero(preds == y)[0]
    if len(pool) < args.n:
        raise DataError(
            f"only {len(pool)} images are predicted {args.from_label!r}; need {args.n}"
        )
    rng = Rng(derive_seed(args.seed, 21))
    sel = np.sort(pool[rng.permutation(len(pool))[: args.n]])
    imgs = images[sel]
    ids = sel.astype(np.int64)
    images_by_id = {int(i): images[i] for i in sel}

    config = SearchConfig(
        k=args.k, d=args.d, max_directions=args.max_directions,
        parallel_workers=args.workers, delta_on_logit=args.delta_on_logit,
        stats_samples=args.stats_samples, stats_seed=derive_seed(args.seed, 31),
    )
    algos = ["eigenfind", "attfind"] if args.algo == "both" else [args.algo]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summaries = {}
    for algo in algos:
        run = eigen_find if algo == "eigenfind" else att_find
        result = run(bundle, imgs, ids, y, config)
        (out / f"{algo}.json").write_text(
            json.dumps(result.to_json_dict(pathology), indent=2) + "\n"
        )
        _write_counterfactuals(result, out / f"cf_{algo}")
        if result.explained:
            originals, cfs, grid_ids = _grid_selection(result, images_by_id, columns=8)
            _write_grid(
                originals, cfs, grid_ids, out / f"grid_{algo}.pgm",
                out / f"grid_{algo}.png" if args.png else None,
            )
        summaries[algo] = result
        print(
            f"{algo}: explained {result.n_explained}/{result.n} "
            f"({result.explained_pct:.1f}%), {result.counter.total} queries, "
            f"{result.wall_ms:.0f} ms"
        )
    _write_manifest(out, "explain", args, started,
                    checksums={"models": bundle.checksum()},
                    extra={"pathology": pathology, "selected_ids": [int(i) for i in ids]})


def cmd_report(args: argparse.Namespace) -> None:
    started = _utc_now()
    results = [load_result_json(p) for p in args.inputs]
    md = markdown_report(results)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(md)
    _write_manifest(out.parent, "report", args, started)
    print(md, end="")


def _load_cf_dir(cf_dir: str, ids: list[int]) -> dict[int, np.ndarray]:
    cf = {}
    for image_id in ids:
        path = Path(cf_dir) / f"cf_{image_id}.pgm"
        if not path.exists():
            raise DataError(f"missing counterfactual {path}")
        cf[image_id] = read_pgm(path).reshape(-1)
    return cf


def cmd_probe(args: argparse.Namespace) -> None:
    started = _utc_now()
    result = load_result_json(args.report)
    items, _, _ = _load_images_labels(args.data)
    ids = [int(e["id"]) for e in result.get("per_image", [])]
    for image_id in ids:
        if image_id >= len(items):
            raise DataError(f"report id {image_id} outside dataset of {len(items)} items")
    originals = {i: items[i].image for i in ids}
    cfs = _load_cf_dir(args.cf, ids)
    rep = probe_report(result, originals, cfs, top=args.top)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(rep, indent=2) + "\n")
    _write_manifest(out.parent, "probe", args, started)
    for d in rep["directions"]:
        print(
            f"{d['kind']}[{d['index']},{'+' if d['sign'] > 0 else '-'}] n={d['n_images']}: "
            f"heart+ {d['frac_heart_width_increase']:.2f}, "
            f"fluid+ {d['frac_fluid_level_increase']:.2f}, "
            f"pacemaker+ {d['frac_pacemaker_added']:.2f}"
        )


def cmd_render_grid(args: argparse.Namespace) -> None:
    started = _utc_now()
    result = load_result_json(args.report)
    items, _, _ = _load_images_labels(args.data)
    entries = sorted(result.get("per_image", []), key=lambda e: int(e["id"]))[: args.columns]
    if not entries:
        raise DataError("report contains no explained images to render")
    ids = [int(e["id"]) for e in entries]
    cfs_by_id = _load_cf_dir(args.cf, ids)
    originals = [items[i].image for i in ids]
    cfs = [cfs_by_id[i] for i in ids]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_grid(originals, cfs, ids, out, Path(args.png) if args.png else None)
    _write_manifest(out.parent, "render-grid", args, started)
    print(f"grid with {len(ids)} columns saved to {out}")


# --- parser ---


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="eigenfind",
        description="Counterfactual-direction search over a conditional style generator.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a labeled phantom dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--pathology", choices=PATHOLOGIES, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--balance", type=float, default=0.5)
    p.add_argument("--no-noise", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-classifier", help="train the frozen classifier")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iterations", type=int, default=5000)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log", default=None)
    p.set_defaults(func=cmd_train_classifier)

    p = sub.add_parser("train-gan", help="train the generator/encoder pair")
    p.add_argument("--data", required=True)
    p.add_argument("--classifier", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iterations", type=int, default=5000)
    p.add_argument("--lambda-rec", type=float, default=1.0)
    p.add_argument("--lambda-cls", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log", default=None)
    p.set_defaults(func=cmd_train_gan)

    p = sub.add_parser("factorize", help="export the ranked style basis")
    p.add_argument("--models", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--empirical", action="store_true")
    p.add_argument("--samples", type=int, default=2048)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_factorize)

    p = sub.add_parser("explain", help="run the counterfactual search")
    p.add_argument("--models", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=600)
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--d", type=float, default=10.0)
    p.add_argument("--algo", choices=["eigenfind", "attfind", "both"], default="both")
    p.add_argument("--from-label", choices=["healthy", "positive"], default="healthy")
    p.add_argument("--pathology", choices=PATHOLOGIES, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--max-directions", type=int, default=None)
    p.add_argument("--delta-on-logit", action="store_true")
    p.add_argument("--stats-samples", type=int, default=2048)
    p.add_argument("--png", action="store_true")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("report", help="markdown comparison table from result JSONs")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("probe", help="feature-shift fractions for chosen directions")
    p.add_argument("--report", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--cf", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--top", type=int, default=3)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("render-grid", help="side-by-side original/counterfactual grid")
    p.add_argument("--report", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--cf", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--png", default=None)
    p.add_argument("--columns", type=int, default=8)
    p.set_defaults(func=cmd_render_grid)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
        return 0
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (
        DataError,
        FileNotFoundError,
        NotADirectoryError,
        InvalidParameterError,
        GenerationError,
        ConfigurationError,
        PreconditionError,
        FactorizationError,
        ReportError,
        PgmError,
        WeightFileError,
        nn.ShapeError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (InvariantError, FrozenModelError) as exc:
        print(f"internal invariant violation: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
