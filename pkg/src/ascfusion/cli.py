"""Command-line entry point.

Every command reads an experiment config (``--config file.ini`` plus
``--section.key value`` overrides), works inside the output directory and
finishes by writing ``manifests/<command>.json``: the effective config, the
seed, the code version and a SHA-256 of every file it produced.

Output directory layout::

    data/            manifest.txt, audio/, folds/, eval/   (gen-synthetic)
    cache/           mel.npz, features.npz                 (extract)
    models/          cnn/, gbm/                            (train)
    grid/            gbm_grid.csv, gbm_best.json           (grid-search)
    predictions/     <branch>.csv                          (predict)
    fusion/          <method>.csv, <method>_metrics.json   (fuse)
    cv/, eval/       metrics.json, probability and confusion CSVs (evaluate)
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import N_SEGMENTS, __version__
from .config import ExperimentConfig, load_config, split_flag_overrides
from .dataset import (generate_synthetic_dataset, load_fold_files, load_manifest, make_folds,
                      write_fold_files)
from .errors import AscError, ConfigError, DataError, MissingArtifactError, NumericError
from .evaluation import (confusion_from_table, trial_statistics, write_matrix_csv, write_metrics)
from .fusion import ProbabilityTable, fit_meta_learner, fuse_simple
from .gbm import grid_search
from .pipelines import (CnnPipeline, FeatureStore, FusionSettings, GbmPipeline, run_development,
                        run_evaluation)

log = logging.getLogger("ascfusion")

BRANCH_CLASSES = {"cnn": CnnPipeline, "gbm": GbmPipeline}


# ---------------------------------------------------------------------------
# shared plumbing


class Run:
    """One command invocation: config, output root and the files it wrote."""

    def __init__(self, command: list[str], cfg: ExperimentConfig):
        self.command = command
        self.cfg = cfg
        self.out = cfg.out
        self.outputs: list[Path] = []

    def path(self, *parts) -> Path:
        p = self.out.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def wrote(self, *paths):
        self.outputs.extend(Path(p) for p in paths)

    def finish(self):
        slug = "-".join(self.command)
        outputs = {}
        for p in sorted(set(self.outputs)):
            outputs[p.relative_to(self.out).as_posix() if p.is_relative_to(self.out) else str(p)] = sha256_file(p)
        manifest = {
            "command": self.command,
            "config": self.cfg.to_ini(),
            "config_sha256": self.cfg.digest(),
            "seed": self.cfg.evaluation.seed,
            "version": __version__,
            "code_sha256": code_digest(),
            "outputs": outputs,
        }
        path = self.path("manifests", f"{slug}.json")
        path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")
        self.path("manifests", f"{slug}.ini").write_text(self.cfg.to_ini(), encoding="utf-8")
        log.info("run manifest: %s", path)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def code_digest() -> str:
    h = hashlib.sha256()
    root = Path(__file__).parent
    for p in sorted(root.rglob("*.py")):
        h.update(p.relative_to(root).as_posix().encode() + b"\0" + p.read_bytes())
    return h.hexdigest()


def dev_manifest(cfg: ExperimentConfig):
    path = cfg.dev_manifest_path()
    if not path.exists():
        if cfg.dataset.manifest:
            raise DataError(f"development manifest {path} does not exist")
        raise MissingArtifactError(path, "gen-synthetic")
    return load_manifest(path)


def eval_manifest(cfg: ExperimentConfig, dev=None, required=True):
    path = cfg.eval_manifest_path()
    if not path.exists():
        if not required:
            return None
        if cfg.dataset.eval_manifest:
            raise DataError(f"evaluation manifest {path} does not exist")
        raise MissingArtifactError(path, "gen-synthetic --synthetic.eval_recordings_per_class N")
    names = dev.class_names if dev is not None else None
    return load_manifest(path, class_names=names, require_label=False)


def folds_for(cfg: ExperimentConfig, manifest):
    folder = Path(cfg.dataset.folds_dir) if cfg.dataset.folds_dir else cfg.out / "data" / "folds"
    folds = load_fold_files(folder, cfg.dataset.n_folds)
    if folds is None:
        if cfg.dataset.folds_dir:
            raise DataError(f"no fold files in {folder}")
        folds = make_folds(manifest, cfg.dataset.n_folds, cfg.dataset.fold_seed)
    return folds


def feature_store(cfg: ExperimentConfig, manifests, kinds) -> FeatureStore:
    """Store backed by the extract caches; nothing is recomputed here."""
    store = FeatureStore([m for m in manifests if m is not None], cfg.frontend)
    for kind in kinds:
        path = cfg.out / "cache" / f"{kind}.npz"
        if not path.exists():
            raise MissingArtifactError(path, f"extract {kind}")
        store.load(path, kind)
    store.cache_only = True
    return store


def make_pipeline(cfg: ExperimentConfig, branch: str, seed: int):
    if branch == "cnn":
        return CnnPipeline(cfg.cnn, cfg.training, cfg.frontend, seed)
    return GbmPipeline(cfg.gbm, cfg.lda.dim or None, cfg.lda.strict, seed)


def fusion_settings(cfg: ExperimentConfig) -> FusionSettings:
    f = cfg.fusion
    return FusionSettings(tuple(f.methods), f.meta_kind, tuple(float(c) for c in f.c_grid), f.log_inputs)


def read_table(path, producer, class_names) -> ProbabilityTable:
    if not Path(path).exists():
        raise MissingArtifactError(path, producer)
    table = ProbabilityTable.read_csv(path)
    if table.probs.shape[1] != len(class_names):
        raise DataError(f"{path}: {table.probs.shape[1]} classes, the manifest has {len(class_names)}")
    return table


# ---------------------------------------------------------------------------
# commands


def cmd_gen_synthetic(run: Run, args):
    cfg = run.cfg
    if cfg.dataset.manifest:
        raise ConfigError("gen-synthetic writes its own manifest; leave dataset.manifest empty")
    data = cfg.out / "data"
    m = generate_synthetic_dataset(cfg.synthetic.spec(), data)
    run.wrote(data / "manifest.txt", *(data / rel for rel, _ in m.entries))
    folds = make_folds(m, cfg.dataset.n_folds, cfg.dataset.fold_seed)
    write_fold_files(m, folds, data / "folds")
    run.wrote(*sorted((data / "folds").glob("fold*.txt")))
    if cfg.synthetic.eval_recordings_per_class > 0:
        e = generate_synthetic_dataset(cfg.synthetic.spec(eval_split=True), data / "eval")
        run.wrote(data / "eval" / "manifest.txt", *(data / "eval" / rel for rel, _ in e.entries))
    print(data / "manifest.txt")


def cmd_extract(run: Run, args):
    cfg = run.cfg
    dev = dev_manifest(cfg)
    manifests = [dev, eval_manifest(cfg, dev, required=False)]
    store = FeatureStore([m for m in manifests if m is not None], cfg.frontend)
    store.extract(args.kind)
    path = run.path("cache", f"{args.kind}.npz")
    store.save(path, args.kind)
    run.wrote(path)
    print(path)


def cmd_train(run: Run, args):
    cfg = run.cfg
    dev = dev_manifest(cfg)
    pipe = make_pipeline(cfg, args.branch, cfg.evaluation.seed)
    store = feature_store(cfg, [dev], [pipe.input_kind])
    pipe.fit(sorted(dev.ids), store)
    run.wrote(*pipe.save(run.path("models", args.branch, "pipeline.json").parent))
    print(cfg.out / "models" / args.branch)


def cmd_grid_search(run: Run, args):
    cfg = run.cfg
    dev = dev_manifest(cfg)
    store = feature_store(cfg, [dev], ["features"])
    ids = sorted(dev.ids)
    pos = {r: i for i, r in enumerate(ids)}
    X = np.concatenate(store.arrays_for(ids, "features"))
    rec = np.repeat(np.arange(len(ids)), N_SEGMENTS)
    folds = [(np.array(sorted(pos[r] for r in f.train_ids)), np.array(sorted(pos[r] for r in f.test_ids)))
             for f in folds_for(cfg, dev)]
    g = cfg.grid
    result = grid_search(X, store.labels_for(ids), rec, folds, g.grid(), g.use_lda, list(g.lda_dims),
                         cfg.gbm, store.n_classes)
    csv_path = run.path("grid", "gbm_grid.csv")
    result.write_csv(csv_path)
    best = {"learning_rate": result.config.learning_rate, "max_bins": result.config.max_bins,
            "num_leaves": result.config.num_leaves, "min_data_in_leaf": result.config.min_data_in_leaf,
            "lda_dim": result.lda_dim,
            "mean_accuracy": max(row["mean"] for row in result.table)}
    best_path = run.path("grid", "gbm_best.json")
    write_metrics(best_path, best)
    run.wrote(csv_path, best_path)
    print(json.dumps(best, sort_keys=True))


def cmd_predict(run: Run, args):
    cfg = run.cfg
    dev = dev_manifest(cfg)
    target = dev if args.split == "dev" else eval_manifest(cfg, dev)
    for branch in cfg.evaluation.branches:
        pipe = BRANCH_CLASSES[branch].load(cfg.out / "models" / branch, producer=f"train {branch}")
        store = feature_store(cfg, [dev, target] if target is not dev else [dev], [pipe.input_kind])
        ids = sorted(target.ids)
        labels = target.label_map()
        y = np.array([labels[r] for r in ids])
        table = ProbabilityTable(ids, pipe.predict(ids, store), None if np.all(y < 0) else y, branch)
        path = run.path("predictions", f"{branch}.csv")
        table.write_csv(path)
        run.wrote(path)
        print(path)


def cmd_fuse(run: Run, args):
    cfg = run.cfg
    method = cfg.fusion.method
    names = dev_manifest(cfg).class_names
    a = read_table(cfg.out / "predictions" / "cnn.csv", "predict", names)
    b = read_table(cfg.out / "predictions" / "gbm.csv", "predict", names).align(a.ids)
    if method == "stacking":
        oa = read_table(cfg.out / "cv" / "oof_cnn.csv", "evaluate cv", names)
        ob = read_table(cfg.out / "cv" / "oof_gbm.csv", "evaluate cv", names)
        f = fusion_settings(cfg)
        meta = fit_meta_learner(f.meta_kind, oa, ob, None, cfg.evaluation.seed, f.c_grid,
                                log_inputs=f.log_inputs, n_classes=len(names))
        meta_path = run.path("fusion", f"meta_{f.meta_kind}.npz")
        meta.save(meta_path)
        run.wrote(meta_path)
        probs = meta.predict_proba(a.probs, b.probs)
    else:
        probs, _ = fuse_simple(method, a.probs, b.probs)
    fused = ProbabilityTable(list(a.ids), probs, a.labels, f"fused-{method}")
    path = run.path("fusion", f"{method}.csv")
    fused.write_csv(path)
    run.wrote(path)
    if fused.labels is not None and np.all(fused.labels >= 0):
        metrics = {"method": method, "accuracy": float(np.mean(np.argmax(probs, axis=1) == fused.labels))}
        mpath = run.path("fusion", f"{method}_metrics.json")
        write_metrics(mpath, metrics)
        run.wrote(mpath)
    print(path)


def _write_tables(run, folder, prefix, tables, class_names):
    for tag, table in tables.items():
        path = run.path(folder, f"{prefix}{tag}.csv")
        table.write_csv(path)
        run.wrote(path)
        if table.labels is not None and np.all(table.labels >= 0):
            cpath = run.path(folder, f"confusion_{tag}.csv")
            confusion_from_table(table, len(class_names)).write_csv(cpath, class_names)
            run.wrote(cpath)


def _headline(metrics):
    """Flat {name: accuracy} for trial statistics."""
    out = {}
    for tag, m in metrics["branches"].items():
        out[tag] = m.get("accuracy_pooled", m.get("accuracy"))
    for name, m in metrics["fusion"].items():
        out[f"fused-{name}"] = m.get("accuracy_pooled", m.get("accuracy"))
    return out


def cmd_evaluate(run: Run, args):
    cfg = run.cfg
    mode = cfg.evaluation.mode
    dev = dev_manifest(cfg)
    ev = eval_manifest(cfg, dev) if mode == "eval" else None
    kinds = sorted({make_pipeline(cfg, b, 0).input_kind for b in cfg.evaluation.branches})
    store = feature_store(cfg, [dev, ev], kinds)
    folds = folds_for(cfg, dev)
    fusion = fusion_settings(cfg)
    names = dev.class_names
    dev_oof = None
    if mode == "eval" and "stacking" in fusion.methods and len(cfg.evaluation.branches) == 2:
        dev_oof = {b: read_table(cfg.out / "cv" / f"oof_{b}.csv", "evaluate cv", names)
                   for b in cfg.evaluation.branches}
    trials = []
    for t in range(cfg.evaluation.n_trials):
        seed = cfg.evaluation.seed + t
        pipes = [make_pipeline(cfg, b, seed) for b in cfg.evaluation.branches]
        if mode == "cv":
            metrics, results, fused = run_development(dev, folds, pipes, store, fusion, seed)
            tables = {tag: r.oof for tag, r in results.items()}
            prefix = "oof_"
        else:
            metrics, results, fused = run_evaluation(dev, ev, pipes, store, folds, dev_oof, fusion, seed)
            tables = {tag: r.predictions for tag, r in results.items()}
            prefix = "pred_"
        metrics["seed"] = seed
        folder = mode if t == 0 else f"{mode}/trials/seed{seed}"
        _write_tables(run, folder, prefix, tables, names)
        _write_tables(run, folder, "fused_", fused, names)
        if "confusion_diff" in metrics:
            d = metrics["confusion_diff"]
            path = run.path(folder, f"confusion_diff_{d['minuend']}_minus_{d['subtrahend']}.csv")
            write_matrix_csv(path, np.array(d["counts"]), names)
            run.wrote(path)
        path = run.path(folder, "metrics.json")
        if t > 0:
            write_metrics(path, metrics)
            run.wrote(path)
        trials.append(metrics)
    summary = dict(trials[0])
    if cfg.evaluation.n_trials > 1:
        heads = [_headline(m) for m in trials]
        summary["trials"] = {k: trial_statistics([h[k] for h in heads]).to_dict()
                             for k in heads[0] if all(h[k] is not None for h in heads)}
    path = run.path(mode, "metrics.json")
    write_metrics(path, summary)
    run.wrote(path)
    print(json.dumps(_headline(trials[0]), sort_keys=True))


def cmd_report(run: Run, args):
    cfg = run.cfg
    lines = []
    found = False
    for mode in ("cv", "eval"):
        path = cfg.out / mode / "metrics.json"
        if not path.exists():
            continue
        found = True
        m = json.loads(path.read_text())
        lines.append(f"[{mode}] seed {m.get('seed')}")
        for tag, b in sorted(m["branches"].items()):
            if mode == "cv":
                folds = " ".join(f"{a:.4f}" for a in b["fold_accuracies"])
                lines.append(f"  {tag:<18} fold-mean {b['accuracy_fold_mean']:.4f}  "
                             f"pooled {b['accuracy_pooled']:.4f}  folds [{folds}]")
            else:
                acc = b.get("accuracy")
                lines.append(f"  {tag:<18} accuracy {'n/a' if acc is None else f'{acc:.4f}'}")
        for name, f in sorted(m["fusion"].items()):
            acc = f.get("accuracy_pooled", f.get("accuracy"))
            lines.append(f"  fused-{name:<12} accuracy {'n/a' if acc is None else f'{acc:.4f}'}")
        for name, st in sorted(m.get("trials", {}).items()):
            lines.append(f"  {name:<18} {len(st['accuracies'])} trials: "
                         f"{st['mean']:.4f} ± {st['ci95_half_width']:.4f} (95% CI)")
    grid = cfg.out / "grid" / "gbm_best.json"
    if grid.exists():
        found = True
        lines.append(f"[grid] {json.dumps(json.loads(grid.read_text()), sort_keys=True)}")
    if not found:
        raise MissingArtifactError(cfg.out / "cv" / "metrics.json", "evaluate cv")
    text = "\n".join(lines) + "\n"
    path = run.path("report.txt")
    path.write_text(text, encoding="utf-8")
    run.wrote(path)
    sys.stdout.write(text)


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI experiment config")
    common.add_argument("--out", help="output directory (same as --output.dir)")
    common.add_argument("--threads", type=int, default=None, help="cap on BLAS/worker threads; 1 = bit-deterministic")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    parser = argparse.ArgumentParser(
        prog="ascfusion",
        description="Acoustic scene classification: log-mel CNN, feature GBM, late fusion. "
                    "Any config key can be overridden with --section.key value.")
    parser.add_argument("--version", action="version", version=f"ascfusion {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-synthetic", parents=[common], help="write a synthetic scene corpus")
    p = sub.add_parser("extract", parents=[common], help="compute and cache branch inputs")
    p.add_argument("kind", choices=["mel", "features"])
    p = sub.add_parser("train", parents=[common], help="fit one branch on the whole development set")
    p.add_argument("branch", choices=["cnn", "gbm"])
    p = sub.add_parser("grid-search", parents=[common], help="GBM hyperparameter search over CV folds")
    p.add_argument("branch", choices=["gbm"])
    p = sub.add_parser("predict", parents=[common], help="probabilities from trained branches")
    p.add_argument("--split", choices=["eval", "dev"], default="eval")
    p = sub.add_parser("fuse", parents=[common], help="late fusion of predicted probabilities")
    p.add_argument("--method", choices=["arithmetic", "geometric", "rank", "stacking"],
                   help="same as --fusion.method")
    p = sub.add_parser("evaluate", parents=[common], help="cross-validation or held-out evaluation")
    p.add_argument("mode", choices=["cv", "eval"])
    sub.add_parser("report", parents=[common], help="summarize metrics found in the output directory")
    return parser


COMMANDS = {
    "gen-synthetic": cmd_gen_synthetic, "extract": cmd_extract, "train": cmd_train,
    "grid-search": cmd_grid_search, "predict": cmd_predict, "fuse": cmd_fuse,
    "evaluate": cmd_evaluate, "report": cmd_report,
}


def _command_words(args) -> list[str]:
    words = [args.command]
    for attr in ("kind", "branch", "mode"):
        if getattr(args, attr, None):
            words.append(getattr(args, attr))
    return words


def _resolve_config(args, extra) -> ExperimentConfig:
    overrides = split_flag_overrides(extra)
    if args.out:
        overrides.append(("output", "dir", args.out))
    if getattr(args, "mode", None) and args.command == "evaluate":
        overrides.append(("evaluation", "mode", args.mode))
    if getattr(args, "method", None):
        overrides.append(("fusion", "method", args.method))
    return load_config(args.config, overrides)


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(stream=sys.stderr, level=getattr(logging, args.log_level),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve_config(args, extra)
        run = Run(_command_words(args), cfg)
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigError("--threads must be >= 1")
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=args.threads):
                COMMANDS[args.command](run, args)
        else:
            COMMANDS[args.command](run, args)
        run.finish()
    except AscError as exc:
        log.error("%s", exc)
        return exc.exit_code
    except FloatingPointError as exc:
        log.error("numeric failure: %s", exc)
        return NumericError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
