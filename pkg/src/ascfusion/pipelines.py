"""Branch pipelines (CNN on log-mel patches, GBM on segment features), the
per-recording feature store they read from, and the two-branch experiment
drivers used by the CLI and scripts."""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import N_SEGMENTS
from .dataset import DatasetManifest, load_recording
from .errors import DataError, MissingArtifactError, NotFittedError
from .evaluation import (accuracy, confusion_diff, confusion_from_table, fingerprint,
                         run_cv, run_eval)
from .features import FEATURE_BLOCKS, SEGMENT_DIM, FeatureScaler, SegmentFeatureExtractor, fit_feature_scaler
from .frontend import FrontendConfig, LogMelExtractor, StandardizationScaler, fit_scaler, segment_patches
from .fusion import SIMPLE_METHODS, ProbabilityTable, fit_meta_learner, fuse_simple
from .gbm import Ensemble, GbmConfig, bin_features, fit_gbm
from .lda import LdaModel, fit_lda, transform
from .nn.network import Network, NetworkConfig, build_network
from .nn.train import TrainingConfig, train

log = logging.getLogger(__name__)

CACHE_FORMAT = "ascfusion-cache"
CACHE_VERSION = 1
KINDS = ("mel", "features")


# ---------------------------------------------------------------------------
# feature store


class FeatureStore:
    """Lazily computed, memoized per-recording inputs for both branches.

    ``mel`` entries are unstandardized log-mel spectrograms (frames, 128);
    ``features`` entries are (7, 820) segment feature matrices.
    """

    def __init__(self, manifests, frontend: FrontendConfig = FrontendConfig()):
        manifests = [manifests] if isinstance(manifests, DatasetManifest) else list(manifests)
        self.frontend = frontend
        self._where = {}
        self._labels = {}
        for m in manifests:
            labels = m.label_map()
            for rid in m.ids:
                self._where[rid] = m
                self._labels[rid] = labels[rid]
        names = {tuple(m.class_names) for m in manifests if m.class_names}
        if len(names) > 1:
            raise DataError("manifests disagree on the class list")
        self.class_names = list(names.pop()) if names else []
        self._cache = {kind: {} for kind in KINDS}
        self._mel = None
        self._feat = None
        self.cache_only = False  # when set, a missing entry is an error naming the extract command

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def labels_for(self, ids) -> np.ndarray:
        return np.array([self._labels[r] for r in ids], dtype=np.int64)

    def _compute(self, kind, rid):
        if rid not in self._where:
            raise DataError(f"recording {rid!r} is in no loaded manifest")
        if self.cache_only:
            raise MissingArtifactError(f"{kind} cache entry for {rid}", f"extract {kind}")
        rec = load_recording(self._where[rid].audio_path(rid), rid)
        if kind == "mel":
            self._mel = self._mel or LogMelExtractor(self.frontend)
            return self._mel(rec).astype(np.float32)
        self._feat = self._feat or SegmentFeatureExtractor(self.frontend.waveform_norm)
        return self._feat(rec)

    def get(self, kind, rid):
        if kind not in KINDS:
            raise DataError(f"unknown input kind {kind!r}")
        store = self._cache[kind]
        if rid not in store:
            store[rid] = self._compute(kind, rid)
        return store[rid]

    def arrays_for(self, ids, kind):
        return [self.get(kind, r) for r in ids]

    def extract(self, kind, ids=None):
        for r in ids if ids is not None else list(self._where):
            self.get(kind, r)

    # cache files ------------------------------------------------------

    def save(self, path, kind):
        ids = sorted(self._cache[kind])
        if not ids:
            raise DataError(f"nothing extracted for {kind!r}")
        data = np.stack([self._cache[kind][r] for r in ids])
        header = {"format": CACHE_FORMAT, "version": CACHE_VERSION, "kind": kind,
                  "shape": list(data.shape[1:]), "frontend": asdict(self.frontend)}
        if kind == "features":
            header["blocks"] = [[name, dim] for name, dim in FEATURE_BLOCKS]
        np.savez(path, header=np.array(json.dumps(header, sort_keys=True)), ids=np.array(ids), data=data)

    def load(self, path, kind):
        with np.load(path, allow_pickle=False) as d:
            header = json.loads(str(d["header"]))
            if header.get("format") != CACHE_FORMAT or header.get("version") != CACHE_VERSION:
                raise DataError(f"{path}: not a version-{CACHE_VERSION} feature cache")
            if header["kind"] != kind:
                raise DataError(f"{path}: holds {header['kind']!r}, expected {kind!r}")
            if kind == "features" and [tuple(b) for b in header["blocks"]] != list(FEATURE_BLOCKS):
                raise DataError(f"{path}: feature block layout differs from this version")
            if header["frontend"] != asdict(self.frontend):
                raise DataError(f"{path}: extracted with a different front-end configuration")
            for rid, arr in zip(d["ids"].tolist(), d["data"]):
                self._cache[kind][rid] = arr
        return self


# ---------------------------------------------------------------------------
# pipelines


def save_scaler(scaler: StandardizationScaler, path):
    header = {"format": "ascfusion-scaler", "version": 1, "scope": scaler.scope, "std_floor": scaler.std_floor}
    np.savez(path, header=np.array(json.dumps(header)), mean=scaler.mean, std=scaler.std)


def load_scaler(path, cls=StandardizationScaler):
    with np.load(path, allow_pickle=False) as d:
        header = json.loads(str(d["header"]))
        if header.get("format") != "ascfusion-scaler":
            raise DataError(f"{path}: not a scaler file")
        return cls(d["mean"], d["std"], header["scope"], header["std_floor"])


def _scaler_digest(scaler) -> str:
    return fingerprint(["scaler"], [[np.concatenate([scaler.mean, scaler.std])]])


def _write_pipeline_header(folder, pipeline, extra):
    header = {"tag": pipeline.tag, "seed": pipeline.seed, "fit_fingerprint": pipeline.fit_fingerprint,
              "fit_ids": list(pipeline.fit_ids), **extra}
    (Path(folder) / "pipeline.json").write_text(json.dumps(header, sort_keys=True, indent=2) + "\n")


def _read_pipeline_header(folder, producer):
    path = Path(folder) / "pipeline.json"
    if not path.exists():
        raise MissingArtifactError(path, producer)
    return json.loads(path.read_text())


@dataclass
class CnnPipeline:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    seed: int = 0
    tag: str = "cnn"
    input_kind = "mel"

    def __post_init__(self):
        self.fit_ids = None
        self.fit_fingerprint = None
        self.model = None
        self.scaler = None
        self.history = None

    def _patches(self, mels):
        return np.stack([segment_patches(self.scaler.transform(m)) for m in mels]).astype(np.float32)

    def fit(self, ids, data: FeatureStore, history_path=None):
        ids = list(ids)
        mels = data.arrays_for(ids, self.input_kind)
        self.fit_ids, self.fit_fingerprint = ids, fingerprint(ids, [mels])
        self.scaler = fit_scaler(mels, self.frontend.scaler_scope, self.frontend.std_floor)
        patches = self._patches(mels)  # (n, 7, 75, 128)
        labels = np.repeat(data.labels_for(ids), N_SEGMENTS)
        groups = np.repeat(np.arange(len(ids)), N_SEGMENTS)
        if self.network.classes != data.n_classes:
            raise DataError(f"network has {self.network.classes} outputs but the data has {data.n_classes} classes")
        self.model = build_network(self.network, seed=self.seed)
        cfg = replace(self.training, seed=self.seed)
        self.model, self.history = train(self.model, patches.reshape(-1, 75, patches.shape[-1]), labels, cfg,
                                         groups=groups, history_path=history_path)
        return self

    def predict_segments(self, ids, data: FeatureStore):
        if self.model is None:
            raise NotFittedError("CNN pipeline used before fit")
        patches = self._patches(data.arrays_for(list(ids), self.input_kind))
        probs = self.model.predict_proba(patches.reshape(-1, 75, patches.shape[-1]))
        return probs.reshape(len(patches), N_SEGMENTS, -1)

    def predict(self, ids, data: FeatureStore):
        return self.predict_segments(ids, data).mean(axis=1)

    def save(self, folder):
        """Write network, scaler and fit metadata into ``folder``."""
        if self.model is None:
            raise NotFittedError("nothing to save: CNN pipeline not fitted")
        folder = Path(folder)
        folder.mkdir(parents=True, exist_ok=True)
        save_scaler(self.scaler, folder / "scaler.npz")
        self.model.save(folder / "network.npz", scaler_hash=_scaler_digest(self.scaler))
        _write_pipeline_header(folder, self, {"frontend": asdict(self.frontend),
                                              "training": asdict(self.training)})
        if self.history is not None:
            self.history.write_jsonl(folder / "history.jsonl")
        return [folder / n for n in ("pipeline.json", "scaler.npz", "network.npz", "history.jsonl")
                if (folder / n).exists()]

    @classmethod
    def load(cls, folder, producer="train cnn"):
        folder = Path(folder)
        header = _read_pipeline_header(folder, producer)
        net = Network.load(folder / "network.npz")
        scaler = load_scaler(folder / "scaler.npz")
        if net.scaler_hash != _scaler_digest(scaler):
            raise DataError(f"{folder}: network and scaler come from different fits")
        pipe = cls(net.config, TrainingConfig(**header["training"]), FrontendConfig(**header["frontend"]),
                   header["seed"], header["tag"])
        pipe.model, pipe.scaler = net, scaler
        pipe.fit_ids, pipe.fit_fingerprint = header["fit_ids"], header["fit_fingerprint"]
        return pipe


@dataclass
class GbmPipeline:
    gbm: GbmConfig = field(default_factory=GbmConfig)
    lda_dim: int | None = None
    lda_strict: bool = False
    seed: int = 0  # boosting is deterministic; kept for a uniform interface
    tag: str = "gbm"
    input_kind = "features"

    def __post_init__(self):
        self.fit_ids = None
        self.fit_fingerprint = None
        self.model = None
        self.scaler = None
        self.lda = None

    def _project(self, X):
        X = self.scaler.transform(X)
        return transform(self.lda, X) if self.lda is not None else X

    def fit(self, ids, data: FeatureStore):
        ids = list(ids)
        segs = data.arrays_for(ids, self.input_kind)
        self.fit_ids, self.fit_fingerprint = ids, fingerprint(ids, [segs])
        X = np.concatenate(segs)
        y = np.repeat(data.labels_for(ids), N_SEGMENTS)
        self.scaler = fit_feature_scaler([X])
        Xs = self.scaler.transform(X)
        self.lda = None
        if self.lda_dim:
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                self.lda = fit_lda(Xs, y, self.lda_dim, strict=self.lda_strict)
            for w in caught:
                log.info("LDA: %s", w.message)
            Xs = transform(self.lda, Xs)
        self.model = fit_gbm(bin_features(Xs, self.gbm.max_bins), y, self.gbm, data.n_classes)
        return self

    def predict_segments(self, ids, data: FeatureStore):
        if self.model is None:
            raise NotFittedError("GBM pipeline used before fit")
        segs = np.stack(data.arrays_for(list(ids), self.input_kind))
        n = len(segs)
        probs = self.model.predict_proba(self._project(segs.reshape(-1, SEGMENT_DIM)))
        return probs.reshape(n, N_SEGMENTS, -1)

    def predict(self, ids, data: FeatureStore):
        return self.predict_segments(ids, data).mean(axis=1)

    def save(self, folder):
        """Write ensemble, scaler, optional LDA and fit metadata into ``folder``."""
        if self.model is None:
            raise NotFittedError("nothing to save: GBM pipeline not fitted")
        folder = Path(folder)
        folder.mkdir(parents=True, exist_ok=True)
        save_scaler(self.scaler, folder / "scaler.npz")
        self.model.save(folder / "ensemble.npz")
        if self.lda is not None:
            self.lda.save(folder / "lda.npz")
        _write_pipeline_header(folder, self, {"lda_dim": self.lda_dim, "lda_strict": self.lda_strict})
        return [folder / n for n in ("pipeline.json", "scaler.npz", "ensemble.npz", "lda.npz")
                if (folder / n).exists()]

    @classmethod
    def load(cls, folder, producer="train gbm"):
        folder = Path(folder)
        header = _read_pipeline_header(folder, producer)
        model = Ensemble.load(folder / "ensemble.npz")
        pipe = cls(model.config, header["lda_dim"], header["lda_strict"], header["seed"], header["tag"])
        pipe.model = model
        pipe.scaler = load_scaler(folder / "scaler.npz", FeatureScaler)
        pipe.lda = LdaModel.load(folder / "lda.npz") if header["lda_dim"] else None
        pipe.fit_ids, pipe.fit_fingerprint = header["fit_ids"], header["fit_fingerprint"]
        return pipe


# ---------------------------------------------------------------------------
# two-branch experiments


@dataclass
class FusionSettings:
    methods: tuple = SIMPLE_METHODS + ("stacking",)
    meta_kind: str = "logreg"
    c_grid: tuple = (1e-3, 1e-2, 0.1, 1.0)
    log_inputs: bool = False


def stacked_cv_table(oof_a: ProbabilityTable, oof_b: ProbabilityTable, folds, fusion: FusionSettings,
                     seed=0) -> ProbabilityTable:
    """Out-of-fold stacking probabilities on development data.

    The meta learner of each fold is fitted on the other folds' rows only;
    its own regularization search runs inside that training part.  Rows
    outside every fold's test set are dropped.
    """
    oof_b = oof_b.align(oof_a.ids)
    pos = {r: i for i, r in enumerate(oof_a.ids)}
    probs = np.full(oof_a.probs.shape, np.nan)
    for fold in folds:
        tr = np.array([pos[r] for r in sorted(fold.train_ids) if r in pos])
        te = np.array([pos[r] for r in sorted(fold.test_ids) if r in pos])
        meta = fit_meta_learner(fusion.meta_kind, oof_a.probs[tr], oof_b.probs[tr], oof_a.labels[tr], seed,
                                fusion.c_grid, log_inputs=fusion.log_inputs, n_classes=oof_a.probs.shape[1])
        probs[te] = meta.predict_proba(oof_a.probs[te], oof_b.probs[te])
    keep = ~np.isnan(probs[:, 0])
    ids = [r for r, k in zip(oof_a.ids, keep) if k]
    return ProbabilityTable(ids, probs[keep], oof_a.labels[keep], "fused-stacking")


def fused_tables(a: ProbabilityTable, b: ProbabilityTable, methods):
    b = b.align(a.ids)
    out = {}
    for m in methods:
        if m == "stacking":
            continue
        fused, _ = fuse_simple(m, a.probs, b.probs)
        out[m] = ProbabilityTable(list(a.ids), fused, a.labels, f"fused-{m}")
    return out


def run_development(manifest, folds, pipelines, data, fusion: FusionSettings = FusionSettings(), seed=0):
    """Cross-validate each branch, then fuse their out-of-fold probabilities.

    Returns (metrics dict, {tag: CvResult}, {name: fused ProbabilityTable}).
    """
    results = {p.tag: run_cv(manifest, folds, p, data) for p in pipelines}
    metrics = {"mode": "cv", "branches": {t: r.metrics(data.n_classes) for t, r in results.items()},
               "fusion": {}}
    fused = {}
    if len(results) == 2:
        (ta, ra), (tb, rb) = results.items()
        fused = fused_tables(ra.oof, rb.oof, fusion.methods)
        for name, table in fused.items():
            metrics["fusion"][name] = {"accuracy_pooled": accuracy(table)}
        if "stacking" in fusion.methods:
            fused["stacking"] = stacked_cv_table(ra.oof, rb.oof, folds, fusion, seed)
            metrics["fusion"]["stacking"] = {"accuracy_pooled": accuracy(fused["stacking"]),
                                             "meta_kind": fusion.meta_kind}
        k = ra.oof.probs.shape[1]
        diff = confusion_diff(confusion_from_table(ra.oof, k), confusion_from_table(rb.oof, k))
        metrics["confusion_diff"] = {"minuend": ta, "subtrahend": tb, "counts": diff.tolist()}
    return metrics, results, fused


def run_evaluation(dev_manifest, eval_manifest, pipelines, data, folds=None, dev_oof=None,
                   fusion: FusionSettings = FusionSettings(), seed=0):
    """Fit every branch on the whole development set and predict the evaluation set.

    Stacking needs out-of-fold development probabilities per branch, given
    in ``dev_oof`` or produced here by cross-validation over ``folds``.
    """
    results = {p.tag: run_eval(dev_manifest, eval_manifest, p, data) for p in pipelines}
    metrics = {"mode": "eval", "branches": {t: r.metrics() for t, r in results.items()}, "fusion": {}}
    fused = {}
    if len(results) == 2:
        (ta, ra), (tb, rb) = results.items()
        fused = fused_tables(ra.predictions, rb.predictions, fusion.methods)
        if "stacking" in fusion.methods:
            if dev_oof is None:
                if folds is None:
                    raise MissingArtifactError("out-of-fold development probabilities", "evaluate cv")
                dev_oof = {p.tag: run_cv(dev_manifest, folds, p, data).oof for p in pipelines}
            meta = fit_meta_learner(fusion.meta_kind, dev_oof[ta], dev_oof[tb], None, seed, fusion.c_grid,
                                    log_inputs=fusion.log_inputs, n_classes=dev_oof[ta].probs.shape[1])
            b = rb.predictions.align(ra.predictions.ids)
            probs = meta.predict_proba(ra.predictions.probs, b.probs)
            fused["stacking"] = ProbabilityTable(list(ra.predictions.ids), probs, ra.predictions.labels,
                                                 "fused-stacking")
        for name, table in fused.items():
            metrics["fusion"][name] = {"accuracy": accuracy(table) if table.labels is not None else None}
    return metrics, results, fused
