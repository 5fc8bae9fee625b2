"""Recording-level scoring, confusion matrices, trial statistics and the
cross-validation / train-then-evaluate workflows."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass

import numpy as np
from scipy import stats

from . import N_CLASSES, N_SEGMENTS
from .errors import DataError, LeakageError
from .fusion import ProbabilityTable

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# aggregation and accuracy


@dataclass
class RecordingPrediction:
    recording_id: str
    probs: np.ndarray
    label: int
    true_label: int | None = None


def aggregate_recording(seg_probs, recording_id="", true_label=None, n_segments=N_SEGMENTS) -> RecordingPrediction:
    """Mean of the segment probability vectors; argmax with lowest-index ties."""
    seg_probs = np.asarray(seg_probs, dtype=np.float64)
    if seg_probs.ndim != 2 or seg_probs.shape[0] != n_segments:
        raise DataError(f"expected {n_segments} segment vectors, got shape {seg_probs.shape}")
    mean = seg_probs.mean(axis=0)
    return RecordingPrediction(recording_id, mean, int(np.argmax(mean)), true_label)


def aggregate_segments(seg_probs, recording_index, n_recordings=None) -> np.ndarray:
    """Average segment rows per recording: (n_segments, K) -> (n_recordings, K)."""
    seg_probs = np.asarray(seg_probs, dtype=np.float64)
    rec = np.asarray(recording_index, dtype=np.int64)
    n = int(rec.max()) + 1 if n_recordings is None else n_recordings
    sums = np.zeros((n, seg_probs.shape[1]))
    np.add.at(sums, rec, seg_probs)
    counts = np.bincount(rec, minlength=n)
    if np.any(counts == 0):
        raise DataError("some recordings have no segments")
    return sums / counts[:, None]


def segment_accuracy(seg_probs, recording_index, labels) -> float:
    """Recording-level accuracy from segment probabilities.

    ``recording_index`` maps segments to rows of ``labels``; only recordings
    that own segments are scored.
    """
    rec = np.asarray(recording_index, dtype=np.int64)
    uniq, local = np.unique(rec, return_inverse=True)
    probs = aggregate_segments(seg_probs, local, len(uniq))
    return float(np.mean(np.argmax(probs, axis=1) == np.asarray(labels)[uniq]))


def accuracy(predictions) -> float:
    """Fraction of correctly labelled recordings."""
    if len(predictions) == 0:
        raise DataError("accuracy of an empty prediction set")
    if isinstance(predictions, ProbabilityTable):
        if predictions.labels is None or np.any(predictions.labels < 0):
            raise DataError("accuracy needs a true label for every recording")
        return float(np.mean(np.argmax(predictions.probs, axis=1) == predictions.labels))
    if any(p.true_label is None for p in predictions):
        raise DataError("accuracy needs a true label for every recording")
    return float(np.mean([p.label == p.true_label for p in predictions]))


# ---------------------------------------------------------------------------
# confusion matrices


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows true, columns predicted
    recording_ids: tuple = ()

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def per_class_accuracy(self):
        rows = self.counts.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(rows > 0, np.diag(self.counts) / np.maximum(rows, 1), np.nan)

    def write_csv(self, path, class_names=None):
        write_matrix_csv(path, self.counts, class_names)


def write_matrix_csv(path, matrix, class_names=None):
    k = matrix.shape[0]
    names = list(class_names) if class_names is not None else [str(i) for i in range(k)]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("true\\pred," + ",".join(names) + "\n")
        for i in range(k):
            fh.write(names[i] + "," + ",".join(str(int(v)) for v in matrix[i]) + "\n")


def confusion(true_labels, predicted, n_classes=N_CLASSES, recording_ids=()) -> ConfusionMatrix:
    t = np.asarray(true_labels, dtype=np.int64)
    p = np.asarray(predicted, dtype=np.int64)
    if t.shape != p.shape:
        raise DataError(f"{len(t)} true labels but {len(p)} predictions")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (t, p), 1)
    return ConfusionMatrix(counts, tuple(recording_ids))


def confusion_from_table(table: ProbabilityTable, n_classes=N_CLASSES) -> ConfusionMatrix:
    if table.labels is None:
        raise DataError("confusion matrix needs labels")
    return confusion(table.labels, np.argmax(table.probs, axis=1), n_classes, tuple(table.ids))


def confusion_diff(A: ConfusionMatrix, B: ConfusionMatrix) -> np.ndarray:
    """A - B entrywise; both must cover the same recordings."""
    if A.counts.shape != B.counts.shape:
        raise DataError("confusion matrices of different sizes")
    if A.recording_ids and B.recording_ids and set(A.recording_ids) != set(B.recording_ids):
        raise DataError("confusion matrices built over different recordings")
    if not np.array_equal(A.counts.sum(axis=1), B.counts.sum(axis=1)):
        raise DataError("confusion matrices have different per-class totals")
    return A.counts - B.counts


# ---------------------------------------------------------------------------
# trials


@dataclass
class TrialStatistics:
    accuracies: list
    mean: float
    half_width: float

    def to_dict(self):
        return {"accuracies": list(self.accuracies), "mean": self.mean, "ci95_half_width": self.half_width}


def trial_statistics(accuracies) -> TrialStatistics:
    a = np.asarray(accuracies, dtype=np.float64)
    if a.size < 1:
        raise DataError("need at least one trial")
    if a.size == 1 or np.all(a == a[0]):
        return TrialStatistics(a.tolist(), float(a.mean()), 0.0)
    hw = stats.t.ppf(0.975, a.size - 1) * a.std(ddof=1) / np.sqrt(a.size)
    return TrialStatistics(a.tolist(), float(a.mean()), float(hw))


def run_trials(experiment, n_trials: int, base_seed: int = 0) -> TrialStatistics:
    """Run ``experiment(seed) -> accuracy`` for seeds base_seed .. base_seed + n - 1."""
    if n_trials < 1:
        raise DataError("n_trials must be >= 1")
    return trial_statistics([experiment(base_seed + t) for t in range(n_trials)])


# ---------------------------------------------------------------------------
# leakage guard


def fingerprint(ids, arrays=()) -> str:
    """Digest of a training subset: sorted ids plus the exact bytes of its data."""
    h = hashlib.sha256()
    order = np.argsort(np.asarray(ids, dtype=str), kind="stable")
    for i in order:
        h.update(str(ids[i]).encode() + b"\0")
        for arr in arrays:
            h.update(np.ascontiguousarray(arr[i]).tobytes())
    return h.hexdigest()


class LeakageGuard:
    """Checks that a pipeline fitted on exactly the designated training subset."""

    def __init__(self, train_ids, test_ids):
        overlap = set(train_ids) & set(test_ids)
        if overlap:
            raise LeakageError(f"test recordings in training subset: {sorted(overlap)[:5]}")
        self.train_ids = list(train_ids)
        self.test_ids = set(test_ids)

    def verify(self, pipeline, data):
        seen = pipeline.fit_ids
        if seen is None:
            raise LeakageError("pipeline did not report the recordings it was fitted on")
        leaked = self.test_ids & set(seen)
        if leaked:
            raise LeakageError(f"pipeline fitted on test recordings {sorted(leaked)[:5]}")
        expected = fingerprint(self.train_ids, [data.arrays_for(self.train_ids, pipeline.input_kind)])
        if pipeline.fit_fingerprint != expected:
            raise LeakageError("pipeline fit inputs differ from the designated training subset")


# ---------------------------------------------------------------------------
# workflows


@dataclass
class CvResult:
    fold_accuracies: list
    oof: ProbabilityTable
    tag: str = ""

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.fold_accuracies))

    @property
    def pooled_accuracy(self) -> float:
        return accuracy(self.oof)

    def metrics(self, n_classes=N_CLASSES):
        cm = confusion_from_table(self.oof, n_classes)
        return {
            "model": self.tag,
            "fold_accuracies": list(self.fold_accuracies),
            "accuracy_fold_mean": self.mean_accuracy,
            "accuracy_pooled": self.pooled_accuracy,
            "per_class_accuracy": [None if np.isnan(v) else float(v) for v in cm.per_class_accuracy()],
            "confusion": cm.counts.tolist(),
        }


def run_cv(manifest, folds, pipeline, data, n_classes=N_CLASSES) -> CvResult:
    """Fit on each fold's training recordings, predict its test recordings.

    ``pipeline`` exposes ``fit(ids, data)``, ``predict(ids, data) ->
    (n, K)``, ``fit_ids``, ``fit_fingerprint`` and ``tag``; ``data`` is a
    cache exposing ``arrays_for(ids)``.
    """
    known = set(manifest.ids)
    label_of = manifest.label_map()
    oof_ids, oof_probs, accs = [], [], []
    covered = set()
    for fold in folds:
        train_ids, test_ids = sorted(fold.train_ids), sorted(fold.test_ids)
        unknown = (set(train_ids) | set(test_ids)) - known
        if unknown:
            raise DataError(f"fold {fold.fold_index} names recordings not in the manifest: {sorted(unknown)[:5]}")
        guard = LeakageGuard(train_ids, test_ids)
        pipeline.fit(train_ids, data)
        guard.verify(pipeline, data)
        probs = pipeline.predict(test_ids, data)
        y = np.array([label_of[r] for r in test_ids])
        accs.append(float(np.mean(np.argmax(probs, axis=1) == y)))
        log.info("%s fold %d accuracy %.4f", pipeline.tag, fold.fold_index, accs[-1])
        if covered & set(test_ids):
            raise DataError("folds' test sets overlap")
        covered |= set(test_ids)
        oof_ids += test_ids
        oof_probs.append(probs)
    if covered != known:
        log.warning("folds cover %d of %d manifest recordings", len(covered), len(known))
    labels = np.array([label_of[r] for r in oof_ids])
    oof = ProbabilityTable(oof_ids, np.concatenate(oof_probs), labels, pipeline.tag)
    order = sorted(range(len(oof_ids)), key=lambda i: oof_ids[i])
    oof = oof.align([oof_ids[i] for i in order])
    return CvResult(accs, oof, pipeline.tag)


@dataclass
class EvalResult:
    predictions: ProbabilityTable
    accuracy: float | None = None
    confusion: ConfusionMatrix | None = None

    def metrics(self):
        out = {"model": self.predictions.model_tag, "accuracy": self.accuracy}
        if self.confusion is not None:
            out["per_class_accuracy"] = [None if np.isnan(v) else float(v)
                                         for v in self.confusion.per_class_accuracy()]
            out["confusion"] = self.confusion.counts.tolist()
        return out


def run_eval(dev_manifest, eval_manifest, pipeline, data, n_classes=N_CLASSES) -> EvalResult:
    """Fit on the whole development set, predict the evaluation set."""
    dev_ids, eval_ids = sorted(dev_manifest.ids), sorted(eval_manifest.ids)
    guard = LeakageGuard(dev_ids, eval_ids)
    pipeline.fit(dev_ids, data)
    guard.verify(pipeline, data)
    probs = pipeline.predict(eval_ids, data)
    label_of = eval_manifest.label_map()
    labels = np.array([label_of[r] for r in eval_ids])
    table = ProbabilityTable(eval_ids, probs, None if np.all(labels < 0) else labels, pipeline.tag)
    if table.labels is not None and np.all(table.labels >= 0):
        return EvalResult(table, accuracy(table), confusion_from_table(table, probs.shape[1]))
    return EvalResult(table)


def write_metrics(path, metrics: dict):
    """Deterministic JSON: sorted keys, fixed float formatting."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(metrics, fh, sort_keys=True, indent=2)
        fh.write("\n")
