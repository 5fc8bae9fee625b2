"""Dataset ingestion: manifests, WAV loading, folds and a synthetic scene corpus.

Manifests use the DCASE convention, one ``<relative-audio-path>\\t<scene_label>``
per line.  A recording's id is its manifest path.  Class indices are ranks of
labels in the sorted class list.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.io import wavfile

from . import SAMPLE_RATE
from .errors import DataError, LabelError, ManifestParseError

log = logging.getLogger(__name__)


@dataclass
class Recording:
    id: str
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE
    label: int | None = None

    def __post_init__(self):
        if self.sample_rate != SAMPLE_RATE:
            raise DataError(f"{self.id}: sample rate {self.sample_rate} != {SAMPLE_RATE}")
        if len(self.samples) == 0:
            raise DataError(f"{self.id}: empty waveform")
        if self.label is not None and not 0 <= self.label < 15:
            raise LabelError(f"{self.id}: label index {self.label} outside [0, 15)")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class DatasetManifest:
    entries: list[tuple[str, str]]
    class_names: list[str]
    root: Path | None = None

    @property
    def ids(self) -> list[str]:
        return [path for path, _ in self.entries]

    def label_index(self, label: str) -> int:
        try:
            return self.class_names.index(label)
        except ValueError:
            raise LabelError(f"unknown label {label!r}") from None

    def labels(self) -> np.ndarray:
        lookup = {name: i for i, name in enumerate(self.class_names)}
        return np.array([lookup[lab] for _, lab in self.entries], dtype=np.int64)

    def label_map(self) -> dict:
        """Recording id -> class index (-1 for unlabelled entries)."""
        lookup = {name: i for i, name in enumerate(self.class_names)}
        return {rec: lookup.get(lab, -1) for rec, lab in self.entries}

    def audio_path(self, rec_id: str) -> Path:
        root = self.root if self.root is not None else Path(".")
        return root / rec_id

    def subset(self, ids) -> "DatasetManifest":
        keep = set(ids)
        return DatasetManifest(
            [e for e in self.entries if e[0] in keep], list(self.class_names), self.root
        )

    def __len__(self):
        return len(self.entries)


@dataclass(frozen=True)
class FoldSplit:
    fold_index: int
    train_ids: frozenset
    test_ids: frozenset

    def __post_init__(self):
        if self.train_ids & self.test_ids:
            raise DataError(f"fold {self.fold_index}: train and test overlap")


@dataclass(frozen=True)
class ClassSignature:
    tilt_db_per_octave: float
    tones_hz: tuple
    am_rate_hz: float


@dataclass
class SyntheticSceneSpec:
    n_classes: int = 15
    recordings_per_class: int = 4
    duration_s: float = 10.0
    seed: int = 0
    class_signatures: list[ClassSignature] | None = field(default=None)
    id_prefix: str = ""  # keeps ids of several corpora distinct
    recording_seed: int | None = None  # per-recording randomness; defaults to seed

    def __post_init__(self):
        if self.duration_s <= 1.5:
            raise DataError("synthetic duration must exceed 1.5 s")
        if self.class_signatures is None:
            self.class_signatures = default_signatures(self.n_classes, self.seed)
        if len(self.class_signatures) != self.n_classes:
            raise DataError("need one signature per class")
        if len(set(self.class_signatures)) != self.n_classes:
            raise DataError("class signatures must be pairwise distinct")


# ---------------------------------------------------------------------------
# manifests


def parse_manifest_lines(lines: Sequence[str], source: str = "<manifest>", require_label=True):
    entries = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.rstrip("\r\n")
        if not line.strip():
            continue
        if "\t" not in line:
            if require_label:
                raise ManifestParseError(f"{source}:{lineno}: expected '<path>\\t<label>'")
            entries.append((line.strip(), ""))
            continue
        path, label = line.split("\t")[:2]
        entries.append((path.strip(), label.strip()))
    return entries


def load_manifest(path, class_names: Sequence[str] | None = None, require_label=True) -> DatasetManifest:
    """Read a tab-separated manifest; order is preserved.

    When ``class_names`` is given, every label must belong to it; otherwise
    the class list is the sorted set of labels found.  With
    ``require_label=False`` lines may omit the label (evaluation lists).
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    entries = parse_manifest_lines(text.split("\n"), str(path), require_label)
    if not entries:
        raise ManifestParseError(f"{path}: empty manifest")
    found = sorted({lab for _, lab in entries if lab})
    if class_names is not None:
        unknown = [lab for lab in found if lab not in class_names]
        if unknown:
            raise LabelError(f"{path}: unknown labels {unknown}")
        names = list(class_names)
    else:
        names = found
    return DatasetManifest(entries, names, path.parent)


def write_manifest(manifest: DatasetManifest, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec_path, label in manifest.entries:
            fh.write(f"{rec_path}\t{label}\n")


# ---------------------------------------------------------------------------
# audio


def _to_float(data: np.ndarray) -> np.ndarray:
    if data.dtype == np.int16:
        return data.astype(np.float64) / 32768.0
    if data.dtype == np.int32:
        return data.astype(np.float64) / 2147483648.0
    if data.dtype == np.uint8:
        return (data.astype(np.float64) - 128.0) / 128.0
    if data.dtype.kind == "f":
        return data.astype(np.float64)
    raise DataError(f"unsupported sample format {data.dtype}")


def load_recording(path, rec_id: str | None = None, label: int | None = None) -> Recording:
    """Load a PCM/float WAV at 44.1 kHz and down-mix to mono by channel mean."""
    try:
        rate, data = wavfile.read(str(path))
    except (ValueError, EOFError) as exc:
        raise DataError(f"{path}: cannot decode WAV ({exc})") from exc
    if rate != SAMPLE_RATE:
        raise DataError(f"{path}: sample rate {rate} Hz; resample to {SAMPLE_RATE} first")
    samples = _to_float(data)
    if samples.ndim == 2:
        if samples.shape[1] > 2:
            raise DataError(f"{path}: {samples.shape[1]} channels; expected 1 or 2")
        samples = samples.mean(axis=1)
    return Recording(rec_id if rec_id is not None else str(path), samples, rate, label)


def write_wav(path, samples: np.ndarray, sample_rate: int = SAMPLE_RATE, pcm16=True) -> None:
    samples = np.asarray(samples)
    if pcm16:
        data = np.round(np.clip(samples, -1.0, 32767 / 32768) * 32768).astype(np.int16)
    else:
        data = samples.astype(np.float32)
    wavfile.write(str(path), sample_rate, data)


def iter_recordings(manifest: DatasetManifest, ids=None):
    labels = dict(zip(manifest.ids, manifest.labels()))
    for rec_id in ids if ids is not None else manifest.ids:
        yield load_recording(manifest.audio_path(rec_id), rec_id, int(labels[rec_id]))


# ---------------------------------------------------------------------------
# folds


def make_folds(manifest: DatasetManifest, k: int = 4, seed: int = 0) -> list[FoldSplit]:
    """Stratified k-fold partition: round-robin over a seeded per-class shuffle."""
    if k < 2:
        raise DataError("need k >= 2 folds")
    labels = manifest.labels()
    ids = np.array(manifest.ids, dtype=object)
    counts = np.bincount(labels, minlength=len(manifest.class_names))
    present = counts[counts > 0]
    if present.min() < k:
        raise DataError(f"smallest class has {present.min()} recordings, fewer than k={k}")
    rng = np.random.default_rng(seed)
    test_sets: list[set] = [set() for _ in range(k)]
    offset = 0
    for cls in range(len(manifest.class_names)):
        members = ids[labels == cls]
        if len(members) == 0:
            continue
        members = members[rng.permutation(len(members))]
        for j, rec_id in enumerate(members):
            test_sets[(j + offset) % k].add(rec_id)
        offset = (offset + len(members)) % k
    all_ids = frozenset(manifest.ids)
    return [
        FoldSplit(i + 1, all_ids - frozenset(test), frozenset(test))
        for i, test in enumerate(test_sets)
    ]


def load_fold_files(folder, n_folds: int = 4) -> list[FoldSplit] | None:
    """Parse DCASE-style ``fold{k}_train.txt`` / ``fold{k}_evaluate.txt`` pairs.

    ``fold{k}_test.txt`` is accepted in place of the evaluate file.  Returns
    None when the folder holds no fold files.
    """
    folder = Path(folder)
    if not (folder / "fold1_train.txt").exists():
        return None
    folds = []
    for k in range(1, n_folds + 1):
        train_file = folder / f"fold{k}_train.txt"
        test_file = folder / f"fold{k}_evaluate.txt"
        if not test_file.exists():
            test_file = folder / f"fold{k}_test.txt"
        if not train_file.exists() or not test_file.exists():
            raise DataError(f"{folder}: incomplete fold files for fold {k}")
        train = parse_manifest_lines(train_file.read_text("utf-8").split("\n"), str(train_file))
        test = parse_manifest_lines(
            test_file.read_text("utf-8").split("\n"), str(test_file), require_label=False
        )
        folds.append(FoldSplit(k, frozenset(p for p, _ in train), frozenset(p for p, _ in test)))
    return folds


def write_fold_files(manifest: DatasetManifest, folds: Sequence[FoldSplit], folder) -> None:
    folder = Path(folder)
    folder.mkdir(parents=True, exist_ok=True)
    for fold in folds:
        for kind, ids in (("train", fold.train_ids), ("evaluate", fold.test_ids)):
            write_manifest(
                DatasetManifest([e for e in manifest.entries if e[0] in ids], manifest.class_names),
                folder / f"fold{fold.fold_index}_{kind}.txt",
            )


# ---------------------------------------------------------------------------
# synthetic corpus

_SCENE_NAMES = [
    "beach", "bus", "cafe_restaurant", "car", "city_center", "forest_path",
    "grocery_store", "home", "library", "metro_station", "office", "park",
    "residential_area", "train", "tram",
]


def default_signatures(n_classes: int, seed: int) -> list[ClassSignature]:
    """Seeded, pairwise-distinct class signatures.

    Tones come from a log-spaced grid and no two classes share a tone, so the
    long-term spectra of different classes peak in different places.
    """
    rng = np.random.default_rng([seed, 1729])
    grid = np.geomspace(180.0, 7000.0, 2 * n_classes)
    perm = rng.permutation(2 * n_classes)
    tilts = rng.permutation(np.linspace(-9.0, 0.0, n_classes))
    rates = rng.permutation(np.geomspace(0.5, 16.0, n_classes))
    sigs = []
    for k in range(n_classes):
        tones = tuple(sorted(float(round(grid[i], 2)) for i in perm[2 * k:2 * k + 2]))
        sigs.append(ClassSignature(float(round(tilts[k], 4)), tones, float(round(rates[k], 4))))
    return sigs


def class_names_for(n_classes: int) -> list[str]:
    if n_classes <= len(_SCENE_NAMES):
        return sorted(_SCENE_NAMES[:n_classes])
    return [f"scene{i:02d}" for i in range(n_classes)]


def synthesize_scene(sig: ClassSignature, duration_s: float, rng: np.random.Generator) -> np.ndarray:
    n = int(round(duration_s * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / SAMPLE_RATE)
    slope = sig.tilt_db_per_octave / (20.0 * np.log10(2.0))
    spec *= (np.maximum(freqs, 20.0) / 1000.0) ** slope
    noise = np.fft.irfft(spec, n)
    noise *= 0.05 / np.sqrt(np.mean(noise**2))
    env = 1.0 + 0.8 * np.sin(2 * np.pi * sig.am_rate_hz * t + rng.uniform(0, 2 * np.pi))
    tones = sum(
        np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi)) for f in sig.tones_hz
    )
    x = noise + 0.08 * env * tones
    return x * (rng.uniform(0.3, 0.9) / np.max(np.abs(x)))


def generate_synthetic_dataset(spec: SyntheticSceneSpec, out_dir) -> DatasetManifest:
    """Write a deterministic synthetic corpus (16-bit WAVs plus ``manifest.txt``)."""
    out_dir = Path(out_dir)
    try:
        (out_dir / "audio").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out_dir}: {exc}") from exc
    names = class_names_for(spec.n_classes)
    entries = []
    for k, (name, sig) in enumerate(zip(names, spec.class_signatures)):
        for i in range(spec.recordings_per_class):
            seed = spec.seed if spec.recording_seed is None else spec.recording_seed
            rng = np.random.default_rng([seed, k, i])
            rel = f"audio/{spec.id_prefix}{name}_{i:03d}.wav"
            write_wav(out_dir / rel, synthesize_scene(sig, spec.duration_s, rng))
            entries.append((rel, name))
    manifest = DatasetManifest(entries, names, out_dir)
    write_manifest(manifest, out_dir / "manifest.txt")
    log.info("wrote %d synthetic recordings to %s", len(entries), os.fspath(out_dir))
    return manifest
