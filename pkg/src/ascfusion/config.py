"""Experiment configuration: a flat INI file of sections whose keys mirror
the dataclass fields of each module, plus ``--section.key value`` overrides.

Values are typed by the default of the field they set, so the file format
needs no schema beyond the dataclasses themselves.
"""
from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .dataset import SyntheticSceneSpec
from .errors import ConfigError
from .frontend import FrontendConfig
from .gbm import DEFAULT_GRID, DEFAULT_LDA_DIMS, GbmConfig
from .nn.network import NetworkConfig
from .nn.train import TrainingConfig


@dataclass
class DatasetSection:
    manifest: str = ""  # development manifest; empty = <output>/data/manifest.txt
    eval_manifest: str = ""  # empty = <output>/data/eval_manifest.txt when present
    folds_dir: str = ""  # fold files; empty = generated by make_folds
    n_folds: int = 4
    fold_seed: int = 0


@dataclass
class SyntheticSection:
    n_classes: int = 15
    recordings_per_class: int = 8
    eval_recordings_per_class: int = 0
    duration_s: float = 10.0
    seed: int = 0

    def spec(self, eval_split=False) -> SyntheticSceneSpec:
        if not eval_split:
            return SyntheticSceneSpec(self.n_classes, self.recordings_per_class, self.duration_s, self.seed)
        # same class signatures, fresh recordings, distinct ids
        return SyntheticSceneSpec(self.n_classes, self.eval_recordings_per_class, self.duration_s, self.seed,
                                  id_prefix="eval_", recording_seed=self.seed + 1_000_003)


@dataclass
class LdaSection:
    dim: int = 0  # 0 disables the projection
    strict: bool = False


@dataclass
class GridSection:
    learning_rate: tuple = tuple(DEFAULT_GRID["learning_rate"])
    max_bins: tuple = tuple(DEFAULT_GRID["max_bins"])
    num_leaves: tuple = tuple(DEFAULT_GRID["num_leaves"])
    min_data_in_leaf: tuple = tuple(DEFAULT_GRID["min_data_in_leaf"])
    use_lda: bool = False
    lda_dims: tuple = tuple(DEFAULT_LDA_DIMS)

    def grid(self) -> dict:
        return {k: tuple(getattr(self, k)) for k in ("learning_rate", "max_bins", "num_leaves", "min_data_in_leaf")}


@dataclass
class FusionSection:
    method: str = "stacking"  # used by `fuse`
    methods: tuple = ("arithmetic", "geometric", "rank", "stacking")  # evaluated by `evaluate`
    meta_kind: str = "logreg"
    c_grid: tuple = (1e-3, 1e-2, 0.1, 1.0)
    log_inputs: bool = False


@dataclass
class EvaluationSection:
    mode: str = "cv"
    branches: tuple = ("cnn", "gbm")
    n_trials: int = 1
    seed: int = 0


@dataclass
class OutputSection:
    dir: str = "runs/default"


SECTIONS = {
    "dataset": DatasetSection,
    "synthetic": SyntheticSection,
    "frontend": FrontendConfig,
    "cnn": NetworkConfig,
    "training": TrainingConfig,
    "gbm": GbmConfig,
    "lda": LdaSection,
    "grid": GridSection,
    "fusion": FusionSection,
    "evaluation": EvaluationSection,
    "output": OutputSection,
}

# keys whose values are derived elsewhere and must not be set by hand
HIDDEN = {("training", "seed"), ("cnn", "l2")}  # the training section owns l2


@dataclass
class ExperimentConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    synthetic: SyntheticSection = field(default_factory=SyntheticSection)
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    cnn: NetworkConfig = field(default_factory=NetworkConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    gbm: GbmConfig = field(default_factory=GbmConfig)
    lda: LdaSection = field(default_factory=LdaSection)
    grid: GridSection = field(default_factory=GridSection)
    fusion: FusionSection = field(default_factory=FusionSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)
    output: OutputSection = field(default_factory=OutputSection)

    def validate(self) -> "ExperimentConfig":
        if self.evaluation.mode not in ("cv", "eval"):
            raise ConfigError(f"evaluation.mode must be 'cv' or 'eval', got {self.evaluation.mode!r}")
        bad = set(self.evaluation.branches) - {"cnn", "gbm"}
        if bad or not self.evaluation.branches:
            raise ConfigError(f"evaluation.branches must name cnn and/or gbm, got {self.evaluation.branches!r}")
        if self.evaluation.n_trials < 1:
            raise ConfigError("evaluation.n_trials must be >= 1")
        if self.dataset.n_folds < 2:
            raise ConfigError("dataset.n_folds must be >= 2")
        if self.lda.dim < 0:
            raise ConfigError("lda.dim must be >= 0")
        if self.fusion.meta_kind not in ("logreg", "svm"):
            raise ConfigError(f"fusion.meta_kind must be 'logreg' or 'svm', got {self.fusion.meta_kind!r}")
        known = ("arithmetic", "geometric", "rank", "stacking")
        for m in (self.fusion.method, *self.fusion.methods):
            if m not in known:
                raise ConfigError(f"unknown fusion method {m!r}; valid: {', '.join(known)}")
        self.cnn.filter_groups()
        self.training.validate()
        self.gbm.validate()
        if self.cnn.classes != self.synthetic.n_classes and not self.dataset.manifest:
            raise ConfigError(f"cnn.classes={self.cnn.classes} but synthetic.n_classes={self.synthetic.n_classes}")
        return self

    # paths ------------------------------------------------------------

    @property
    def out(self) -> Path:
        return Path(self.output.dir)

    def dev_manifest_path(self) -> Path:
        return Path(self.dataset.manifest) if self.dataset.manifest else self.out / "data" / "manifest.txt"

    def eval_manifest_path(self) -> Path:
        if self.dataset.eval_manifest:
            return Path(self.dataset.eval_manifest)
        return self.out / "data" / "eval" / "manifest.txt"

    # serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    def to_ini(self) -> str:
        """Canonical text form: every key, fixed order."""
        buf = io.StringIO()
        for name in SECTIONS:
            buf.write(f"[{name}]\n")
            for f in fields(getattr(self, name)):
                if (name, f.name) in HIDDEN:
                    continue
                buf.write(f"{f.name} = {format_value(getattr(getattr(self, name), f.name))}\n")
            buf.write("\n")
        return buf.getvalue()

    def digest(self) -> str:
        return hashlib.sha256(self.to_ini().encode()).hexdigest()


def valid_keys(section: str) -> list[str]:
    return [f.name for f in fields(SECTIONS[section]) if (section, f.name) not in HIDDEN]


# ---------------------------------------------------------------------------
# value parsing


def format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        if v and isinstance(v[0], tuple):  # filter groups: count:time:freq
            return ",".join(":".join(str(x) for x in g) for g in v)
        return ",".join(format_value(x) for x in v)
    return str(v)


def _scalar(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_value(section: str, key: str, text: str, default):
    text = text.strip()
    try:
        if section == "cnn" and key == "groups":
            if text.lower() in ("", "none"):
                return None
            return tuple(tuple(int(x) for x in g.split(":")) for g in text.split(","))
        if isinstance(default, bool):
            return _parse_bool(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(_scalar(x.strip()) for x in text.split(",") if x.strip())
        if default is None:
            return None if text.lower() in ("", "none") else _scalar(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"{section}.{key}: cannot parse {text!r} ({exc})") from None


def _check_key(section: str, key: str):
    if section not in SECTIONS:
        raise ConfigError(f"unknown config section {section!r}; valid sections: {', '.join(SECTIONS)}")
    keys = valid_keys(section)
    if key not in keys:
        raise ConfigError(f"unknown key {section}.{key}; valid keys for [{section}]: {', '.join(keys)}")


def apply_overrides(cfg: ExperimentConfig, overrides) -> ExperimentConfig:
    """Apply ``[(section, key, text), ...]`` in order and return a new config."""
    for section, key, text in overrides:
        _check_key(section, key)
        current = getattr(cfg, section)
        value = parse_value(section, key, text, getattr(current, key))
        cfg = replace(cfg, **{section: replace(current, **{key: value})})
    return cfg


def parse_ini(text: str, source="<config>"):
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keys are case-sensitive field names
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return [(s, k, v) for s in parser.sections() for k, v in parser.items(s)]


def load_config(path=None, overrides=()) -> ExperimentConfig:
    """Defaults, then the file at ``path`` (if any), then ``overrides``."""
    items = []
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        items = parse_ini(path.read_text(encoding="utf-8"), str(path))
    return apply_overrides(ExperimentConfig(), [*items, *overrides]).validate()


def split_flag_overrides(tokens) -> list[tuple[str, str, str]]:
    """Turn ``--section.key value`` / ``--section.key=value`` tokens into triples."""
    out, i = [], 0
    tokens = list(tokens)
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--") or "." not in tok.split("=", 1)[0]:
            raise ConfigError(f"unrecognized argument {tok!r}; overrides take the form --section.key value")
        name, eq, value = tok[2:].partition("=")
        if not eq:
            if i + 1 >= len(tokens):
                raise ConfigError(f"{tok} needs a value")
            value = tokens[i + 1]
            i += 1
        section, _, key = name.partition(".")
        _check_key(section, key)
        out.append((section, key, value))
        i += 1
    return out
