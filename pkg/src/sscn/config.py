"""Run configuration: an INI-style text file with one section per concern.

Every key has a default, documented in ``DOCS``; unknown sections or keys are
rejected with the offending line number.  ``to_text`` writes a file that
``parse`` reads back to an equal ``RunConfig``.
"""
import configparser
from dataclasses import dataclass, field, fields, replace
from typing import Dict, List, Optional

from .data import FEATURE_MODES
from .network import NetworkSpec, SpecError
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class OptimizerSection:
    lr: float = 0.1
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 1e-4
    lr_decay: float = 0.04
    batch_size: int = 16


@dataclass
class DataSection:
    source: str = "synthetic"
    n_samples: int = 400
    data_seed: int = 0
    S: int = 16
    grid_multiplier: int = 4
    augment: str = "rotation"
    affine_eps: float = 0.1
    feature_mode: str = "count"


@dataclass
class TrainSection:
    epochs: int = 30
    seed: int = 0
    checkpoint_every: int = 0


@dataclass
class EvalSection:
    views: int = 1
    mask: bool = True
    split: str = "validation"


@dataclass
class PathsSection:
    out_dir: str = "runs/default"
    log: str = "train.log"
    report: str = "eval.json"


SECTION_TYPES = {"network": NetworkSpec, "optimizer": OptimizerSection, "data": DataSection,
                 "train": TrainSection, "eval": EvalSection, "paths": PathsSection}

DOCS = {
    "network.arch": "C3, FCN, UNet or ShapeContext",
    "network.d": "spatial dimension",
    "network.m_in": "input feature planes",
    "network.filters0": "filters at full resolution (8, 16, 32 or 64)",
    "network.levels": "downsampling levels (FCN, UNet)",
    "network.layers": "number of SSC layers (C3)",
    "network.block_reps": "blocks per level (1-3)",
    "network.residual": "use residual blocks",
    "network.n_classes": "output classes",
    "network.mlp_width": "hidden width of the shape-context MLP",
    "network.dtype": "float32 or float64",
    "optimizer.lr": "initial learning rate",
    "optimizer.momentum": "momentum",
    "optimizer.nesterov": "Nesterov updates",
    "optimizer.weight_decay": "L2 weight decay (not on batch-norm parameters)",
    "optimizer.lr_decay": "learning rate is lr * exp(-lr_decay * epoch)",
    "optimizer.batch_size": "samples per mini-batch",
    "data.source": "'synthetic' or a directory with manifest.txt, <name>.pts and <name>.seg",
    "data.n_samples": "size of the synthetic dataset",
    "data.data_seed": "seed of the synthetic dataset",
    "data.S": "objects are scaled into a sphere of diameter S",
    "data.grid_multiplier": "grid size is grid_multiplier * S (1 or 4)",
    "data.augment": "none, rotation or affine",
    "data.affine_eps": "affine jitter half-width",
    "data.feature_mode": "count, mean or mean+count",
    "train.epochs": "training epochs",
    "train.seed": "global seed for init, shuffling and augmentation",
    "train.checkpoint_every": "save a checkpoint every N epochs (0: final only)",
    "eval.views": "test-time views averaged per sample",
    "eval.mask": "restrict predictions to the parts of the known category",
    "eval.split": "train, validation or all",
    "paths.out_dir": "checkpoints, logs and reports go here",
    "paths.log": "training log file name inside out_dir",
    "paths.report": "evaluation report file name inside out_dir",
}


@dataclass
class RunConfig:
    network: NetworkSpec = field(default_factory=NetworkSpec)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    data: DataSection = field(default_factory=DataSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    paths: PathsSection = field(default_factory=PathsSection)

    def validate(self):
        try:
            self.network.validate()
        except SpecError as e:
            raise ConfigError(f"[network] {e}") from None
        o, d, t, e = self.optimizer, self.data, self.train, self.eval
        checks = [
            (o.lr >= 0, "optimizer.lr must be non-negative"),
            (o.batch_size >= 1, "optimizer.batch_size must be at least 1"),
            (d.S >= 1, "data.S must be positive"),
            (d.grid_multiplier in (1, 4), "data.grid_multiplier must be 1 or 4"),
            (d.augment in ("none", "rotation", "affine"), "data.augment must be none, rotation or affine"),
            (d.feature_mode in FEATURE_MODES, f"data.feature_mode must be one of {FEATURE_MODES}"),
            (d.n_samples >= 1, "data.n_samples must be positive"),
            (t.epochs >= 0, "train.epochs must be non-negative"),
            (t.checkpoint_every >= 0, "train.checkpoint_every must be non-negative"),
            (e.views >= 1, "eval.views must be at least 1"),
            (e.split in ("train", "validation", "all"), "eval.split must be train, validation or all"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        if (d.S * d.grid_multiplier) % self.network.downsample_factor:
            raise ConfigError(f"grid size {d.S * d.grid_multiplier} is not divisible by "
                              f"{self.network.downsample_factor} for this network")
        return self

    def train_config(self) -> TrainConfig:
        o, d = self.optimizer, self.data
        return TrainConfig(epochs=self.train.epochs, batch_size=o.batch_size, lr=o.lr,
                           momentum=o.momentum, nesterov=o.nesterov, weight_decay=o.weight_decay,
                           lr_decay=o.lr_decay, S=d.S, grid_multiplier=d.grid_multiplier,
                           augment=d.augment, affine_eps=d.affine_eps, feature_mode=d.feature_mode,
                           seed=self.train.seed, views=self.eval.views)

    def to_text(self, comments=True):
        lines = []
        for sec, typ in SECTION_TYPES.items():
            lines.append(f"[{sec}]")
            obj = getattr(self, sec)
            for f in fields(typ):
                if comments:
                    lines.append(f"# {DOCS[f'{sec}.{f.name}']} (default {_fmt(f.default)})")
                lines.append(f"{f.name} = {_fmt(getattr(obj, f.name))}")
            lines.append("")
        return "\n".join(lines)

    def set(self, key, value):
        """Override one key, ``section.key`` or a key name unique across sections."""
        sec, name = _resolve_key(key)
        obj = getattr(self, sec)
        ftype = _field_types(SECTION_TYPES[sec])[name]
        setattr(self, sec, replace(obj, **{name: _convert(value, ftype, f"{sec}.{name}")}))
        return self


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _field_types(typ):
    return {f.name: type(f.default) for f in fields(typ)}


def _resolve_key(key):
    if "." in key:
        sec, name = key.split(".", 1)
        if sec not in SECTION_TYPES or name not in _field_types(SECTION_TYPES[sec]):
            raise ConfigError(f"unknown configuration key {key!r}")
        return sec, name
    owners = [s for s, t in SECTION_TYPES.items() if key in _field_types(t)]
    if len(owners) != 1:
        raise ConfigError(f"unknown or ambiguous configuration key {key!r}; use section.key")
    return owners[0], key


_BOOLS = configparser.ConfigParser.BOOLEAN_STATES


def _convert(raw, ftype, where):
    raw = raw.strip()
    try:
        if ftype is bool:
            if raw.lower() not in _BOOLS:
                raise ValueError
            return _BOOLS[raw.lower()]
        if ftype is int:
            return int(raw)
        if ftype is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{where}: expected {ftype.__name__}, got {raw!r}") from None
    return raw


def _locate(lines, section, key=None):
    """1-based line of ``[section]`` or of ``key`` inside it."""
    current = None
    for i, line in enumerate(lines, 1):
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            current = s[1:-1].strip()
            if key is None and current == section:
                return i
        elif current == section and key is not None:
            name = s.split("=", 1)[0].split(":", 1)[0].strip()
            if name == key:
                return i
    return 0


def parse(text, source="<config>", overrides: Optional[List[str]] = None) -> RunConfig:
    """Parse config text; ``overrides`` are ``key=value`` strings applied afterwards."""
    cp = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"),
                                   inline_comment_prefixes=None, default_section="__none__")
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(str(e).replace("\n", " ")) from None
    lines = text.splitlines()
    cfg = RunConfig()
    for sec in cp.sections():
        if sec not in SECTION_TYPES:
            raise ConfigError(f"{source}:{_locate(lines, sec)}: unknown section [{sec}]")
        types = _field_types(SECTION_TYPES[sec])
        values: Dict[str, object] = {}
        for key, raw in cp.items(sec):
            where = f"{source}:{_locate(lines, sec, key)}"
            if key not in types:
                raise ConfigError(f"{where}: unknown key {key!r} in [{sec}]")
            values[key] = _convert(raw, types[key], where)
        setattr(cfg, sec, replace(getattr(cfg, sec), **values))
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        cfg.set(key.strip(), value)
    return cfg.validate()


def load(path, overrides=None) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    return parse(text, str(path), overrides)


def save(cfg: RunConfig, path):
    with open(path, "w") as fh:
        fh.write(cfg.to_text())
