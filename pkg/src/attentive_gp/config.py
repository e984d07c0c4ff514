"""Flat ``section.key = value`` experiment configuration.

Grammar, one statement per line::

    # full-line comment
    section.key = value

Blank lines and lines whose first non-blank character is ``#`` are ignored.
Keys are ``section.name`` with exactly one dot; values are the rest of the
line after the first ``=``, stripped.  A key may appear only once.  Unknown
sections or keys are errors, as are values that do not parse as the field's
type.  Lists (``dataset.input_cols``) are comma-separated.

Sections: ``dataset``, ``model``, ``train``, ``gp``, ``experiment``,
``output``, ``compare``, ``sincheck``.  :func:`dump` writes every resolved
field, so ``parse(dump(cfg)) == cfg``.
"""

from __future__ import annotations

import inspect
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from . import data as data_mod
from .model import ModelConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    """Bad config text; carries the offending line number and field when known."""

    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(field)
        super().__init__(f"{': '.join(where)}: {message}" if where else message)
        self.line = line
        self.field = field


GENERATORS = {
    "sin": data_mod.gen_sin,
    "suspension": data_mod.gen_suspension,
    "load": data_mod.gen_load,
}


def _generator_fields(name: str) -> dict[str, type]:
    sig = inspect.signature(GENERATORS[name])
    out = {}
    for p in sig.parameters.values():
        if p.name in ("L", "seed", "params"):
            continue
        d = p.default
        out[p.name] = type(d) if d is not None else int
    return out


@dataclass
class DatasetSpec:
    name: str = "sin"
    seed: int = 0
    params: dict = field(default_factory=dict)   # generator keyword arguments
    path: str = ""
    input_cols: tuple[str, ...] = ()
    target_col: str = ""

    def build(self, L: int) -> data_mod.SequenceDataset:
        if self.name == "csv":
            return data_mod.load_csv(self.path, list(self.input_cols), self.target_col, L)
        return GENERATORS[self.name](seed=self.seed, L=L, **self.params)


@dataclass
class GPSettings:
    kind: str = "exact"
    u: int = 64
    lengthscale: float = 1.0
    noise: float = 0.1


@dataclass
class CompareSettings:
    seeds: int = 10
    max_rows: int = 5000


@dataclass
class SincheckSettings:
    n_points: int = 160
    noise_sd: float = 0.05
    epochs: int = 400
    restarts: int = 3
    F: int = 1
    warmup: int = 0
    batch_size: int = 32
    baseline_epochs: int = 400
    baseline_lr: float = 0.003


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    gp: GPSettings = field(default_factory=GPSettings)
    seed: int = 0
    trainer: str = "blockwise"
    out: str = "runs/default"
    compare: CompareSettings = field(default_factory=CompareSettings)
    sincheck: SincheckSettings = field(default_factory=SincheckSettings)

    def train_config(self) -> TrainConfig:
        """TrainConfig with the experiment seed and GP settings folded in."""
        return replace(self.train, seed=self.seed, gp_kind=self.gp.kind, u=self.gp.u)

    def with_overrides(self, seed: int | None = None, out: str | None = None) -> "ExperimentConfig":
        cfg = self
        if seed is not None:
            cfg = replace(cfg, seed=int(seed))
        if out is not None:
            cfg = replace(cfg, out=str(out))
        return cfg


# -- parsing -----------------------------------------------------------------


def _convert(raw: str, typ, key: str, line: int):
    try:
        if typ is bool:
            if raw.lower() not in ("true", "false"):
                raise ValueError(raw)
            return raw.lower() == "true"
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"expected {typ.__name__}, got {raw!r}", line, key) from None


def _dataclass_types(cls) -> dict[str, type]:
    out = {}
    for f in fields(cls):
        t = f.type if isinstance(f.type, str) else f.type.__name__
        out[f.name] = int if t.startswith("int") else float if t.startswith("float") else str
    return out


_SIMPLE = {
    "gp": GPSettings,
    "compare": CompareSettings,
    "sincheck": SincheckSettings,
}
_TRAIN_KEYS = {k: v for k, v in _dataclass_types(TrainConfig).items()
               if k not in ("seed", "gp_kind", "u")}


def _read_lines(text: str) -> list[tuple[int, str, str, str]]:
    seen: dict[str, int] = {}
    out = []
    for no, raw in enumerate(text.splitlines(), start=1):
        s = raw.strip()
        if not s or s.startswith("#"):
            continue
        if "=" not in s:
            raise ConfigError("expected 'section.key = value'", no)
        key, value = (p.strip() for p in s.split("=", 1))
        if key.count(".") != 1 or not all(key.split(".")):
            raise ConfigError("key must look like section.name", no, key or None)
        if key in seen:
            raise ConfigError(f"duplicate key (first set on line {seen[key]})", no, key)
        seen[key] = no
        section, name = key.split(".")
        out.append((no, section, name, value))
    return out


def parse(text: str) -> ExperimentConfig:
    entries = _read_lines(text)
    groups: dict[str, list] = {}
    for no, section, name, value in entries:
        groups.setdefault(section, []).append((no, name, value))
    known = {"dataset", "model", "train", "gp", "experiment", "output", *_SIMPLE}
    for section, items in groups.items():
        if section not in known:
            raise ConfigError("unknown section", items[0][0], f"{section}.{items[0][1]}")

    cfg = ExperimentConfig()

    # dataset
    ds_items = {name: (no, value) for no, name, value in groups.get("dataset", [])}
    if "name" not in ds_items:
        raise ConfigError("missing required field", None, "dataset.name")
    ds_name = ds_items.pop("name")[1]
    if ds_name not in (*GENERATORS, "csv"):
        raise ConfigError(f"unknown dataset {ds_name!r}; choose one of "
                          f"{', '.join([*GENERATORS, 'csv'])}", None, "dataset.name")
    ds = DatasetSpec(name=ds_name)
    if ds_name == "csv":
        allowed = {"path": str, "input_cols": str, "target_col": str}
        for req in allowed:
            if req not in ds_items:
                raise ConfigError("missing required field for csv data", None, f"dataset.{req}")
    else:
        allowed = {"seed": int, **_generator_fields(ds_name)}
    for name, (no, value) in ds_items.items():
        if name not in allowed:
            raise ConfigError("unknown field", no, f"dataset.{name}")
        v = _convert(value, allowed[name], f"dataset.{name}", no)
        if name == "input_cols":
            ds.input_cols = tuple(c.strip() for c in v.split(",") if c.strip())
        elif name in ("seed", "path", "target_col"):
            setattr(ds, name, v)
        else:
            ds.params[name] = v
    cfg.dataset = ds

    # model
    model_types = _dataclass_types(ModelConfig)
    model_kw = {}
    for no, name, value in groups.get("model", []):
        if name not in model_types:
            raise ConfigError("unknown field", no, f"model.{name}")
        model_kw[name] = _convert(value, model_types[name], f"model.{name}", no)
    try:
        cfg.model = ModelConfig(**model_kw)
    except ValueError as e:
        raise ConfigError(str(e), None, "model") from None

    # train
    train_kw = {}
    for no, name, value in groups.get("train", []):
        if name == "trainer":
            if value not in ("blockwise", "fullbatch"):
                raise ConfigError("expected blockwise or fullbatch", no, "train.trainer")
            cfg.trainer = value
            continue
        if name not in _TRAIN_KEYS:
            raise ConfigError("unknown field", no, f"train.{name}")
        if name == "T1" and value in ("", "auto"):
            train_kw[name] = None
            continue
        train_kw[name] = _convert(value, _TRAIN_KEYS[name], f"train.{name}", no)
    cfg.train = TrainConfig(**train_kw)
    try:
        cfg.train.validate()
    except ValueError as e:
        raise ConfigError(str(e), None, "train") from None

    # simple sections
    for section, cls in _SIMPLE.items():
        types = _dataclass_types(cls)
        kw = {}
        for no, name, value in groups.get(section, []):
            if name not in types:
                raise ConfigError("unknown field", no, f"{section}.{name}")
            kw[name] = _convert(value, types[name], f"{section}.{name}", no)
        setattr(cfg, section, cls(**kw))
    if cfg.gp.kind not in ("exact", "kiss"):
        raise ConfigError("expected exact or kiss", None, "gp.kind")

    for no, name, value in groups.get("experiment", []):
        if name != "seed":
            raise ConfigError("unknown field", no, f"experiment.{name}")
        cfg.seed = _convert(value, int, "experiment.seed", no)
    for no, name, value in groups.get("output", []):
        if name != "dir":
            raise ConfigError("unknown field", no, f"output.{name}")
        cfg.out = value
    return cfg


def load(path) -> ExperimentConfig:
    return parse(Path(path).read_text(encoding="utf-8"))


def dump(cfg: ExperimentConfig) -> str:
    """Every resolved field, one per line, in a fixed order."""
    lines = []
    ds = cfg.dataset
    lines.append(f"dataset.name = {ds.name}")
    if ds.name == "csv":
        lines += [f"dataset.path = {ds.path}",
                  f"dataset.input_cols = {','.join(ds.input_cols)}",
                  f"dataset.target_col = {ds.target_col}"]
    else:
        lines.append(f"dataset.seed = {ds.seed}")
        for name in _generator_fields(ds.name):
            if name in ds.params:
                lines.append(f"dataset.{name} = {_fmt(ds.params[name])}")
    for k, v in asdict(cfg.model).items():
        lines.append(f"model.{k} = {_fmt(v)}")
    lines.append(f"train.trainer = {cfg.trainer}")
    for k in _TRAIN_KEYS:
        v = getattr(cfg.train, k)
        lines.append(f"train.{k} = {'auto' if v is None else _fmt(v)}")
    for section in _SIMPLE:
        for k, v in asdict(getattr(cfg, section)).items():
            lines.append(f"{section}.{k} = {_fmt(v)}")
    lines.append(f"experiment.seed = {cfg.seed}")
    lines.append(f"output.dir = {cfg.out}")
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)
