"""Experiment configuration: a single TOML document with a strict schema.

Example::

    seed = 7
    out = "runs/demo"
    methods = ["pos", "prn-real", "prn-augmented"]

    [dataset]
    train_subjects = 20
    train_mix = "ubfc-like"
    eval_subjects = 58
    eval_mix = "vital-like"
    duration_s = 32.0

    [train]
    epochs = 4

    [eval]
    window_s = 30.0

Unknown keys and wrongly typed values are rejected with the offending
field and, where it can be located, its line number.
"""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

from ..neural.training import TrainConfig
from ..optics import SCALES

METHODS = ("pos", "chrom", "ica", "prn-real", "prn-augmented", "prn-synth", "oracle")
LEARNED = ("prn-real", "prn-augmented", "prn-synth")
MIXES = ("ubfc-like", "vital-like", "light", "dark", "explicit")


class ConfigError(ValueError):
    """Invalid configuration; ``field`` is the dotted key, ``line`` 1-based or None."""

    def __init__(self, message: str, field: str | None = None, line: int | None = None):
        self.field = field
        self.line = line
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field:
            where.append(f"field '{field}'")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)


@dataclass
class DatasetConfig:
    train_subjects: int = 20
    train_mix: str = "ubfc-like"
    train_scales: list = field(default_factory=list)
    dark_fraction: float = 0.05
    eval_subjects: int = 58
    eval_mix: str = "vital-like"
    eval_scales: list = field(default_factory=list)
    duration_s: float = 32.0
    train_duration_s: float = 0.0
    fs: float = 30.0
    size: int = 16
    hr_range: list = field(default_factory=lambda: [50.0, 110.0])
    hr_drift: float = 0.0
    noise_sigma: float = 2e-3
    motion: float = 1.0
    quantize: bool = False


@dataclass
class EvalConfig:
    window_s: float = 30.0
    stride_s: float = 1.0
    band: list = field(default_factory=lambda: [0.7, 2.5])
    cr_range: list = field(default_factory=lambda: [133.0, 173.0])
    cb_range: list = field(default_factory=lambda: [77.0, 127.0])
    figures: bool = True
    workers: int = 1


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/default"
    methods: list = field(default_factory=lambda: ["pos", "chrom", "ica", "prn-real", "prn-augmented"])
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"] = self.train.to_dict()
        return d

    def to_toml(self) -> str:
        """Render as a TOML document that :func:`parse_config` reads back."""
        d = self.to_dict()
        lines = [f"{k} = {_toml_value(d[k])}" for k in ("seed", "out", "methods")]
        for table in ("dataset", "train", "eval"):
            lines += ["", f"[{table}]"]
            lines += [f"{k} = {_toml_value(v)}" for k, v in d[table].items()]
        return "\n".join(lines) + "\n"


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot render {type(v).__name__} as TOML")


def _locate(text: str, table: str | None, key: str) -> int | None:
    """Best-effort line number of ``key`` inside ``[table]`` (or the root)."""
    current = None
    header = re.compile(r"^\s*\[([^\[\]]+)\]\s*(#.*)?$")
    assign = re.compile(r"^\s*" + re.escape(key) + r"\s*=")
    for no, line in enumerate(text.splitlines(), 1):
        m = header.match(line)
        if m:
            current = m.group(1).strip()
            if table is None and current == key:
                return no
            continue
        if current == table and assign.match(line):
            return no
    return None


def _check_type(name: str, value, expected, text: str, table: str | None, key: str):
    line = _locate(text, table, key)
    if expected is bool:
        ok = isinstance(value, bool)
    elif expected is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif expected is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif expected in (list, tuple):
        ok = isinstance(value, list)
    else:
        ok = isinstance(value, expected)
    if not ok:
        raise ConfigError(f"expected {expected.__name__}, got {type(value).__name__}", name, line)
    return value


_TYPES = {"int": int, "float": float, "bool": bool, "str": str, "list": list, "tuple": tuple}


def _fill(cls, raw: dict, text: str, table: str):
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        name = f"{table}.{key}"
        if key not in known:
            raise ConfigError(f"unknown key (allowed: {', '.join(sorted(known))})", name,
                              _locate(text, table, key))
        tname = known[key].type if isinstance(known[key].type, str) else known[key].type.__name__
        expected = _TYPES[tname.split("[")[0].split(" ")[0]]
        kwargs[key] = _check_type(name, value, expected, text, table, key)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), table, _locate(text, None, table)) from None


def _validate(cfg: ExperimentConfig, text: str) -> None:
    def fail(msg, table, key):
        raise ConfigError(msg, f"{table}.{key}" if table else key, _locate(text, table, key))

    for m in cfg.methods:
        if m not in METHODS:
            fail(f"unknown method {m!r} (allowed: {', '.join(METHODS)})", None, "methods")
    ds = cfg.dataset
    for prefix in ("train", "eval"):
        mix = getattr(ds, f"{prefix}_mix")
        scales = getattr(ds, f"{prefix}_scales")
        n = getattr(ds, f"{prefix}_subjects")
        if mix not in MIXES:
            fail(f"unknown mix {mix!r} (allowed: {', '.join(MIXES)})", "dataset", f"{prefix}_mix")
        if n < 0:
            fail("must be >= 0", "dataset", f"{prefix}_subjects")
        if mix == "explicit":
            if len(scales) != n:
                fail(f"explicit mix lists {len(scales)} scales for {n} subjects", "dataset",
                     f"{prefix}_scales")
            bad = [s for s in scales if str(s).upper() not in SCALES]
            if bad:
                fail(f"unknown Fitzpatrick scale(s) {bad}", "dataset", f"{prefix}_scales")
    if not 0 <= ds.dark_fraction <= 1:
        fail("must be within [0, 1]", "dataset", "dark_fraction")
    if ds.duration_s <= 0 or ds.fs <= 0 or ds.size < 4:
        fail("duration_s and fs must be positive and size >= 4", "dataset", "duration_s")
    if ds.train_duration_s < 0:
        fail("must be >= 0 (0 means duration_s)", "dataset", "train_duration_s")
    if len(ds.hr_range) != 2 or not 42 <= ds.hr_range[0] <= ds.hr_range[1] <= 150:
        fail("must be [lo, hi] with 42 <= lo <= hi <= 150", "dataset", "hr_range")
    if ds.noise_sigma < 0:
        fail("must be >= 0", "dataset", "noise_sigma")
    ev = cfg.eval
    if ev.window_s <= 0 or ev.stride_s <= 0:
        fail("window and stride must be positive", "eval", "window_s")
    for key in ("band", "cr_range", "cb_range"):
        v = getattr(ev, key)
        if len(v) != 2 or not v[0] < v[1]:
            fail("must be [lo, hi] with lo < hi", "eval", key)
    if ev.workers < 1:
        fail("must be >= 1", "eval", "workers")


def parse_config(text: str) -> ExperimentConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError(f"TOML syntax error: {exc}", None, int(m.group(1)) if m else None) from None
    tables = {"dataset": DatasetConfig, "train": TrainConfig, "eval": EvalConfig}
    kwargs = {}
    for key, value in raw.items():
        if key in tables:
            if not isinstance(value, dict):
                raise ConfigError("expected a table", key, _locate(text, None, key))
            kwargs[key] = _fill(tables[key], value, text, key)
        elif key in ("seed", "out", "methods"):
            expected = {"seed": int, "out": str, "methods": list}[key]
            kwargs[key] = _check_type(key, value, expected, text, None, key)
        else:
            raise ConfigError("unknown key (allowed: seed, out, methods, [dataset], [train], [eval])",
                              key, _locate(text, None, key))
    cfg = ExperimentConfig(**kwargs)
    _validate(cfg, text)
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    return parse_config(text)
