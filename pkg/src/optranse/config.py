"""Key-value run configuration.

A config file holds one ``key = value`` pair per line; ``#`` starts a
comment. Command-line ``--set key=value`` overrides are applied afterwards
with the same parser, so both sources accept identical syntax.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .kg import ColumnOrder, DataError
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _norm(text):
    up = text.strip().upper()
    if up not in ("L1", "L2"):
        raise ValueError("norm must be L1 or L2")
    return up


def _m_mode(text):
    low = text.strip().lower()
    if low not in ("derived", "learned"):
        raise ValueError("m_mode must be derived or learned")
    return low


# config key -> (TrainConfig field, parser)
TRAIN_KEYS = {
    "dim": ("dim", int),
    "lr": ("lr", float),
    "margin": ("margin", float),
    "lambda": ("lam", float),
    "epochs": ("epochs", int),
    "norm": ("norm", _norm),
    "seed": ("seed", int),
    "max_steps": ("max_steps", int),
    "warm_start_epochs": ("warm_start_epochs", int),
    "m_mode": ("m_mode", _m_mode),
    "batch_size": ("batch_size", int),
    "identity_projections": ("identity_projections", _bool),
    "constraint_weight": ("constraint_weight", float),
    "negatives": ("negatives", int),
    "cache_refresh": ("cache_refresh", str),
    "reliability_floor": ("reliability_floor", float),
    "degree_cap": ("degree_cap", int),
    "parallel_workers": ("parallel_workers", int),
}
MARGIN_STEP_PREFIX = "margin_step"

RUN_KEYS = {
    "data_dir": str,
    "work_dir": str,
    "column_order": lambda s: ColumnOrder(s.strip().upper()).value,
    "eval_splits": lambda s: [x.strip() for x in s.split(",") if x.strip()],
    "split": str,
    "k": int,
    "checkpoint_every": int,
    "workers": int,
    "verbosity": int,
    "raw_only": _bool,
}


@dataclass
class RunConfig:
    """Everything a subcommand needs; see :func:`parse_pairs` for the keys."""

    data_dir: str | None = None
    work_dir: str | None = None
    column_order: str = "HRT"
    eval_splits: list = field(default_factory=lambda: ["valid", "test"])
    split: str = "test"
    k: int = 10
    checkpoint_every: int = 0
    workers: int = 1
    verbosity: int = 1
    raw_only: bool = False
    train: TrainConfig = field(default_factory=TrainConfig)

    @property
    def work(self) -> Path:
        if self.work_dir is None:
            raise ConfigError("work_dir is not set (use --work or work_dir = ...)")
        return Path(self.work_dir)

    @property
    def data(self) -> Path:
        if self.data_dir is None:
            raise ConfigError("data_dir is not set (use --data or data_dir = ...)")
        path = Path(self.data_dir)
        if not path.is_dir():
            raise DataError(f"data directory {path} does not exist")
        return path

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "train"}
        d["train"] = self.train.to_dict()
        return d


def parse_pairs(lines, source="<config>") -> list[tuple[str, str]]:
    pairs = []
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, value = line.split("=", 1)
        pairs.append((key.strip(), value.strip()))
    return pairs


def read_config_file(path) -> list[tuple[str, str]]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    with open(path, encoding="utf-8") as fh:
        return parse_pairs(fh, str(path))


def build_run_config(pairs, base: RunConfig | None = None) -> RunConfig:
    """Apply ``(key, value)`` pairs in order; later pairs win."""
    base = base or RunConfig()
    run = {f.name: getattr(base, f.name) for f in fields(base) if f.name != "train"}
    train = base.train.to_dict()
    margins = dict(enumerate(train["step_margins"], 1))
    for key, value in pairs:
        try:
            if key in TRAIN_KEYS:
                name, conv = TRAIN_KEYS[key]
                train[name] = conv(value)
            elif key.startswith(MARGIN_STEP_PREFIX) and key[len(MARGIN_STEP_PREFIX):].isdigit():
                margins[int(key[len(MARGIN_STEP_PREFIX):])] = float(value)
            elif key in RUN_KEYS:
                run[key] = RUN_KEYS[key](value)
            else:
                raise ConfigError(f"unknown config key {key!r}")
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}") from None
    steps = sorted(margins)
    if steps != list(range(1, len(steps) + 1)):
        raise ConfigError("margin_step keys must be contiguous from margin_step1")
    train["step_margins"] = tuple(margins[s] for s in steps)
    try:
        tc = TrainConfig.from_dict(train)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return RunConfig(**run, train=tc)


def split_override(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise ConfigError(f"--set expects key=value, got {text!r}")
    key, value = text.split("=", 1)
    return key.strip(), value.strip()


def dump_config(run: RunConfig) -> str:
    """Render ``run`` back to config-file syntax (round-trips through :func:`build_run_config`)."""
    t = run.train
    lines = []
    for f in ("data_dir", "work_dir"):
        if getattr(run, f) is not None:
            lines.append(f"{f} = {getattr(run, f)}")
    lines += [
        f"column_order = {run.column_order}",
        f"eval_splits = {','.join(run.eval_splits)}",
        f"split = {run.split}",
        f"k = {run.k}",
        f"checkpoint_every = {run.checkpoint_every}",
        f"workers = {run.workers}",
        f"verbosity = {run.verbosity}",
        f"raw_only = {str(run.raw_only).lower()}",
    ]
    for key, (name, _) in TRAIN_KEYS.items():
        value = getattr(t, name)
        lines.append(f"{key} = {str(value).lower() if isinstance(value, bool) else repr(value) if isinstance(value, float) else value}")
    for i, g in enumerate(t.step_margins, 1):
        lines.append(f"{MARGIN_STEP_PREFIX}{i} = {g!r}")
    return "\n".join(lines) + "\n"
