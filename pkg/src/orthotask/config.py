"""Run configuration files.

The format is line oriented::

    # comment
    [train]
    batch_size = 64
    lr = 1e-3

Every key has a default, unknown sections or keys are errors, and
:func:`serialize` writes the canonical form (all keys, fixed order).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

BASELINES = ("none", "dropout", "batchnorm", "cosreg", "cosreg+batchnorm")
ALPHA_PRESETS = {"cosreg": 10.0, "cosreg+batchnorm": 0.1}


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class RunConfig:
    # [model]
    filters: int = 20
    hidden: int = 128
    # [train]
    baseline: str = "none"
    optimizer: str = "adam"
    batch_size: int = 64
    lr: float = 1e-3
    epochs: int = 20
    seed: int = 0
    dropout_rate: float = 0.5
    # [regularizer]; alpha None means: take the baseline's preset
    alpha: float | None = None
    schedule: str = "constant"
    epsilon_norm: float = 1e-12
    differentiate_norm: bool = True
    target: str = "last"
    # [data]
    dataset_dir: str = ""
    mnist_dir: str = ""
    plan: str = "desk"
    plan_seed: int = 0
    data_seed: int = 0
    train_pairs: int = 4
    val_pairs: int = 4
    samples_per_pair: int = 250

    def __post_init__(self):
        if self.alpha is None:
            object.__setattr__(self, "alpha", ALPHA_PRESETS.get(self.baseline, 0.0))
        validate(self)

    @property
    def uses_cosreg(self) -> bool:
        return self.baseline.startswith("cosreg")

    @property
    def uses_batchnorm(self) -> bool:
        return self.baseline.endswith("batchnorm")

    @property
    def uses_dropout(self) -> bool:
        return self.baseline == "dropout"

    def replace(self, **changes) -> "RunConfig":
        """A copy with ``changes``; a new baseline without an alpha takes its preset."""
        if "baseline" in changes and "alpha" not in changes and changes["baseline"] != self.baseline:
            changes["alpha"] = None
        return dataclasses.replace(self, **changes)


SECTIONS: dict[str, tuple[str, ...]] = {
    "model": ("filters", "hidden"),
    "train": ("baseline", "optimizer", "batch_size", "lr", "epochs", "seed", "dropout_rate"),
    "regularizer": ("alpha", "schedule", "epsilon_norm", "differentiate_norm", "target"),
    "data": (
        "dataset_dir",
        "mnist_dir",
        "plan",
        "plan_seed",
        "data_seed",
        "train_pairs",
        "val_pairs",
        "samples_per_pair",
    ),
}
KEY_SECTION = {k: s for s, keys in SECTIONS.items() for k in keys}
_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _convert(key: str, text: str):
    kind = _TYPES[key]
    if kind == "int":
        return int(text)
    if kind in ("float", "float | None"):
        return float(text)
    if kind == "bool":
        return _bool(text)
    return text


def validate(cfg: RunConfig) -> None:
    def need(cond: bool, key: str, msg: str):
        if not cond:
            raise ConfigError(f"{key}: {msg}")

    for key in ("filters", "hidden", "batch_size", "train_pairs", "val_pairs", "samples_per_pair"):
        need(getattr(cfg, key) > 0, key, f"must be positive, got {getattr(cfg, key)}")
    need(cfg.batch_size >= 2, "batch_size", "must be at least 2")
    need(cfg.epochs >= 0, "epochs", f"must be >= 0, got {cfg.epochs}")
    need(cfg.lr > 0, "lr", f"must be positive, got {cfg.lr}")
    need(cfg.alpha >= 0, "alpha", f"must be >= 0, got {cfg.alpha}")
    need(0.0 <= cfg.dropout_rate < 1.0, "dropout_rate", f"must be in [0, 1), got {cfg.dropout_rate}")
    need(cfg.epsilon_norm > 0, "epsilon_norm", "must be positive")
    need(cfg.seed >= 0, "seed", "must be >= 0")
    need(cfg.baseline in BASELINES, "baseline", f"must be one of {', '.join(BASELINES)}")
    need(cfg.optimizer in ("adam", "sgd"), "optimizer", "must be adam or sgd")
    need(cfg.schedule in ("constant", "scaled"), "schedule", "must be constant or scaled")
    need(cfg.target in ("last", "encoder"), "target", "must be last or encoder")
    need(cfg.plan in ("desk", "full"), "plan", "must be desk or full")
    need(cfg.val_pairs <= cfg.train_pairs <= 5 or cfg.plan == "full", "train_pairs", "desk plan needs val_pairs <= train_pairs <= 5")


def parse_lines(text: str, source: str = "<config>", extra_sections: tuple[str, ...] = ()) -> dict[str, dict[str, tuple[str, int]]]:
    """Raw ``{section: {key: (value, line)}}`` with syntax checks only."""
    out: dict[str, dict[str, tuple[str, int]]] = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"{source}:{lineno}: malformed section header {raw.strip()!r}")
            section = line[1:-1].strip()
            if section not in SECTIONS and section not in extra_sections:
                raise ConfigError(f"{source}:{lineno}: unknown section [{section}]")
            out.setdefault(section, {})
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        if section is None:
            raise ConfigError(f"{source}:{lineno}: key {key!r} outside any section")
        if key in out[section]:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[section][key] = (value, lineno)
    return out


def from_sections(raw: dict, source: str = "<config>") -> RunConfig:
    values = {}
    for section, entries in raw.items():
        if section not in SECTIONS:
            continue
        for key, (text, lineno) in entries.items():
            if KEY_SECTION.get(key) != section:
                raise ConfigError(f"{source}:{lineno}: unknown key {key!r} in [{section}]")
            try:
                values[key] = _convert(key, text)
            except ValueError as exc:
                raise ConfigError(f"{source}:{lineno}: {key}: {exc}") from None
    try:
        return RunConfig(**values)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    return from_sections(parse_lines(text, source), source)


def parse_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text, str(path))


def serialize(cfg: RunConfig) -> str:
    lines = []
    for section, keys in SECTIONS.items():
        if lines:
            lines.append("")
        lines.append(f"[{section}]")
        for key in keys:
            lines.append(f"{key} = {_fmt(getattr(cfg, key))}".rstrip())
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class Grid:
    """A sweep: base config, grid axes in expansion order, and seeds."""

    base: RunConfig
    axes: dict[str, tuple] = field(default_factory=dict)
    seeds: tuple[int, ...] = (0,)
    explicit_alpha: bool = False

    def configs(self) -> list[RunConfig]:
        """Expanded configs; the first axis varies slowest."""
        combos = [{}]
        for key, values in self.axes.items():
            combos = [{**c, key: v} for c in combos for v in values]
        out = []
        for combo in combos:
            d = dataclasses.asdict(self.base)
            d.update(combo)
            if "baseline" in combo and "alpha" not in combo and not self.explicit_alpha:
                d["alpha"] = None
            out.append(RunConfig(**d))
        return out


GRID_KEYS = ("filters", "hidden", "batch_size", "lr", "baseline", "alpha", "epochs", "dropout_rate", "schedule")


def parse_grid(path) -> Grid:
    """A config file plus a ``[grid]`` section of comma-separated values.

    ``seeds`` in ``[grid]`` lists the seeds; the remaining keys are expanded
    in the order they appear.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read grid {path}: {exc}") from None
    raw = parse_lines(text, str(path), extra_sections=("grid",))
    base = from_sections(raw, str(path))
    axes: dict[str, tuple] = {}
    seeds: tuple[int, ...] = (base.seed,)
    for key, (value, lineno) in raw.get("grid", {}).items():
        items = [v.strip() for v in value.split(",") if v.strip()]
        if not items:
            raise ConfigError(f"{path}:{lineno}: grid key {key!r} has no values")
        try:
            if key == "seeds":
                seeds = tuple(int(v) for v in items)
                continue
            if key not in GRID_KEYS:
                raise ConfigError(f"{path}:{lineno}: {key!r} cannot be swept")
            axes[key] = tuple(_convert(key, v) for v in items)
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: {key}: {exc}") from None
    grid = Grid(base, axes, seeds, explicit_alpha="alpha" in raw.get("regularizer", {}))
    try:
        grid.configs()
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return grid
