"""Run configuration files (INI: flat ``key = value`` under section headers).

Example::

    [run]
    mode = multi
    seed = 7
    output_dir = runs/ordered

    [data]
    train = data.csv

    [model]
    hidden = 32
    mixtures = 3
    dropout = 0.25

    [train]
    batch_size = 32
    learning_rate = 1e-3
    weight_decay = 1e-2
    epochs = 100
    patience = 10

    [trajectories]
    pairs = illness > death

Relative paths are resolved against the directory holding the config file.
Omitted keys take the synthetic-data defaults (batch 32, 32 hidden units,
lr 1e-3, weight decay 1e-2, dropout 0.25, one mixture component).
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from .training import MODES


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    train_path: Path
    output_dir: Path
    valid_path: Path | None = None
    test_path: Path | None = None
    mode: str = "competing"
    seed: int = 0
    hidden: int = 32
    mixtures: int = 1
    dropout: float = 0.25
    free_shape: bool = True
    batch_size: int = 32
    learning_rate: float = 1e-3
    weight_decay: float = 1e-2
    epochs: int = 100
    patience: int = 10
    trajectory_log: bool = False
    split: tuple[float, float, float] = (0.7, 0.1, 0.2)
    trajectories: list[tuple[str, str]] = field(default_factory=list)

    def check_files(self) -> None:
        for p in (self.train_path, self.valid_path, self.test_path):
            if p is not None and not p.is_file():
                raise ConfigError(f"dataset file not found: {p}")


def _parse_pairs(text: str) -> list[tuple[str, str]]:
    pairs = []
    for chunk in text.replace("\n", ",").split(","):
        chunk = chunk.strip()
        if not chunk:
            continue
        if ">" not in chunk:
            raise ConfigError(f"trajectory {chunk!r} must look like 'earlier > later'")
        a, b = (s.strip() for s in chunk.split(">", 1))
        pairs.append((a, b))
    return pairs


def load_run_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        cp.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    base = path.parent

    def get(section, key, conv=str, default=None):
        if not cp.has_option(section, key) or cp.get(section, key).strip() == "":
            return default
        raw = cp.get(section, key).strip()
        try:
            if conv is bool:
                return cp.getboolean(section, key)
            return conv(raw)
        except ValueError:
            raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}") from None

    def resolve(p):
        if p is None:
            return None
        p = Path(p)
        return p if p.is_absolute() else (base / p).resolve()

    train = get("data", "train")
    if train is None:
        raise ConfigError("[data] train is required")
    out = get("run", "output_dir", default="run")
    mode = get("run", "mode", default="competing")
    if mode not in MODES:
        raise ConfigError(f"[run] mode must be one of {MODES}")
    split = get("data", "split", default="0.7, 0.1, 0.2")
    try:
        fracs = tuple(float(s) for s in split.split(","))
    except ValueError:
        raise ConfigError(f"[data] split: cannot parse {split!r}") from None
    if len(fracs) != 3:
        raise ConfigError("[data] split needs three fractions")
    cfg = RunConfig(
        train_path=resolve(train),
        output_dir=resolve(out),
        valid_path=resolve(get("data", "valid")),
        test_path=resolve(get("data", "test")),
        mode=mode,
        seed=get("run", "seed", int, 0),
        hidden=get("model", "hidden", int, 32),
        mixtures=get("model", "mixtures", int, 1),
        dropout=get("model", "dropout", float, 0.25),
        free_shape=get("model", "free_shape", bool, True),
        batch_size=get("train", "batch_size", int, 32),
        learning_rate=get("train", "learning_rate", float, 1e-3),
        weight_decay=get("train", "weight_decay", float, 1e-2),
        epochs=get("train", "epochs", int, 100),
        patience=get("train", "patience", int, 10),
        trajectory_log=get("train", "trajectory_log", bool, False),
        split=fracs,
        trajectories=_parse_pairs(get("trajectories", "pairs", default="")),
    )
    if cfg.trajectories and cfg.mode != "multi":
        raise ConfigError("trajectories require mode = multi")
    return cfg
