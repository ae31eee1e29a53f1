"""Multi-event survival data: CSV I/O, event-free state encoding, splits, preprocessing.

CSV layout::

    f_age,f_sex,time_nausea,event_nausea,time_fatigue,event_fatigue
    61.5,m,10,1,20,1

Feature columns carry an ``f_`` prefix, each event a ``time_`` / ``event_`` pair.
Missing feature cells are empty and become NaN in memory.
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

NUMERIC = "numeric"
CATEGORICAL = "categorical"


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Feature:
    name: str
    kind: str = NUMERIC
    levels: tuple[str, ...] = ()


@dataclass
class MultiEventDataset:
    """Features ``X`` (N x d), observed times ``T`` and indicators ``E`` (N x K).

    Categorical columns of ``X`` hold integer codes into ``schema[j].levels``.
    """

    X: np.ndarray
    T: np.ndarray
    E: np.ndarray
    schema: list[Feature]
    event_names: list[str]

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.T = np.asarray(self.T, dtype=np.float64)
        self.E = np.asarray(self.E, dtype=np.float64)
        if self.X.ndim != 2 or self.T.ndim != 2 or self.E.shape != self.T.shape:
            raise DatasetError("expected X (N x d), T and E (N x K)")
        if not (len(self.X) == len(self.T)):
            raise DatasetError("X and T row counts differ")
        if self.X.shape[1] != len(self.schema):
            raise DatasetError("feature count does not match schema")
        if self.T.shape[1] != len(self.event_names):
            raise DatasetError("event count does not match event names")
        if not np.all(np.isfinite(self.T)) or np.any(self.T < 0):
            raise DatasetError("times must be finite and non-negative")
        if not np.all((self.E == 0) | (self.E == 1)):
            raise DatasetError("event indicators must be 0 or 1")

    @property
    def n(self) -> int:
        return len(self.T)

    @property
    def n_events(self) -> int:
        return self.T.shape[1]

    @property
    def feature_names(self) -> list[str]:
        return [f.name for f in self.schema]

    def subset(self, idx) -> MultiEventDataset:
        idx = np.asarray(idx)
        return replace(self, X=self.X[idx], T=self.T[idx], E=self.E[idx])


@dataclass
class StateEncodedDataset:
    """Event-free state 0 followed by the K event states (P = K + 1 columns)."""

    X: np.ndarray
    T: np.ndarray
    E: np.ndarray
    event_names: list[str] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.T)

    @property
    def n_states(self) -> int:
        return self.T.shape[1]

    def subset(self, idx) -> StateEncodedDataset:
        idx = np.asarray(idx)
        return replace(self, X=self.X[idx], T=self.T[idx], E=self.E[idx])


# ---------------------------------------------------------------------------
# CSV


def _parse_header(header: Sequence[str]):
    features, events = [], []
    for col in header:
        if col.startswith("f_"):
            features.append(col[2:])
        elif col.startswith("time_"):
            events.append(col[5:])
        elif not col.startswith("event_"):
            raise DatasetError(f"unrecognized column {col!r}")
    for name in events:
        if f"event_{name}" not in header:
            raise DatasetError(f"missing column event_{name}")
    for col in header:
        if col.startswith("event_") and col[6:] not in events:
            raise DatasetError(f"missing column time_{col[6:]}")
    if not events:
        raise DatasetError("no time_<event> columns")
    return features, events


def _is_float(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def load_csv(path, schema: Mapping[str, str] | None = None) -> MultiEventDataset:
    """Read a dataset CSV.

    ``schema`` maps feature name to ``"numeric"`` or ``"categorical"``; features
    not listed are numeric if every non-empty cell parses as a float.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError(f"{path}: empty file") from None
        features, events = _parse_header(header)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DatasetError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            rows.append((lineno, dict(zip(header, row))))

    schema = dict(schema or {})
    unknown = set(schema) - set(features)
    if unknown:
        raise DatasetError(f"schema names unknown features {sorted(unknown)}")
    kinds = {}
    for name in features:
        kind = schema.get(name)
        if kind is None:
            cells = [r[f"f_{name}"] for _, r in rows if r[f"f_{name}"] != ""]
            kind = NUMERIC if all(_is_float(c) for c in cells) else CATEGORICAL
        if kind not in (NUMERIC, CATEGORICAL):
            raise DatasetError(f"feature {name!r}: unknown kind {kind!r}")
        kinds[name] = kind

    levels = {
        name: tuple(sorted({r[f"f_{name}"] for _, r in rows if r[f"f_{name}"] != ""}))
        for name in features
        if kinds[name] == CATEGORICAL
    }
    codes = {name: {lv: i for i, lv in enumerate(lvs)} for name, lvs in levels.items()}

    n = len(rows)
    X = np.full((n, len(features)), np.nan)
    T = np.empty((n, len(events)))
    E = np.empty((n, len(events)))
    for i, (lineno, r) in enumerate(rows):
        for j, name in enumerate(features):
            cell = r[f"f_{name}"]
            if cell == "":
                continue
            if kinds[name] == CATEGORICAL:
                X[i, j] = codes[name][cell]
            else:
                try:
                    X[i, j] = float(cell)
                except ValueError:
                    raise DatasetError(f"{path}:{lineno}: feature {name!r} is not numeric: {cell!r}") from None
        for k, name in enumerate(events):
            try:
                t = float(r[f"time_{name}"])
            except ValueError:
                raise DatasetError(f"{path}:{lineno}: bad time for {name!r}: {r[f'time_{name}']!r}") from None
            if not math.isfinite(t) or t < 0:
                raise DatasetError(f"{path}:{lineno}: time for {name!r} must be finite and >= 0")
            flag = r[f"event_{name}"].strip()
            if flag not in ("0", "1"):
                raise DatasetError(f"{path}:{lineno}: event_{name} must be 0 or 1, got {flag!r}")
            T[i, k] = t
            E[i, k] = float(flag)

    schema_out = [Feature(name, kinds[name], levels.get(name, ())) for name in features]
    return MultiEventDataset(X, T, E, schema_out, list(events))


def _fmt(value: float) -> str:
    return f"{float(value):.17g}"


def write_csv(ds: MultiEventDataset, path) -> None:
    """Write ``ds`` so that :func:`load_csv` reproduces every value bit-exactly."""
    header = [f"f_{f.name}" for f in ds.schema]
    for name in ds.event_names:
        header += [f"time_{name}", f"event_{name}"]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i in range(ds.n):
            row = []
            for j, feat in enumerate(ds.schema):
                v = ds.X[i, j]
                if np.isnan(v):
                    row.append("")
                elif feat.kind == CATEGORICAL:
                    row.append(feat.levels[int(v)])
                else:
                    row.append(_fmt(v))
            for k in range(ds.n_events):
                row += [_fmt(ds.T[i, k]), str(int(ds.E[i, k]))]
            writer.writerow(row)


# ---------------------------------------------------------------------------
# event-free state


def event_free_state(T: np.ndarray, E: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Time and indicator of state 0 for each row.

    No event observed: the row was seen event-free up to its last censoring
    time (indicator 1). Otherwise it left state 0 at its first event (indicator 0).
    """
    T = np.asarray(T, dtype=np.float64)
    E = np.asarray(E, dtype=np.float64)
    observed = E == 1
    any_event = observed.any(axis=1)
    first_event = np.where(observed, T, np.inf).min(axis=1)
    last_censor = np.where(~observed, T, -np.inf).max(axis=1)
    t0 = np.where(any_event, first_event, last_censor)
    e0 = np.where(any_event, 0.0, 1.0)
    return t0, e0


def encode_event_free(ds: MultiEventDataset) -> StateEncodedDataset:
    if ds.n_events < 1:
        raise DatasetError("need at least one event")
    t0, e0 = event_free_state(ds.T, ds.E)
    T = np.column_stack([t0, ds.T])
    E = np.column_stack([e0, ds.E])
    return StateEncodedDataset(ds.X.copy(), T, E, ["event_free", *ds.event_names])


# ---------------------------------------------------------------------------
# splitting


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.7
    valid: float = 0.1
    test: float = 0.2
    seed: int = 0

    def __post_init__(self):
        fr = (self.train, self.valid, self.test)
        if any(f <= 0 for f in fr):
            raise DatasetError(f"split fractions must all be positive, got {fr}")
        if abs(sum(fr) - 1.0) > 1e-9:
            raise DatasetError(f"split fractions must sum to 1, got {sum(fr)}")


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_indices(E: np.ndarray, spec: SplitSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stratify rows on their joint event-indicator pattern.

    Each stratum of size m contributes round(m * train) rows to train,
    round(m * valid) to valid and the remainder to test. Strata with fewer
    than 3 rows are assigned row by row at random with the split fractions.
    """
    E = np.asarray(E)
    n = len(E)
    if n < 10:
        raise DatasetError(f"need at least 10 rows to split, got {n}")
    rng = np.random.default_rng(spec.seed)
    keys = ["".join(str(int(v)) for v in row) for row in E]
    parts: tuple[list, list, list] = ([], [], [])
    for key in sorted(set(keys)):
        members = np.array([i for i, k in enumerate(keys) if k == key])
        members = members[rng.permutation(len(members))]
        m = len(members)
        if m < 3:
            warnings.warn(f"stratum {key} has {m} rows; assigning at random", stacklevel=2)
            picks = rng.choice(3, size=m, p=[spec.train, spec.valid, spec.test])
            for i, p in zip(members, picks):
                parts[p].append(i)
            continue
        n_train = min(_round_half_up(m * spec.train), m)
        n_valid = min(_round_half_up(m * spec.valid), m - n_train)
        parts[0].extend(members[:n_train])
        parts[1].extend(members[n_train : n_train + n_valid])
        parts[2].extend(members[n_train + n_valid :])
    return tuple(np.sort(np.array(p, dtype=int)) for p in parts)


def split_stratified(ds: MultiEventDataset, spec: SplitSpec | None = None):
    spec = spec or SplitSpec()
    idx = split_indices(ds.E, spec)
    return tuple(ds.subset(i) for i in idx)


# ---------------------------------------------------------------------------
# preprocessing


@dataclass
class PreprocessState:
    """Statistics fit on the training split.

    ``numeric`` maps a retained feature to ``(mean, std)``; ``categorical`` maps
    a feature to ``(mode, vocabulary)``. ``dropped`` lists constant features.
    """

    input_names: list[str]
    numeric: dict[str, tuple[float, float]] = field(default_factory=dict)
    categorical: dict[str, tuple[str, list[str]]] = field(default_factory=dict)
    dropped: list[str] = field(default_factory=list)

    @property
    def output_names(self) -> list[str]:
        names = []
        for name in self.input_names:
            if name in self.numeric:
                names.append(name)
            elif name in self.categorical:
                names += [f"{name}={lv}" for lv in self.categorical[name][1]]
        return names

    def to_dict(self) -> dict:
        return {
            "input_names": list(self.input_names),
            "numeric": {k: [float(m), float(s)] for k, (m, s) in self.numeric.items()},
            "categorical": {k: [mode, list(v)] for k, (mode, v) in self.categorical.items()},
            "dropped": list(self.dropped),
        }

    @classmethod
    def from_dict(cls, d: dict) -> PreprocessState:
        return cls(
            list(d["input_names"]),
            {k: (float(m), float(s)) for k, (m, s) in d["numeric"].items()},
            {k: (mode, list(v)) for k, (mode, v) in d["categorical"].items()},
            list(d["dropped"]),
        )


def preprocess_fit(train: MultiEventDataset) -> PreprocessState:
    state = PreprocessState(train.feature_names)
    for j, feat in enumerate(train.schema):
        col = train.X[:, j]
        seen = col[~np.isnan(col)]
        if seen.size == 0:
            raise DatasetError(f"feature {feat.name!r} has no observed values in the training split")
        if feat.kind == CATEGORICAL:
            labels = [feat.levels[int(c)] for c in seen]
            vocab = sorted(set(labels))
            counts = {lv: labels.count(lv) for lv in vocab}
            mode = min(vocab, key=lambda lv: (-counts[lv], lv))
            state.categorical[feat.name] = (mode, vocab)
            continue
        if seen.min() == seen.max():
            state.dropped.append(feat.name)
            continue
        # second pass corrects the rounding of the first mean
        m0 = seen.mean()
        mean = float(m0 + (seen - m0).mean())
        filled = np.where(np.isnan(col), mean, col)
        std = float(filled.std())
        if std == 0.0:
            state.dropped.append(feat.name)
            continue
        state.numeric[feat.name] = (mean, std)
    return state


def preprocess_apply(state: PreprocessState, ds: MultiEventDataset) -> MultiEventDataset:
    """Impute, z-score numeric and one-hot categorical features."""
    if ds.feature_names != state.input_names:
        missing = sorted(set(state.input_names) - set(ds.feature_names))
        extra = sorted(set(ds.feature_names) - set(state.input_names))
        raise DatasetError(f"feature mismatch: missing {missing}, unexpected {extra}")
    blocks = []
    for j, feat in enumerate(ds.schema):
        col = ds.X[:, j]
        if feat.name in state.numeric:
            mean, std = state.numeric[feat.name]
            filled = np.where(np.isnan(col), mean, col)
            blocks.append(((filled - mean) / std)[:, None])
        elif feat.name in state.categorical:
            mode, vocab = state.categorical[feat.name]
            if feat.kind != CATEGORICAL:
                labels = [None if np.isnan(c) else _fmt(c) for c in col]
            else:
                labels = [None if np.isnan(c) else feat.levels[int(c)] for c in col]
            onehot = np.zeros((len(col), len(vocab)))
            lookup = {lv: k for k, lv in enumerate(vocab)}
            for i, lab in enumerate(labels):
                k = lookup.get(mode if lab is None else lab)
                if k is not None:
                    onehot[i, k] = 1.0
            blocks.append(onehot)
    X = np.hstack(blocks) if blocks else np.zeros((ds.n, 0))
    schema = [Feature(name) for name in state.output_names]
    return MultiEventDataset(X, ds.T.copy(), ds.E.copy(), schema, list(ds.event_names))
