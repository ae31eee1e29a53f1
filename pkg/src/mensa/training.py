"""Likelihoods over the P states and the minibatch Adam training loop."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Var
from .dataset import StateEncodedDataset
from .model import MIN_TIME, MensaModel, head, mixture_log_terms, trunk
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)

SINGLE = "single"
COMPETING = "competing"
MULTI = "multi"
MODES = (SINGLE, COMPETING, MULTI)


class NumericalError(ArithmeticError):
    """Non-finite loss or gradient."""


class TrajectorySet:
    """Ordered event pairs ``(a, b)``: when both are observed, ``a`` happened first.

    Indices refer to states, so events are numbered 1..K (0 is event-free).
    """

    def __init__(self, pairs: Iterable[Sequence[int]] = (), n_states: int | None = None):
        self.pairs: list[tuple[int, int]] = []
        for a, b in pairs:
            a, b = int(a), int(b)
            if a == b:
                raise ValueError(f"trajectory ({a}, {b}) pairs an event with itself")
            if a < 1 or b < 1 or (n_states is not None and (a >= n_states or b >= n_states)):
                raise ValueError(f"trajectory ({a}, {b}) references an invalid event state")
            if (b, a) in self.pairs:
                raise ValueError(f"trajectory ({a}, {b}) contradicts ({b}, {a})")
            if (a, b) not in self.pairs:
                self.pairs.append((a, b))

    @classmethod
    def from_names(cls, pairs: Iterable[Sequence[str]], event_names: Sequence[str]) -> TrajectorySet:
        index = {name: k + 1 for k, name in enumerate(event_names)}
        try:
            resolved = [(index[a], index[b]) for a, b in pairs]
        except KeyError as exc:
            raise ValueError(f"unknown event {exc.args[0]!r} in trajectories") from None
        return cls(resolved, len(event_names) + 1)

    def __iter__(self):
        return iter(self.pairs)

    def __len__(self):
        return len(self.pairs)

    def __bool__(self):
        return bool(self.pairs)


@dataclass
class TrainConfig:
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 1e-2
    epochs: int = 100
    patience: int = 10
    mode: str = COMPETING
    trajectories: list[tuple[int, int]] = field(default_factory=list)
    trajectory_log: bool = False
    seed: int = 0
    log_path: str | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.batch_size < 1 or self.patience < 1 or self.epochs < 0:
            raise ValueError("batch_size and patience must be >= 1, epochs >= 0")
        if self.trajectories and self.mode != MULTI:
            raise ValueError("trajectories are only used in multi mode")


# ---------------------------------------------------------------------------
# graph-level likelihood pieces


@dataclass
class _Forward:
    graph: Graph
    pv: dict[str, Var]
    heads: list
    n: int


def _forward(model: MensaModel, X: np.ndarray, rng=None, leaves: bool = True) -> _Forward:
    g = Graph()
    if leaves:
        pv = model.params.bind(g)
    else:
        pv = {name: g.const(v) for name, v in model.params.items()}
    H = trunk(model, pv, g.const(X), rng)
    heads = [head(model, pv, H, p) for p in range(model.n_states)]
    return _Forward(g, pv, heads, len(X))


def _state_times(batch: StateEncodedDataset, per_state: bool) -> np.ndarray:
    if per_state:
        T = batch.T
    else:
        # competing risks: every state is evaluated at the first transition time
        T = np.repeat(batch.T[:, :1], batch.n_states, axis=1)
    return np.maximum(T, MIN_TIME)


def _nll_var(fw: _Forward, batch: StateEncodedDataset, per_state: bool) -> Var:
    T = _state_times(batch, per_state)
    total = None
    for p, hv in enumerate(fw.heads):
        log_f, log_s = mixture_log_terms(hv, np.log(T[:, p]))
        delta = batch.E[:, p]
        contrib = log_f * delta + log_s * (1.0 - delta)
        bad = ~np.isfinite(contrib.value)
        if bad.any():
            row = int(np.nonzero(bad)[0][0])
            raise NumericalError(f"non-finite log-likelihood at row {row}, state {p}")
        s = ad.sum(contrib)
        total = s if total is None else total + s
    return -total


def _trajectory_var(fw: _Forward, batch: StateEncodedDataset, trajectories, use_log: bool) -> Var | None:
    if not trajectories:
        return None
    T = np.maximum(batch.T, MIN_TIME)
    total = None
    for a, b in trajectories:
        both = batch.E[:, a] * batch.E[:, b]
        _, log_s = mixture_log_terms(fw.heads[b], np.log(T[:, a]), want_pdf=False)
        term = log_s if use_log else ad.exp(log_s)
        s = ad.sum(term * both)
        total = s if total is None else total + s
    return total


def _objective(fw: _Forward, batch, mode: str, trajectories, use_log: bool) -> Var:
    per_state = mode == MULTI
    nll = _nll_var(fw, batch, per_state)
    traj = _trajectory_var(fw, batch, trajectories if per_state else (), use_log)
    loss = nll if traj is None else nll - traj
    return loss * (1.0 / batch.n)


# ---------------------------------------------------------------------------
# public likelihood API (floats)


def nll_competing(model: MensaModel, batch: StateEncodedDataset) -> float:
    """Negative log-likelihood with every state evaluated at the first transition time."""
    fw = _forward(model, batch.X, leaves=False)
    return ad.scalar_value(_nll_var(fw, batch, per_state=False))


def nll_multi(model: MensaModel, batch: StateEncodedDataset) -> float:
    """Negative log-likelihood with each state evaluated at its own observed time."""
    fw = _forward(model, batch.X, leaves=False)
    return ad.scalar_value(_nll_var(fw, batch, per_state=True))


def trajectory_likelihood(model: MensaModel, batch: StateEncodedDataset, trajectories, use_log: bool = False) -> float:
    """Sum over rows and pairs (a, b) of S_b(t_a) for rows where both events were observed."""
    fw = _forward(model, batch.X, leaves=False)
    v = _trajectory_var(fw, batch, list(trajectories), use_log)
    return 0.0 if v is None else ad.scalar_value(v)


def total_loss(model: MensaModel, batch: StateEncodedDataset, trajectories=(), mode: str = MULTI, use_log: bool = False) -> float:
    """(nll - trajectory) / N, the quantity minimized during training."""
    fw = _forward(model, batch.X, leaves=False)
    return ad.scalar_value(_objective(fw, batch, mode, list(trajectories), use_log))


def loss_and_grad(model: MensaModel, batch: StateEncodedDataset, trajectories=(), mode: str = MULTI, rng=None, use_log: bool = False, weight: float = 1.0):
    fw = _forward(model, batch.X, rng=rng)
    loss = _objective(fw, batch, mode, list(trajectories), use_log)
    if weight != 1.0:
        loss = loss * weight
    return ad.scalar_value(loss), ad.backward(fw.graph, loss)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    valid_loss: float
    wall_time: float


@dataclass
class TrainingLog:
    initial_valid_loss: float
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    @property
    def best_valid_loss(self) -> float:
        return min(r.valid_loss for r in self.records) if self.records else self.initial_valid_loss

    def write(self, path) -> None:
        with Path(path).open("w", encoding="utf-8") as fh:
            for r in self.records:
                fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")


def train(model: MensaModel, train_set: StateEncodedDataset, valid_set: StateEncodedDataset, config: TrainConfig) -> tuple[MensaModel, TrainingLog]:
    """Minibatch Adam with early stopping on the validation objective.

    Returns a copy of ``model`` holding the parameters of the best validation
    epoch, and the per-epoch log.
    """
    if train_set.n_states != model.n_states or valid_set.n_states != model.n_states:
        raise ValueError("dataset state count does not match the model")
    trajectories = list(config.trajectories)
    TrajectorySet(trajectories, model.n_states)
    model = model.copy()
    shuffle_seq, dropout_seq = np.random.SeedSequence(config.seed).spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    dropout_rng = np.random.default_rng(dropout_seq)
    state = AdamState.for_params(model.params, lr=config.lr, weight_decay=config.weight_decay)

    def valid_loss():
        return total_loss(model, valid_set, trajectories, config.mode, config.trajectory_log)

    history = TrainingLog(initial_valid_loss=valid_loss())
    best_params = model.params.copy()
    best = np.inf
    wait = 0
    n = train_set.n
    bs = config.batch_size
    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        order = shuffle_rng.permutation(n)
        epoch_loss = 0.0
        for b, lo in enumerate(range(0, n, bs)):
            idx = order[lo : lo + bs]
            batch = train_set.subset(idx)
            try:
                loss, grads = loss_and_grad(
                    model, batch, trajectories, config.mode, dropout_rng, config.trajectory_log, weight=len(idx) / bs
                )
            except NumericalError as exc:
                raise NumericalError(f"epoch {epoch}, batch {b}: {exc}; parameter norms {model.params.norms()}") from exc
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise NumericalError(f"epoch {epoch}, batch {b}: non-finite loss {loss}; parameter norms {model.params.norms()}")
            adam_step(model.params, grads, state)
            epoch_loss += loss * bs
        v = valid_loss()
        if not np.isfinite(v):
            raise NumericalError(f"epoch {epoch}: non-finite validation loss; parameter norms {model.params.norms()}")
        history.records.append(EpochRecord(epoch, epoch_loss / n, v, time.perf_counter() - start))
        log.debug("epoch %d train %.6f valid %.6f", epoch, epoch_loss / n, v)
        if v < best:
            best, wait = v, 0
            best_params = model.params.copy()
            history.best_epoch = epoch
        else:
            wait += 1
            if wait >= config.patience:
                history.stopped_early = True
                break
    model.params = best_params
    if config.log_path:
        history.write(config.log_path)
    log.info("trained %d epochs, best epoch %d (valid %.6f)", len(history.records), history.best_epoch, best)
    return model, history
