"""Shared-trunk network with one mixture-of-Weibull head per state.

For state ``p`` and mixture component ``k``::

    H          = relu6(W x + b)                     shared by every state
    log scale  = scale_bias[k] + selu(H . scale_proj[k])
    log shape  = shape_bias[k] + selu(H . shape_proj[k])
    gate       = softmax(H . gate_proj)[k]

    log f(t) = logsumexp_k(log gate + log f_k(t))
    log S(t) = logsumexp_k(log gate - (t / scale_k) ** shape_k)

State 0 is the event-free state; states 1..K are the events.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import DomainError, Graph, Var
from .optim import ParamStore

EXP_CLAMP = 700.0
MIN_TIME = 1e-8


@dataclass(frozen=True)
class MensaConfig:
    n_features: int
    n_states: int = 2
    n_mixtures: int = 1
    hidden: int = 32
    dropout: float = 0.25
    free_shape: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_states < 2:
            raise ValueError("need at least two states (event-free + one event)")
        if self.n_mixtures < 1 or self.hidden < 1 or self.n_features < 0:
            raise ValueError("n_mixtures and hidden must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")


def param_names(config: MensaConfig) -> list[str]:
    names = ["shared.weight", "shared.bias"]
    for p in range(config.n_states):
        names += [f"state{p}.scale_bias", f"state{p}.shape_bias", f"state{p}.scale_proj"]
        if config.free_shape:
            names.append(f"state{p}.shape_proj")
        names.append(f"state{p}.gate_proj")
    return names


class MensaModel:
    def __init__(self, config: MensaConfig, params: ParamStore):
        self.config = config
        self.params = params
        expected = param_names(config)
        if params.names() != expected:
            raise ValueError(f"parameter names {params.names()} do not match config {expected}")

    @property
    def n_states(self) -> int:
        return self.config.n_states

    def copy(self) -> MensaModel:
        return MensaModel(self.config, self.params.copy())

    # -- serialization ------------------------------------------------------

    def to_text(self, metadata: dict | None = None) -> str:
        """JSON document; parameter values use 17 significant digits."""
        head = json.dumps({"config": asdict(self.config), "metadata": metadata or {}}, indent=1, sort_keys=True)
        chunks = []
        for name, value in self.params.items():
            vals = ", ".join(f"{v:.17g}" for v in value.ravel())
            chunks.append(f'  {{"name": {json.dumps(name)}, "shape": {json.dumps(list(value.shape))}, "values": [{vals}]}}')
        body = ",\n".join(chunks)
        return head[:-1].rstrip() + ',\n "parameters": [\n' + body + "\n ]\n}\n"

    def save(self, path, metadata: dict | None = None) -> None:
        Path(path).write_text(self.to_text(metadata), encoding="utf-8")

    @classmethod
    def from_text(cls, text: str) -> tuple[MensaModel, dict]:
        doc = json.loads(text)
        config = MensaConfig(**doc["config"])
        params = ParamStore()
        for entry in doc["parameters"]:
            params.add(entry["name"], np.array(entry["values"], dtype=np.float64).reshape(entry["shape"]))
        return cls(config, params), doc.get("metadata", {})

    @classmethod
    def load(cls, path) -> tuple[MensaModel, dict]:
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def init_model(config: MensaConfig) -> MensaModel:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights; log scale/shape biases start at 0."""
    rng = np.random.default_rng(config.seed)
    d, h, k = config.n_features, config.hidden, config.n_mixtures

    def fan_in(shape, fan):
        bound = 1.0 / math.sqrt(max(fan, 1))
        return rng.uniform(-bound, bound, size=shape)

    params = ParamStore()
    params.add("shared.weight", fan_in((h, d), d))
    params.add("shared.bias", fan_in((h,), d))
    for p in range(config.n_states):
        params.add(f"state{p}.scale_bias", np.zeros(k))
        params.add(f"state{p}.shape_bias", np.zeros(k))
        params.add(f"state{p}.scale_proj", fan_in((k, h), h))
        if config.free_shape:
            params.add(f"state{p}.shape_proj", fan_in((k, h), h))
        params.add(f"state{p}.gate_proj", fan_in((k, h), h))
    return MensaModel(config, params)


# ---------------------------------------------------------------------------
# graph construction


def trunk(model: MensaModel, pv: dict[str, Var], X: Var, rng=None) -> Var:
    """Shared representation; ``rng`` enables dropout (training only)."""
    H = ad.relu6(ad.affine(X, pv["shared.weight"], pv["shared.bias"]))
    return ad.dropout(H, model.config.dropout, rng)


@dataclass
class HeadVars:
    log_scale: Var  # (n, mixtures)
    log_shape: Var
    log_gate: Var


def head(model: MensaModel, pv: dict[str, Var], H: Var, state: int) -> HeadVars:
    pre = f"state{state}."
    log_scale = pv[pre + "scale_bias"] + ad.selu(ad.affine(H, pv[pre + "scale_proj"]))
    if model.config.free_shape:
        log_shape = pv[pre + "shape_bias"] + ad.selu(ad.affine(H, pv[pre + "shape_proj"]))
    else:
        n = H.shape[0]
        log_shape = pv[pre + "shape_bias"] + np.zeros((n, model.config.n_mixtures))
    log_gate = ad.log_softmax(ad.affine(H, pv[pre + "gate_proj"]))
    return HeadVars(log_scale, log_shape, log_gate)


def mixture_log_terms(hv: HeadVars, log_t: np.ndarray, want_pdf: bool = True) -> tuple[Var | None, Var]:
    """Mixture log-density and log-survival at ``log_t``.

    ``log_t`` has shape (n,) for one time per row or (n, G) for a grid per row.
    """
    log_scale, log_shape, log_gate = hv.log_scale, hv.log_shape, hv.log_gate
    n, k = log_scale.shape
    if log_t.ndim == 1:
        lt = log_t[:, None]
    else:
        lt = log_t[:, :, None]
        log_scale = ad.reshape(log_scale, (n, 1, k))
        log_shape = ad.reshape(log_shape, (n, 1, k))
        log_gate = ad.reshape(log_gate, (n, 1, k))
    u = lt - log_scale
    shape = ad.exp(log_shape)
    z = ad.exp(ad.minimum(shape * u, EXP_CLAMP))
    log_s = ad.logsumexp(log_gate - z)
    if not want_pdf:
        return None, log_s
    log_f_comp = log_shape - log_scale + (shape - 1.0) * u - z
    log_f = ad.logsumexp(log_gate + log_f_comp)
    return log_f, log_s


# ---------------------------------------------------------------------------
# numpy-facing prediction API


def _check_x(model: MensaModel, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != model.config.n_features:
        raise ValueError(f"expected {model.config.n_features} features, got {X.shape[1]}")
    if not np.all(np.isfinite(X)):
        raise ValueError("features must be finite")
    return X


def _const_graph(model: MensaModel):
    g = Graph()
    pv = {name: g.const(value) for name, value in model.params.items()}
    return g, pv


def head_params(model: MensaModel, X) -> list[dict[str, np.ndarray]]:
    """Per state: ``scale``, ``shape`` and ``gate`` arrays of shape (n, mixtures)."""
    X = _check_x(model, X)
    g, pv = _const_graph(model)
    H = trunk(model, pv, g.const(X))
    out = []
    for p in range(model.n_states):
        hv = head(model, pv, H, p)
        out.append(
            {
                "scale": np.exp(hv.log_scale.value),
                "shape": np.exp(hv.log_shape.value),
                "gate": np.exp(hv.log_gate.value),
            }
        )
    return out


def _broadcast_times(X: np.ndarray, t) -> np.ndarray:
    """Scalar, one time per row, (n, G) grid per row, or a grid for a single row."""
    t = np.asarray(t, dtype=np.float64)
    n = len(X)
    if t.ndim == 0:
        return np.full(n, float(t))
    if t.ndim == 1 and len(t) == n:
        return t
    if t.ndim == 1 and n == 1:
        return t[None, :]
    if t.ndim == 2 and len(t) == n:
        return t
    raise ValueError(f"times of shape {t.shape} do not match {n} rows")


def _log_terms(model, X, t, state, want_pdf):
    X = _check_x(model, X)
    t = _broadcast_times(X, t)
    if np.any(t < 0):
        raise DomainError("time", -1, "negative time")
    if not 0 <= state < model.n_states:
        raise ValueError(f"state {state} out of range")
    g, pv = _const_graph(model)
    H = trunk(model, pv, g.const(X))
    hv = head(model, pv, H, state)
    with np.errstate(divide="ignore"):
        log_t = np.log(t)
    log_f, log_s = mixture_log_terms(hv, log_t, want_pdf)
    return t, log_f, log_s


def _single_row_grid(X, t, out: np.ndarray) -> np.ndarray:
    # a single row with a vector of times comes back as a flat curve
    if np.ndim(X) == 1 and np.ndim(t) == 1 and out.ndim == 2:
        return out[0]
    return out


def log_surv(model: MensaModel, X, t, state: int) -> np.ndarray:
    """log S_state(t | x); exactly 0 at t = 0."""
    tt, _, log_s = _log_terms(model, X, t, state, want_pdf=False)
    return _single_row_grid(X, t, np.where(tt == 0.0, 0.0, log_s.value))


def log_pdf(model: MensaModel, X, t, state: int) -> np.ndarray:
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr <= 0):
        raise DomainError("log_pdf", -1, "time must be > 0")
    _, log_f, _ = _log_terms(model, X, t, state, want_pdf=True)
    return _single_row_grid(X, t, log_f.value)


def log_hazard(model: MensaModel, X, t, state: int) -> np.ndarray:
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr <= 0):
        raise DomainError("log_hazard", -1, "time must be > 0")
    _, log_f, log_s = _log_terms(model, X, t, state, want_pdf=True)
    return _single_row_grid(X, t, log_f.value - log_s.value)


@dataclass
class IsdMatrix:
    """Survival curves on a shared grid; ``surv`` has shape (n, states, grid)."""

    grid: np.ndarray
    surv: np.ndarray

    def state(self, p: int) -> np.ndarray:
        return self.surv[:, p, :]


def _check_grid(grid) -> np.ndarray:
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 1 or len(grid) < 2 or grid[0] != 0.0 or np.any(np.diff(grid) <= 0):
        raise ValueError("grid must start at 0 and be strictly increasing with >= 2 points")
    return grid


def predict_isd(model: MensaModel, X, grid) -> IsdMatrix:
    X = _check_x(model, X)
    grid = _check_grid(grid)
    n = len(X)
    tt = np.broadcast_to(grid[1:], (n, len(grid) - 1))
    surv = np.ones((n, model.n_states, len(grid)))
    for p in range(model.n_states):
        surv[:, p, 1:] = np.exp(log_surv(model, X, tt, p))
    return IsdMatrix(grid, np.clip(surv, 0.0, 1.0))


def median_from_curve(grid: np.ndarray, surv: np.ndarray) -> tuple[float, bool]:
    """First crossing of S = 0.5, linearly interpolated.

    Returns ``(time, right_censored)``; a curve that stays above 0.5 gives the
    last grid time and ``True``.
    """
    below = np.nonzero(surv <= 0.5)[0]
    if below.size == 0:
        return float(grid[-1]), True
    j = int(below[0])
    if j == 0:
        return float(grid[0]), False
    s0, s1 = surv[j - 1], surv[j]
    t0, t1 = grid[j - 1], grid[j]
    if s0 == s1:
        return float(t1), False
    return float(t0 + (s0 - 0.5) * (t1 - t0) / (s0 - s1)), False


def predict_time(model: MensaModel, X, state: int, grid) -> tuple[np.ndarray, np.ndarray]:
    """Median survival time per row and a flag for curves that never reach 0.5."""
    isd = predict_isd(model, X, grid)
    curves = isd.state(state)
    times = np.empty(len(curves))
    flags = np.zeros(len(curves), dtype=bool)
    for i, s in enumerate(curves):
        times[i], flags[i] = median_from_curve(isd.grid, s)
    return times, flags
