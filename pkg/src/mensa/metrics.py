"""Survival evaluation metrics.

Discrimination (Harrell's, global and local concordance), IPCW Brier score,
margin MAE, D-calibration and the Survival-l1 distance to a known ground truth.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .simulation import inverse_survival, true_survival


class MetricError(ValueError):
    pass


@dataclass
class StepCurve:
    """Right-continuous step function starting at 1 (a Kaplan-Meier curve).

    ``values[j]`` holds on ``[times[j], times[j + 1])``.
    """

    times: np.ndarray
    values: np.ndarray

    def __call__(self, t):
        t = np.asarray(t, dtype=np.float64)
        idx = np.searchsorted(self.times, t, side="right")
        padded = np.concatenate([[1.0], self.values])
        return padded[idx]

    def integral(self, a: float, b: float) -> float:
        """Area under the curve on ``[a, b]``."""
        if b <= a:
            return 0.0
        knots = np.concatenate([[a], self.times[(self.times > a) & (self.times < b)], [b]])
        return float(np.sum(self(knots[:-1]) * np.diff(knots)))


def km_fit(times, events) -> StepCurve:
    """Product-limit estimate; the curve only drops at observed event times."""
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events, dtype=np.float64)
    if times.size < 1:
        raise MetricError("need at least one observation")
    uniq = np.unique(times[events == 1])
    if uniq.size == 0:
        return StepCurve(np.array([]), np.array([]))
    at_risk = np.array([(times >= u).sum() for u in uniq], dtype=np.float64)
    deaths = np.array([((times == u) & (events == 1)).sum() for u in uniq], dtype=np.float64)
    return StepCurve(uniq, np.cumprod(1.0 - deaths / at_risk))


# ---------------------------------------------------------------------------
# concordance


def _concordance_counts(risks, times, events) -> tuple[float, float]:
    risks = np.asarray(risks, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events, dtype=np.float64)
    if not (risks.shape == times.shape == events.shape):
        raise MetricError("risks, times and events must have equal lengths")
    concordant = 0.0
    comparable = 0.0
    for i in np.nonzero(events == 1)[0]:
        later = times > times[i]
        comparable += later.sum()
        concordant += (later & (risks[i] > risks)).sum()
    return float(concordant), float(comparable)


def harrell_ci(risks, times, events) -> float:
    """Share of comparable pairs (i has the earlier event) where i has the higher risk.

    Tied risks count as discordant.
    """
    c, n = _concordance_counts(risks, times, events)
    if n == 0:
        raise MetricError("no comparable pairs")
    return c / n


def global_ci(risks, times, events) -> float:
    """Pooled concordance over events; arguments are (n, K) arrays or per-event lists."""
    c_tot = n_tot = 0.0
    for r, t, e in zip(_columns(risks), _columns(times), _columns(events)):
        c, n = _concordance_counts(r, t, e)
        c_tot += c
        n_tot += n
    if n_tot == 0:
        raise MetricError("no comparable pairs")
    return c_tot / n_tot


def local_ci(risks, times, events) -> float:
    """Concordance of event pairs within each instance; arguments are (n, K) arrays."""
    risks = np.asarray(risks, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events, dtype=np.float64)
    if risks.ndim != 2 or risks.shape[1] < 2:
        raise MetricError("local concordance needs at least two events per instance")
    if not (risks.shape == times.shape == events.shape):
        raise MetricError("risks, times and events must have equal shapes")
    # earlier[i, a, b]: event a observed before time of event b for instance i
    earlier = (times[:, :, None] < times[:, None, :]) & (events[:, :, None] == 1)
    higher = risks[:, :, None] > risks[:, None, :]
    n = earlier.sum()
    if n == 0:
        raise MetricError("no comparable pairs")
    return float((earlier & higher).sum() / n)


def _columns(a):
    if isinstance(a, np.ndarray) and a.ndim == 2:
        return [a[:, k] for k in range(a.shape[1])]
    return list(a)


# ---------------------------------------------------------------------------
# Brier score


def default_ibs_grid(times, n_points: int = 32) -> np.ndarray:
    """``n_points`` equally spaced interior quantiles of the observed times."""
    q = np.linspace(0.0, 1.0, n_points + 2)[1:-1]
    return np.unique(np.quantile(np.asarray(times, dtype=np.float64), q))


def brier_scores(surv_at_grid, times, events, grid, censor_km: StepCurve | None = None) -> np.ndarray:
    """IPCW Brier score at each grid time.

    ``surv_at_grid`` is (n, len(grid)): predicted S(grid[j] | x_i). Terms whose
    censoring weight G is zero are dropped with a warning.
    """
    S = np.clip(np.asarray(surv_at_grid, dtype=np.float64), 0.0, 1.0)
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events, dtype=np.float64)
    grid = np.asarray(grid, dtype=np.float64)
    if S.shape != (len(times), len(grid)):
        raise MetricError(f"expected predictions of shape {(len(times), len(grid))}, got {S.shape}")
    G = censor_km if censor_km is not None else km_fit(times, 1.0 - events)
    g_obs = G(times)
    g_grid = G(grid)
    n = len(times)
    out = np.empty(len(grid))
    dropped = 0
    for j, t in enumerate(grid):
        died = (times <= t) & (events == 1)
        alive = times > t
        total = 0.0
        if died.any():
            ok = died & (g_obs > 0)
            dropped += int((died & (g_obs <= 0)).sum())
            total += np.sum(S[ok, j] ** 2 / g_obs[ok])
        if alive.any():
            if g_grid[j] > 0:
                total += np.sum((1.0 - S[alive, j]) ** 2) / g_grid[j]
            else:
                dropped += int(alive.sum())
        out[j] = total / n
    if dropped:
        warnings.warn(f"dropped {dropped} Brier terms with zero censoring weight", stacklevel=2)
    return out


def ibs(surv_at_grid, times, events, grid) -> float:
    """Trapezoidal integral of the Brier score over ``grid`` divided by its span."""
    grid = np.asarray(grid, dtype=np.float64)
    bs = brier_scores(surv_at_grid, times, events, grid)
    if len(grid) == 1 or grid[-1] == grid[0]:
        return float(bs.mean())
    return float(np.trapezoid(bs, grid) / (grid[-1] - grid[0]))


# ---------------------------------------------------------------------------
# margin MAE


def margin_time(km: StepCurve, t: float, horizon: float | None = None) -> float:
    """Expected event time of a row censored at ``t`` under the KM curve.

    ``t + integral_t^horizon S_KM / S_KM(t)``; the horizon defaults to the
    last KM jump (or ``t`` if there is none). Zero remaining survival gives ``t``.
    """
    s_t = float(km(t))
    if s_t <= 0.0:
        return float(t)
    if horizon is None:
        horizon = float(km.times[-1]) if km.times.size else float(t)
    return float(t + km.integral(t, horizon) / s_t)


def margin_mae(pred_times, times, events, km: StepCurve | None = None, horizon: float | None = None) -> float:
    pred_times = np.asarray(pred_times, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events, dtype=np.float64)
    if km is None:
        km = km_fit(times, events)
    if horizon is None:
        horizon = float(times.max())
    target = times.copy()
    weight = np.ones_like(times)
    for i in np.nonzero(events == 0)[0]:
        target[i] = margin_time(km, times[i], max(horizon, times[i]))
        weight[i] = 1.0 - float(km(times[i]))
    if weight.sum() <= 0:
        raise MetricError("all margin weights are zero")
    return float(np.sum(weight * np.abs(target - pred_times)) / weight.sum())


# ---------------------------------------------------------------------------
# D-calibration


def d_calibration_histogram(surv_at_event, events, n_bins: int = 10) -> np.ndarray:
    """Mass per equal-width probability bin of S(t_i | x_i).

    An observed event adds 1 to its bin. A censored row with s = S(t_c) spreads
    its unit mass uniformly over [0, s]: the bin holding s gets
    (s - lower) / s and each bin fully below s gets width / s.
    """
    s = np.clip(np.asarray(surv_at_event, dtype=np.float64), 0.0, 1.0)
    events = np.asarray(events, dtype=np.float64)
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    width = 1.0 / n_bins
    hist = np.zeros(n_bins)
    for si, ei in zip(s, events):
        b = min(int(si * n_bins), n_bins - 1)
        if ei == 1 or si <= 0.0:
            hist[b] += 1.0
            continue
        hist[b] += (si - edges[b]) / si
        if b > 0:
            hist[:b] += width / si
    return hist


def chi2_uniform(hist) -> tuple[float, float]:
    hist = np.asarray(hist, dtype=np.float64)
    expected = hist.sum() / len(hist)
    statistic = float(np.sum((hist - expected) ** 2 / expected))
    return statistic, float(stats.chi2.sf(statistic, len(hist) - 1))


def d_calibration(surv_at_event, events, n_bins: int = 10) -> tuple[float, np.ndarray]:
    """Pearson chi-square test of uniformity; returns (p-value, histogram)."""
    if len(np.atleast_1d(surv_at_event)) < 20:
        raise MetricError("D-calibration needs at least 20 instances")
    hist = d_calibration_histogram(surv_at_event, events, n_bins)
    _, p = chi2_uniform(hist)
    return p, hist


# ---------------------------------------------------------------------------
# Survival-l1


L1_POINTS = 512
L1_QUANTILE = 0.01


def survival_l1(grid, pred_surv, truth, X, n_points: int = L1_POINTS) -> float:
    """Mean normalized area between true and predicted event survival curves.

    ``pred_surv`` (n, len(grid)) is linearly interpolated and held flat past
    the grid. Each instance is integrated over [0, T_i] with T_i the time where
    its true survival reaches 1%, using a trapezoid on ``n_points`` points
    (0 plus log-spaced points up to T_i), and divided by T_i.
    """
    grid = np.asarray(grid, dtype=np.float64)
    pred_surv = np.asarray(pred_surv, dtype=np.float64)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if pred_surv.shape != (len(X), len(grid)):
        raise MetricError(f"expected predictions of shape {(len(X), len(grid))}, got {pred_surv.shape}")
    horizon = inverse_survival(truth, X, L1_QUANTILE, "event")
    rel = np.concatenate([[0.0], np.logspace(-4.0, 0.0, n_points - 1)])
    total = 0.0
    for i in range(len(X)):
        tt = rel * horizon[i]
        s_true = true_survival(truth, X[i], tt, "event")
        s_hat = np.interp(tt, grid, pred_surv[i])
        total += np.trapezoid(np.abs(s_true - s_hat), tt) / horizon[i]
    return float(total / len(X))


# ---------------------------------------------------------------------------
# report


@dataclass
class EventMetrics:
    ci: float | None = None
    ibs: float | None = None
    mmae: float | None = None
    dcal_p: float | None = None
    dcal_pass: bool | None = None
    dcal_hist: list[float] = field(default_factory=list)
    survival_l1: float | None = None


@dataclass
class MetricReport:
    events: dict[str, EventMetrics] = field(default_factory=dict)
    global_ci: float | None = None
    local_ci: float | None = None
    dcal_pass_count: int = 0
    notes: list[str] = field(default_factory=list)

    def __post_init__(self):
        for name, m in self.events.items():
            for key in ("ci",):
                v = getattr(m, key)
                if v is not None and not 0.0 <= v <= 1.0:
                    raise MetricError(f"{name}: {key} outside [0, 1]")
            if m.ibs is not None and m.ibs < 0:
                raise MetricError(f"{name}: negative IBS")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def from_dict(cls, d: dict) -> MetricReport:
        d = dict(d)
        d["events"] = {k: EventMetrics(**v) for k, v in d["events"].items()}
        return cls(**d)
