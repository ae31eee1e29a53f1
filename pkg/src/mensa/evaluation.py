"""Score a trained model on an evaluation split."""

from __future__ import annotations

import logging

import numpy as np

from . import metrics
from .dataset import MultiEventDataset
from .metrics import EventMetrics, MetricError, MetricReport
from .model import MensaModel, log_surv, predict_isd, predict_time
from .simulation import GroundTruthDgp, inverse_survival

log = logging.getLogger(__name__)

MEDIAN_GRID_POINTS = 1001
L1_GRID_POINTS = 2001


def median_grid(times) -> np.ndarray:
    """Grid used to locate predicted medians: 0 to 1.5x the largest observed time."""
    return np.linspace(0.0, 1.5 * float(np.max(times)), MEDIAN_GRID_POINTS)


def predicted_medians(model: MensaModel, X, times) -> np.ndarray:
    """(n, K) predicted median times for the event states."""
    grid = median_grid(times)
    cols = [predict_time(model, X, k, grid)[0] for k in range(1, model.n_states)]
    return np.column_stack(cols)


def l1_grid(truth: GroundTruthDgp, X_raw) -> np.ndarray:
    horizon = inverse_survival(truth, X_raw, metrics.L1_QUANTILE, "event")
    return np.linspace(0.0, float(np.max(horizon)), L1_GRID_POINTS)


def model_survival_l1(model: MensaModel, X, truth: GroundTruthDgp, X_raw, state: int = 1) -> float:
    grid = l1_grid(truth, X_raw)
    surv = predict_isd(model, X, grid).state(state)
    return metrics.survival_l1(grid, surv, truth, X_raw)


def km_survival_l1(train_times, train_events, truth: GroundTruthDgp, X_raw) -> float:
    """Survival-l1 of the covariate-free Kaplan-Meier curve, for reference."""
    km = metrics.km_fit(train_times, train_events)
    grid = l1_grid(truth, X_raw)
    surv = np.broadcast_to(km(grid), (len(np.atleast_2d(X_raw)), len(grid)))
    return metrics.survival_l1(grid, surv, truth, X_raw)


def evaluate_model(
    model: MensaModel,
    ds: MultiEventDataset,
    truth: GroundTruthDgp | None = None,
    X_raw=None,
) -> MetricReport:
    """All applicable metrics for ``ds`` (already preprocessed).

    Survival-l1 needs ``truth`` and the raw feature matrix ``X_raw``.
    """
    if ds.n_events != model.n_states - 1:
        raise ValueError(f"dataset has {ds.n_events} events, model expects {model.n_states - 1}")
    report = MetricReport()
    medians = predicted_medians(model, ds.X, ds.T)
    risks = -medians
    for k, name in enumerate(ds.event_names):
        state = k + 1
        t, e = ds.T[:, k], ds.E[:, k]
        em = EventMetrics()
        try:
            em.ci = metrics.harrell_ci(risks[:, k], t, e)
        except MetricError as exc:
            report.notes.append(f"{name}: CI skipped ({exc})")
        grid = metrics.default_ibs_grid(t)
        surv_grid = np.exp(log_surv(model, ds.X, np.broadcast_to(grid, (ds.n, len(grid))), state))
        em.ibs = metrics.ibs(surv_grid, t, e, grid)
        try:
            em.mmae = metrics.margin_mae(medians[:, k], t, e)
        except MetricError as exc:
            report.notes.append(f"{name}: mMAE skipped ({exc})")
        if ds.n >= 20:
            s_event = np.exp(log_surv(model, ds.X, t, state))
            p, hist = metrics.d_calibration(s_event, e)
            em.dcal_p = p
            em.dcal_pass = bool(p > 0.05)
            em.dcal_hist = [float(h) for h in hist]
            report.dcal_pass_count += int(em.dcal_pass)
        else:
            report.notes.append(f"{name}: D-calibration skipped (fewer than 20 rows)")
        report.events[name] = em
    try:
        report.global_ci = metrics.global_ci(risks, ds.T, ds.E)
    except MetricError as exc:
        report.notes.append(f"global CI skipped ({exc})")
    if ds.n_events >= 2:
        try:
            report.local_ci = metrics.local_ci(risks, ds.T, ds.E)
        except MetricError as exc:
            report.notes.append(f"local CI skipped ({exc})")
    if truth is not None:
        if ds.n_events != 1:
            raise ValueError("ground truth is only defined for single-event data")
        if X_raw is None:
            raise ValueError("Survival-l1 needs the raw feature matrix")
        name = ds.event_names[0]
        report.events[name].survival_l1 = model_survival_l1(model, ds.X, truth, X_raw)
    return report
