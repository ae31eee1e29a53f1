import json
import math

import numpy as np
import pytest
from helpers import dataset, encoded_batch, ordered_pair_dataset, random_model, weibull_head, zero_model

from mensa import training
from mensa.dataset import SplitSpec, encode_event_free, preprocess_apply, preprocess_fit, split_stratified
from mensa.model import MensaConfig, init_model, log_pdf, log_surv
from mensa.simulation import GroundTruthDgp, generate_dataset
from mensa.training import (
    NumericalError,
    TrainConfig,
    TrajectorySet,
    loss_and_grad,
    nll_competing,
    nll_multi,
    total_loss,
    train,
    trajectory_likelihood,
)


def random_batch(seed, n=4, n_states=3, d=3):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    T = rng.uniform(0.2, 6.0, size=(n, n_states - 1))
    E = rng.integers(0, 2, size=(n, n_states - 1))
    E[0] = 1  # at least one doubly observed row
    return encode_event_free(dataset(X, T, E))


# -- likelihoods ----------------------------------------------------------------


def test_competing_closed_form():
    batch = encoded_batch([[0.0, 0.0, 0.0]], [[1.0, 1.0]], [[0, 1]])
    assert nll_competing(zero_model(), batch) == pytest.approx(2.0, abs=1e-15)


def test_censored_loss_decreases_in_survival():
    batch = encoded_batch([[0.0] * 3], [[2.0, 2.0]], [[1, 0]])
    log_f0 = log_pdf(zero_model(), np.zeros(3), 2.0, 0)[0]
    losses, survs = [], []
    for scale in (0.5, 1.0, 2.0, 4.0):
        model = weibull_head(zero_model(), 1, scale, 1.0)
        losses.append(nll_competing(model, batch))
        survs.append(math.exp(-2.0 / scale))
    assert np.all(np.diff(losses) < 0)
    # the censored state contributes exactly -log S
    np.testing.assert_allclose(np.array(losses) + log_f0, -np.log(survs), rtol=1e-13)


def test_duplicating_rows_doubles_nll():
    model = random_model(0)
    batch = random_batch(1)
    double = batch.subset(np.r_[np.arange(batch.n), np.arange(batch.n)])
    assert nll_multi(model, double) == pytest.approx(2 * nll_multi(model, batch), rel=1e-13)
    assert nll_competing(model, double) == pytest.approx(2 * nll_competing(model, batch), rel=1e-13)


def test_single_event_multi_equals_competing():
    model = random_model(3, n_states=2)
    rng = np.random.default_rng(3)
    ds = dataset(rng.normal(size=(30, 3)), rng.uniform(0.1, 9, size=(30, 1)), rng.integers(0, 2, size=(30, 1)))
    batch = encode_event_free(ds)
    assert nll_multi(model, batch) == nll_competing(model, batch)


def test_mr_smith_multi():
    model = random_model(5)
    x = np.array([[0.4, -0.3, 1.1]])
    batch = encoded_batch(x, [[10.0, 10.0, 20.0]], [[0, 1, 1]])
    expected = -(log_surv(model, x, 10.0, 0)[0] + log_pdf(model, x, 10.0, 1)[0] + log_pdf(model, x, 20.0, 2)[0])
    assert nll_multi(model, batch) == pytest.approx(expected, rel=1e-13)


def swap_states(model, a, b):
    out = model.copy()
    for name in list(out.params):
        if name.startswith(f"state{a}."):
            other = name.replace(f"state{a}.", f"state{b}.")
            out.params[name], out.params[other] = model.params[other], model.params[name]
    return out


def test_state_permutation_invariance():
    model = random_model(6)
    batch = random_batch(6, n=8)
    perm = [0, 2, 1]
    swapped = encoded_batch(batch.X, batch.T[:, perm], batch.E[:, perm])
    assert nll_multi(swap_states(model, 1, 2), swapped) == pytest.approx(nll_multi(model, batch), rel=1e-14)


# -- trajectory term ---------------------------------------------------------------


def test_trajectory_needs_both_events():
    model = random_model(2)
    x = np.zeros((3, 3))
    batch = encoded_batch(x, [[1, 1, 2], [1, 1, 2], [3, 3, 3]], [[0, 1, 0], [0, 0, 1], [1, 0, 0]])
    assert trajectory_likelihood(model, batch, [(1, 2)]) == 0.0


def test_trajectory_exponential_value():
    model = zero_model(n_states=3)
    batch = encoded_batch(np.zeros((1, 3)), [[0.5, 0.5, 2.0]], [[0, 1, 1]])
    assert trajectory_likelihood(model, batch, [(1, 2)]) == pytest.approx(math.exp(-0.5), rel=1e-15)
    assert trajectory_likelihood(model, batch, [(1, 2)], use_log=True) == pytest.approx(-0.5, rel=1e-15)


@pytest.mark.parametrize("seed", range(20))
def test_trajectory_bounds_and_decomposition(seed):
    model = random_model(seed)
    batch = random_batch(seed, n=10)
    trajs = [(1, 2)]
    traj = trajectory_likelihood(model, batch, trajs)
    assert 0.0 <= traj <= batch.n * len(trajs)
    with_t = total_loss(model, batch, trajs)
    without = total_loss(model, batch, [])
    assert abs(with_t + traj / batch.n - without) <= 1e-12
    assert without == pytest.approx(nll_multi(model, batch) / batch.n, rel=1e-15)


def test_no_doubly_observed_same_as_empty():
    model = random_model(1)
    batch = encoded_batch(np.zeros((2, 3)), [[1, 1, 3], [2, 4, 2]], [[0, 1, 0], [0, 0, 1]])
    assert total_loss(model, batch, [(1, 2)]) == total_loss(model, batch, [])


def test_per_instance_normalization():
    model = random_model(8)
    one = random_batch(8, n=1)
    two = one.subset([0, 0])
    assert total_loss(model, two, [(1, 2)]) == pytest.approx(total_loss(model, one, [(1, 2)]), rel=1e-14)


def test_trajectory_set_rules():
    with pytest.raises(ValueError):
        TrajectorySet([(1, 1)])
    with pytest.raises(ValueError):
        TrajectorySet([(1, 2), (2, 1)])
    with pytest.raises(ValueError):
        TrajectorySet([(0, 1)])
    with pytest.raises(ValueError):
        TrajectorySet([(1, 3)], n_states=3)
    assert TrajectorySet.from_names([("A", "B")], ["A", "B"]).pairs == [(1, 2)]
    with pytest.raises(ValueError, match="'C'"):
        TrajectorySet.from_names([("A", "C")], ["A", "B"])


def test_trajectories_only_in_multi_mode():
    with pytest.raises(ValueError):
        TrainConfig(mode="competing", trajectories=[(1, 2)])


def fd_gradient_errors(model, batch, trajs, mode="multi", h=1e-6):
    _, grads = loss_and_grad(model, batch, trajs, mode)
    worst = 0.0
    for name, value in model.params.items():
        num = np.zeros_like(value)
        for idx in np.ndindex(value.shape):
            m = model.copy()
            plus = value.copy()
            plus[idx] += h
            m.params[name] = plus
            up = total_loss(m, batch, trajs, mode)
            minus = value.copy()
            minus[idx] -= h
            m.params[name] = minus
            down = total_loss(m, batch, trajs, mode)
            num[idx] = (up - down) / (2 * h)
        scale = np.linalg.norm(num)
        err = np.linalg.norm(grads[name] - num)
        worst = max(worst, err / scale if scale > 1e-8 else err)
    return worst


def test_total_loss_gradient_small_model():
    model = random_model(12, n_features=3, n_states=3, n_mixtures=2, hidden=4, spread=2.0)
    batch = random_batch(12, n=4)
    assert fd_gradient_errors(model, batch, [(1, 2)]) < 1e-4
    assert fd_gradient_errors(model, batch, [], mode="competing") < 1e-4


# -- training loop ---------------------------------------------------------------------


def synthetic_split(n=2000, seed=0):
    dgp = GroundTruthDgp.create(d=5, seed=seed)
    ds, _ = generate_dataset(dgp, n, seed=seed + 1)
    tr, va, te = split_stratified(ds, SplitSpec(seed=seed))
    state = preprocess_fit(tr)
    enc = [encode_event_free(preprocess_apply(state, s)) for s in (tr, va, te)]
    return enc


def test_lr_zero_keeps_parameters():
    tr, va, _ = synthetic_split(300)
    model = init_model(MensaConfig(5, 2, 1, 8, seed=1))
    out, log = train(model, tr, va, TrainConfig(lr=0.0, epochs=3, patience=5))
    for name in model.params:
        assert np.array_equal(out.params[name], model.params[name])
    assert len(log.records) <= 3


def test_training_improves_validation_nll():
    tr, va, _ = synthetic_split(2000)
    model = init_model(MensaConfig(5, 2, 1, 32, seed=3))
    out, log = train(model, tr, va, TrainConfig(epochs=30, patience=10, lr=1e-3, seed=4))
    assert log.best_valid_loss < log.initial_valid_loss
    assert total_loss(out, va, mode="competing") < total_loss(model, va, mode="competing")


def test_training_deterministic_and_best_epoch(tmp_path):
    tr, va, _ = synthetic_split(400)
    model = init_model(MensaConfig(5, 2, 2, 8, seed=2))
    cfg = TrainConfig(epochs=12, patience=3, lr=5e-3, seed=9, log_path=str(tmp_path / "log.jsonl"))
    a, log_a = train(model, tr, va, cfg)
    b, log_b = train(model, tr, va, cfg)
    strip = lambda log: [(r.epoch, r.train_loss, r.valid_loss) for r in log.records]
    assert strip(log_a) == strip(log_b)
    assert all(np.array_equal(a.params[n], b.params[n]) for n in a.params)
    # the returned model is the best validation epoch
    assert total_loss(a, va, mode="competing") == log_a.best_valid_loss
    assert log_a.records[log_a.best_epoch - 1].valid_loss == min(r.valid_loss for r in log_a.records)
    lines = (tmp_path / "log.jsonl").read_text().splitlines()
    assert len(lines) == len(log_a.records) <= 12
    assert set(json.loads(lines[0])) == {"epoch", "train_loss", "valid_loss", "wall_time"}


def test_early_stopping_patience():
    tr, va, _ = synthetic_split(300)
    model = init_model(MensaConfig(5, 2, 1, 8, seed=2))
    # with no updates the validation loss never improves after epoch 1
    _, log = train(model, tr, va, TrainConfig(epochs=50, patience=2, lr=0.0))
    assert log.stopped_early and len(log.records) == 3


def test_multi_mode_with_trajectories_runs():
    ds = ordered_pair_dataset(300, seed=1)
    tr, va, _ = split_stratified(ds, SplitSpec(seed=1))
    st = preprocess_fit(tr)
    tr_e, va_e = (encode_event_free(preprocess_apply(st, s)) for s in (tr, va))
    model = init_model(MensaConfig(4, 3, 1, 8, seed=1))
    _, log = train(model, tr_e, va_e, TrainConfig(mode="multi", trajectories=[(1, 2)], epochs=3))
    assert np.isfinite(log.best_valid_loss)


def test_nan_aborts_with_diagnostics(monkeypatch):
    tr, va, _ = synthetic_split(200)
    model = init_model(MensaConfig(5, 2, 1, 4, seed=2))

    def broken(model, batch, *a, **k):
        return float("nan"), {n: np.zeros_like(v) for n, v in model.params.items()}

    monkeypatch.setattr(training, "loss_and_grad", broken)
    with pytest.raises(NumericalError, match=r"epoch 1, batch 0.*shared.weight"):
        train(model, tr, va, TrainConfig(epochs=2))


@pytest.mark.filterwarnings("ignore:overflow encountered")
def test_non_finite_row_reported():
    model = zero_model()
    model.params["state1.shape_bias"] = np.array([720.0])  # shape overflows to inf
    batch = encoded_batch(np.zeros((2, 3)), [[50.0, 50.0], [50.0, 50.0]], [[0, 1], [0, 1]])
    with pytest.raises(NumericalError, match="row 0, state 1"):
        nll_competing(model, batch)
