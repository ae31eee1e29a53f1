"""Shared builders for the test suite."""

import numpy as np

from mensa.dataset import Feature, MultiEventDataset, StateEncodedDataset
from mensa.model import MensaConfig, init_model


def zero_model(n_features=3, n_states=2, n_mixtures=1, hidden=4, **kw):
    """All weights zero: every head is Weibull(scale=exp(scale_bias), shape=exp(shape_bias))."""
    model = init_model(MensaConfig(n_features, n_states, n_mixtures, hidden, **kw))
    for name, value in model.params.items():
        model.params[name] = np.zeros_like(value)
    return model


def weibull_head(model, state, scale, shape):
    k = model.config.n_mixtures
    model.params[f"state{state}.scale_bias"] = np.full(k, np.log(scale))
    model.params[f"state{state}.shape_bias"] = np.full(k, np.log(shape))
    return model


def random_model(seed, n_features=3, n_states=3, n_mixtures=2, hidden=5, spread=1.0, **kw):
    """Init model with log-scale/shape biases drawn so the heads vary."""
    rng = np.random.default_rng(seed)
    model = init_model(MensaConfig(n_features, n_states, n_mixtures, hidden, seed=seed, **kw))
    for name, value in model.params.items():
        if name.endswith("scale_bias"):
            model.params[name] = rng.uniform(0.0, 2.0, size=value.shape)
        elif name.endswith("shape_bias"):
            model.params[name] = rng.uniform(-0.5, 0.8, size=value.shape)
        else:
            model.params[name] = value * spread
    return model


def encoded_batch(X, T, E, names=None):
    """StateEncodedDataset straight from state-level arrays (column 0 = event-free)."""
    T = np.asarray(T, dtype=float)
    names = names or ["event_free"] + [f"e{k}" for k in range(1, T.shape[1])]
    return StateEncodedDataset(np.asarray(X, dtype=float), T, np.asarray(E, dtype=float), names)


def dataset(X, T, E, events=None):
    X = np.asarray(X, dtype=float)
    T = np.asarray(T, dtype=float)
    events = events or [f"e{k}" for k in range(T.shape[1])]
    return MultiEventDataset(X, T, E, [Feature(f"x{j}") for j in range(X.shape[1])], events)


def ordered_pair_dataset(n, seed, d=4):
    """Two events where B always follows A: t_B = t_A + positive offset.

    Censoring is independent and applies to both events.
    """
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    w = rng.normal(0.0, 1.0 / np.sqrt(d), size=d)
    t_a = 5.0 * rng.weibull(2.0, n) * np.exp(-(X @ w) / 2.0)
    t_b = t_a + rng.uniform(0.5, 3.0, n)
    c = rng.uniform(2.0, 16.0, n)
    T = np.column_stack([np.minimum(t_a, c), np.minimum(t_b, c)])
    E = np.column_stack([t_a <= c, t_b <= c]).astype(float)
    return dataset(X, T, E, events=["A", "B"])
