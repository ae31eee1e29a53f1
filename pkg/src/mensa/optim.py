"""Named parameter storage and the Adam optimizer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ContractError, Graph, Var


class ParamStore:
    """Ordered mapping of unique names to fp64 arrays with fixed shapes."""

    def __init__(self):
        self._values: dict[str, np.ndarray] = {}

    def add(self, name: str, value) -> np.ndarray:
        if name in self._values:
            raise ContractError(f"parameter {name!r} already exists")
        arr = np.array(value, dtype=np.float64)
        self._values[name] = arr
        return arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self._values[name]

    def __setitem__(self, name: str, value) -> None:
        if name not in self._values:
            raise KeyError(name)
        arr = np.array(value, dtype=np.float64)
        if arr.shape != self._values[name].shape:
            raise ContractError(f"parameter {name!r}: shape {arr.shape} != {self._values[name].shape}")
        self._values[name] = arr

    def __contains__(self, name) -> bool:
        return name in self._values

    def __iter__(self):
        return iter(self._values)

    def __len__(self):
        return len(self._values)

    def names(self) -> list[str]:
        return list(self._values)

    def items(self):
        return self._values.items()

    def size(self) -> int:
        """Total number of scalar parameters."""
        return int(sum(v.size for v in self._values.values()))

    def copy(self) -> ParamStore:
        out = ParamStore()
        for name, value in self._values.items():
            out.add(name, value.copy())
        return out

    def bind(self, graph: Graph) -> dict[str, Var]:
        """Register every parameter as a named leaf of ``graph``."""
        return {name: graph.leaf(name, value) for name, value in self._values.items()}

    def norms(self) -> dict[str, float]:
        return {name: float(np.linalg.norm(v)) for name, v in self._values.items()}


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ParamStore, **hyper) -> AdamState:
        state = cls(**hyper)
        for name, value in params.items():
            state.m[name] = np.zeros_like(value)
            state.v[name] = np.zeros_like(value)
        return state


def adam_step(params: ParamStore, grads: dict[str, np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update, in place.

    Weight decay is coupled: ``weight_decay * theta`` is added to the gradient
    before the moment updates. Names missing from ``grads`` are a contract error.
    """
    missing = [n for n in params if n not in grads]
    if missing:
        raise ContractError(f"no gradient for parameters {missing}")
    if state.step < 0:
        raise ContractError("negative Adam step counter")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name in params:
        theta = params[name]
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != theta.shape:
            raise ContractError(f"gradient for {name!r}: shape {g.shape} != {theta.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        if state.weight_decay:
            g = g + state.weight_decay * theta
        m = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        state.m[name] = m
        state.v[name] = v
        params[name] = theta - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
