"""Single-event synthetic data with dependent censoring.

Event and censoring times follow Weibull proportional-hazards marginals

    S(t | x) = exp(-(t / rho)**v * exp(g(x)))

and are coupled through a bivariate survival copula on ``(S_E(T_E), S_C(T_C))``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import integrate, optimize

from .dataset import Feature, MultiEventDataset

INDEPENDENCE = "independence"
CLAYTON = "clayton"
FRANK = "frank"
FAMILIES = (INDEPENDENCE, CLAYTON, FRANK)

_U_FLOOR = 1e-300


class CopulaError(ValueError):
    pass


@dataclass(frozen=True)
class CopulaSpec:
    family: str = INDEPENDENCE
    theta: float = 0.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise CopulaError(f"unknown copula family {self.family!r}")
        if self.family == CLAYTON and not self.theta >= 0.0:
            raise CopulaError(f"Clayton requires theta >= 0, got {self.theta}")
        if self.family == FRANK and (self.theta == 0.0 or not math.isfinite(self.theta)):
            raise CopulaError(f"Frank requires a finite theta != 0, got {self.theta}")


def _frank_debye1(theta: float) -> float:
    if abs(theta) < 1e-8:
        return 1.0 - theta / 4.0
    val, _ = integrate.quad(lambda t: t / math.expm1(t) if t != 0.0 else 1.0, 0.0, theta, epsabs=1e-14, epsrel=1e-13)
    return val / theta


def kendall_tau(spec: CopulaSpec) -> float:
    """Model Kendall's tau of a copula."""
    if spec.family == INDEPENDENCE:
        return 0.0
    if spec.family == CLAYTON:
        return spec.theta / (spec.theta + 2.0)
    th = spec.theta
    if abs(th) < 1e-6:
        return th / 9.0
    return 1.0 - 4.0 / th * (1.0 - _frank_debye1(th))


def tau_to_theta(family: str, tau: float) -> CopulaSpec:
    """Copula whose Kendall's tau equals ``tau`` (in [0, 0.9]).

    ``tau == 0`` always gives the independence copula.
    """
    if not 0.0 <= tau <= 0.9:
        raise CopulaError(f"tau must lie in [0, 0.9], got {tau}")
    if family not in FAMILIES:
        raise CopulaError(f"unknown copula family {family!r}")
    if tau == 0.0:
        return CopulaSpec(INDEPENDENCE, 0.0)
    if family == INDEPENDENCE:
        raise CopulaError("the independence copula has tau = 0")
    if family == CLAYTON:
        return CopulaSpec(CLAYTON, 2.0 * tau / (1.0 - tau))
    lo, hi = 1e-9, 1.0
    while kendall_tau(CopulaSpec(FRANK, hi)) < tau:
        hi *= 2.0
    theta = optimize.bisect(lambda th: kendall_tau(CopulaSpec(FRANK, th)) - tau, lo, hi, xtol=1e-12, rtol=4 * np.finfo(float).eps, maxiter=500)
    return CopulaSpec(FRANK, theta)


def conditional_cdf(spec: CopulaSpec, u, v):
    """dC(u, v)/du, the distribution of V given U = u."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if spec.family == INDEPENDENCE or (spec.family == CLAYTON and spec.theta == 0.0):
        return v * np.ones_like(u)
    th = spec.theta
    if spec.family == CLAYTON:
        s = u ** (-th) + v ** (-th) - 1.0
        return u ** (-th - 1.0) * s ** (-1.0 / th - 1.0)
    a = np.expm1(-th * u)
    b = np.expm1(-th * v)
    c = math.expm1(-th)
    return np.exp(-th * u) * b / (c + a * b)


def _conditional_inverse(spec: CopulaSpec, u, w):
    if spec.family == INDEPENDENCE or (spec.family == CLAYTON and spec.theta == 0.0):
        return w
    th = spec.theta
    if spec.family == CLAYTON:
        return ((w ** (-th / (1.0 + th)) - 1.0) * u ** (-th) + 1.0) ** (-1.0 / th)
    # closed-form inverse of the Frank conditional distribution
    c = math.expm1(-th)
    return -np.log1p(w * c / (w + (1.0 - w) * np.exp(-th * u))) / th


def copula_sample(spec: CopulaSpec, n: int, seed=None) -> np.ndarray:
    """Draw ``n`` pairs ``(u, v)`` by conditional inversion. Returns an (n, 2) array."""
    if n < 1:
        raise CopulaError("n must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    u = rng.random(n)
    w = rng.random(n)
    v = _conditional_inverse(spec, u, w)
    v = np.clip(v, _U_FLOOR, 1.0 - np.finfo(float).epsneg)
    u = np.clip(u, _U_FLOOR, 1.0)
    return np.column_stack([u, v])


# ---------------------------------------------------------------------------
# ground-truth data generating process

LINEAR = "linear"
NONLINEAR = "nonlinear"


@dataclass
class GroundTruthDgp:
    d: int = 10
    risk: str = LINEAR
    event_shape: float = 4.0
    event_scale: float = 18.0
    censor_shape: float = 5.0
    censor_scale: float = 17.0
    copula: CopulaSpec = field(default_factory=CopulaSpec)
    # linear: weights (d,); nonlinear: hidden (d, d) then output (d,)
    weights: list = field(default_factory=list)
    hidden: list = field(default_factory=list)

    def __post_init__(self):
        for name in ("event_shape", "event_scale", "censor_shape", "censor_scale"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.risk not in (LINEAR, NONLINEAR):
            raise ValueError(f"unknown risk kind {self.risk!r}")
        if self.risk == NONLINEAR and self.weights and not self.hidden:
            raise ValueError("nonlinear risk needs hidden-layer weights")

    @classmethod
    def create(cls, d=10, risk=LINEAR, copula: CopulaSpec | None = None, seed=None, **marginals) -> GroundTruthDgp:
        """Draw risk weights N(0, 1/d) from ``seed``."""
        rng = np.random.default_rng(seed)
        scale = 1.0 / math.sqrt(d)
        hidden = rng.normal(0.0, scale, size=(d, d)).tolist() if risk == NONLINEAR else []
        weights = rng.normal(0.0, scale, size=d).tolist()
        return cls(d=d, risk=risk, copula=copula or CopulaSpec(), weights=weights, hidden=hidden, **marginals)

    def risk_score(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        w = np.asarray(self.weights)
        if self.risk == LINEAR:
            return X @ w
        return np.maximum(X @ np.asarray(self.hidden).T, 0.0) @ w

    def marginal(self, which: str) -> tuple[float, float]:
        if which == "event":
            return self.event_shape, self.event_scale
        if which == "censor":
            return self.censor_shape, self.censor_scale
        raise ValueError(f"which must be 'event' or 'censor', got {which!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["copula"] = asdict(self.copula)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> GroundTruthDgp:
        d = dict(d)
        d["copula"] = CopulaSpec(**d["copula"])
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> GroundTruthDgp:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def true_survival(dgp: GroundTruthDgp, x, t, which: str = "event"):
    """S(t | x) of the event or censoring marginal. Broadcasts over rows of x and t."""
    shape, scale = dgp.marginal(which)
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0):
        raise ValueError("t must be >= 0")
    g = dgp.risk_score(x)
    if np.ndim(x) == 1:
        g = g[0]
    elif t.ndim == 2:
        g = g[:, None]
    return np.exp(-((t / scale) ** shape) * np.exp(g))


def inverse_survival(dgp: GroundTruthDgp, x, s, which: str = "event"):
    """Time at which S(t | x) equals ``s``."""
    shape, scale = dgp.marginal(which)
    g = dgp.risk_score(x)
    if np.ndim(x) == 1:
        g = g[0]
    s = np.asarray(s, dtype=np.float64)
    return scale * (-np.log(s) * np.exp(-g)) ** (1.0 / shape)


def sample_times(dgp: GroundTruthDgp, X, rng) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Latent event and censoring times for rows of ``X`` plus the copula draws."""
    uv = copula_sample(dgp.copula, len(X), rng)
    t_event = inverse_survival(dgp, X, uv[:, 0], "event")
    t_censor = inverse_survival(dgp, X, uv[:, 1], "censor")
    return t_event, t_censor, uv


def generate_dataset(dgp: GroundTruthDgp, n: int, seed=None, return_latent: bool = False):
    """Sample features ~ N(0, I), latent times, and the observed (min, indicator) pair."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, dgp.d))
    t_event, t_censor, uv = sample_times(dgp, X, rng)
    observed = np.minimum(t_event, t_censor)
    delta = (t_event <= t_censor).astype(np.float64)
    schema = [Feature(f"x{j}") for j in range(dgp.d)]
    ds = MultiEventDataset(X, observed[:, None], delta[:, None], schema, ["event"])
    if return_latent:
        return ds, dgp, {"t_event": t_event, "t_censor": t_censor, "uv": uv}
    return ds, dgp
