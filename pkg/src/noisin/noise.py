"""Scaled noise distributions for hidden-state injection.

Each family is drawn in its standard parameterization (``sample_standard``),
rescaled to the zero-mean (Bernoulli: mean-one) ``scaled`` form
(``scale``), and finally adapted to the injection mode (``as_injection``):
additive injection wants mean zero, multiplicative injection wants mean one.

Sampling methods, all driven by a PCG64 ``numpy.random.Generator``:

=========  ===============================================================
gaussian   ``standard_normal`` (ziggurat) times gamma
bernoulli  ``U < gamma`` with U on the open unit interval
gamma      ``Generator.gamma(alpha, scale=gamma)`` (Marsaglia-Tsang)
gumbel     inverse CDF, ``-gamma * log(-log U)``
laplace    inverse CDF, ``-gamma * sign(u) * log(1 - 2|u|)``, u = U - 1/2
logistic   inverse CDF, ``gamma * log(U / (1 - U))``
beta       ``Generator.beta(alpha, gamma)``
chisquare  ``Generator.chisquare(gamma)``
=========  ===============================================================
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .numerics import open_uniform

EULER_GAMMA = np.euler_gamma

FAMILIES = ("gaussian", "bernoulli", "gamma", "gumbel", "laplace", "logistic", "beta", "chisquare")

DEFAULT_ALPHA = {"gamma": 2.0, "beta": 1.0}


class Mode(str, Enum):
    ADDITIVE = "additive"
    MULTIPLICATIVE = "multiplicative"
    OFF = "off"


@dataclass(frozen=True)
class NoiseSpec:
    """Noise family, spread ``gamma``, shape ``alpha`` (gamma/beta only) and injection mode."""

    family: str = "gaussian"
    gamma: float = 1.0
    alpha: float | None = None
    mode: Mode = Mode.MULTIPLICATIVE

    def __post_init__(self):
        fam = self.family.lower().replace("-", "").replace("_", "")
        if fam == "normal":
            fam = "gaussian"
        if fam not in FAMILIES:
            raise ValueError(f"unknown noise family {self.family!r}")
        object.__setattr__(self, "family", fam)
        object.__setattr__(self, "mode", Mode(self.mode))
        if self.alpha is None and fam in DEFAULT_ALPHA:
            object.__setattr__(self, "alpha", DEFAULT_ALPHA[fam])
        if self.mode is Mode.OFF:
            return
        if not self.gamma > 0:
            raise ValueError(f"noise spread must be positive, got {self.gamma}")
        if fam == "bernoulli" and self.gamma > 1:
            raise ValueError(f"bernoulli keep probability must lie in (0, 1], got {self.gamma}")
        if fam in DEFAULT_ALPHA and not self.alpha > 0:
            raise ValueError(f"{fam} shape alpha must be positive, got {self.alpha}")

    @property
    def active(self) -> bool:
        return self.mode is not Mode.OFF


@dataclass(frozen=True)
class ScaledMoments:
    mean: float
    variance: float


def sample_standard(spec: NoiseSpec, shape, rng: np.random.Generator) -> np.ndarray:
    """Unscaled draws of the family's standard noise."""
    g, a = spec.gamma, spec.alpha
    fam = spec.family
    if fam == "gaussian":
        return rng.standard_normal(shape) * g
    if fam == "bernoulli":
        return (open_uniform(rng, shape) < g).astype(np.float64)
    if fam == "gamma":
        return rng.gamma(a, g, size=shape)
    if fam == "gumbel":
        return -g * np.log(-np.log(open_uniform(rng, shape)))
    if fam == "laplace":
        u = open_uniform(rng, shape) - 0.5
        return -g * np.sign(u) * np.log1p(-2.0 * np.abs(u))
    if fam == "logistic":
        u = open_uniform(rng, shape)
        return g * (np.log(u) - np.log1p(-u))
    if fam == "beta":
        return rng.beta(a, g, size=shape)
    if fam == "chisquare":
        return rng.chisquare(g, size=shape)
    raise ValueError(fam)


def scale(spec: NoiseSpec, eta: np.ndarray) -> np.ndarray:
    """Map standard draws to the scaled noise of the same family."""
    g, a = spec.gamma, spec.alpha
    fam = spec.family
    if fam == "gaussian":
        return eta
    if fam == "bernoulli":
        return eta / g
    if fam == "gamma":
        return (eta - a * g) / math.sqrt(a)
    if fam == "gumbel":
        return math.sqrt(6.0) * (eta - EULER_GAMMA * g) / math.pi
    if fam == "laplace":
        return eta / math.sqrt(2.0)
    if fam == "logistic":
        return math.sqrt(3.0) * eta / math.pi
    if fam == "beta":
        s = a + g
        return s * math.sqrt((s + 1.0) / a) * (eta - a / s)
    if fam == "chisquare":
        return (eta - g) / math.sqrt(2.0)
    raise ValueError(fam)


def standard_moments(spec: NoiseSpec) -> ScaledMoments:
    """Mean and variance of the unscaled draws."""
    g, a = spec.gamma, spec.alpha
    fam = spec.family
    table = {
        "gaussian": (0.0, g * g),
        "bernoulli": (g, g * (1.0 - g)),
        "gamma": (a * g if a else 0.0, a * g * g if a else 0.0),
        "gumbel": (EULER_GAMMA * g, math.pi**2 * g * g / 6.0),
        "laplace": (0.0, 2.0 * g * g),
        "logistic": (0.0, math.pi**2 * g * g / 3.0),
        "chisquare": (g, 2.0 * g),
    }
    if fam == "beta":
        s = a + g
        return ScaledMoments(a / s, a * g / (s * s * (s + 1.0)))
    return ScaledMoments(*table[fam])


def analytic_moments(spec: NoiseSpec) -> ScaledMoments:
    """Closed-form mean and variance of the scaled noise."""
    g = spec.gamma
    if spec.family == "bernoulli":
        return ScaledMoments(1.0, (1.0 - g) / g)
    if spec.family in ("beta", "chisquare"):
        return ScaledMoments(0.0, g)
    return ScaledMoments(0.0, g * g)


def injection_moments(spec: NoiseSpec) -> ScaledMoments:
    """Mean and variance of what ``as_injection`` returns."""
    if not spec.active:
        return ScaledMoments(1.0, 0.0)
    m = analytic_moments(spec)
    if spec.mode is Mode.ADDITIVE:
        return ScaledMoments(0.0, m.variance)
    return ScaledMoments(1.0, m.variance)


def as_injection(spec: NoiseSpec, eps_scaled: np.ndarray) -> np.ndarray:
    """Shift scaled noise to mean zero (additive) or mean one (multiplicative)."""
    if spec.mode is Mode.OFF:
        return np.ones_like(eps_scaled)
    centered_at_one = spec.family == "bernoulli"
    if spec.mode is Mode.ADDITIVE:
        return eps_scaled - 1.0 if centered_at_one else eps_scaled
    return eps_scaled if centered_at_one else eps_scaled + 1.0


def sample_injection(spec: NoiseSpec, shape, rng: np.random.Generator) -> np.ndarray:
    """Fresh injection noise; consumes no randomness in Off mode."""
    if not spec.active:
        return np.ones(shape)
    return as_injection(spec, scale(spec, sample_standard(spec, shape, rng)))


def apply_injection(spec: NoiseSpec, values: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """Array-level counterpart of ``model.inject`` for Monte Carlo code."""
    if spec.mode is Mode.ADDITIVE:
        return values + eps
    if spec.mode is Mode.MULTIPLICATIVE:
        return values * eps
    return values
