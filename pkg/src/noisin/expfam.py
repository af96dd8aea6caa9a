"""Exponential-family likelihood heads.

A head maps a hidden state ``h`` to the natural parameter ``s = h @ V + b``
and scores an observation ``x`` by ``A(s) - s.x``; the base-measure term is
dropped from optimized losses and only appears in
:func:`exact_log_likelihood`.

Observations are passed in batch-row layout: integer class ids of shape
``(B,)`` for the categorical head, arrays of shape ``(B, D)`` otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .numerics import (
    DomainError,
    ShapeError,
    Tensor,
    _record,
    add_bias,
    logsumexp_array,
    matmul,
    stable_sigmoid,
    sum_all,
)

FAMILIES = ("bernoulli", "gaussian", "poisson", "categorical")


@dataclass
class LikelihoodHead:
    family: str
    V: Tensor
    b: Tensor
    sigma2: float = 1.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown likelihood family {self.family!r}")
        if self.sigma2 <= 0:
            raise ValueError("sigma2 must be positive")
        if self.b.shape != (self.V.shape[1],):
            raise ShapeError(f"bias shape {self.b.shape} does not match V {self.V.shape}")

    @property
    def output_size(self) -> int:
        return self.V.shape[1]

    def parameters(self) -> dict[str, Tensor]:
        return {"V": self.V, "b": self.b}


def natural_param(head: LikelihoodHead, h: Tensor) -> Tensor:
    """Natural parameter for each row of ``h``."""
    if h.data.ndim == 1:
        return _squeeze_row(add_bias(matmul(_as_row(h), head.V), head.b))
    return add_bias(matmul(h, head.V), head.b)


def _as_row(h: Tensor) -> Tensor:
    n = h.shape[0]
    return _record(h.data.reshape(1, n), (h,), lambda g: (g.reshape(n),))


def _squeeze_row(s: Tensor) -> Tensor:
    n = s.shape[1]
    return _record(s.data.reshape(n), (s,), lambda g: (g.reshape(1, n),))


# ---------------------------------------------------------------------------
# Log-normalizer and its derivatives (array level, last axis = components)


def _softplus(s: np.ndarray) -> np.ndarray:
    return np.maximum(s, 0.0) + np.log1p(np.exp(-np.abs(s)))


def log_normalizer(family: str, s, sigma2: float = 1.0) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise DomainError("natural parameter must be finite")
    if family == "bernoulli":
        return np.sum(_softplus(s), axis=-1)
    if family == "gaussian":
        return np.sum(s * s, axis=-1) / (2.0 * sigma2)
    if family == "poisson":
        return np.sum(np.exp(s), axis=-1)
    if family == "categorical":
        return logsumexp_array(s, axis=-1)
    raise ValueError(family)


def mean_param(family: str, s, sigma2: float = 1.0) -> np.ndarray:
    """Gradient of the log-normalizer."""
    s = np.asarray(s, dtype=np.float64)
    if family == "bernoulli":
        return stable_sigmoid(s)
    if family == "gaussian":
        return s / sigma2
    if family == "poisson":
        return np.exp(s)
    if family == "categorical":
        return np.exp(s - logsumexp_array(s, axis=-1)[..., None])
    raise ValueError(family)


def hessian_A(family: str, s, sigma2: float = 1.0) -> np.ndarray:
    """Full Hessian matrix of the log-normalizer at a single natural parameter."""
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 1:
        raise ShapeError("hessian_A takes one natural-parameter vector")
    if family == "bernoulli":
        p = stable_sigmoid(s)
        return np.diag(p * (1.0 - p))
    if family == "gaussian":
        return np.eye(s.size) / sigma2
    if family == "poisson":
        return np.diag(np.exp(s))
    if family == "categorical":
        # diag(eta)/1'eta - eta eta'/(1'eta)^2 written with normalized eta
        p = mean_param(family, s)
        return np.diag(p) - np.outer(p, p)
    raise ValueError(family)


def psd_sqrt(m: np.ndarray, clamp: float = 1e-12) -> np.ndarray:
    """Symmetric square root of a PSD matrix by eigendecomposition.

    Eigenvalues in ``[-clamp, 0)`` are treated as zero; anything more negative
    means the input was not PSD.
    """
    m = 0.5 * (m + m.T)
    w, q = np.linalg.eigh(m)
    tol = clamp * max(1.0, float(np.max(np.abs(w))) if w.size else 1.0)
    if np.any(w < -tol):
        raise np.linalg.LinAlgError(f"matrix is not PSD (min eigenvalue {w.min():.3e})")
    w = np.clip(w, 0.0, None)
    return (q * np.sqrt(w)) @ q.T


# ---------------------------------------------------------------------------
# Losses


def _check_support(family: str, x: np.ndarray, out_dim: int) -> None:
    if family == "categorical":
        if x.dtype.kind not in "iu" or np.any(x < 0) or np.any(x >= out_dim):
            raise DomainError("categorical observations must be class ids in range")
    elif family == "bernoulli":
        if not np.all((x == 0) | (x == 1)):
            raise DomainError("bernoulli observations must be 0 or 1")
    elif family == "poisson":
        if np.any(x < 0) or not np.all(x == np.floor(x)):
            raise DomainError("poisson observations must be nonnegative integers")


def nll_rows(family: str, s: Tensor, x, sigma2: float = 1.0) -> Tensor:
    """Per-row ``A(s) - s.x`` as one recorded primitive.

    ``s`` has shape (B, K); the result has shape (B,). The gradient with
    respect to ``s`` is ``mean_param(s) - x``.
    """
    x = np.asarray(x)
    sd = s.data
    if sd.ndim != 2:
        raise ShapeError(f"natural parameters must be (batch, k), got {sd.shape}")
    _check_support(family, x, sd.shape[1])
    a = log_normalizer(family, sd, sigma2)
    rows = np.arange(sd.shape[0])
    if family == "categorical":
        if x.shape != (sd.shape[0],):
            raise ShapeError(f"expected {sd.shape[0]} class ids, got shape {x.shape}")
        sx = sd[rows, x]
    else:
        if x.shape != sd.shape:
            raise ShapeError(f"observation shape {x.shape} does not match {sd.shape}")
        sx = np.sum(sd * x, axis=-1)
    out = (a - sx).astype(sd.dtype)

    def vjp(g):
        grad = mean_param(family, sd, sigma2)
        if family == "categorical":
            grad = grad.copy()
            grad[rows, x] -= 1.0
        else:
            grad = grad - x
        return ((g[:, None] * grad).astype(sd.dtype),)

    return _record(out, (s,), vjp)


def nll(head: LikelihoodHead, h: Tensor, x) -> Tensor:
    """Summed negative log-likelihood (constant base measure dropped)."""
    s = natural_param(head, h)
    if s.data.ndim == 1:
        s = _as_row(s)
        x = np.asarray(x)
        x = x.reshape(1) if head.family == "categorical" else x.reshape(1, -1)
    return sum_all(nll_rows(head.family, s, x, head.sigma2))


def log_base_measure(family: str, x, sigma2: float = 1.0) -> np.ndarray:
    """log nu(x) per row.

    The gaussian head's log-normalizer ``s.s / (2 sigma2)`` pairs with base
    measure N(0, I / sigma2), making ``x ~ N(s / sigma2, I / sigma2)``.
    """
    x = np.asarray(x, dtype=np.float64)
    if family in ("bernoulli", "categorical"):
        return np.zeros(x.shape[0] if x.ndim else 1)
    if family == "poisson":
        return -np.sum(gammaln(x + 1.0), axis=-1)
    if family == "gaussian":
        d = x.shape[-1]
        return -0.5 * sigma2 * np.sum(x * x, axis=-1) - 0.5 * d * np.log(2.0 * np.pi / sigma2)
    raise ValueError(family)


def exact_log_likelihood(family: str, s, x, sigma2: float = 1.0) -> np.ndarray:
    """Full per-row log p(x | s), base measure included."""
    s = np.asarray(s, dtype=np.float64)
    x = np.asarray(x)
    if family == "categorical":
        return s[np.arange(s.shape[0]), x] - log_normalizer(family, s)
    xf = x.astype(np.float64)
    return np.sum(s * xf, axis=-1) - log_normalizer(family, s, sigma2) + log_base_measure(family, xf, sigma2)
