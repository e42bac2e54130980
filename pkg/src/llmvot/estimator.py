"""Rank-ordered (exploded) logit estimation.

A full ranking of J alternatives is treated as J-1 successive multinomial
logit choices: the top-ranked alternative is chosen from all J, the second
from the remaining J-1, and so on.  With linear utility ``v = x @ beta`` the
log-likelihood of one ranking is::

    sum_{h < J} [ v_(h) - log sum_{m >= h} exp(v_(m)) ]

Each stage is a concave MNL log-likelihood, so the total is concave and
Newton's method with a backtracking line search converges from any start.
Standard errors come from the observed information (inverse negative
Hessian) at the optimum.

Units: cost in USD, time in minutes.  ``vot_from`` converts to USD/hour.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence, Union

import numpy as np

from .errors import IdentificationError, InvalidArgumentError

logger = logging.getLogger(__name__)

ATTRIBUTE_NAMES = ("cost", "time", "truck")
VOT_DEGENERACY = 1e-9


@dataclass(frozen=True)
class Coefficients:
    beta_cost: float
    beta_time: float
    beta_truck: float

    def __post_init__(self):
        if not all(math.isfinite(b) for b in self.as_tuple()):
            raise InvalidArgumentError(f"coefficients must be finite, got {self.as_tuple()}")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.beta_cost, self.beta_time, self.beta_truck)

    def as_array(self) -> np.ndarray:
        return np.array(self.as_tuple(), dtype=float)

    @classmethod
    def from_array(cls, values) -> "Coefficients":
        values = [float(v) for v in values]
        if len(values) != 3:
            raise InvalidArgumentError(f"expected 3 coefficients, got {len(values)}")
        return cls(*values)


@dataclass(frozen=True)
class RankingObservation:
    """A ranking of J alternatives.

    ``attributes[k]`` is the (cost, time, truck) row of alternative ``k + 1``;
    ``order[r]`` is the id ranked ``r + 1`` (the first entry is most preferred).
    """

    attributes: tuple[tuple[float, ...], ...]
    order: tuple[int, ...]

    def __post_init__(self):
        attrs = tuple(tuple(float(v) for v in row) for row in self.attributes)
        object.__setattr__(self, "attributes", attrs)
        object.__setattr__(self, "order", tuple(int(i) for i in self.order))
        n = len(attrs)
        if n < 2 or any(len(row) != len(ATTRIBUTE_NAMES) for row in attrs):
            raise InvalidArgumentError("attributes must be at least 2 rows of (cost, time, truck)")
        if sorted(self.order) != list(range(1, n + 1)):
            raise InvalidArgumentError(f"order must be a permutation of 1..{n}, got {self.order}")

    def ranked_attributes(self) -> np.ndarray:
        a = np.asarray(self.attributes, dtype=float)
        return a[np.asarray(self.order) - 1]


class RankingData:
    """Observations stacked into ranked attribute tensors, grouped by size."""

    def __init__(self, observations: Iterable[RankingObservation]):
        groups: dict[int, list[np.ndarray]] = {}
        count = 0
        for obs in observations:
            x = obs.ranked_attributes()
            groups.setdefault(x.shape[0], []).append(x)
            count += 1
        if count == 0:
            raise InvalidArgumentError("no ranking observations")
        self.n_observations = count
        self.groups = [np.stack(xs) for _, xs in sorted(groups.items())]

    def scaled(self, factors) -> "RankingData":
        out = object.__new__(RankingData)
        out.n_observations = self.n_observations
        out.groups = [x * np.asarray(factors, dtype=float) for x in self.groups]
        return out


DataLike = Union[RankingData, Sequence[RankingObservation]]


def _as_data(data: DataLike) -> RankingData:
    if isinstance(data, RankingData):
        return data
    return RankingData(data)


def _as_beta(beta) -> np.ndarray:
    if isinstance(beta, Coefficients):
        return beta.as_array()
    b = np.asarray(beta, dtype=float)
    if b.shape != (3,) or not np.all(np.isfinite(b)):
        raise InvalidArgumentError(f"beta must be 3 finite reals, got {beta!r}")
    return b


def _stage_terms(x: np.ndarray, beta: np.ndarray, stages: int | None):
    """Utilities, stage log-normalisers and the stage count for one group."""
    v = x @ beta
    n_stages = x.shape[1] - 1 if stages is None else min(stages, x.shape[1] - 1)
    # lse[:, h] = log sum_{m >= h} exp(v[:, m])
    lse = np.logaddexp.accumulate(v[:, ::-1], axis=1)[:, ::-1]
    return v, lse, n_stages


def log_likelihood(beta, data: DataLike, stages: int | None = None) -> float:
    """Exploded-logit log-likelihood; ``stages`` truncates to the top ranks."""
    b = _as_beta(beta)
    total = 0.0
    for x in _as_data(data).groups:
        v, lse, s = _stage_terms(x, b, stages)
        total += float(np.sum(v[:, :s] - lse[:, :s]))
    return total


def ranking_probability(beta, obs: RankingObservation) -> float:
    return math.exp(log_likelihood(beta, [obs]))


def _stage_weights(x, b, stages):
    v, lse, s = _stage_terms(x, b, stages)
    J = x.shape[1]
    # p[n, h, m] = exp(v_m - lse_h) for m >= h, zero otherwise
    mask = np.triu(np.ones((s, J), dtype=bool))
    with np.errstate(under="ignore"):
        p = np.exp(np.where(mask, v[:, None, :] - lse[:, :s, None], -np.inf))
    return v, lse, s, p


def _evaluate(b: np.ndarray, data: RankingData, stages=None, need_hessian=True):
    ll = 0.0
    grad = np.zeros(3)
    hess = np.zeros((3, 3))
    for x in data.groups:
        v, lse, s, p = _stage_weights(x, b, stages)
        ll += float(np.sum(v[:, :s] - lse[:, :s]))
        xbar = p @ x  # (n, s, 3)
        grad += np.sum(x[:, :s, :] - xbar, axis=(0, 1))
        if need_hessian:
            second = np.einsum("nhm,nmi,nmj->ij", p, x, x)
            hess -= second - np.einsum("nhi,nhj->ij", xbar, xbar)
    return ll, grad, hess


def gradient(beta, data: DataLike, stages: int | None = None) -> np.ndarray:
    """Analytic score: sum over stages of chosen attributes minus their stage expectation."""
    return _evaluate(_as_beta(beta), _as_data(data), stages, need_hessian=False)[1]


def hessian(beta, data: DataLike, stages: int | None = None) -> np.ndarray:
    return _evaluate(_as_beta(beta), _as_data(data), stages)[2]


def vot_from(beta) -> float | None:
    """Value of travel time in USD/hour, or None when the cost coefficient is ~0."""
    b = _as_beta(beta)
    if abs(b[0]) < VOT_DEGENERACY:
        return None
    return float(60.0 * b[1] / b[0])


@dataclass
class FitResult:
    beta_hat: Coefficients
    std_errors: tuple[float, float, float]
    log_likelihood: float
    converged: bool
    iterations: int
    n_observations: int
    vot: float | None
    gradient_max_norm: float = float("nan")
    status: str = "converged"
    covariance: np.ndarray | None = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        def clean(x):
            return None if x is None or not math.isfinite(x) else float(x)

        return {
            "beta": list(self.beta_hat.as_tuple()),
            "se": [clean(s) for s in self.std_errors],
            "ll": self.log_likelihood,
            "converged": self.converged,
            "iterations": self.iterations,
            "n": self.n_observations,
            "vot": clean(self.vot),
            "grad_max": clean(self.gradient_max_norm),
            "status": self.status,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FitResult":
        return cls(
            beta_hat=Coefficients.from_array(d["beta"]),
            std_errors=tuple(float("nan") if s is None else float(s) for s in d["se"]),
            log_likelihood=float(d["ll"]),
            converged=bool(d["converged"]),
            iterations=int(d["iterations"]),
            n_observations=int(d["n"]),
            vot=None if d.get("vot") is None else float(d["vot"]),
            gradient_max_norm=float("nan") if d.get("grad_max") is None else float(d["grad_max"]),
            status=d.get("status", "converged"),
        )


def check_identification(data: RankingData) -> None:
    """Raise if some attribute never varies within any single choice set."""
    varies = np.zeros(3, dtype=bool)
    for x in data.groups:
        varies |= np.any(np.ptp(x, axis=1) > 0, axis=0)
    for j, ok in enumerate(varies):
        if not ok:
            raise IdentificationError(
                f"attribute {ATTRIBUTE_NAMES[j]!r} is constant within every choice set; "
                f"beta_{ATTRIBUTE_NAMES[j]} is not identified",
                column=ATTRIBUTE_NAMES[j],
            )


def fit(
    data: DataLike,
    tolerance: float = 1e-8,
    max_iterations: int = 200,
    start=None,
) -> FitResult:
    """Maximum likelihood fit by damped Newton ascent.

    Newton directions come from a Cholesky solve of the negative Hessian;
    when that matrix is not positive definite the step falls back to the
    gradient.  Step lengths are halved until the Armijo condition holds.
    Convergence means ``max|gradient| <= tolerance``.
    """
    data = _as_data(data)
    check_identification(data)
    b = np.zeros(3) if start is None else _as_beta(start).copy()

    ll, g, H = _evaluate(b, data)
    status = "max-iterations"
    converged = False
    it = 0
    for it in range(1, max_iterations + 1):
        if np.max(np.abs(g)) <= tolerance:
            converged, status, it = True, "converged", it - 1
            break
        try:
            L = np.linalg.cholesky(-H)
            step = np.linalg.solve(L.T, np.linalg.solve(L, g))
        except np.linalg.LinAlgError:
            step = g / max(1.0, float(np.max(np.abs(g))))
        slope = float(g @ step)
        slack = 1e-12 * (1.0 + abs(ll))
        t = 1.0
        while True:
            trial = b + t * step
            ll_new = _evaluate(trial, data, need_hessian=False)[0]
            if math.isfinite(ll_new) and ll_new >= ll + 1e-4 * t * slope - slack:
                break
            t *= 0.5
            if t < 1e-16:
                break
        if t < 1e-16:
            status = "line-search-stalled"
            break
        b = trial
        ll, g, H = _evaluate(b, data)
    else:
        if np.max(np.abs(g)) <= tolerance:
            converged, status = True, "converged"

    se = (float("nan"),) * 3
    cov = None
    try:
        np.linalg.cholesky(-H)
        cov = np.linalg.inv(-H)
        se = tuple(float(s) for s in np.sqrt(np.diag(cov)))
    except np.linalg.LinAlgError:
        warnings.warn("information matrix is singular; standard errors undefined", RuntimeWarning)
        if converged:
            status = "singular-information"

    if not converged:
        logger.warning("fit did not converge after %d iterations (%s), max|grad|=%.3g",
                       it, status, float(np.max(np.abs(g))))
    return FitResult(
        beta_hat=Coefficients.from_array(b),
        std_errors=se,
        log_likelihood=ll,
        converged=converged,
        iterations=it,
        n_observations=data.n_observations,
        vot=vot_from(b),
        gradient_max_norm=float(np.max(np.abs(g))),
        status=status,
        covariance=cov,
    )
