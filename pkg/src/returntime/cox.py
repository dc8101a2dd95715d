"""Cox proportional-hazards regression: Efron partial likelihood with exact
gradient and Hessian, Newton-Raphson fitting with step halving, the
Cox-Oakes baseline hazard, and expected survival times.

The fitted baseline stores a hazard mass at each distinct event time. For
expectations those masses are spread into piecewise-constant hazard rates
over the inter-event intervals, extrapolated beyond the last event at the
last rate, so the survival integral has a closed form on every piece.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError, NumericalError, ValidationError

logger = logging.getLogger(__name__)

TIE_DECIMALS = 9  # event times rounded to 1e-9 days before tie grouping


def _validate_inputs(X: np.ndarray, times: np.ndarray, events: np.ndarray) -> None:
    if X.ndim != 2 or len(times) != X.shape[0] or len(events) != X.shape[0]:
        raise ValidationError(
            f"shape mismatch: X {X.shape}, times {times.shape}, events {events.shape}"
        )
    if np.any(times <= 0):
        raise ValidationError("survival times must be positive")
    if not events.any():
        raise DataError("all observations are censored; nothing to fit")


def efron_partial_log_likelihood(
    beta: np.ndarray,
    X: np.ndarray,
    times: np.ndarray,
    events: np.ndarray,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Efron tie-corrected partial log-likelihood with gradient and Hessian.

    Censored rows enter only through the risk sets. The linear predictor is
    shifted by its maximum before exponentiation; the partial likelihood is
    exactly invariant to that shift.
    """
    beta = np.asarray(beta, dtype=float)
    X = np.asarray(X, dtype=float)
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=bool)
    _validate_inputs(X, times, events)

    n, p = X.shape
    rounded = np.round(times, TIE_DECIMALS)
    order = np.argsort(rounded, kind="mergesort")
    Xs = X[order]
    ev = events[order]
    ts = rounded[order]

    eta = Xs @ beta
    shift = eta.max()
    r = np.exp(eta - shift)
    rx = r[:, None] * Xs
    rxx = rx[:, :, None] * Xs[:, None, :]

    # suffix sums: risk set at time t is everyone with time >= t
    S0 = np.cumsum(r[::-1])[::-1]
    S1 = np.cumsum(rx[::-1], axis=0)[::-1]
    S2 = np.cumsum(rxx[::-1], axis=0)[::-1]

    # first index of each tie group, and events per group, for every row
    first_idx = np.searchsorted(ts, ts, side="left")
    group_events = np.zeros(n, dtype=np.int64)
    np.add.at(group_events, first_idx, ev.astype(np.int64))
    d_per_row = group_events[first_idx]

    value = 0.0
    grad = np.zeros(p)
    hess = np.zeros((p, p))

    # untied events vectorized; numerators and denominators both live in
    # shifted coordinates, so the shifts cancel exactly
    single = ev & (d_per_row == 1)
    if single.any():
        k = first_idx[single]
        phi = S0[k]
        mu = S1[k] / phi[:, None]
        value += float(np.sum(eta[single] - shift - np.log(phi)))
        grad += np.sum(Xs[single] - mu, axis=0)
        hess -= np.einsum("mij,m->ij", S2[k], 1.0 / phi) - np.einsum("mi,mj->ij", mu, mu)

    # tied event groups with the Efron correction; a group's first row need
    # not itself be an event
    for start in np.flatnonzero((first_idx == np.arange(n)) & (group_events > 1)):
        stop = start
        while stop < n and ts[stop] == ts[start]:
            stop += 1
        d_idx = np.flatnonzero(ev[start:stop]) + start
        d = len(d_idx)
        s0d = r[d_idx].sum()
        s1d = rx[d_idx].sum(axis=0)
        s2d = rxx[d_idx].sum(axis=0)
        value += float(eta[d_idx].sum() - shift * d)
        grad += Xs[d_idx].sum(axis=0)
        for l in range(d):
            frac = l / d
            phi = S0[start] - frac * s0d
            nu = S1[start] - frac * s1d
            M = S2[start] - frac * s2d
            value -= math.log(phi)
            mu = nu / phi
            grad -= mu
            hess -= M / phi - np.outer(mu, mu)
    return value, grad, hess


@dataclass
class CoxModel:
    """Fitted coefficients plus the estimated baseline hazard step function."""

    feature_names: list[str]
    beta: np.ndarray
    baseline_times: np.ndarray   # strictly increasing distinct event times
    baseline_hazard: np.ndarray  # hazard mass at each event time
    n_train: int = 0
    _rates: np.ndarray = field(init=False, repr=False)
    _cum_at_knots: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        t = np.asarray(self.baseline_times, dtype=float)
        h = np.asarray(self.baseline_hazard, dtype=float)
        if np.any(np.diff(t) <= 0) or np.any(t <= 0):
            raise ValidationError("baseline event times must be positive and strictly increasing")
        if np.any(h < 0):
            raise ValidationError("baseline hazard values must be non-negative")
        self.baseline_times = t
        self.baseline_hazard = h
        widths = np.diff(np.concatenate([[0.0], t]))
        self._rates = h / widths
        self._cum_at_knots = np.concatenate([[0.0], np.cumsum(h)])

    @property
    def tail_rate(self) -> float:
        return float(self._rates[-1])

    def cumulative_hazard(self, t: float) -> float:
        """Baseline cumulative hazard, linear between event times."""
        if t <= 0:
            return 0.0
        knots = self.baseline_times
        i = int(np.searchsorted(knots, t, side="left"))
        if i >= len(knots):
            return float(self._cum_at_knots[-1] + self.tail_rate * (t - knots[-1]))
        left = knots[i - 1] if i > 0 else 0.0
        return float(self._cum_at_knots[i] + self._rates[i] * (t - left))

    def risk_score(self, x: np.ndarray) -> float:
        return float(np.asarray(x, dtype=float) @ self.beta)

    def survival(self, x: np.ndarray, t: float) -> float:
        """S(t | x) = exp(-exp(beta.x) * Lambda(t)), overflow-guarded."""
        if t <= 0:
            return 1.0
        ch = self.cumulative_hazard(t)
        if ch <= 0:
            return 1.0
        expo = self.risk_score(x) + math.log(ch)
        if expo > 700.0:
            return 0.0
        return math.exp(-math.exp(expo))

    def mean_residual(self, x: np.ndarray, a: float) -> float:
        """integral_a^inf S(z|x)/S(a|x) dz via the piecewise-exponential form."""
        lin = self.risk_score(x)
        if lin > 700.0:
            return 0.0
        risk = math.exp(lin)
        if risk == 0.0:
            return math.inf
        knots = self.baseline_times
        cum_a = self.cumulative_hazard(a)
        if risk * cum_a > 700.0:
            logger.warning(
                "survival at t=%.4g underflows for this user (risk %.3g); "
                "residual expectation is effectively zero", a, risk,
            )
        if a >= knots[-1]:
            return 1.0 / (self.tail_rate * risk)
        i0 = int(np.searchsorted(knots, a, side="right"))
        starts = np.concatenate([[a], knots[i0:-1]])
        ends = knots[i0:]
        rates = self._rates[i0:]
        cum_starts = np.array([self.cumulative_hazard(s) for s in starts])
        rel = -risk * (cum_starts - cum_a)  # log S(start)/S(a)
        rho = rates * risk
        with np.errstate(over="ignore", under="ignore"):
            pieces = np.exp(rel) * (-np.expm1(-rho * (ends - starts))) / rho
            tail_rel = -risk * (self._cum_at_knots[-1] - cum_a)
            tail = math.exp(tail_rel) / (self.tail_rate * risk) if tail_rel > -700 else 0.0
        return float(pieces.sum() + tail)

    def to_dict(self) -> dict:
        return {
            "feature_names": self.feature_names,
            "beta": self.beta.tolist(),
            "baseline_times": self.baseline_times.tolist(),
            "baseline_hazard": self.baseline_hazard.tolist(),
            "n_train": self.n_train,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CoxModel":
        return cls(
            feature_names=list(d["feature_names"]),
            beta=np.asarray(d["beta"], dtype=float),
            baseline_times=np.asarray(d["baseline_times"], dtype=float),
            baseline_hazard=np.asarray(d["baseline_hazard"], dtype=float),
            n_train=int(d.get("n_train", 0)),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "CoxModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def baseline_hazard(
    times: np.ndarray, events: np.ndarray, risk_scores: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Hazard mass d_i / sum of risk scores over the risk set, per distinct
    event time. With unit risk scores this reduces to Nelson-Aalen increments."""
    times = np.round(np.asarray(times, dtype=float), TIE_DECIMALS)
    events = np.asarray(events, dtype=bool)
    risk_scores = np.asarray(risk_scores, dtype=float)
    order = np.argsort(times, kind="mergesort")
    ts, ev, rs = times[order], events[order], risk_scores[order]
    suffix = np.cumsum(rs[::-1])[::-1]
    out_t, out_h = [], []
    start = 0
    n = len(ts)
    while start < n:
        stop = start
        while stop < n and ts[stop] == ts[start]:
            stop += 1
        d = int(ev[start:stop].sum())
        if d > 0:
            out_t.append(ts[start])
            out_h.append(d / suffix[start])
        start = stop
    return np.asarray(out_t), np.asarray(out_h)


def fit(
    X: np.ndarray,
    times: np.ndarray,
    events: np.ndarray,
    feature_names: Sequence[str] | None = None,
    max_iter: int = 100,
    grad_tol: float = 1e-7,
    ridge: float = 1e-6,
    condition_limit: float = 1e12,
) -> CoxModel:
    """Newton-Raphson with step halving on the Efron partial likelihood.

    Covariates are centered and scaled internally for conditioning; the
    returned coefficients are on the input scale. A ridge term stabilizes the
    Hessian when it is near-singular (collinear covariates).
    """
    X = np.asarray(X, dtype=float)
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=bool)
    _validate_inputs(X, times, events)
    if events.sum() < 2:
        raise DataError(f"fit needs at least 2 events, got {int(events.sum())}")
    n, p = X.shape
    names = list(feature_names) if feature_names is not None else [f"x{i}" for i in range(p)]
    if len(names) != p:
        raise ValidationError(f"{len(names)} feature names for {p} columns")

    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd = np.where(sd == 0.0, 1.0, sd)
    Xs = (X - mu) / sd

    beta = np.zeros(p)
    value, grad, hess = efron_partial_log_likelihood(beta, Xs, times, events)
    for _ in range(max_iter):
        if np.max(np.abs(grad)) < grad_tol:
            break
        neg_hess = -hess
        if not np.all(np.isfinite(neg_hess)) or np.linalg.cond(neg_hess) > condition_limit:
            neg_hess = neg_hess + ridge * np.eye(p)
        step = np.linalg.solve(neg_hess, grad)
        scale = 1.0
        # near the optimum the value only moves at rounding scale, so accept
        # steps that do not decrease it beyond float noise
        slack = 1e-9 * max(1.0, abs(value))
        for _ in range(40):
            candidate = beta + scale * step
            new_value, new_grad, new_hess = efron_partial_log_likelihood(
                candidate, Xs, times, events
            )
            if new_value > value - slack:
                beta, value, grad, hess = candidate, new_value, new_grad, new_hess
                break
            scale *= 0.5
        else:
            break  # no ascent direction left; convergence check decides below
    if np.max(np.abs(grad)) >= grad_tol:
        raise NumericalError(
            "Cox fit did not converge: final gradient max-norm "
            f"{np.max(np.abs(grad)):.3e} after {max_iter} iterations"
        )

    beta_raw = beta / sd
    base_t, base_h = baseline_hazard(times, events, _stable_risk(X, beta_raw))
    return CoxModel(
        feature_names=names,
        beta=beta_raw,
        baseline_times=base_t,
        baseline_hazard=base_h,
        n_train=n,
    )


def _stable_risk(X: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """exp(beta.x) for the baseline denominator; the hazard masses use the
    same raw-scale convention as predictions, so no shift is applied here
    beyond guarding the exponent range."""
    lin = X @ beta
    if np.max(lin) > 700.0 or np.min(lin) < -700.0:
        raise NumericalError("risk scores overflow; standardize covariates before fitting")
    return np.exp(lin)


def expected_survival_time(
    model: CoxModel,
    x: np.ndarray,
    condition_on_absence: bool = False,
    t_s: float = 0.0,
) -> float:
    """E[T | x], optionally conditioned on survival past the absence time t_s.

    The conditional form equals t_s plus the mean residual life, which never
    divides by an underflowing survival value.
    """
    if t_s < 0:
        raise ValidationError(f"absence time must be non-negative, got {t_s}")
    if condition_on_absence:
        return t_s + model.mean_residual(x, t_s)
    return model.mean_residual(x, 0.0)
