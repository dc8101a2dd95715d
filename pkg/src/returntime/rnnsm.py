"""Censored point-process likelihood on sequence-network outputs, training,
and expected-return-time prediction.

The conditional hazard after a step with network output o is
``lambda(dt) = exp(o + w*dt)`` for elapsed time dt since that step, giving

    log f(gap) = o + w*gap + (1/w)*exp(o) - (1/w)*exp(o + w*gap)
    log S(gap) =              (1/w)*exp(o) - (1/w)*exp(o + w*gap)

Returning gaps contribute log-density terms, a censored user's final gap a
log-survival term. Expected return times integrate S numerically; the
absence-conditioned expectation uses the identity
``E[T | T > t_s] = t_s + E_resid`` where the residual-life distribution has
the same form with o' = o + w*t_s.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import net
from .errors import DataError, NumericalError, ValidationError
from .features import PaddedBatch, SequenceStats, UserSequence, pad_batch
from .metrics import PredictionRecord
from .quadrature import integrate

logger = logging.getLogger(__name__)

EXP_LIMIT = 700.0  # exp() overflow guard; training clipping should keep us far below
_LOG_TAIL = math.log(1e-9)  # survival level that bounds the quadrature interval


def _check_exponent(value: float, what: str) -> None:
    if value > EXP_LIMIT:
        raise NumericalError(f"{what} exponent {value:.6g} exceeds {EXP_LIMIT:.0f}")


def hazard(o: float, w: float, dt: float) -> float:
    """Instantaneous return rate exp(o + w*dt) at elapsed time dt."""
    if w <= 0:
        raise ValidationError(f"current-influence weight w must be positive, got {w}")
    if dt < 0:
        raise ValidationError(f"elapsed time must be non-negative, got {dt}")
    expo = o + w * dt
    _check_exponent(expo, f"hazard(o={o:.6g}, w={w:.6g}, dt={dt:.6g})")
    return math.exp(expo)


def _gap_term(o: float, w: float, gap: float) -> float:
    """(exp(o + w*gap) - exp(o)) / w, grouped to avoid overflow and
    cancellation; equals the integrated hazard over [0, gap]."""
    z = w * gap
    _check_exponent(o + z, f"survival term (o={o:.6g}, w={w:.6g}, gap={gap:.6g})")
    _check_exponent(o, f"survival term (o={o:.6g})")
    if z <= 50.0:
        return math.exp(o) * math.expm1(z) / w
    return (math.exp(o + z) - math.exp(o)) / w


def log_survival(o: float, w: float, gap: float) -> float:
    """log S(gap): probability of no return within gap days of the step."""
    if w <= 0:
        raise ValidationError(f"current-influence weight w must be positive, got {w}")
    if gap < 0:
        raise ValidationError(f"gap must be non-negative, got {gap}")
    return -_gap_term(o, w, gap)


def log_density_return(o: float, w: float, gap: float) -> float:
    """log f(gap): log-likelihood of a return exactly gap days after the step."""
    if w <= 0:
        raise ValidationError(f"current-influence weight w must be positive, got {w}")
    if gap <= 0:
        raise ValidationError(f"return gap must be positive, got {gap}")
    return o + w * gap - _gap_term(o, w, gap)


@dataclass(frozen=True)
class SurvivalCurve:
    """Closed-form survival curve for the gap after one step."""

    o: float
    w: float
    reference_time: float = 0.0

    def log_survival(self, gap: float) -> float:
        return log_survival(self.o, self.w, gap)

    def survival(self, gap: float) -> float:
        return math.exp(self.log_survival(gap))

    def hazard(self, gap: float) -> float:
        return hazard(self.o, self.w, gap)

    def expected_gap(self) -> float:
        return expected_return_time(self.o, self.w)

    def conditioned_gap(self, t_s: float) -> float:
        return absence_conditioned_expectation(self.o, self.w, t_s)


# ---------------------------------------------------------------------------
# sequence loss

def _gap_term_array(o: np.ndarray, z: np.ndarray, w: float) -> np.ndarray:
    """Vectorized (exp(o + z) - exp(o)) / w with the same overflow grouping."""
    out = np.empty_like(o)
    small = z <= 50.0
    out[small] = np.exp(o[small]) * np.expm1(z[small]) / w
    big = ~small
    out[big] = (np.exp(o[big] + z[big]) - np.exp(o[big])) / w
    return out


def sequence_loss(
    o_seq: np.ndarray,
    targets: np.ndarray,
    is_censored: bool,
    w: float,
) -> tuple[float, np.ndarray]:
    """Negative log-likelihood of one user's gap sequence and d(loss)/d(o).

    Every step's target is the observed gap to the next step; the final
    step's target is the final gap, which contributes a survival term instead
    of a density term when the user is censored.
    """
    if w <= 0:
        raise ValidationError(f"current-influence weight w must be positive, got {w}")
    o_seq = np.asarray(o_seq, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if o_seq.shape != targets.shape or o_seq.ndim != 1 or o_seq.size == 0:
        raise ValidationError(
            f"outputs and targets must be equal-length 1-d sequences, got "
            f"{o_seq.shape} and {targets.shape}"
        )
    uncensored_targets = targets[:-1] if is_censored else targets
    if np.any(uncensored_targets <= 0):
        raise ValidationError("return gaps must be positive")
    if targets[-1] < 0:
        raise ValidationError("final gap must be non-negative")

    z = w * targets
    worst = float(np.max(np.maximum(o_seq + z, o_seq)))
    _check_exponent(worst, "sequence loss")
    A = _gap_term_array(o_seq, z, w)
    ll = o_seq + z - A
    grad = A - 1.0
    if is_censored:
        ll[-1] = -A[-1]
        grad[-1] = A[-1]
    return float(-np.sum(ll)), grad


def _batch_loss(
    o: np.ndarray,
    batch: PaddedBatch,
    w: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-user losses (B,) and grad_o (B, T) over a padded batch."""
    B, T = o.shape
    mask = np.arange(T)[None, :] < batch.lengths[:, None]
    z = w * batch.targets
    worst = float(np.max(np.maximum(o + z, o)[mask], initial=-np.inf))
    _check_exponent(worst, "batch loss")
    A = _gap_term_array(o, z, w)
    ll = o + z - A
    grad = A - 1.0
    rows = np.arange(B)
    last = batch.lengths - 1
    cens = batch.censored
    ll[rows[cens], last[cens]] = -A[rows[cens], last[cens]]
    grad[rows[cens], last[cens]] = A[rows[cens], last[cens]]
    ll = np.where(mask, ll, 0.0)
    grad = np.where(mask, grad, 0.0)
    losses = -ll.sum(axis=1)
    if not np.all(np.isfinite(losses)):
        raise NumericalError("non-finite loss in batch")
    return losses, grad


# ---------------------------------------------------------------------------
# expectations

def _survival_values(o: float, w: float, t: np.ndarray) -> np.ndarray:
    """S(t) for an array of gaps, saturating to 0 instead of overflowing."""
    z = w * np.asarray(t, dtype=float)
    with np.errstate(over="ignore"):
        small = z <= 50.0
        a = np.empty_like(z)
        a[small] = np.exp(o) * np.expm1(z[small]) / w
        a[~small] = (np.exp(o + z[~small]) - np.exp(o)) / w
        return np.exp(-a)


def expected_return_time(
    o: float,
    w: float,
    horizon_hint: float | None = None,
    abs_tol: float = 1e-8,
) -> float:
    """E[gap] = integral of S over (0, inf) by adaptive quadrature.

    The upper limit U is pushed out (doubling) until S(U) < 1e-9 and the
    analytic tail bound S(U)/hazard(U) is below half the tolerance; the tail
    remainder is then negligible and not added.
    """
    if w <= 0:
        raise ValidationError(f"current-influence weight w must be positive, got {w}")
    if not math.isfinite(o):
        raise ValidationError(f"network output must be finite, got {o}")
    if o > 600.0:
        # hazard at 0 is e^o, so the survival mass is exhausted within ~e^-o
        return math.exp(-o)

    if horizon_hint is not None and horizon_hint > 0:
        upper = 4.0 * horizon_hint
    else:
        # closed-form start: S(U) = 1e-9  <=>  w*U = log1p(-log(1e-9)*w*e^-o)
        x = math.log(-_LOG_TAIL * w) - o
        upper = float(np.logaddexp(0.0, x)) / w

    for _ in range(200):
        log_s = -_gap_term_safe(o, w, upper)
        if log_s < _LOG_TAIL:
            # tail bound: S(t) <= S(U) exp(-lambda(U)(t-U)) for t > U
            log_lambda = o + w * upper
            log_tail = log_s - log_lambda
            if log_tail < math.log(0.5 * abs_tol):
                break
        upper *= 2.0
    else:
        raise NumericalError(
            f"could not bound the survival tail for o={o:.6g}, w={w:.6g}"
        )
    return integrate(lambda t: _survival_values(o, w, t), 0.0, upper, abs_tol=abs_tol)


def _gap_term_safe(o: float, w: float, gap: float) -> float:
    """Integrated hazard like _gap_term, but saturating instead of raising."""
    z = w * gap
    if z <= 50.0:
        return math.exp(o) * math.expm1(z) / w
    expo = o + z
    if expo > EXP_LIMIT:
        return math.inf
    return (math.exp(expo) - math.exp(o)) / w


def absence_conditioned_expectation(
    o: float,
    w: float,
    t_s: float,
    horizon_hint: float | None = None,
) -> float:
    """E[gap | gap > t_s]: expected return time given t_s days of absence.

    Equals t_s plus the mean residual life, which has the same closed form
    with o' = o + w*t_s; this stays finite even when S(t_s) underflows.
    """
    if t_s < 0:
        raise ValidationError(f"absence time must be non-negative, got {t_s}")
    shifted = o + w * t_s
    if shifted > 600.0:
        logger.warning(
            "survival at absence time %.3g underflows (o=%.3g, w=%.3g); "
            "returning the absence time plus a vanishing residual",
            t_s, o, w,
        )
        return t_s + math.exp(-min(shifted, EXP_LIMIT))
    return t_s + expected_return_time(shifted, w, horizon_hint=horizon_hint)


# ---------------------------------------------------------------------------
# training

@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 25
    batch_size: int = 64
    learning_rate: float = 1e-3
    clip_norm: float = 5.0
    seed: int = 0


@dataclass
class RnnsmModel:
    params: dict[str, np.ndarray]
    net_config: net.NetConfig
    w: float
    stats: SequenceStats
    adam: net.AdamState | None = None
    loss_trace: list[float] = field(default_factory=list)
    diverged: bool = False


def initial_output_bias(mean_gap: float, w: float) -> float:
    """Bias such that the untrained model's expected gap matches the data.

    Without this, large w values start with hazards of exp(w * gap) on long
    censored gaps and spend most of the schedule recovering from the blowup.
    Solved by bisection; expected_return_time is strictly decreasing in o.
    """
    lo, hi = -30.0, 30.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if expected_return_time(mid, w) > mean_gap:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def train_rnnsm(
    sequences: list[UserSequence],
    net_config: net.NetConfig,
    stats: SequenceStats,
    w: float,
    config: TrainingConfig,
) -> RnnsmModel:
    """Minibatch Adam on the censored sequence loss; deterministic per seed.

    On divergence (non-finite loss or a tripped overflow guard) the last
    epoch-end parameters are restored and training stops early.
    """
    if w <= 0:
        raise ValidationError(f"current-influence weight w must be positive, got {w}")
    if not sequences:
        raise DataError("cannot train on an empty dataset")
    n_censored = sum(s.is_censored for s in sequences)
    if n_censored == 0 or n_censored == len(sequences):
        raise DataError(
            "training needs both returning and censored users, got "
            f"{len(sequences) - n_censored} returning / {n_censored} censored"
        )

    rng = np.random.default_rng(config.seed)
    params = net.init_params(net_config, rng)
    uncensored_gaps = np.concatenate([
        s.targets if not s.is_censored else s.targets[:-1] for s in sequences
    ])
    if uncensored_gaps.size:
        params["out_b"][0] = initial_output_bias(float(uncensored_gaps.mean()), w)
    state = net.AdamState.for_params(params)
    snapshot = {k: p.copy() for k, p in params.items()}
    trace: list[float] = []
    diverged = False

    for epoch in range(config.epochs):
        order = rng.permutation(len(sequences))
        total = 0.0
        try:
            for start in range(0, len(order), config.batch_size):
                idx = order[start:start + config.batch_size]
                batch = pad_batch([sequences[i] for i in idx])
                o, _, cache = net.forward_batch(
                    params, net_config, batch.disc, batch.cont, batch.lengths
                )
                losses, grad_o = _batch_loss(o, batch, w)
                total += float(losses.sum())
                grads = net.backward_batch(
                    params, net_config, cache, grad_o / len(idx)
                )
                net.apply_update_with_norm_projection(
                    params, grads, state,
                    lr=config.learning_rate, clip_norm=config.clip_norm,
                )
            epoch_loss = total / len(sequences)
            if not math.isfinite(epoch_loss):
                raise NumericalError(f"epoch {epoch} mean loss is {epoch_loss}")
        except NumericalError as exc:
            logger.warning("training diverged at epoch %d (%s); restoring last good "
                           "parameters", epoch, exc)
            params = snapshot
            diverged = True
            break
        trace.append(epoch_loss)
        snapshot = {k: p.copy() for k, p in params.items()}

    return RnnsmModel(
        params=params, net_config=net_config, w=w, stats=stats,
        adam=state, loss_trace=trace, diverged=diverged,
    )


# ---------------------------------------------------------------------------
# prediction

def _last_outputs(
    model: RnnsmModel, sequences: list[UserSequence], chunk: int = 256
) -> np.ndarray:
    out = np.empty(len(sequences))
    for start in range(0, len(sequences), chunk):
        part = sequences[start:start + chunk]
        batch = pad_batch(part)
        o, _, _ = net.forward_batch(
            model.params, model.net_config, batch.disc, batch.cont, batch.lengths
        )
        out[start:start + len(part)] = o[np.arange(len(part)), batch.lengths - 1]
    return out


def predict(
    model: RnnsmModel,
    sequences: list[UserSequence],
    condition_on_absence: bool = False,
    horizon_hint: float | None = None,
    threads: int = 1,
) -> list[PredictionRecord]:
    """Expected return gap per user, measured from their last session end.

    With condition_on_absence the expectation is conditioned on the user
    having been absent since the prediction-window start.
    """
    o_last = _last_outputs(model, sequences)

    def one(i: int) -> PredictionRecord:
        seq = sequences[i]
        curve = SurvivalCurve(o=float(o_last[i]), w=model.w)
        if condition_on_absence:
            gap = absence_conditioned_expectation(
                curve.o, curve.w, seq.absence_time, horizon_hint=horizon_hint
            )
        else:
            gap = expected_return_time(curve.o, curve.w, horizon_hint=horizon_hint)
        final = float(seq.targets[-1])
        return PredictionRecord(
            user_id=seq.user_id,
            predicted_return_days=gap,
            true_return_days=None if seq.is_censored else final,
            censored_lower_bound_days=final if seq.is_censored else None,
            horizon_gap_days=seq.horizon_gap,
            active_day_count=seq.active_day_count,
            last_session_end_days=seq.last_session_end,
        )

    indices = range(len(sequences))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, indices))
    return [one(i) for i in indices]


# ---------------------------------------------------------------------------
# persistence

def save_model(path: str | Path, model: RnnsmModel, kind: str = "rnnsm") -> None:
    net.save_checkpoint(
        path,
        model.params,
        model.net_config,
        state=model.adam,
        extra={
            "kind": kind,
            "w": model.w,
            "stats": model.stats.to_dict(),
            "loss_trace": model.loss_trace,
            "diverged": model.diverged,
        },
    )


def load_model(path: str | Path, expect_kind: str = "rnnsm") -> RnnsmModel:
    from .errors import DataModelMismatchError

    params, config, state, extra = net.load_checkpoint(path)
    if extra.get("kind") != expect_kind:
        raise DataModelMismatchError(
            f"checkpoint at {path} holds a {extra.get('kind')!r} model, "
            f"expected {expect_kind!r}"
        )
    return RnnsmModel(
        params=params,
        net_config=config,
        w=float(extra["w"]),
        stats=SequenceStats.from_dict(extra["stats"]),
        adam=state,
        loss_trace=list(extra.get("loss_trace", [])),
        diverged=bool(extra.get("diverged", False)),
    )
