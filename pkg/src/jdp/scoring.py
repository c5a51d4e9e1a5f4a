"""Censoring-corrected time-dependent Brier score and cross-validation
summary statistics (mean, standard error, normal confidence interval)."""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class SubjectLoss:
    subject_id: str
    loss: float
    branch: str  # "survived" | "event" | "censored"


@dataclass(frozen=True)
class BrierEstimate:
    value: float
    at_risk_count: int
    t: float
    u: float


def subject_loss(
    subject_id: str,
    observed_time: float,
    event: bool,
    pi_u_given_t: float,
    pi_u_given_Tj: float | None,
    t: float,
    u: float,
) -> SubjectLoss:
    """Quadratic prediction loss for one at-risk subject.

    Exactly one branch applies: survived past u; observed event before u;
    or censored before u, in which case the loss is the mixture
    pi(u|Tj)*(1-pi(u|t))^2 + (1-pi(u|Tj))*pi(u|t)^2 and `pi_u_given_Tj`
    is required. Subjects censored exactly at u count as survivors.
    """
    if observed_time < t:
        raise ValueError(
            f"subject {subject_id!r} not at risk at t={t} (observed {observed_time})"
        )
    if not (0.0 <= pi_u_given_t <= 1.0):
        raise ValueError(f"pi_u_given_t must be in [0,1], got {pi_u_given_t}")
    if observed_time >= u:
        return SubjectLoss(subject_id, (1.0 - pi_u_given_t) ** 2, "survived")
    if event:
        return SubjectLoss(subject_id, pi_u_given_t**2, "event")
    if pi_u_given_Tj is None:
        raise ValueError(
            f"subject {subject_id!r} censored before u={u}: pi_u_given_Tj required"
        )
    if not (0.0 <= pi_u_given_Tj <= 1.0):
        raise ValueError(f"pi_u_given_Tj must be in [0,1], got {pi_u_given_Tj}")
    mix = pi_u_given_Tj * (1.0 - pi_u_given_t) ** 2 + (1.0 - pi_u_given_Tj) * pi_u_given_t**2
    return SubjectLoss(subject_id, mix, "censored")


def brier(losses, at_risk_count: int, t: float, u: float) -> BrierEstimate:
    """Average the per-subject losses over the at-risk set (exact
    compensated summation, so the estimate is permutation-invariant)."""
    losses = list(losses)
    if at_risk_count < 1:
        raise ValueError("at_risk_count must be >= 1")
    if at_risk_count != len(losses):
        raise ValueError(
            f"at_risk_count {at_risk_count} does not match {len(losses)} contributing losses"
        )
    return BrierEstimate(
        math.fsum(l.loss for l in losses) / at_risk_count, at_risk_count, t, u
    )


def cv_standard_error(values) -> tuple[float, float]:
    """Sample mean and SE = sd / sqrt(n) over fold-level estimates."""
    values = [float(v) for v in values]
    n = len(values)
    if n < 2:
        raise ValueError("need at least 2 values for a standard error")
    mean = math.fsum(values) / n
    var = math.fsum((v - mean) ** 2 for v in values) / (n - 1)
    return mean, math.sqrt(var) / math.sqrt(n)


def normal_quantile(p: float) -> float:
    """Inverse standard-normal CDF via a rational approximation refined by
    one Halley step on erfc, accurate to well below 1e-9."""
    if not (0.0 < p < 1.0):
        raise ValueError(f"p must be in (0, 1), got {p}")
    # Acklam's rational approximation (relative error ~1.15e-9).
    a = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
         1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
    b = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
         6.680131188771972e+01, -1.328068155288572e+01)
    c = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
         -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
    d = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
         3.754408661907416e+00)
    p_low, p_high = 0.02425, 1.0 - 0.02425
    if p < p_low:
        q = math.sqrt(-2.0 * math.log(p))
        x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / \
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0)
    elif p <= p_high:
        q = p - 0.5
        r = q * q
        x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q / \
            (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0)
    else:
        q = math.sqrt(-2.0 * math.log(1.0 - p))
        x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / \
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0)
    # One Halley refinement: solve Phi(x) = p using erfc.
    err = 0.5 * math.erfc(-x / math.sqrt(2.0)) - p
    pdf = math.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    if pdf > 0.0:
        un = err / pdf
        x -= un / (1.0 + 0.5 * x * un)
    return x


def confidence_interval(mean: float, se: float, level: float) -> tuple[float, float]:
    """Symmetric normal interval mean +- z_{1-(1-level)/2} * se."""
    if se < 0:
        raise ValueError(f"se must be >= 0, got {se}")
    if not (0.0 < level < 1.0):
        raise ValueError(f"level must be in (0, 1), got {level}")
    z = normal_quantile(0.5 + level / 2.0)
    return mean - z * se, mean + z * se
