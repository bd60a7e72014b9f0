"""Update rules for quadratic regularization and explicit movement regularization.

Quadratic regularization adds ``lam/2 * sum_k alpha_k (theta_k - theta*_k)^2`` to
the task loss. One SGD step on that objective is a weighted average between the
current and the anchor parameters (weight ``eta*lam*alpha``) plus a plain task
gradient step, so its behaviour hinges on the product ``eta*lam*alpha``.

Explicit movement regularization (EMR) decouples the two: a task gradient step
first, then an explicit average with the anchor using weights ``R`` in [0, 1].
"""

import math
from dataclasses import dataclass

import numpy as np

from ._validation import as_vector, check_same_length, check_unit_interval
from .exceptions import DivergenceError

MODES = ("plain", "quadratic", "emr")
UNBOUNDED = math.inf


@dataclass(frozen=True)
class RegConfig:
    eta: float
    lam: float = 0.0
    mode: str = "plain"

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError("learning rate must be positive")
        if not self.lam >= 0:
            raise ValueError("regularization constant must be non-negative")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; choose from {MODES}")


def _finite_or_raise(theta, what):
    if not np.all(np.isfinite(theta)):
        bad = int(np.flatnonzero(~np.isfinite(theta))[0])
        raise DivergenceError(f"{what} produced a non-finite parameter at index {bad}",
                              {"stable": False, "first_nonfinite_index": bad})
    return theta


def quad_reg_step(theta, theta_star, alpha, grad, eta, lam):
    """One SGD step on the quadratically regularized loss.

    ``theta' = (1 - eta*lam*alpha) * theta + eta*lam*alpha * theta_star - eta * grad``
    """
    theta, theta_star, alpha, grad = check_same_length(
        theta=theta, theta_star=theta_star, alpha=alpha, grad=grad)
    w = eta * lam * alpha
    with np.errstate(over="ignore", invalid="ignore"):
        out = (1.0 - w) * theta + w * theta_star - eta * grad
    return _finite_or_raise(out, "quadratic step")


def quad_unrolled(theta_star, grads, alpha, eta, lam):
    """Closed form of ``len(grads)`` quadratic steps started at ``theta_star``."""
    theta_star = as_vector(theta_star, "theta_star")
    alpha = as_vector(alpha, "alpha")
    grads = [as_vector(g, "grad") for g in grads]
    if not grads:
        return theta_star.copy()
    g = np.stack(grads)
    if g.shape[1] != theta_star.shape[0] or alpha.shape != theta_star.shape:
        raise ValueError("length mismatch between theta_star, alpha and grads")
    i = g.shape[0]
    powers = np.arange(i - 1, -1, -1, dtype=np.float64)[:, None]  # i - j - 1
    base = 1.0 - eta * lam * alpha
    return theta_star - np.sum(base[None, :] ** powers * eta * g, axis=0)


def lambda_upper(eta, alpha):
    """Largest stable regularization constant, ``1 / (eta * max|alpha|)``.

    Returns :data:`UNBOUNDED` when every score is zero.
    """
    if not eta > 0:
        raise ValueError("learning rate must be positive")
    peak = float(np.max(np.abs(as_vector(alpha, "alpha"))))
    return UNBOUNDED if peak == 0.0 else 1.0 / (eta * peak)


def count_violations(eta, lam, alpha):
    """Number and fraction of parameters with ``eta*lam*|alpha| > 1``."""
    if eta < 0 or lam < 0:
        raise ValueError("eta and lam must be non-negative")
    alpha = as_vector(alpha, "alpha")
    count = int(np.count_nonzero(eta * lam * np.abs(alpha) > 1.0))
    return count, (count / alpha.shape[0] if alpha.shape[0] else 0.0)


def format_violations(count, total):
    """Human summary like ``"16 (0.001% parameters)"``.

    The percentage is truncated to one significant digit.
    """
    if count == 0:
        return "0 (0% parameters)"
    pct = 100.0 * count / total
    exponent = math.floor(math.log10(pct))
    digits = max(-exponent, 0)
    truncated = math.floor(pct / 10.0 ** exponent + 1e-9) * 10.0 ** exponent
    return f"{count} ({truncated:.{digits}f}% parameters)"


def averaging_ratio(alpha, index):
    """``|alpha[index]| / max|alpha|``: the largest stable averaging weight for ``index``."""
    alpha = np.abs(as_vector(alpha, "alpha"))
    peak = alpha.max() if alpha.size else 0.0
    if peak == 0.0:
        raise ValueError("averaging ratio is undefined when all scores are zero")
    return float(alpha[index] / peak)


def relative_importance(alpha_prev, alpha_task):
    """Averaging weights ``sqrt|prev| / (sqrt|task| + sqrt|prev|)``; zero where both vanish."""
    alpha_prev, alpha_task = check_same_length(alpha_prev=alpha_prev, alpha_task=alpha_task)
    sp = np.sqrt(np.abs(alpha_prev))
    st = np.sqrt(np.abs(alpha_task))
    denom = sp + st
    out = np.zeros_like(sp)
    np.divide(sp, denom, out=out, where=denom > 0)
    return out


def emr_average(theta_hat, theta_star, R):
    """Phase two of an EMR step: ``(1 - R) * theta_hat + R * theta_star``."""
    theta_hat, theta_star, R = check_same_length(theta_hat=theta_hat, theta_star=theta_star, R=R)
    check_unit_interval(R, "R")
    return (1.0 - R) * theta_hat + R * theta_star


def emr_step(theta, theta_star, grad, eta, R):
    """Task gradient step followed by explicit averaging with ``theta_star``."""
    theta, grad = check_same_length(theta=theta, grad=grad)
    theta_hat = theta - eta * grad
    return _finite_or_raise(emr_average(theta_hat, theta_star, R), "EMR step")


def emr_unrolled(theta_star, grads, eta, R_seq):
    """Closed form of iterated EMR steps from ``theta_star``.

    Gradient ``g_j`` is scaled by ``eta * prod_{m=j}^{i-1} (1 - R_m)``.
    """
    theta_star = as_vector(theta_star, "theta_star")
    if len(grads) != len(R_seq):
        raise ValueError("need exactly one R vector per gradient")
    if not grads:
        return theta_star.copy()
    g = np.stack([as_vector(x, "grad") for x in grads])
    keep = 1.0 - np.stack([check_unit_interval(r, "R") for r in R_seq])
    if g.shape != keep.shape or g.shape[1] != theta_star.shape[0]:
        raise ValueError("length mismatch between theta_star, grads and R")
    # suffix products: tail[j] = prod_{m >= j} keep[m]
    tail = np.cumprod(keep[::-1], axis=0)[::-1]
    return theta_star - np.sum(tail * eta * g, axis=0)


def proximal_coefficients(R):
    """Penalty weights ``R / (1 - R)`` of the equivalent proximal problem.

    Entries with ``R == 1`` map to :data:`UNBOUNDED`.
    """
    R = check_unit_interval(R, "R")
    out = np.full_like(R, UNBOUNDED)
    np.divide(R, 1.0 - R, out=out, where=R < 1.0)
    return out


def stability_phase(product):
    """Qualitative behaviour of the anchor gap under zero gradients.

    With ``p = eta*lam*alpha`` the gap evolves as ``(1 - p)^i``: it flips sign
    every step when ``p > 1`` and grows geometrically when ``|1 - p| > 1``.
    """
    base = 1.0 - product
    return {"alternates": bool(base < 0), "diverges": bool(abs(base) > 1)}


def homogeneous_gaps(theta0, theta_star, alpha, eta, lam, steps):
    """Gap ``theta_i - theta*`` under repeated quadratic steps with zero task gradient."""
    theta = as_vector(theta0, "theta0").copy()
    theta_star = as_vector(theta_star, "theta_star")
    zeros = np.zeros_like(theta)
    gaps = [theta - theta_star]
    for _ in range(steps):
        theta = quad_reg_step(theta, theta_star, alpha, zeros, eta, lam)
        gaps.append(theta - theta_star)
    return np.stack(gaps)


def stability_report(eta, lam, alpha, first_nonfinite_step=None, stable=None):
    """JSON-ready summary of the violation count and observed stability."""
    count, fraction = count_violations(eta, lam, alpha)
    if stable is None:
        stable = first_nonfinite_step is None
    return {
        "lambda": lam,
        "eta": eta,
        "violations": count,
        "fraction": fraction,
        "stable": bool(stable),
        "first_nonfinite_step": first_nonfinite_step,
    }
