"""Cox proportional hazards: partial likelihood, Newton fitting, and the
Breslow baseline hazard.

Tied event times share one risk set (Breslow handling). All risk-set
log-sum-exp terms are computed against a global shift so large risk
scores cannot overflow.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import SurvivalDataset

__all__ = ["CoxModel", "neg_log_partial_likelihood",
           "partial_likelihood_grad_eta", "fit_coxph", "cox_risk"]


@dataclass
class CoxModel:
    beta: np.ndarray
    baseline_times: np.ndarray     # unique event times, increasing
    baseline_cumhaz: np.ndarray    # Breslow cumulative hazard at those times
    n_iter: int
    grad_norm: float
    feature_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=np.float64)
        if not np.isfinite(self.beta).all():
            raise ValueError("beta must be finite")
        if np.any(np.diff(self.baseline_cumhaz) < 0):
            raise ValueError("baseline cumulative hazard must be non-decreasing")

    def to_dict(self) -> dict:
        return {
            "model": "coxph",
            "beta": self.beta.tolist(),
            "baseline_times": np.asarray(self.baseline_times).tolist(),
            "baseline_cumhaz": np.asarray(self.baseline_cumhaz).tolist(),
            "n_iter": self.n_iter,
            "grad_norm": self.grad_norm,
            "feature_names": list(self.feature_names),
        }

    @staticmethod
    def from_dict(d: dict) -> "CoxModel":
        return CoxModel(beta=np.array(d["beta"], dtype=np.float64),
                        baseline_times=np.array(d["baseline_times"]),
                        baseline_cumhaz=np.array(d["baseline_cumhaz"]),
                        n_iter=int(d["n_iter"]),
                        grad_norm=float(d["grad_norm"]),
                        feature_names=list(d["feature_names"]))


def _risk_set_layout(time, event):
    """Sorted layout shared by the likelihood, gradients, and baseline.

    Returns (order, start) where ``order`` sorts times ascending and
    ``start[i]`` is, for the i-th sorted subject, the first sorted index
    of its risk set {j: t_j >= t_i} (ties collapse to one risk set).
    """
    time = np.asarray(time, dtype=np.float64)
    order = np.argsort(time, kind="stable")
    t_sorted = time[order]
    start = np.searchsorted(t_sorted, t_sorted, side="left")
    return order, t_sorted, start


def _check_survival_args(eta, time, event):
    eta = np.asarray(eta, dtype=np.float64)
    time = np.asarray(time, dtype=np.float64)
    event = np.asarray(event, dtype=np.int64)
    if not (eta.shape == time.shape == event.shape) or eta.ndim != 1:
        raise ValueError("eta, time, event must be 1-d arrays of equal length")
    if event.sum() == 0:
        raise ValueError("no events: partial likelihood is undefined")
    return eta, time, event


def _log_suffix_sums(eta_s) -> np.ndarray:
    """log(sum of exp(eta) over sorted positions >= i), running logaddexp
    from the tail so any spread of risk scores stays exact."""
    return np.logaddexp.accumulate(eta_s[::-1])[::-1]


def neg_log_partial_likelihood(eta, time, event) -> float:
    """-sum over events of [eta_i - log(sum of exp(eta_j) over the risk
    set at t_i)], with Breslow tie handling."""
    eta, time, event = _check_survival_args(eta, time, event)
    order, _, start = _risk_set_layout(time, event)
    eta_s = eta[order]
    ev_s = event[order]
    terms = eta_s - _log_suffix_sums(eta_s)[start]
    return float(-terms[ev_s == 1].sum())


def partial_likelihood_grad_eta(eta, time, event) -> np.ndarray:
    """Gradient of the negative log partial likelihood in the risk
    scores: -delta_i + exp(eta_i) * sum over events whose risk set
    contains i of 1/denominator."""
    eta, time, event = _check_survival_args(eta, time, event)
    order, _, start = _risk_set_layout(time, event)
    eta_s = eta[order]
    ev_s = event[order]
    log_suffix = _log_suffix_sums(eta_s)
    # each event deposits its reciprocal denominator at its risk-set
    # start; subject k belongs to every risk set starting at or before
    # its sorted position, so a running log-sum picks them all up
    st = start[ev_s == 1]
    contrib = np.full(eta.size, -np.inf)
    np.logaddexp.at(contrib, st, -log_suffix[st])
    log_coef = np.logaddexp.accumulate(contrib)
    grad_sorted = -ev_s.astype(np.float64) + np.exp(eta_s + log_coef)
    grad = np.empty_like(grad_sorted)
    grad[order] = grad_sorted
    return grad


def _nll_grad_hess(X, eta, time, event):
    """Value, gradient, and Hessian of the NLL in beta."""
    order, _, start = _risk_set_layout(time, event)
    Xs = X[order]
    eta_s = eta[order]
    ev_s = event[order]
    m = eta_s.max()
    w = np.exp(eta_s - m)

    s0 = np.cumsum(w[::-1])[::-1]                      # suffix sums of w
    s1 = np.cumsum((w[:, None] * Xs)[::-1], axis=0)[::-1]  # of w*x
    wxx = w[:, None, None] * (Xs[:, :, None] * Xs[:, None, :])
    s2 = np.cumsum(wxx[::-1], axis=0)[::-1]            # of w*x*x^T

    ev_pos = np.flatnonzero(ev_s == 1)
    st = start[ev_pos]
    den = s0[st]
    xbar = s1[st] / den[:, None]

    nll = float(-(eta_s[ev_pos] - (m + np.log(den))).sum())
    grad = (xbar - Xs[ev_pos]).sum(axis=0)
    hess = (s2[st] / den[:, None, None]
            - xbar[:, :, None] * xbar[:, None, :]).sum(axis=0)
    return nll, grad, hess


def fit_coxph(data: SurvivalDataset, ridge: float = 0.0) -> CoxModel:
    """Newton-Raphson on the Breslow partial likelihood.

    Convergence requires gradient infinity-norm below 1e-7 within 100
    iterations; steps that would increase the objective are halved. When
    objective improvements drop under float resolution before that, a
    gradient below 1e-5 is accepted as converged. An optional ridge term
    0.5*ridge*|beta|^2 stabilizes near-separable designs.
    """
    if data.n_events == 0:
        raise ValueError("no events: cannot fit")
    if ridge < 0:
        raise ValueError("ridge must be >= 0")
    spans = data.X.max(axis=0) - data.X.min(axis=0)
    if (spans == 0).any():
        name = data.feature_names[int(np.flatnonzero(spans == 0)[0])]
        raise ValueError(f"constant column {name!r}: coefficient unidentifiable")
    if data.n <= data.p:
        warnings.warn(f"n={data.n} <= p={data.p}: fit may be unstable")

    beta = np.zeros(data.p)

    def objective(b):
        nll = neg_log_partial_likelihood(data.X @ b, data.time, data.event)
        return nll + 0.5 * ridge * float(b @ b)

    obj = objective(beta)
    grad_norm = np.inf
    converged = False
    n_iter = 0
    for n_iter in range(1, 101):
        eta = data.X @ beta
        _, grad, hess = _nll_grad_hess(data.X, eta, data.time, data.event)
        grad = grad + ridge * beta
        hess = hess + ridge * np.eye(data.p)
        grad_norm = float(np.abs(grad).max())
        if grad_norm < 1e-7:
            converged = True
            break
        # once the remaining objective decrease is below float resolution
        # the line search cannot certify progress; a small gradient there
        # is the optimum to machine precision, not a failure
        stagnant_ok = grad_norm < 1e-5
        try:
            step = np.linalg.solve(hess, -grad)
        except np.linalg.LinAlgError:
            step = -grad
        t = 1.0
        while t > 1e-12:
            trial = beta + t * step
            trial_obj = objective(trial)
            if np.isfinite(trial_obj) and trial_obj <= obj:
                break
            t *= 0.5
        else:
            if stagnant_ok:
                converged = True
                break
            raise RuntimeError(
                "Cox fit stalled: no descent step found "
                f"(iter {n_iter}, grad norm {grad_norm:.3e}, "
                f"|beta| {np.abs(beta).max():.3e}); "
                "likely monotone likelihood / separation, try ridge > 0")
        improvement = obj - trial_obj
        beta = trial
        obj = trial_obj
        if stagnant_ok and improvement <= 1e-13 * max(1.0, abs(obj)):
            converged = True
            break
    if not converged:
        raise RuntimeError(
            "Cox fit did not converge in 100 iterations "
            f"(grad norm {grad_norm:.3e}, |beta| {np.abs(beta).max():.3e}); "
            "likely monotone likelihood / separation, try ridge > 0")

    # a gradient below tolerance can also mean the likelihood is monotone
    # and exp terms have saturated; a hazard ratio above e^30 across the
    # observed span of any feature is a separation, not an estimate
    scaled = np.abs(beta) * spans
    if (scaled > 30.0).any():
        j = int(np.argmax(scaled))
        raise RuntimeError(
            f"separation on feature {data.feature_names[j]!r}: "
            f"|beta|={abs(beta[j]):.3g} over observed span {spans[j]:.3g}; "
            "try ridge > 0")

    times, cumhaz = _breslow_baseline(data, beta)
    return CoxModel(beta=beta, baseline_times=times, baseline_cumhaz=cumhaz,
                    n_iter=n_iter, grad_norm=grad_norm,
                    feature_names=list(data.feature_names))


def _breslow_baseline(data: SurvivalDataset, beta):
    eta = data.X @ beta
    order, t_sorted, start = _risk_set_layout(data.time, data.event)
    eta_s = eta[order]
    ev_s = data.event[order]
    log_suffix = _log_suffix_sums(eta_s)

    event_times = t_sorted[ev_s == 1]
    uniq = np.unique(event_times)
    increments = np.zeros(uniq.size)
    for k, t in enumerate(uniq):
        pos = np.searchsorted(t_sorted, t, side="left")
        d = int(((t_sorted == t) & (ev_s == 1)).sum())
        increments[k] = d * np.exp(-log_suffix[pos])
    return uniq, np.cumsum(increments)


def cox_risk(model: CoxModel, X_new) -> np.ndarray:
    """Linear predictor eta = X @ beta; higher means higher hazard."""
    X_new = np.asarray(X_new, dtype=np.float64)
    if X_new.ndim != 2 or X_new.shape[1] != model.beta.size:
        raise ValueError(f"expected {model.beta.size} features, "
                         f"got shape {X_new.shape}")
    return X_new @ model.beta
