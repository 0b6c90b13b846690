"""Survival model evaluation: Harrell's concordance, cross-validation
splits, and the variance-corrected paired t-test for CV score vectors.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import stats

from .data import SurvivalDataset

__all__ = ["concordance_index", "corrected_paired_ttest", "kfold_cv",
           "cv_scores"]


def concordance_index(risk, time, event) -> float:
    """Fraction of correctly ordered comparable pairs.

    A pair (i, j) is comparable when time_i < time_j and subject i had
    the event; equal times are never comparable. The pair counts as
    concordant when risk_i > risk_j, and tied risks contribute half.
    """
    risk = np.asarray(risk, dtype=np.float64)
    time = np.asarray(time, dtype=np.float64)
    event = np.asarray(event, dtype=np.int64)
    if not (risk.shape == time.shape == event.shape) or risk.ndim != 1:
        raise ValueError("risk, time, event must be 1-d arrays of equal length")

    total = 0
    concordant = 0.0
    for i in np.flatnonzero(event == 1):
        later = time > time[i]
        total += int(later.sum())
        concordant += float((risk[i] > risk[later]).sum())
        concordant += 0.5 * float((risk[i] == risk[later]).sum())
    if total == 0:
        raise ValueError("no comparable pairs")
    return concordant / total


def corrected_paired_ttest(scores_a, scores_b, n_train: int,
                           n_test: int) -> tuple[float, float]:
    """Variance-corrected paired t-test for k-fold CV score vectors.

    t = mean(d) / sqrt((1/k + n_test/n_train) * var(d)) with the sample
    variance (k-1 denominator); two-sided p from Student t with k-1
    degrees of freedom. The correction inflates the variance to account
    for overlapping training sets across folds.
    """
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValueError("need two equal-length score vectors with k >= 2")
    if n_train <= 0 or n_test <= 0:
        raise ValueError("n_train and n_test must be positive")
    d = a - b
    k = d.size
    mean = float(d.mean())
    var = float(d.var(ddof=1))
    if var == 0.0:
        if mean == 0.0:
            return 0.0, 1.0
        return math.copysign(math.inf, mean), 0.0
    t = mean / math.sqrt((1.0 / k + n_test / n_train) * var)
    p = 2.0 * float(stats.t.sf(abs(t), df=k - 1))
    return t, p


def kfold_cv(data: SurvivalDataset, k: int = 5, stratify_by_event: bool = False,
             seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Deterministic seeded k-fold partition as (train, test) index pairs.

    Stratified splitting distributes events and censored subjects to
    folds separately, so per-fold event counts differ by at most one.
    """
    n = data.n
    if n < k:
        raise ValueError(f"need at least {k} samples, got {n}")
    rng = np.random.default_rng(seed)
    fold_of = np.empty(n, dtype=np.int64)
    if stratify_by_event:
        if data.n_events < k:
            raise ValueError(f"stratified {k}-fold needs >= {k} events, "
                             f"got {data.n_events}")
        for flag in (1, 0):
            members = np.flatnonzero(data.event == flag)
            members = members[rng.permutation(members.size)]
            fold_of[members] = np.arange(members.size) % k
    else:
        perm = rng.permutation(n)
        fold_of[perm] = np.arange(n) % k
    splits = []
    for f in range(k):
        test = np.flatnonzero(fold_of == f)
        train = np.flatnonzero(fold_of != f)
        splits.append((train, test))
    return splits


def cv_scores(data: SurvivalDataset, fitter, k: int = 5, seed: int = 0,
              stratify_by_event: bool = True) -> list[float]:
    """Held-out concordance per fold.

    ``fitter`` maps a training SurvivalDataset to a risk function over
    feature matrices. Folds are stratified by event by default so every
    test fold has comparable pairs.
    """
    scores = []
    for train_idx, test_idx in kfold_cv(data, k=k,
                                        stratify_by_event=stratify_by_event,
                                        seed=seed):
        risk_fn = fitter(data.subset(train_idx))
        test = data.subset(test_idx)
        scores.append(concordance_index(risk_fn(test.X), test.time, test.event))
    return scores
