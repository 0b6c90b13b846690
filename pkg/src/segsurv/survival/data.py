"""Right-censored survival data container."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["SurvivalDataset"]


@dataclass
class SurvivalDataset:
    """Covariates plus (time, event) columns.

    ``event`` is 1 where progression was observed and 0 where the subject
    was censored. Times are positive follow-up days. A dataset may hold
    zero events (e.g. a censored-only test fold); fitters enforce their
    own event requirements.
    """

    X: np.ndarray
    time: np.ndarray
    event: np.ndarray
    feature_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.time = np.asarray(self.time, dtype=np.float64)
        self.event = np.asarray(self.event, dtype=np.int64)
        if self.X.ndim != 2:
            raise ValueError("X must be 2-d")
        n = self.X.shape[0]
        if self.time.shape != (n,) or self.event.shape != (n,):
            raise ValueError("time/event lengths do not match X rows")
        if not np.isfinite(self.X).all():
            raise ValueError("X contains non-finite values")
        if not np.isfinite(self.time).all() or (self.time <= 0).any():
            raise ValueError("times must be positive and finite")
        if not np.isin(self.event, (0, 1)).all():
            raise ValueError("event flags must be 0 or 1")
        if not self.feature_names:
            self.feature_names = [f"x{j}" for j in range(self.X.shape[1])]
        if len(self.feature_names) != self.X.shape[1]:
            raise ValueError("feature_names length does not match X columns")
        if len(set(self.feature_names)) != len(self.feature_names):
            raise ValueError("duplicate feature names")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def n_events(self) -> int:
        return int(self.event.sum())

    def subset(self, idx) -> "SurvivalDataset":
        idx = np.asarray(idx)
        return SurvivalDataset(self.X[idx], self.time[idx], self.event[idx],
                               list(self.feature_names))
