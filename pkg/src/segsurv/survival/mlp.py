"""Neural Cox model: a small fully-connected network producing one
linear risk score per subject, trained on the negative log partial
likelihood plus an L2 weight penalty.

Training is full-batch gradient descent with momentum so every step sees
exact risk sets; mini-batching would truncate them. Dropout (inverted
scaling) is applied to hidden activations during training only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cox import neg_log_partial_likelihood, partial_likelihood_grad_eta
from .data import SurvivalDataset

__all__ = ["MlpSurvModel", "fit_mlp_cox", "mlp_risk", "mlp_loss_and_grads"]


@dataclass
class MlpSurvModel:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    dropout: float
    l2: float
    loss_history: list[float] = field(default_factory=list)
    feature_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.weights[-1].shape[1] != 1:
            raise ValueError("output layer must have one unit")
        for W in self.weights:
            if not np.isfinite(W).all():
                raise ValueError("non-finite weights")

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [W.shape[1] for W in self.weights]

    def to_dict(self) -> dict:
        return {
            "model": "mlpcox",
            "weights": [W.tolist() for W in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "dropout": self.dropout,
            "l2": self.l2,
            "loss_history": [float(v) for v in self.loss_history],
            "feature_names": list(self.feature_names),
        }

    @staticmethod
    def from_dict(d: dict) -> "MlpSurvModel":
        return MlpSurvModel(
            weights=[np.array(W, dtype=np.float64) for W in d["weights"]],
            biases=[np.array(b, dtype=np.float64) for b in d["biases"]],
            dropout=float(d["dropout"]), l2=float(d["l2"]),
            loss_history=list(d["loss_history"]),
            feature_names=list(d["feature_names"]))


def _forward(weights, biases, X, masks=None):
    """Returns (eta, activations per layer input, hidden pre-activations)."""
    acts = [X]
    zs = []
    a = X
    for i in range(len(weights) - 1):
        z = a @ weights[i] + biases[i]
        zs.append(z)
        a = np.maximum(z, 0.0)
        if masks is not None:
            a = a * masks[i]
        acts.append(a)
    eta = (a @ weights[-1] + biases[-1]).ravel()
    return eta, acts, zs


def mlp_loss_and_grads(model: MlpSurvModel, X, time, event, masks=None):
    """Objective and its analytic gradients in every weight and bias.

    The objective is the negative log partial likelihood of the network
    outputs plus l2 * sum of squared weights (biases unpenalized). Pass
    ``masks`` (per-hidden-layer, already inverted-scaled) to evaluate the
    dropout-perturbed training objective.
    """
    weights, biases, l2 = model.weights, model.biases, model.l2
    eta, acts, zs = _forward(weights, biases, X, masks)
    nll = neg_log_partial_likelihood(eta, time, event)
    loss = nll + l2 * sum(float((W ** 2).sum()) for W in weights)

    d_eta = partial_likelihood_grad_eta(eta, time, event)
    delta = d_eta[:, None]
    grads_W = [None] * len(weights)
    grads_b = [None] * len(biases)
    grads_W[-1] = acts[-1].T @ delta + 2.0 * l2 * weights[-1]
    grads_b[-1] = delta.sum(axis=0)
    back = delta @ weights[-1].T
    for i in reversed(range(len(weights) - 1)):
        if masks is not None:
            back = back * masks[i]
        dz = back * (zs[i] > 0.0)
        grads_W[i] = acts[i].T @ dz + 2.0 * l2 * weights[i]
        grads_b[i] = dz.sum(axis=0)
        if i > 0:
            back = dz @ weights[i].T
    return loss, grads_W, grads_b


def _init_params(sizes, rng):
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return weights, biases


def fit_mlp_cox(data: SurvivalDataset, hidden=32, dropout: float = 0.2,
                l2: float = 0.0, epochs: int = 100, lr: float = 0.01,
                momentum: float = 0.9, seed: int = 0) -> MlpSurvModel:
    """Full-batch momentum descent on the neural partial likelihood.

    ``hidden`` is one layer's width or a tuple of widths. The recorded
    loss history is always the clean (dropout-free) objective, one entry
    at initialization plus one after each epoch.
    """
    if data.n_events == 0:
        raise ValueError("no events: cannot fit")
    if not 0.0 <= dropout < 1.0:
        raise ValueError("dropout must be in [0, 1)")
    if l2 < 0 or lr <= 0 or epochs < 0:
        raise ValueError("bad l2/lr/epochs")
    hidden_sizes = (hidden,) if isinstance(hidden, int) else tuple(hidden)
    if any(h < 1 for h in hidden_sizes):
        raise ValueError("hidden widths must be >= 1")
    sizes = [data.p, *hidden_sizes, 1]

    rng = np.random.default_rng(seed)
    weights, biases = _init_params(sizes, rng)
    model = MlpSurvModel(weights=weights, biases=biases, dropout=dropout,
                         l2=l2, feature_names=list(data.feature_names))

    clean_loss, _, _ = mlp_loss_and_grads(model, data.X, data.time, data.event)
    model.loss_history = [clean_loss]
    vel_W = [np.zeros_like(W) for W in weights]
    vel_b = [np.zeros_like(b) for b in biases]

    for epoch in range(epochs):
        masks = None
        if dropout > 0.0:
            masks = [(rng.random((data.n, h)) >= dropout) / (1.0 - dropout)
                     for h in hidden_sizes]
        loss, gW, gb = mlp_loss_and_grads(model, data.X, data.time,
                                          data.event, masks)
        if not np.isfinite(loss):
            raise RuntimeError(f"non-finite training loss at epoch {epoch}; "
                               f"lower the learning rate (lr={lr})")
        for i in range(len(weights)):
            vel_W[i] = momentum * vel_W[i] + gW[i]
            vel_b[i] = momentum * vel_b[i] + gb[i]
            weights[i] -= lr * vel_W[i]
            biases[i] -= lr * vel_b[i]
        clean_loss, _, _ = mlp_loss_and_grads(model, data.X, data.time,
                                              data.event)
        model.loss_history.append(clean_loss)
    return model


def mlp_risk(model: MlpSurvModel, X_new) -> np.ndarray:
    """Network risk scores without dropout."""
    X_new = np.asarray(X_new, dtype=np.float64)
    if X_new.ndim != 2 or X_new.shape[1] != model.weights[0].shape[0]:
        raise ValueError(f"expected {model.weights[0].shape[0]} features, "
                         f"got shape {X_new.shape}")
    eta, _, _ = _forward(model.weights, model.biases, X_new)
    return eta
