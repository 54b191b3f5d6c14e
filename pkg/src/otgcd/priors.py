"""Class-prior and prototype state, and the prototype-similarity classifier."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import softmax

from .errors import DimensionMismatch, InvalidAssignment


def _unit_rows(a: np.ndarray) -> np.ndarray:
    return a / np.linalg.norm(a, axis=1, keepdims=True)


@dataclass
class ClassPrior:
    r: np.ndarray
    momentum: float = 0.99
    history: list = field(default_factory=list)

    @classmethod
    def uniform(cls, num_classes: int, momentum: float = 0.99) -> "ClassPrior":
        return cls(np.full(num_classes, 1.0 / num_classes), momentum)

    def __post_init__(self):
        self.r = np.asarray(self.r, dtype=np.float64)
        if not 0 <= self.momentum <= 1:
            raise ValueError("momentum must lie in [0, 1]")

    def snapshot(self) -> None:
        self.history.append(self.r.copy())


@dataclass
class PrototypeBank:
    prototypes: np.ndarray
    momentum: float = 0.99
    # classes that received no assignment in the last update
    stale: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.prototypes = _unit_rows(np.asarray(self.prototypes, dtype=np.float64))
        if not 0 <= self.momentum <= 1:
            raise ValueError("momentum must lie in [0, 1]")
        if self.stale is None:
            self.stale = np.zeros(self.num_classes, dtype=bool)

    @property
    def num_classes(self) -> int:
        return self.prototypes.shape[0]

    def copy(self) -> "PrototypeBank":
        return PrototypeBank(self.prototypes.copy(), self.momentum, self.stale.copy())


def predict_distribution(v: np.ndarray, bank: PrototypeBank, tau_pred: float = 0.1) -> np.ndarray:
    """Softmax over prototype cosine similarities scaled by ``1 / tau_pred``."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 2 or v.shape[1] != bank.prototypes.shape[1]:
        raise DimensionMismatch(
            f"embeddings {v.shape} incompatible with prototypes {bank.prototypes.shape}")
    return softmax(v @ bank.prototypes.T / tau_pred, axis=1)


def predict_distribution_vjp(P: np.ndarray, grad_P: np.ndarray, bank: PrototypeBank,
                             tau_pred: float = 0.1) -> np.ndarray:
    """Pull a gradient on ``P`` back to the embeddings (prototypes held fixed)."""
    g_logits = P * (grad_P - np.sum(grad_P * P, axis=1, keepdims=True))
    return g_logits @ bank.prototypes / tau_pred


def empirical_argmax_distribution(P: np.ndarray) -> np.ndarray:
    """Fraction of rows whose argmax (lowest index on ties) is each class."""
    P = np.asarray(P)
    if P.shape[0] < 1:
        raise ValueError("need at least one prediction row")
    counts = np.bincount(np.argmax(P, axis=1), minlength=P.shape[1])
    return counts / P.shape[0]


def update_prior(prior: ClassPrior, z: np.ndarray) -> ClassPrior:
    """Moving average ``r <- mu r + (1 - mu) z``; records a history snapshot."""
    mu = prior.momentum
    prior.r = mu * prior.r + (1.0 - mu) * np.asarray(z, dtype=np.float64)
    prior.snapshot()
    return prior


def update_prototypes(bank: PrototypeBank, embeddings: np.ndarray,
                      assignments: np.ndarray) -> PrototypeBank:
    """Momentum update of each prototype toward the mean of its assigned rows.

    Classes with no assigned embedding keep their prototype and are flagged
    in ``bank.stale``.
    """
    assignments = np.asarray(assignments)
    c = bank.num_classes
    if assignments.shape != (embeddings.shape[0],):
        raise InvalidAssignment("one assignment per embedding is required")
    if np.any(assignments < 0) or np.any(assignments >= c):
        raise InvalidAssignment(f"assignments must lie in [0, {c})")
    counts = np.bincount(assignments, minlength=c)
    sums = np.zeros_like(bank.prototypes)
    np.add.at(sums, assignments, embeddings)
    hit = counts > 0
    mu = bank.momentum
    means = sums[hit] / counts[hit, None]
    bank.prototypes[hit] = _unit_rows(mu * bank.prototypes[hit] + (1.0 - mu) * means)
    bank.stale = ~hit
    return bank
