"""Contrastive, prototype and prior-matching losses with analytic gradients.

All gradients are taken with respect to the embeddings; prototypes and the
class prior are constants within a step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp, softmax

from .errors import InvalidAssignment, NoPositives, PriorUnderflow, TooFewSamples

UNLABELED = -1
KL_CLAMP = 1e-12


@dataclass
class LossConfig:
    temperature: float = 0.1
    lambda_proto: float = 1.0
    lambda_sup: float = 1.0
    lambda_kl: float = 0.0
    sigma_aug: float = 0.1
    lambda_ins: float = 1.0  # not in the weighted objective; ablation switch only

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        for name in ("lambda_proto", "lambda_sup", "lambda_kl", "lambda_ins", "sigma_aug"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    def weights(self) -> dict[str, float]:
        return {"ins": self.lambda_ins, "proto": self.lambda_proto,
                "sup": self.lambda_sup, "kl": self.lambda_kl}


@dataclass
class BatchViews:
    v: np.ndarray
    v_prime: np.ndarray
    labels: np.ndarray
    is_labeled: np.ndarray

    def labeled(self) -> "BatchViews":
        m = self.is_labeled
        return BatchViews(self.v[m], self.v_prime[m], self.labels[m], self.is_labeled[m])

    def unlabeled(self) -> "BatchViews":
        m = ~self.is_labeled
        return BatchViews(self.v[m], self.v_prime[m], self.labels[m], self.is_labeled[m])


@dataclass
class LossTerm:
    """A loss value with gradients on both views (``None`` = no dependence)."""

    value: float
    grad_v: np.ndarray | None = None
    grad_v_prime: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)


def _contrastive(z: np.ndarray, positives: np.ndarray, tau: float):
    """Mean over anchors of the mean over positives of -log softmax terms.

    ``positives`` is a boolean (N, N) mask with a False diagonal; anchors
    without positives are excluded.  Returns (loss, grad_z, n_skipped).
    """
    n = z.shape[0]
    sim = z @ z.T / tau
    np.fill_diagonal(sim, -np.inf)
    log_denom = logsumexp(sim, axis=1)
    n_pos = positives.sum(axis=1)
    active = n_pos > 0
    n_active = int(active.sum())
    if n_active == 0:
        raise NoPositives("no anchor has a positive")
    sim_pos = np.where(positives, sim, 0.0)
    per_anchor = np.where(active, log_denom - sim_pos.sum(axis=1) / np.maximum(n_pos, 1), 0.0)
    loss = per_anchor.sum() / n_active

    prob = np.exp(sim - log_denom[:, None])  # diagonal -> 0
    target = positives / np.maximum(n_pos, 1)[:, None]
    g_sim = np.where(active[:, None], prob - target, 0.0) / n_active
    grad_z = (g_sim + g_sim.T) @ z / tau
    return float(loss), grad_z, n - n_active


def instance_contrastive(v: np.ndarray, v_prime: np.ndarray, tau: float) -> LossTerm:
    """Two-view InfoNCE over ``2n`` embeddings.

    Each anchor's positive is its twin view; the denominator runs over the
    other ``2n - 1`` embeddings.
    """
    n = v.shape[0]
    if n < 2:
        raise TooFewSamples(f"instance contrastive loss needs >= 2 samples, got {n}")
    z = np.concatenate([v, v_prime], axis=0)
    idx = np.arange(2 * n)
    pos = np.zeros((2 * n, 2 * n), dtype=bool)
    pos[idx, (idx + n) % (2 * n)] = True
    loss, gz, _ = _contrastive(z, pos, tau)
    return LossTerm(loss, gz[:n], gz[n:])


def supervised_contrastive(v: np.ndarray, v_prime: np.ndarray, labels: np.ndarray,
                           tau: float) -> LossTerm:
    """Supervised contrastive loss; positives share a label across both views.

    Anchors without any positive are skipped and counted in
    ``diagnostics["skipped_anchors"]``.
    """
    n = v.shape[0]
    if n < 2:
        raise TooFewSamples(f"supervised contrastive loss needs >= 2 samples, got {n}")
    labels = np.asarray(labels)
    z = np.concatenate([v, v_prime], axis=0)
    lab = np.concatenate([labels, labels])
    pos = lab[:, None] == lab[None, :]
    np.fill_diagonal(pos, False)
    loss, gz, skipped = _contrastive(z, pos, tau)
    return LossTerm(loss, gz[:n], gz[n:], {"skipped_anchors": skipped})


def prototype_loss(v: np.ndarray, assignments: np.ndarray, prototypes: np.ndarray,
                   prior: np.ndarray) -> LossTerm:
    """Prototype cross-entropy plus the ``-log r_k`` prior term.

    The prior term shifts the value only; it carries no gradient.
    """
    assignments = np.asarray(assignments)
    c = prototypes.shape[0]
    if assignments.shape != (v.shape[0],):
        raise InvalidAssignment("one assignment per embedding is required")
    if np.any(assignments < 0) or np.any(assignments >= c):
        raise InvalidAssignment(f"assignments must lie in [0, {c})")
    prior = np.asarray(prior, dtype=np.float64)
    r_k = prior[assignments]
    if np.any(r_k < 1e-12):
        raise PriorUnderflow("prior mass of an assigned class is below 1e-12")
    n = v.shape[0]
    logits = v @ prototypes.T
    lse = logsumexp(logits, axis=1)
    rows = np.arange(n)
    ce = lse - logits[rows, assignments]
    loss = float(np.mean(ce - np.log(r_k)))
    g_logits = softmax(logits, axis=1)
    g_logits[rows, assignments] -= 1.0
    return LossTerm(loss, g_logits @ prototypes / n, None,
                    {"cross_entropy": float(ce.mean())})


def kl_prior_regularizer(predictions: np.ndarray, prior: np.ndarray) -> tuple[float, np.ndarray]:
    """``KL(mean_i P_i || r)`` and its gradient with respect to ``P``."""
    P = np.asarray(predictions, dtype=np.float64)
    b = P.shape[0]
    p_bar = np.maximum(P.mean(axis=0), KL_CLAMP)
    r = np.maximum(np.asarray(prior, dtype=np.float64), KL_CLAMP)
    log_ratio = np.log(p_bar / r)
    loss = float(np.sum(p_bar * log_ratio))
    grad = np.broadcast_to((log_ratio + 1.0) / b, P.shape).copy()
    return max(loss, 0.0), grad


def overall_loss(parts: dict[str, LossTerm], config: LossConfig) -> LossTerm:
    """Weighted sum of the loss terms.

    ``parts`` maps ``"ins"``, ``"proto"``, ``"sup"`` and ``"kl"`` to terms
    whose gradients share one shape.  A term with zero weight is skipped
    outright, so its inputs cannot leak into the result.
    """
    weights = config.weights()
    total = 0.0
    gv = gvp = None
    contributions = {}
    for name, weight in weights.items():
        term = parts.get(name)
        if weight == 0 or term is None:
            contributions[name] = 0.0
            continue
        contributions[name] = weight * term.value
        total += weight * term.value
        if term.grad_v is not None:
            gv = weight * term.grad_v if gv is None else gv + weight * term.grad_v
        if term.grad_v_prime is not None:
            gvp = (weight * term.grad_v_prime if gvp is None
                   else gvp + weight * term.grad_v_prime)
    return LossTerm(total, gv, gvp, {"contributions": contributions})
