"""The seven training losses, each returning its value and d(loss)/d(logits).

Per-example losses are averaged over the batch.  The two batch losses
(``batch_ce``, ``batch_max_margin``) treat the whole LogitMatrix as one batch
and couple logits across examples.

All exp/log chains go through max-shifted log-sum-exp or the stable softplus
``log(1 + e^x) = max(x, 0) + log1p(e^-|x|)``, so inputs of magnitude in the
hundreds are safe.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Optional

import numpy as np

from .errors import DimensionError, DomainError

KINDS = ("ce", "max_margin", "self_norm", "nce", "binary_ce", "batch_ce", "batch_max_margin")
PER_EXAMPLE_KINDS = ("ce", "max_margin", "self_norm", "nce", "binary_ce")
BATCH_KINDS = ("batch_ce", "batch_max_margin")
# Losses whose small values force every true logit above every false logit.
ALIGNED_KINDS = ("self_norm", "nce", "binary_ce", "batch_ce", "batch_max_margin")

# log(1e-300): floor for log(1 - g_j) in NCE.
_LOG_FLOOR = math.log(1e-300)


@dataclass(frozen=True)
class LogitMatrix:
    """Logits ``z`` (m x k) for a batch of examples together with their labels ``y``."""

    z: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        z = np.asarray(self.z, dtype=np.float64)
        y = np.asarray(self.y)
        if z.ndim != 2:
            raise DimensionError(f"logits must be m x k, got shape {z.shape}")
        m, k = z.shape
        if m < 1 or k < 1:
            raise DimensionError(f"need m >= 1 and k >= 1, got {z.shape}")
        if y.shape != (m,):
            raise DimensionError(f"expected {m} labels, got shape {y.shape}")
        if y.size and not np.issubdtype(y.dtype, np.integer):
            if not np.all(np.equal(np.mod(y, 1), 0)):
                raise DomainError("labels must be integers")
        y = y.astype(np.int64)
        if (y < 0).any() or (y >= k).any():
            raise DomainError(f"labels must lie in [0, {k})")
        if not np.isfinite(z).all():
            raise DomainError("logits must be finite")
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "y", y)

    @property
    def m(self) -> int:
        return self.z.shape[0]

    @property
    def k(self) -> int:
        return self.z.shape[1]

    def true_mask(self) -> np.ndarray:
        mask = np.zeros(self.z.shape, dtype=bool)
        mask[np.arange(self.m), self.y] = True
        return mask

    def true_logits(self) -> np.ndarray:
        return self.z[np.arange(self.m), self.y]


@dataclass
class LossValue:
    value: float
    grad: np.ndarray
    saturated: bool = False


@dataclass
class LossConfig:
    """Which loss to optimise and its hyperparameters.

    ``q`` defaults to the uniform distribution over the k classes and
    ``mc_samples`` defaults to ``t`` (one noise draw per unit of noise ratio).
    """

    kind: str = "ce"
    gamma: float = 1.0
    alpha: float = 0.1
    t: int = 1
    q: Optional[tuple[float, ...]] = None
    nce_mode: str = "exact"
    mc_samples: Optional[int] = None
    mc_seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DomainError(f"unknown loss kind {self.kind!r}; expected one of {', '.join(KINDS)}")
        if self.gamma <= 0:
            raise DomainError(f"gamma must be > 0, got {self.gamma}")
        if self.alpha < 0:
            raise DomainError(f"alpha must be >= 0, got {self.alpha}")
        if int(self.t) != self.t or self.t < 1:
            raise DomainError(f"t must be a positive integer, got {self.t}")
        self.t = int(self.t)
        if self.nce_mode not in ("exact", "monte_carlo"):
            raise DomainError(f"nce_mode must be 'exact' or 'monte_carlo', got {self.nce_mode!r}")
        if self.mc_samples is not None and (int(self.mc_samples) != self.mc_samples or self.mc_samples < 1):
            raise DomainError(f"mc_samples must be a positive integer, got {self.mc_samples}")
        if self.q is not None:
            self.q = tuple(float(v) for v in self.q)
            _check_distribution(np.asarray(self.q))

    def noise(self, k: int) -> np.ndarray:
        if self.q is None:
            return np.full(k, 1.0 / k)
        q = np.asarray(self.q)
        if q.shape != (k,):
            raise DimensionError(f"noise distribution has {q.size} entries but there are {k} classes")
        return q

    def to_dict(self) -> dict[str, Any]:
        out = {
            "kind": self.kind,
            "gamma": self.gamma,
            "alpha": self.alpha,
            "t": self.t,
            "nce_mode": self.nce_mode,
            "mc_seed": self.mc_seed,
        }
        if self.q is not None:
            out["q"] = list(self.q)
        if self.mc_samples is not None:
            out["mc_samples"] = self.mc_samples
        return out

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "LossConfig":
        known = {"kind", "gamma", "alpha", "t", "q", "nce_mode", "mc_samples", "mc_seed"}
        extra = set(d) - known
        if extra:
            raise DomainError(f"unknown loss field(s): {', '.join(sorted(extra))}")
        return cls(**d)


def _check_distribution(q: np.ndarray) -> None:
    if q.ndim != 1 or q.size == 0:
        raise DomainError("noise distribution must be a non-empty vector")
    if (q < 0).any() or not np.isfinite(q).all():
        raise DomainError("noise distribution entries must be finite and non-negative")
    if abs(q.sum() - 1.0) > 1e-9:
        raise DomainError(f"noise distribution must sum to 1, sums to {q.sum():.12g}")


def _row_logsumexp(z: np.ndarray) -> np.ndarray:
    shift = z.max(axis=1, keepdims=True)
    return (shift + np.log(np.exp(z - shift).sum(axis=1, keepdims=True)))[:, 0]


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _one_hot(lm: LogitMatrix) -> np.ndarray:
    return lm.true_mask().astype(np.float64)


def ce(lm: LogitMatrix) -> LossValue:
    lse = _row_logsumexp(lm.z)
    value = np.mean(lse - lm.true_logits())
    grad = (_softmax(lm.z) - _one_hot(lm)) / lm.m
    return LossValue(float(value), grad)


def _worst_false(lm: LogitMatrix) -> np.ndarray:
    """Index of the largest false logit per example (lowest index on ties)."""
    masked = np.where(lm.true_mask(), -np.inf, lm.z)
    return np.argmax(masked, axis=1)


def max_margin(lm: LogitMatrix, gamma: float = 1.0) -> LossValue:
    if gamma <= 0:
        raise DomainError(f"gamma must be > 0, got {gamma}")
    if lm.k < 2:
        raise DomainError("max-margin needs k >= 2: there is no false logit to compare against")
    value, grad = _hinge_terms(lm, gamma)
    return LossValue(value, grad)


def _hinge_terms(lm: LogitMatrix, gamma: float) -> tuple[float, np.ndarray]:
    rows = np.arange(lm.m)
    worst = _worst_false(lm)
    slack = gamma - lm.true_logits() + lm.z[rows, worst]
    active = slack > 0
    grad = np.zeros_like(lm.z)
    grad[rows[active], lm.y[active]] -= 1.0 / lm.m
    grad[rows[active], worst[active]] += 1.0 / lm.m
    return float(np.mean(np.where(active, slack, 0.0))), grad


def self_norm(lm: LogitMatrix, alpha: float = 0.1) -> LossValue:
    if alpha < 0:
        raise DomainError(f"alpha must be >= 0, got {alpha}")
    lse = _row_logsumexp(lm.z)
    value = np.mean(lse - lm.true_logits() + alpha * lse**2)
    soft = _softmax(lm.z)
    grad = (soft * (1.0 + 2.0 * alpha * lse)[:, None] - _one_hot(lm)) / lm.m
    return LossValue(float(value), grad)


def nce(
    lm: LogitMatrix,
    t: int = 1,
    q: Optional[np.ndarray] = None,
    mode: str = "exact",
    mc_samples: Optional[int] = None,
    mc_seed: int = 0,
) -> LossValue:
    """Noise-contrastive estimation with g_j = sigmoid(z_j - log(t q_j)).

    ``log(1 - g_j)`` is floored at ``log(1e-300)``; when the floor is hit the
    returned value is flagged ``saturated`` and that entry carries no gradient.
    Classes with ``q_j = 0`` have ``g_j = 1`` and contribute nothing to the
    noise expectation.
    """
    m, k = lm.z.shape
    q = np.full(k, 1.0 / k) if q is None else np.asarray(q, dtype=np.float64)
    if q.shape != (k,):
        raise DimensionError(f"noise distribution has {q.size} entries but there are {k} classes")
    _check_distribution(q)
    if int(t) != t or t < 1:
        raise DomainError(f"t must be a positive integer, got {t}")
    support = q > 0
    with np.errstate(divide="ignore"):
        log_tq = np.where(support, np.log(t * np.where(support, q, 1.0)), -np.inf)

    rows = np.arange(m)
    y = lm.y
    # true-class term: -log g_y
    true_ok = support[y]
    shifted_y = np.where(true_ok, lm.z[rows, y] - log_tq[y], 0.0)
    first = np.where(true_ok, _softplus(-shifted_y), 0.0)
    grad = np.zeros_like(lm.z)
    grad[rows, y] = np.where(true_ok, _sigmoid(shifted_y) - 1.0, 0.0)

    # noise term: -log(1 - g_j) = softplus(z_j - log(t q_j))
    if mode == "exact":
        shifted = np.where(support, lm.z - log_tq, 0.0)
        neg_log = _softplus(shifted)
        clamped = neg_log > -_LOG_FLOOR
        weight = np.where(support, t * q, 0.0)
        second = (weight * np.minimum(neg_log, -_LOG_FLOOR)).sum(axis=1)
        grad += np.where(clamped, 0.0, weight * _sigmoid(shifted))
        saturated = bool((clamped & support).any())
    elif mode == "monte_carlo":
        samples = t if mc_samples is None else int(mc_samples)
        if samples < 1:
            raise DomainError(f"mc_samples must be positive, got {mc_samples}")
        rng = np.random.Generator(np.random.Philox(mc_seed))
        draws = rng.choice(k, size=(m, samples), p=q)
        shifted = lm.z[rows[:, None], draws] - log_tq[draws]
        neg_log = _softplus(shifted)
        clamped = neg_log > -_LOG_FLOOR
        second = (t / samples) * np.minimum(neg_log, -_LOG_FLOOR).sum(axis=1)
        contrib = np.where(clamped, 0.0, (t / samples) * _sigmoid(shifted))
        np.add.at(grad, (np.repeat(rows, samples), draws.ravel()), contrib.ravel())
        saturated = bool(clamped.any())
    else:
        raise DomainError(f"nce mode must be 'exact' or 'monte_carlo', got {mode!r}")

    value = np.mean(first + second)
    return LossValue(float(value), grad / m, saturated)


def binary_ce(lm: LogitMatrix) -> LossValue:
    """-log sigmoid(z_y) - sum_{j != y} log(1 - sigmoid(z_j)), averaged over examples."""
    mask = lm.true_mask()
    signed = np.where(mask, -lm.z, lm.z)
    value = _softplus(signed).sum(axis=1).mean()
    grad = (_sigmoid(lm.z) - mask) / lm.m
    return LossValue(float(value), grad)


def batch_ce(lm: LogitMatrix) -> LossValue:
    """KL divergence between the batch label distribution and the batch-wide softmax.

    Equals ``-(1/m) sum_i [z_{i,y_i} - LSE(all m*k logits)] - log m``.
    """
    z = lm.z
    shift = z.max()
    e = np.exp(z - shift)
    total = e.sum()
    lse = shift + math.log(total)
    value = lse - lm.true_logits().mean() - math.log(lm.m)
    grad = e / total - _one_hot(lm) / lm.m
    return LossValue(float(value), grad)


def batch_max_margin(lm: LogitMatrix, gamma: float = 1.0) -> LossValue:
    if gamma <= 0:
        raise DomainError(f"gamma must be > 0, got {gamma}")
    if lm.k < 2:
        raise DomainError("batch max-margin needs k >= 2: there is no false logit to compare against")
    value, grad = _hinge_terms(lm, gamma)
    true = lm.true_logits()
    i_plus = int(np.argmin(true))
    flat = np.where(lm.true_mask(), -np.inf, lm.z).ravel()
    i_minus, j_minus = divmod(int(np.argmax(flat)), lm.k)
    slack = gamma - true[i_plus] + lm.z[i_minus, j_minus]
    if slack > 0:
        value += slack / lm.m
        grad[i_plus, lm.y[i_plus]] -= 1.0 / lm.m
        grad[i_minus, j_minus] += 1.0 / lm.m
    return LossValue(float(value), grad)


def loss_dispatch(config: LossConfig, lm: LogitMatrix) -> LossValue:
    kind = config.kind
    if kind == "ce":
        return ce(lm)
    if kind == "max_margin":
        return max_margin(lm, config.gamma)
    if kind == "self_norm":
        return self_norm(lm, config.alpha)
    if kind == "nce":
        return nce(lm, config.t, config.noise(lm.k), config.nce_mode, config.mc_samples, config.mc_seed)
    if kind == "binary_ce":
        return binary_ce(lm)
    if kind == "batch_ce":
        return batch_ce(lm)
    if kind == "batch_max_margin":
        return batch_max_margin(lm, config.gamma)
    raise DomainError(f"unknown loss kind {kind!r}")
