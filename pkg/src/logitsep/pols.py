"""Logit-separation diagnostics and the classic counter-example constructions.

A labeled logit set is *separated* when every true logit (the logit of an
example's own class) is strictly larger than every false logit of every
example.  :func:`separation` measures how far a set is from that state and
:func:`check_alignment` runs plain gradient descent on free logits to see
whether a loss drives them there.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import DomainError
from .losses import ALIGNED_KINDS, KINDS, LogitMatrix, LossConfig, loss_dispatch


@dataclass(frozen=True)
class SeparationReport:
    min_true_logit: float
    max_false_logit: float
    margin: float
    violating_pair_fraction: float
    n_true: int
    n_false: int

    @property
    def separated(self) -> bool:
        return self.margin > 0

    def to_dict(self) -> dict:
        return asdict(self)


def separation(lm: LogitMatrix) -> SeparationReport:
    """Extremes of true/false logits and the fraction of (true, false) pairs out of order.

    A pair counts as violating when ``true <= false``.  Counting uses one sort
    of the false logits and a binary search per true logit.
    """
    if lm.k < 2:
        raise DomainError("separation needs k >= 2: with one class there are no false logits")
    mask = lm.true_mask()
    trues = lm.z[mask]
    falses = np.sort(lm.z[~mask])
    # false logits >= each true logit
    bad = falses.size - np.searchsorted(falses, trues, side="left")
    n_true, n_false = trues.size, falses.size
    lo, hi = float(trues.min()), float(falses[-1])
    return SeparationReport(
        min_true_logit=lo,
        max_false_logit=hi,
        margin=lo - hi,
        violating_pair_fraction=float(bad.sum()) / (n_true * n_false),
        n_true=int(n_true),
        n_false=int(n_false),
    )


def counterexample_ce(alpha: float) -> LogitMatrix:
    """Two examples, two classes: z(x1) = (2a, a) labelled 0, z(x2) = (-2a, -a) labelled 1.

    Both examples are classified correctly with a per-example gap of ``alpha``,
    yet the false logit of x1 (``alpha``) exceeds the true logit of x2
    (``-alpha``).  With ``alpha == gamma`` every max-margin hinge is exactly 0.
    """
    if not alpha > 0:
        raise DomainError(f"alpha must be > 0, got {alpha}")
    a = float(alpha)
    return LogitMatrix(np.array([[2 * a, a], [-2 * a, -a]]), np.array([0, 1]))


@dataclass
class TrialResult:
    final_margin: float
    final_loss: float
    initial_margin: float
    steps_run: int
    diverged: bool


@dataclass
class AlignmentVerdict:
    kind: str
    verdict: str  # "aligned" | "not aligned" | "inconclusive"
    trials: list[TrialResult] = field(default_factory=list)

    @property
    def final_margins(self) -> list[float]:
        return [t.final_margin for t in self.trials]

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "verdict": self.verdict,
            "final_margins": self.final_margins,
            "final_losses": [t.final_loss for t in self.trials],
        }


def descend(config: LossConfig, start: LogitMatrix, steps: int, step_size: float, patience: int = 100) -> TrialResult:
    """Plain gradient descent on the logits themselves (no model)."""
    z = start.z.copy()
    y = start.y
    initial = separation(start).margin
    prev = math.inf
    rising = 0
    value = math.nan
    for step in range(steps):
        lv = loss_dispatch(config, LogitMatrix(z, y))
        value = lv.value
        if not math.isfinite(value):
            return TrialResult(math.nan, value, initial, step, True)
        rising = rising + 1 if value > prev else 0
        if rising >= patience:
            return TrialResult(separation(LogitMatrix(z, y)).margin, value, initial, step, True)
        prev = value
        z -= step_size * lv.grad
    final = LogitMatrix(z, y)
    return TrialResult(separation(final).margin, loss_dispatch(config, final).value, initial, steps, False)


def random_start(rng: np.random.Generator, m: int = 4, k: int = 3, scale: float = 3.0) -> LogitMatrix:
    """Uniform logits in [-scale, scale] with labels covering as many classes as possible."""
    z = rng.uniform(-scale, scale, size=(m, k))
    labels = np.arange(m) % k
    return LogitMatrix(z, rng.permutation(labels))


def check_alignment(
    config: LossConfig,
    trials: int = 10,
    steps: int = 5000,
    step_size: float = 0.1,
    seed: int = 0,
    start: Optional[LogitMatrix] = None,
    jitter: float = 0.01,
    m: int = 4,
    k: int = 3,
) -> AlignmentVerdict:
    """Descend on free logits from ``trials`` seeded starts and report whether all end separated.

    Without ``start`` each trial draws an m x k random configuration.  With
    ``start`` the first trial begins exactly there and later trials add
    uniform noise of size ``jitter``.  Any trial that diverges makes the
    verdict inconclusive.
    """
    if trials < 1:
        raise DomainError(f"trials must be >= 1, got {trials}")
    rng = np.random.default_rng(seed)
    results = []
    for i in range(trials):
        if start is None:
            init = random_start(rng, m, k)
        elif i == 0 or jitter == 0:
            init = start
        else:
            init = LogitMatrix(start.z + rng.uniform(-jitter, jitter, size=start.z.shape), start.y)
        trial_config = replace(config, mc_seed=config.mc_seed + i) if config.kind == "nce" else config
        results.append(descend(trial_config, init, steps, step_size))
    if any(r.diverged for r in results):
        verdict = "inconclusive"
    elif all(r.final_margin > 0 for r in results):
        verdict = "aligned"
    else:
        verdict = "not aligned"
    return AlignmentVerdict(config.kind, verdict, results)


def default_alignment_suite(
    trials: int = 10, steps: int = 5000, step_size: float = 0.1, seed: int = 0, gamma: float = 1.0
) -> dict[str, AlignmentVerdict]:
    """All seven losses: the non-aligned two from their counter-example starts, the rest from random starts."""
    out = {}
    for kind in KINDS:
        config = LossConfig(kind=kind, gamma=gamma)
        if kind == "ce":
            start = counterexample_ce(10.0)
        elif kind == "max_margin":
            start = counterexample_ce(gamma)
        else:
            start = None
        out[kind] = check_alignment(config, trials, steps, step_size, seed, start=start)
    return out


def expected_verdict(kind: str) -> str:
    return "aligned" if kind in ALIGNED_KINDS else "not aligned"
