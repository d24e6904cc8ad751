"""Brute-force reference evaluators used as independent test oracles.

Everything here is written with plain Python floats and the ``math`` module,
one example at a time, straight from the textbook formulas.  No max-shift
tricks, no numpy: the point is to be obviously correct on small inputs, not
fast or robust, so callers must keep logits modest (|z| < ~300).
"""

import math


def ce(z, y):
    total = 0.0
    for row, label in zip(z, y):
        p = math.exp(row[label]) / sum(math.exp(v) for v in row)
        total += -math.log(p)
    return total / len(z)


def max_margin(z, y, gamma):
    total = 0.0
    for row, label in zip(z, y):
        worst = max(v for j, v in enumerate(row) if j != label)
        total += max(0.0, gamma - row[label] + worst)
    return total / len(z)


def self_norm(z, y, alpha):
    total = 0.0
    for row, label in zip(z, y):
        s = sum(math.exp(v) for v in row)
        total += -math.log(math.exp(row[label]) / s) + alpha * math.log(s) ** 2
    return total / len(z)


def nce_exact(z, y, t, q):
    total = 0.0
    for row, label in zip(z, y):
        g = [1.0 / (1.0 + t * q[j] * math.exp(-row[j])) for j in range(len(row))]
        expectation = sum(q[j] * math.log(1.0 - g[j]) for j in range(len(row)) if q[j] > 0)
        total += -math.log(g[label]) - t * expectation
    return total / len(z)


def binary_ce(z, y):
    total = 0.0
    for row, label in zip(z, y):
        sig = [1.0 / (1.0 + math.exp(-v)) for v in row]
        total += -math.log(sig[label])
        total += -sum(math.log(1.0 - sig[j]) for j in range(len(row)) if j != label)
    return total / len(z)


def batch_ce(z, y):
    """KL(P_B || Q_B) summed cell by cell over the m x k grid."""
    m = len(z)
    big_z = sum(math.exp(v) for row in z for v in row)
    kl = 0.0
    for i, row in enumerate(z):
        for j, v in enumerate(row):
            p = 1.0 / m if j == y[i] else 0.0
            if p > 0:
                kl += p * math.log(p / (math.exp(v) / big_z))
    return kl


def batch_max_margin(z, y, gamma):
    m = len(z)
    z_plus = min(row[label] for row, label in zip(z, y))
    z_minus = max(v for row, label in zip(z, y) for j, v in enumerate(row) if j != label)
    return max(0.0, gamma - z_plus + z_minus) / m + max_margin(z, y, gamma)


def violating_pairs(z, y):
    """Count (true logit, false logit) pairs with true <= false by double loop."""
    trues = [row[label] for row, label in zip(z, y)]
    falses = [v for row, label in zip(z, y) for j, v in enumerate(row) if j != label]
    bad = sum(1 for a in trues for b in falses if a <= b)
    return bad, len(trues) * len(falses)


def average_precision(scores, labels):
    """O(n^2) threshold sweep: for each distinct score s predict positive iff score >= s."""
    positives = sum(1 for v in labels if v)
    prev_recall = 0.0
    area = 0.0
    for s in sorted(set(scores), reverse=True):
        tp = sum(1 for a, b in zip(scores, labels) if a >= s and b)
        fp = sum(1 for a, b in zip(scores, labels) if a >= s and not b)
        recall = tp / positives
        area += (recall - prev_recall) * (tp / (tp + fp))
        prev_recall = recall
    return area


def precision_at_recall(scores, labels, r):
    """Precision at the largest distinct-score threshold whose recall reaches r."""
    positives = sum(1 for v in labels if v)
    for s in sorted(set(scores), reverse=True):
        tp = sum(1 for a, b in zip(scores, labels) if a >= s and b)
        fp = sum(1 for a, b in zip(scores, labels) if a >= s and not b)
        if tp / positives >= r:
            return tp / (tp + fp)
    raise AssertionError("unreachable: the lowest threshold has recall 1")
