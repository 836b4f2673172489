"""Slow, direct reference implementations used to cross-check the fast paths.

Nothing here shares code with :mod:`tabmtr.metrics` or :mod:`tabmtr.losses`.
"""

from __future__ import annotations

import math

import numpy as np


def auc_all_pairs(scores, labels) -> float:
    """Fraction of (positive, negative) pairs ordered correctly, ties = 1/2.

    Counts in integers (twice the score) so the result is an exact ratio.
    """
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y != 1]
    twice = 0
    for p in pos:
        for n in neg:
            twice += 2 if p > n else (1 if p == n else 0)
    return twice / (2 * len(pos) * len(neg))


def nt_xent_direct(z, z_hat, tau: float = 1.0) -> float:
    """NT-Xent written out anchor by anchor with plain Python sums."""
    views = [list(map(float, r)) for r in np.asarray(z)] + [list(map(float, r)) for r in np.asarray(z_hat)]
    n = len(views)
    b = n // 2

    def cos(u, v):
        dot = math.fsum(a * c for a, c in zip(u, v))
        return dot / (math.sqrt(math.fsum(a * a for a in u)) * math.sqrt(math.fsum(c * c for c in v)))

    total = 0.0
    for i in range(n):
        pos = (i + b) % n
        logits = [cos(views[i], views[j]) / tau for j in range(n) if j != i]
        top = max(logits)
        log_denominator = top + math.log(math.fsum(math.exp(s - top) for s in logits))
        total += log_denominator - cos(views[i], views[pos]) / tau
    return total / n


# B = 2 with z1 = z1_hat = a, z2 = z2_hat = b, a orthogonal to b, tau = 1:
# each anchor sees its positive at cosine 1 and two negatives at cosine 0,
# so every term is log(e + 2) - 1 = log(1 + 2/e).
NT_XENT_B2_ORTHOGONAL = math.log(1.0 + 2.0 / math.e)
