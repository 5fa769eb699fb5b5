"""Brute-force metric and significance oracles, written without the library code paths."""

import functools
import itertools

import numpy as np


def _cmp(x, y):
    # higher score first; equal scores: lexicographically larger docid first
    if x[1] != y[1]:
        return -1 if x[1] > y[1] else 1
    if x[0] != y[0]:
        return -1 if x[0] > y[0] else 1
    return 0


def oracle_order(pairs):
    return [d for d, _ in sorted(pairs, key=functools.cmp_to_key(_cmp))]


def oracle_ap(pairs, judgments):
    order = oracle_order(pairs)
    rel = [d for d, g in judgments.items() if g > 0]
    precisions = []
    for r in range(1, len(order) + 1):
        if judgments.get(order[r - 1], 0) > 0:
            top = order[:r]
            precisions.append(len([d for d in top if judgments.get(d, 0) > 0]) / r)
    return sum(precisions) / len(rel)


def oracle_p30(pairs, judgments):
    top = oracle_order(pairs)[:30]
    return len([d for d in top if judgments.get(d, 0) > 0]) / 30


def oracle_fisher(diffs):
    """Exact two-sided sign-flip p-value by enumerating every assignment."""
    d = np.asarray(diffs, dtype=float)
    n = d.size
    observed = abs(d.mean())
    hits = sum(abs(np.dot(s, d) / n) >= observed - 1e-12 for s in itertools.product((1, -1), repeat=n))
    return hits / 2**n
