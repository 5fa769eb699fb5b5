"""TREC run/qrels I/O, AP and P30, score interpolation, and paired randomization tests."""

from __future__ import annotations

import itertools
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

log = logging.getLogger(__name__)

MAX_RUN_DEPTH = 1000
ALPHA_GRID = tuple(round(0.1 * i, 1) for i in range(11))


class TrecFormatError(ValueError):
    """Malformed qrels or run content."""


class RunEntry(NamedTuple):
    docid: str
    rank: int
    score: float
    tag: str


Qrels = dict[str, dict[str, int]]
RunFile = dict[str, list[RunEntry]]


@dataclass(frozen=True)
class QueryMetrics:
    ap: float
    p30: float


# ---------------------------------------------------------------------------
# parsing / writing
# ---------------------------------------------------------------------------


def parse_qrels(path: str | Path) -> Qrels:
    """``qid 0 docid rel`` per line. Duplicate judgments: the last one wins."""
    qrels: Qrels = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4:
                raise TrecFormatError(f"{path}:{lineno}: expected 4 columns, got {len(parts)}")
            qid, _, docid, rel = parts
            try:
                grade = int(rel)
            except ValueError:
                raise TrecFormatError(f"{path}:{lineno}: relevance {rel!r} is not an integer") from None
            if grade < 0:
                raise TrecFormatError(f"{path}:{lineno}: negative relevance {grade}")
            judged = qrels.setdefault(qid, {})
            if docid in judged:
                log.warning("%s:%d: duplicate judgment for (%s, %s); keeping the last", path, lineno, qid, docid)
            judged[docid] = grade
    return qrels


def parse_run(path: str | Path) -> RunFile:
    """``qid Q0 docid rank score tag`` per line; ranks must be 1..N per query."""
    run: RunFile = {}
    seen: set[tuple[str, str]] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 6:
                raise TrecFormatError(f"{path}:{lineno}: expected 6 columns, got {len(parts)}")
            qid, _, docid, rank, score, tag = parts
            if (qid, docid) in seen:
                raise TrecFormatError(f"{path}:{lineno}: duplicate document {docid} for query {qid}")
            seen.add((qid, docid))
            try:
                entry = RunEntry(docid, int(rank), float(score), tag)
            except ValueError:
                raise TrecFormatError(f"{path}:{lineno}: bad rank or score") from None
            run.setdefault(qid, []).append(entry)
    for qid, entries in run.items():
        entries.sort(key=lambda e: e.rank)
        ranks = [e.rank for e in entries]
        if ranks != list(range(1, len(entries) + 1)):
            raise TrecFormatError(f"{path}: ranks for query {qid} are not contiguous from 1: {ranks[:10]}...")
    return run


def _atomic_write(path: str | Path, lines: Iterable[str]) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
            for line in lines:
                fh.write(line + "\n")
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise
    return path


def write_qrels(qrels: Qrels, path: str | Path) -> Path:
    return _atomic_write(path, (f"{q} 0 {d} {g}" for q in qrels for d, g in qrels[q].items()))


def write_run(run: RunFile, path: str | Path) -> Path:
    return _atomic_write(
        path, (f"{q} Q0 {e.docid} {e.rank} {e.score!r} {e.tag}" for q in run for e in run[q])
    )


def rank_scores(scores: Mapping[str, float], tag: str, depth: int = MAX_RUN_DEPTH) -> list[RunEntry]:
    """Sort by score descending, ties by docid descending, and assign ranks."""
    ordered = sorted(scores.items(), key=lambda kv: (kv[1], kv[0]), reverse=True)[:depth]
    return [RunEntry(d, r, float(s), tag) for r, (d, s) in enumerate(ordered, 1)]


def run_from_scores(scores: Mapping[str, Mapping[str, float]], tag: str, depth: int = MAX_RUN_DEPTH) -> RunFile:
    return {qid: rank_scores(per_q, tag, depth) for qid, per_q in scores.items()}


def run_scores(run: RunFile) -> dict[str, dict[str, float]]:
    return {qid: {e.docid: e.score for e in entries} for qid, entries in run.items()}


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def evaluation_order(entries: Sequence[RunEntry]) -> list[str]:
    """Docids in the order the standard evaluator scores them (score desc, docid desc)."""
    return [e.docid for e in sorted(entries, key=lambda e: (e.score, e.docid), reverse=True)]


def _ranked(run_for_qid) -> list[str]:
    items = list(run_for_qid)
    if items and isinstance(items[0], RunEntry):
        return evaluation_order(items)
    return [str(d) for d in items]


def average_precision(run_for_qid, judgments: Mapping[str, int]) -> float:
    """Mean of precision@r over relevant docs, divided by all relevant docs in the qrels.

    ``run_for_qid`` is either a list of ``RunEntry`` or docids already in rank order.
    """
    relevant = {d for d, g in judgments.items() if g > 0}
    if not relevant:
        raise ValueError("average precision is undefined for a query without relevant documents")
    hits = 0
    total = 0.0
    for rank, docid in enumerate(_ranked(run_for_qid), 1):
        if docid in relevant:
            hits += 1
            total += hits / rank
    return total / len(relevant)


def precision_at_k(run_for_qid, judgments: Mapping[str, int], k: int = 30) -> float:
    """Relevant docs in the top ``k`` over a fixed denominator ``k``."""
    top = _ranked(run_for_qid)[:k]
    return sum(1 for d in top if judgments.get(d, 0) > 0) / k


def precision_at_30(run_for_qid, judgments: Mapping[str, int]) -> float:
    return precision_at_k(run_for_qid, judgments, 30)


def evaluate_run(run: RunFile, qrels: Qrels) -> dict[str, QueryMetrics]:
    """Per-query AP and P30 over every qrels query with at least one relevant doc.

    Judged queries missing from the run score 0; queries without relevant
    documents are skipped with a warning.
    """
    out: dict[str, QueryMetrics] = {}
    skipped = []
    for qid in sorted(qrels):
        judgments = qrels[qid]
        if not any(g > 0 for g in judgments.values()):
            skipped.append(qid)
            continue
        entries = run.get(qid, [])
        out[qid] = QueryMetrics(average_precision(entries, judgments), precision_at_30(entries, judgments))
    if skipped:
        log.warning("excluded %d queries with no relevant documents: %s", len(skipped), " ".join(skipped))
    return out


def mean_metrics(per_query: Mapping[str, QueryMetrics]) -> QueryMetrics:
    if not per_query:
        return QueryMetrics(0.0, 0.0)
    qids = sorted(per_query)
    return QueryMetrics(
        math.fsum(per_query[q].ap for q in qids) / len(qids),
        math.fsum(per_query[q].p30 for q in qids) / len(qids),
    )


# ---------------------------------------------------------------------------
# interpolation
# ---------------------------------------------------------------------------


def _minmax(scores: Mapping[str, float]) -> dict[str, float]:
    values = list(scores.values())
    lo, hi = min(values), max(values)
    if hi == lo:
        return {d: 0.0 for d in scores}
    return {d: (s - lo) / (hi - lo) for d, s in scores.items()}


def interpolate(neural: Mapping[str, Mapping[str, float]], ql: Mapping[str, Mapping[str, float]],
                alpha: float, tag: str = "interp") -> RunFile:
    """``alpha * minmax(neural) + (1 - alpha) * minmax(ql)`` per query, re-ranked."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if set(neural) != set(ql):
        raise ValueError(f"query sets differ: {sorted(set(neural) ^ set(ql))}")
    run: RunFile = {}
    for qid in neural:
        a, b = neural[qid], ql[qid]
        if set(a) != set(b):
            missing = sorted(set(a) ^ set(b))
            raise ValueError(f"candidate sets differ for query {qid}; unmatched docids: {missing}")
        na, nb = _minmax(a), _minmax(b)
        if alpha == 1.0:
            combined = na
        elif alpha == 0.0:
            combined = nb
        else:
            combined = {d: alpha * na[d] + (1.0 - alpha) * nb[d] for d in a}
        run[qid] = rank_scores(combined, tag)
    return run


def tune_alpha(neural, ql, qrels: Qrels, grid: Sequence[float] = ALPHA_GRID) -> tuple[float, dict[float, float]]:
    """Grid alpha with the best mean AP; the first (smallest) alpha wins ties."""
    table = {}
    for alpha in grid:
        table[alpha] = mean_metrics(evaluate_run(interpolate(neural, ql, alpha), qrels)).ap
    best = max(grid, key=lambda a: (table[a], -a))
    return best, table


# ---------------------------------------------------------------------------
# significance
# ---------------------------------------------------------------------------


def _paired_diffs(a: Mapping[str, float], b: Mapping[str, float]) -> np.ndarray:
    if set(a) != set(b):
        raise ValueError(f"paired test needs identical query sets; unmatched: {sorted(set(a) ^ set(b))}")
    qids = sorted(a)
    return np.array([a[q] - b[q] for q in qids], dtype=np.float64)


def fisher_randomization(a: Mapping[str, float], b: Mapping[str, float], iterations: int = 100_000,
                         seed: int = 0, exhaustive: bool | None = None) -> float:
    """Two-sided paired randomization test on per-query scores.

    The statistic is the mean difference; the null distribution flips the
    sign of each query's difference independently. ``exhaustive`` enumerates
    all ``2**n`` flips (default when n <= 20 and ``iterations`` is None);
    otherwise ``iterations`` assignments are sampled, the first being the
    observed one.
    """
    diffs = _paired_diffs(a, b)
    n = diffs.size
    if n == 0:
        raise ValueError("paired test needs at least one query")
    if exhaustive is None:
        exhaustive = iterations is None and n <= 20
    observed = abs(diffs.mean())
    tol = 1e-12 * max(1.0, observed)
    if exhaustive:
        if n > 20:
            raise ValueError(f"exhaustive enumeration is limited to n <= 20 queries, got {n}")
        hits = 0
        total = 0
        chunk_bits = min(n, 16)
        low = np.array(list(itertools.product((1.0, -1.0), repeat=chunk_bits)))  # [2^c, c]
        low_sums = low @ diffs[n - chunk_bits :]
        for high in itertools.product((1.0, -1.0), repeat=n - chunk_bits):
            base = float(np.dot(high, diffs[: n - chunk_bits])) if high else 0.0
            stats = np.abs(base + low_sums) / n
            hits += int((stats >= observed - tol).sum())
            total += stats.size
        return hits / total
    if iterations is None or iterations < 1:
        raise ValueError("Monte Carlo mode needs iterations >= 1")
    rng = np.random.default_rng(seed)
    hits = 1  # the observed assignment
    remaining = iterations - 1
    block = 10_000
    while remaining > 0:
        size = min(block, remaining)
        signs = rng.choice((-1.0, 1.0), size=(size, n))
        stats = np.abs(signs @ diffs) / n
        hits += int((stats >= observed - tol).sum())
        remaining -= size
    return hits / iterations


def per_query_report(run_a: RunFile, run_b: RunFile, qrels: Qrels, out_path: str | Path,
                     names: tuple[str, str] = ("A", "B")) -> Path:
    """TSV of ``qid, AP_A, AP_B, delta`` sorted by delta descending (qid breaks ties)."""
    ma = evaluate_run(run_a, qrels)
    mb = evaluate_run(run_b, qrels)
    rows = sorted(((q, ma[q].ap, mb[q].ap, ma[q].ap - mb[q].ap) for q in ma), key=lambda r: (-r[3], r[0]))
    header = f"qid\tAP_{names[0]}\tAP_{names[1]}\tdelta"
    return _atomic_write(out_path, [header] + [f"{q}\t{x!r}\t{y!r}\t{d!r}" for q, x, y, d in rows])
