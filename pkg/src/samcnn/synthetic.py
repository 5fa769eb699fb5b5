"""Synthetic microblog-style collection with lexical-overlap relevance.

Used by the acceptance experiment and the demos: a small vocabulary, short
posts, queries of two to four terms, and binary relevance driven by the
fraction of query terms a post contains plus Gaussian noise. A Dirichlet
query-likelihood scorer provides the first-stage run.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .model import QueryPostInstance, make_instance
from .tensor import Tensor
from .text import EmbeddingTable, Vocabulary, tokenize
from .treceval import Qrels, RunFile, run_from_scores


def query_likelihood(query: Sequence[str], doc: Sequence[str], collection: Mapping[str, int],
                     collection_length: int, mu: float = 10.0) -> float:
    """Dirichlet-smoothed log P(query | doc)."""
    tf = Counter(doc)
    total = 0.0
    for term in query:
        p_c = (collection.get(term, 0) + 0.5) / (collection_length + 1.0)
        total += math.log((tf.get(term, 0) + mu * p_c) / (len(doc) + mu))
    return total


@dataclass
class SyntheticCollection:
    docs: dict[str, str]
    topics: dict[str, str]
    years: dict[str, str]
    qrels: Qrels
    ql_run: RunFile
    vectors: dict[str, np.ndarray]
    candidates: dict[str, list[str]] = field(default_factory=dict)

    def vocabulary(self, dim: int) -> Vocabulary:
        seqs = [tokenize(t) for t in self.topics.values()] + [tokenize(t) for t in self.docs.values()]
        return Vocabulary.build(seqs, dim=dim)

    def embeddings(self, vocab: Vocabulary) -> EmbeddingTable:
        data = np.zeros((len(vocab), vocab.dim))
        for tok, idx in vocab.stoi.items():
            if tok in self.vectors:
                data[idx] = self.vectors[tok]
        return EmbeddingTable(Tensor(data, requires_grad=True, name="embedding"), vocab)

    def instances(self, vocab: Vocabulary) -> dict[str, list[QueryPostInstance]]:
        """Labeled candidates grouped by year, in run order."""
        out: dict[str, list[QueryPostInstance]] = {}
        for qid in sorted(self.topics):
            query = tokenize(self.topics[qid])
            judged = self.qrels.get(qid, {})
            for entry in self.ql_run[qid]:
                inst = make_instance(qid, entry.docid, query, tokenize(self.docs[entry.docid]), vocab,
                                     label=int(judged.get(entry.docid, 0) > 0), ql_score=entry.score)
                out.setdefault(self.years[qid], []).append(inst)
        return out

    def write_embeddings(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok in sorted(self.vectors):
                fh.write(tok + " " + " ".join(repr(float(x)) for x in self.vectors[tok]) + "\n")


def make_collection(seed: int = 0, vocab_size: int = 200, n_queries: int = 40, candidates: int = 200,
                    dim: int = 32, years: Sequence[str] = ("2011", "2012", "2013", "2014"),
                    noise: float = 0.1, threshold: float = 0.75, embed_scale: float = 0.5) -> SyntheticCollection:
    """Generate queries, candidate posts, relevance judgments and a QL run.

    A post is relevant when ``overlap + N(0, noise) >= threshold``, where
    ``overlap`` is the fraction of distinct query terms it contains.
    """
    rng = np.random.default_rng(seed)
    words = [f"w{i:03d}" for i in range(vocab_size)]
    zipf = 1.0 / np.arange(1, vocab_size + 1) ** 0.8
    zipf /= zipf.sum()
    vectors = {w: rng.normal(0.0, embed_scale, dim) for w in words}

    docs: dict[str, str] = {}
    topics: dict[str, str] = {}
    qyear: dict[str, str] = {}
    qrels: Qrels = {}
    per_query_docs: dict[str, list[str]] = {}
    content = np.arange(vocab_size // 10, vocab_size)
    for qi in range(n_queries):
        qid = str(qi + 1)
        n_terms = int(rng.integers(2, 5))
        terms = [words[i] for i in rng.choice(content, size=n_terms, replace=False)]
        topics[qid] = " ".join(terms)
        qyear[qid] = str(years[qi * len(years) // n_queries])
        weights = np.array([0.3] + [0.7**c for c in range(1, n_terms + 1)])
        weights /= weights.sum()
        per_query_docs[qid] = []
        judged = qrels.setdefault(qid, {})
        for di in range(candidates):
            docid = f"{qid}-{di:04d}"
            length = int(rng.integers(6, 16))
            n_match = int(rng.choice(n_terms + 1, p=weights))
            chosen = list(rng.choice(terms, size=n_match, replace=False)) if n_match else []
            if chosen and rng.random() < 0.3:
                chosen.append(str(rng.choice(chosen)))
            filler = [words[i] for i in rng.choice(vocab_size, size=max(0, length - len(chosen)), p=zipf)]
            tokens = chosen + filler
            tokens = [tokens[i] for i in rng.permutation(len(tokens))]
            docs[docid] = " ".join(tokens)
            overlap = len(set(terms) & set(tokens)) / n_terms
            judged[docid] = int(overlap + rng.normal(0.0, noise) >= threshold)
            per_query_docs[qid].append(docid)

    counts: Counter[str] = Counter()
    for text in docs.values():
        counts.update(text.split())
    total = sum(counts.values())
    scores = {
        qid: {d: query_likelihood(topics[qid].split(), docs[d].split(), counts, total) for d in ids}
        for qid, ids in per_query_docs.items()
    }
    return SyntheticCollection(docs, topics, qyear, qrels, run_from_scores(scores, "QL"), vectors, per_query_docs)
