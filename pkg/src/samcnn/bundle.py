"""Dataset bundles: vocabulary, embedding table and per-year reranking candidates.

A bundle directory holds

* ``vocab.txt``: the vocabulary (``# dim=`` header, one token per line);
* ``embeddings.npy``: the initial ``[|V|, d]`` table;
* ``instances_<year>.tsv``: ``qid, docid, label, ql_score, query, post`` with
  space-joined tokens (an empty field is an empty text);
* ``qrels.txt``: the judgments the labels came from (when supplied);
* ``stats.tsv`` and ``manifest.json``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import shutil
import tempfile
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from . import __version__
from .model import QueryPostInstance, make_instance
from .tensor import Tensor
from .text import PAD, EmbeddingTable, TokenSequence, Vocabulary, load_embeddings, random_embeddings, tokenize
from .treceval import Qrels, RunFile, TrecFormatError, parse_qrels, write_qrels

log = logging.getLogger(__name__)

# TREC Microblog topic ranges per track year
TREC_MB_YEARS = ((1, 50, "2011"), (51, 110, "2012"), (111, 170, "2013"), (171, 225, "2014"))
INSTANCE_HEADER = "qid\tdocid\tlabel\tql_score\tquery\tpost"


class BundleError(ValueError):
    """Missing or malformed bundle content."""


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


@contextmanager
def staged_dir(out_dir: str | Path) -> Iterator[Path]:
    """Write into a scratch directory and move files into ``out_dir`` only on success."""
    out_dir = Path(out_dir)
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=f".{out_dir.name}.", dir=out_dir.parent))
    try:
        yield stage
        out_dir.mkdir(exist_ok=True)
        for item in sorted(stage.iterdir()):
            os.replace(item, out_dir / item.name)
    finally:
        shutil.rmtree(stage, ignore_errors=True)


def atomic_text(path: str | Path, text: str) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_text(text, encoding="utf-8", newline="\n")
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise
    return path


def write_manifest(path: str | Path, command: str, **fields) -> Path:
    """Sorted-key JSON record of how an output was produced; no timestamps, so reruns match."""
    body = {"command": command, "version": __version__, **fields}
    return atomic_text(path, json.dumps(body, sort_keys=True, indent=2) + "\n")


def read_manifest(path: str | Path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# raw inputs
# ---------------------------------------------------------------------------


def _read_tsv(path: str | Path, min_cols: int, what: str) -> list[list[str]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            cols = line.split("\t")
            if len(cols) < min_cols:
                raise TrecFormatError(f"{path}:{lineno}: {what} needs {min_cols} tab-separated columns")
            rows.append(cols)
    return rows


def read_corpus(path: str | Path) -> dict[str, str]:
    """``docid<TAB>text`` lines."""
    return {cols[0].strip(): "\t".join(cols[1:]) for cols in _read_tsv(path, 2, "corpus line")}


def read_topics(path: str | Path) -> tuple[dict[str, str], dict[str, str]]:
    """``qid<TAB>query[<TAB>year]``; returns texts and explicit years (possibly empty)."""
    topics, years = {}, {}
    for cols in _read_tsv(path, 2, "topic line"):
        qid = cols[0].strip()
        topics[qid] = cols[1]
        if len(cols) > 2 and cols[2].strip():
            years[qid] = cols[2].strip()
    return topics, years


def trec_mb_year(qid: str) -> str:
    """Track year of a TREC Microblog topic number (``MB123`` or ``123``)."""
    digits = re.sub(r"^\D+", "", qid)
    if not digits.isdigit():
        raise BundleError(f"cannot infer a year for query {qid!r}; add a year column to the topics file")
    num = int(digits)
    for lo, hi, year in TREC_MB_YEARS:
        if lo <= num <= hi:
            return year
    raise BundleError(f"query {qid!r} lies outside the 2011-2014 topic ranges; add a year column")


_TOPIC_RE = re.compile(r"<top>(.*?)</top>", re.S | re.I)
_NUM_RE = re.compile(r"<num>\s*(?:Number:)?\s*(\S+?)\s*(?:</num>|\n)", re.I)
_QUERY_RE = re.compile(r"<(query|title)>\s*(.*?)\s*(?:</\1>|\n)", re.S | re.I)


def convert_topics(markup: str) -> list[tuple[str, str]]:
    """``(qid, query)`` pairs from TREC ``<top>`` markup; ``MB012`` becomes ``12``."""
    out = []
    for block in _TOPIC_RE.findall(markup):
        num = _NUM_RE.search(block)
        query = _QUERY_RE.search(block)
        if not num or not query:
            raise TrecFormatError("topic block without <num> or <query>/<title>")
        qid = re.sub(r"^\D+", "", num.group(1)).lstrip("0") or "0"
        out.append((qid, " ".join(query.group(2).split())))
    if not out:
        raise TrecFormatError("no <top> blocks found")
    return out


# ---------------------------------------------------------------------------
# prepare / load
# ---------------------------------------------------------------------------


@dataclass
class YearStats:
    year: str
    queries: int
    candidates: int
    relevant: int

    @property
    def percent_relevant(self) -> float:
        return 100.0 * self.relevant / self.candidates if self.candidates else 0.0


def format_stats(stats: Sequence[YearStats]) -> str:
    lines = ["year\tqueries\tcandidates\trelevant\tpercent_relevant"]
    lines += [f"{s.year}\t{s.queries}\t{s.candidates}\t{s.relevant}\t{s.percent_relevant:.2f}" for s in stats]
    return "\n".join(lines) + "\n"


def _seq_field(seq: TokenSequence) -> str:
    return "" if seq.length == 0 else " ".join(seq.tokens[: seq.length])


def _field_seq(text: str) -> TokenSequence:
    if not text:
        return TokenSequence((PAD,), length=0)
    tokens = tuple(text.split(" "))
    return TokenSequence(tokens, text=text, length=len(tokens))


def build_instances(docs: Mapping[str, str], topics: Mapping[str, str], run: RunFile, qrels: Qrels | None,
                    years: Mapping[str, str]) -> tuple[dict[str, list[QueryPostInstance]], list[str]]:
    """Candidates per year in run order; run docids absent from the corpus are dropped and returned."""
    out: dict[str, list[QueryPostInstance]] = {}
    missing: list[str] = []
    for qid in sorted(run, key=lambda q: (len(q), q)):
        if qid not in topics:
            raise BundleError(f"run query {qid} has no topic text")
        query = tokenize(topics[qid])
        judged = (qrels or {}).get(qid, {})
        bucket = out.setdefault(years[qid], [])
        for entry in run[qid]:
            if entry.docid not in docs:
                missing.append(f"{qid}:{entry.docid}")
                continue
            label = int(judged.get(entry.docid, 0) > 0) if qrels is not None else None
            bucket.append(QueryPostInstance(qid, entry.docid, query, tokenize(docs[entry.docid]), label,
                                            float(entry.score)))
    return out, missing


def prepare_bundle(docs: Mapping[str, str], topics: Mapping[str, str], run: RunFile, out_dir: str | Path,
                   qrels: Qrels | None = None, years: Mapping[str, str] | None = None,
                   embeddings_path: str | Path | None = None, dim: int = 300, seed: int = 0,
                   inputs: Mapping[str, str] | None = None) -> list[YearStats]:
    """Tokenize, build the vocabulary and embedding table, and write a bundle directory."""
    explicit = dict(years or {})
    year_of = {q: explicit.get(q) or trec_mb_year(q) for q in run}
    by_year, missing = build_instances(docs, topics, run, qrels, year_of)
    if missing:
        log.warning("%d run entries reference docids missing from the corpus; dropped: %s",
                    len(missing), " ".join(missing[:20]) + (" ..." if len(missing) > 20 else ""))
    seqs = []
    for qid in sorted(topics):
        seqs.append(tokenize(topics[qid]))
    for year in sorted(by_year):
        seqs.extend(inst.post for inst in by_year[year])
    vocab = Vocabulary.build(seqs, dim=dim)
    table = load_embeddings(embeddings_path, vocab, seed) if embeddings_path else random_embeddings(vocab, seed)

    stats = []
    with staged_dir(out_dir) as stage:
        vocab.save(stage / "vocab.txt")
        np.save(stage / "embeddings.npy", table.weight.data)
        for year in sorted(by_year):
            rows = [INSTANCE_HEADER]
            for inst in by_year[year]:
                label = "" if inst.label is None else str(inst.label)
                rows.append("\t".join([inst.qid, inst.docid, label, repr(inst.ql_score),
                                       _seq_field(inst.query), _seq_field(inst.post)]))
            (stage / f"instances_{year}.tsv").write_text("\n".join(rows) + "\n", encoding="utf-8")
            insts = by_year[year]
            stats.append(YearStats(year, len({i.qid for i in insts}), len(insts), sum(i.label or 0 for i in insts)))
        if qrels is not None:
            write_qrels(qrels, stage / "qrels.txt")
        (stage / "stats.tsv").write_text(format_stats(stats), encoding="utf-8")
        files = {p.name: file_sha256(p) for p in sorted(stage.iterdir())}
        write_manifest(stage / "manifest.json", "prepare", seed=seed, dim=dim, files=files,
                       inputs=dict(inputs or {}), bundle_hash=bundle_digest(files),
                       missing_docids=len(missing))
    return stats


def bundle_digest(files: Mapping[str, str]) -> str:
    h = hashlib.sha256()
    for name in sorted(files):
        h.update(f"{name}\0{files[name]}\n".encode())
    return h.hexdigest()


@dataclass
class Bundle:
    path: Path
    vocab: Vocabulary
    embeddings: EmbeddingTable
    data: dict[str, list[QueryPostInstance]]
    qrels: Qrels | None
    manifest: dict

    @property
    def years(self) -> list[str]:
        return sorted(self.data)


def load_bundle(path: str | Path) -> Bundle:
    path = Path(path)
    if not (path / "manifest.json").is_file():
        raise BundleError(f"{path}: not a bundle (manifest.json missing)")
    manifest = read_manifest(path / "manifest.json")
    for name, digest in manifest.get("files", {}).items():
        if not (path / name).is_file() or file_sha256(path / name) != digest:
            raise BundleError(f"{path / name}: missing or modified since prepare")
    vocab = Vocabulary.load(path / "vocab.txt")
    weight = np.load(path / "embeddings.npy")
    if weight.shape != (len(vocab), vocab.dim):
        raise BundleError(f"{path}: embedding table {weight.shape} does not fit the vocabulary")
    table = EmbeddingTable(Tensor(weight, requires_grad=True, name="embedding"), vocab)
    data: dict[str, list[QueryPostInstance]] = {}
    for f in sorted(path.glob("instances_*.tsv")):
        year = f.stem[len("instances_"):]
        lines = f.read_text(encoding="utf-8").split("\n")
        if lines[0] != INSTANCE_HEADER:
            raise BundleError(f"{f}: unexpected header")
        bucket = data.setdefault(year, [])
        for lineno, line in enumerate(lines[1:], 2):
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != 6:
                raise BundleError(f"{f}:{lineno}: expected 6 columns")
            qid, docid, label, score, q, p = cols
            bucket.append(make_instance(qid, docid, _field_seq(q), _field_seq(p), vocab,
                                        int(label) if label else None, float(score)))
    qrels = parse_qrels(path / "qrels.txt") if (path / "qrels.txt").is_file() else None
    return Bundle(path, vocab, table, data, qrels, manifest)
