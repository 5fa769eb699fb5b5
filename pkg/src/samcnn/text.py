"""Tokenization, vocabulary, and embedding tables for queries and posts."""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .tensor import Tensor, take_rows

PAD = "<pad>"
UNK = "<unk>"
PAD_ID = 0
UNK_ID = 1
OOV_INIT_BOUND = 0.05

_TOKEN_RE = re.compile(
    r"(?:https?://|www\.)\S+"  # urls stay whole
    r"|@\w+"  # so do @-mentions
    r"|[^\W_]+(?:'[^\W_]+)*",
    re.UNICODE,
)


class EmbeddingFormatError(ValueError):
    """Malformed line in an embedding text file."""


@dataclass(frozen=True)
class TokenSequence:
    """Tokens of one query or post.

    ``length`` is the number of real tokens before any padding, which is what
    the attention aggregation averages over.
    """

    tokens: tuple[str, ...]
    text: str = ""
    length: int = 0
    ids: tuple[int, ...] | None = None

    def __len__(self) -> int:
        return len(self.tokens)


def tokenize(text: str) -> TokenSequence:
    """Lowercase and split on whitespace/punctuation, keeping URLs and @-mentions intact.

    Empty input yields a single pad token with ``length == 0``.
    """
    tokens = tuple(_TOKEN_RE.findall(text.lower()))
    if not tokens:
        return TokenSequence((PAD,), text=text, length=0)
    return TokenSequence(tokens, text=text, length=len(tokens))


def pad_to_min(seq: TokenSequence, k: int) -> TokenSequence:
    """Right-pad with pad tokens up to length ``k``; longer sequences are untouched."""
    if k < 1:
        raise ValueError(f"window size must be >= 1, got {k}")
    missing = k - len(seq.tokens)
    if missing <= 0:
        return seq
    ids = None if seq.ids is None else seq.ids + (PAD_ID,) * missing
    return replace(seq, tokens=seq.tokens + (PAD,) * missing, ids=ids)


@dataclass
class Vocabulary:
    """Dense token ids with ``<pad>`` at 0 and ``<unk>`` at 1."""

    dim: int = 300
    itos: list[str] = field(default_factory=lambda: [PAD, UNK])
    stoi: dict[str, int] = field(init=False)

    def __post_init__(self):
        if self.itos[:2] != [PAD, UNK]:
            raise ValueError("vocabulary must start with <pad>, <unk>")
        self.stoi = {tok: i for i, tok in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")

    @classmethod
    def build(cls, sequences: Iterable[TokenSequence | Sequence[str]], dim: int = 300) -> "Vocabulary":
        """Vocabulary over the union of all tokens, in first-seen order."""
        vocab = cls(dim=dim)
        for seq in sequences:
            tokens = seq.tokens if isinstance(seq, TokenSequence) else seq
            for tok in tokens:
                vocab.add(tok)
        return vocab

    def add(self, token: str) -> int:
        idx = self.stoi.get(token)
        if idx is None:
            idx = len(self.itos)
            self.itos.append(token)
            self.stoi[token] = idx
        return idx

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def encode(self, seq: TokenSequence) -> TokenSequence:
        ids = tuple(self.stoi.get(tok, UNK_ID) for tok in seq.tokens)
        return replace(seq, ids=ids)

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    def digest(self) -> str:
        """sha256 over the ordered token list; stored in checkpoints."""
        h = hashlib.sha256()
        h.update(str(self.dim).encode())
        for tok in self.itos:
            h.update(b"\x00" + tok.encode("utf-8"))
        return h.hexdigest()

    def save(self, path: str | Path) -> None:
        lines = [f"# dim={self.dim}"] + self.itos
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        header, body = lines[0], [ln for ln in lines[1:] if ln]
        if not header.startswith("# dim="):
            raise ValueError(f"{path}: missing '# dim=' header")
        return cls(dim=int(header[len("# dim=") :]), itos=body)


@dataclass
class EmbeddingTable:
    """``[|V|, d]`` trainable embedding matrix; the pad row is zero and frozen."""

    weight: Tensor
    vocab: Vocabulary

    @property
    def dim(self) -> int:
        return self.weight.shape[1]


def random_embeddings(vocab: Vocabulary, seed: int, bound: float = OOV_INIT_BOUND) -> EmbeddingTable:
    """Every row ~ U[-bound, bound] except the zero pad row."""
    rng = np.random.default_rng(seed)
    data = rng.uniform(-bound, bound, size=(len(vocab), vocab.dim))
    data[PAD_ID] = 0.0
    return EmbeddingTable(Tensor(data, requires_grad=True, name="embedding"), vocab)


def load_embeddings(path: str | Path, vocab: Vocabulary, seed: int) -> EmbeddingTable:
    """Load GloVe-style text vectors for the tokens in ``vocab``.

    Tokens missing from the file get U[-0.05, 0.05] rows drawn from a
    generator seeded with ``seed``. A leading word2vec ``count dim`` header
    line is skipped.
    """
    table = random_embeddings(vocab, seed)
    data = table.weight.data
    d = vocab.dim
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").rstrip(" ").split(" ")
            if not parts or parts == [""]:
                continue
            if lineno == 1 and len(parts) == 2 and all(p.isdigit() for p in parts):
                continue
            if len(parts) != d + 1:
                raise EmbeddingFormatError(
                    f"{path}:{lineno}: expected token plus {d} values, got {len(parts) - 1}"
                )
            idx = vocab.stoi.get(parts[0])
            if idx is None or idx == PAD_ID:
                continue
            try:
                data[idx] = np.array(parts[1:], dtype=np.float64)
            except ValueError:
                raise EmbeddingFormatError(f"{path}:{lineno}: non-numeric vector component") from None
    return table


def embed(seq: TokenSequence, table: EmbeddingTable) -> Tensor:
    """Rows of the table for ``seq``; shape ``[len(seq), d]``."""
    if seq.ids is None:
        seq = table.vocab.encode(seq)
    return take_rows(table.weight, seq.ids, padding_idx=PAD_ID)
