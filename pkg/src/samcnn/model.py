"""samCNN rerankers: BiCNN, BiCNN+QAtt, BiCNN+PAtt.

The model concatenates the Siamese encodings of query and post (plus the
averaged attention features for the attention variants), reduces them with
an MLP+ReLU to the hidden state ``o``, batch-normalizes, and classifies
relevant / non-relevant with a softmax.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import encoders as enc
from .tensor import (
    PreconditionError,
    Tensor,
    batch_norm,
    concat,
    dropout,
    log_softmax,
    matmul,
    nll_loss,
    no_grad,
    relu,
    take_rows,
)
from .text import PAD_ID, EmbeddingTable, TokenSequence, Vocabulary, pad_to_min

VARIANTS = ("bicnn", "qatt", "patt")


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "patt"
    num_filters: int = 250
    kernel_size: int = 2
    embed_dim: int = 300
    hidden: int = 200
    final_hidden: int = 100
    dropout: float = 0.5
    clamp_cosine: bool = False
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        for name in ("num_filters", "kernel_size", "embed_dim", "hidden", "final_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def head_input(self) -> int:
        return self.hidden * (2 if self.variant == "bicnn" else 3)


@dataclass(frozen=True)
class QueryPostInstance:
    qid: str
    docid: str
    query: TokenSequence
    post: TokenSequence
    label: int | None = None
    ql_score: float = 0.0


@dataclass
class Batch:
    query_ids: np.ndarray  # [B, n] padded
    query_lengths: np.ndarray  # real tokens, N_q
    query_conv_lengths: np.ndarray  # after padding to >= k
    post_ids: np.ndarray
    post_conv_lengths: np.ndarray
    labels: np.ndarray | None

    def __len__(self) -> int:
        return self.query_ids.shape[0]


def make_instance(qid: str, docid: str, query: TokenSequence, post: TokenSequence, vocab: Vocabulary,
                  label: int | None = None, ql_score: float = 0.0) -> QueryPostInstance:
    return QueryPostInstance(qid, docid, vocab.encode(query), vocab.encode(post), label, ql_score)


def collate(instances: Sequence[QueryPostInstance], kernel_size: int) -> Batch:
    queries = [pad_to_min(inst.query, kernel_size) for inst in instances]
    posts = [pad_to_min(inst.post, kernel_size) for inst in instances]
    if any(s.ids is None for s in queries + posts):
        raise PreconditionError("instances must be encoded with a vocabulary before batching")

    def pack(seqs):
        width = max(len(s.ids) for s in seqs)
        ids = np.full((len(seqs), width), PAD_ID, dtype=np.int64)
        for row, s in enumerate(seqs):
            ids[row, : len(s.ids)] = s.ids
        return ids, np.array([len(s.ids) for s in seqs])

    q_ids, q_conv = pack(queries)
    p_ids, p_conv = pack(posts)
    labels = None
    if all(inst.label is not None for inst in instances):
        labels = np.array([inst.label for inst in instances], dtype=np.int64)
    return Batch(q_ids, np.array([inst.query.length for inst in instances]), q_conv, p_ids, p_conv, labels)


class SamCNN:
    """Parameters and forward pass for one model variant."""

    def __init__(self, config: ModelConfig, embeddings: EmbeddingTable, seed: int):
        if embeddings.dim != config.embed_dim:
            raise ValueError(f"embedding dim {embeddings.dim} != config embed_dim {config.embed_dim}")
        self.config = config
        self.embeddings = embeddings
        rng = np.random.default_rng(seed)
        c = config
        self.general = enc.EncoderParams.init(c.num_filters, c.kernel_size, c.embed_dim, c.hidden, rng, "general")
        self.attention = None
        if c.variant != "bicnn":
            self.attention = enc.EncoderParams.init(
                c.num_filters, c.kernel_size, c.embed_dim, c.hidden, rng, c.variant
            )
        b1 = 1.0 / np.sqrt(c.head_input)
        b2 = 1.0 / np.sqrt(c.final_hidden)
        self.reduce_weight = Tensor(rng.uniform(-b1, b1, (c.head_input, c.final_hidden)), True, "head.reduce_weight")
        self.reduce_bias = Tensor(rng.uniform(-b1, b1, c.final_hidden), True, "head.reduce_bias")
        self.bn_gamma = Tensor(np.ones(c.final_hidden), True, "head.bn_gamma")
        self.bn_beta = Tensor(np.zeros(c.final_hidden), True, "head.bn_beta")
        self.bn_running_mean = np.zeros(c.final_hidden)
        self.bn_running_var = np.ones(c.final_hidden)
        self.out_weight = Tensor(rng.uniform(-b2, b2, (c.final_hidden, 2)), True, "head.out_weight")
        self.out_bias = Tensor(rng.uniform(-b2, b2, 2), True, "head.out_bias")

    # -- parameter bookkeeping -----------------------------------------------
    def parameters(self) -> dict[str, Tensor]:
        params = {"embedding": self.embeddings.weight}
        encs = [self.general] + ([self.attention] if self.attention is not None else [])
        for e in encs:
            for t in e.tensors():
                params[t.name] = t
        for t in (self.reduce_weight, self.reduce_bias, self.bn_gamma, self.bn_beta, self.out_weight, self.out_bias):
            params[t.name] = t
        return params

    def buffers(self) -> dict[str, np.ndarray]:
        return {"head.bn_running_mean": self.bn_running_mean, "head.bn_running_var": self.bn_running_var}

    def state(self) -> dict[str, np.ndarray]:
        """Copies of every parameter and buffer array, keyed by name."""
        out = {k: t.data.copy() for k, t in self.parameters().items()}
        out.update({k: v.copy() for k, v in self.buffers().items()})
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        targets = {k: t.data for k, t in self.parameters().items()}
        targets.update(self.buffers())
        missing = set(targets) - set(state)
        extra = set(state) - set(targets)
        if missing or extra:
            raise ValueError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, arr in targets.items():
            if arr.shape != state[name].shape:
                raise ValueError(f"state shape mismatch for {name}: {state[name].shape} != {arr.shape}")
            arr[...] = state[name]

    def encoder_parameter_count(self) -> int:
        return sum(e.parameter_count() for e in [self.general, self.attention] if e is not None)

    # -- forward ------------------------------------------------------------
    def features(self, batch: Batch) -> Tensor:
        """Concatenated ``[g_q; g_p]`` or ``[g_q; g_p; v]`` for a batch."""
        c = self.config
        table = self.embeddings.weight
        q = take_rows(table, batch.query_ids, padding_idx=PAD_ID)
        p = take_rows(table, batch.post_ids, padding_idx=PAD_ID)
        g_q = enc.encode_general_batch(q, batch.query_conv_lengths, self.general)
        g_p = enc.encode_general_batch(p, batch.post_conv_lengths, self.general)
        parts = [g_q, g_p]
        if self.attention is not None:
            if c.variant == "qatt":
                h = enc.encode_qatt_batch(p, q, batch.post_conv_lengths, self.attention)
            else:
                h = enc.encode_patt_batch(p, q, batch.post_conv_lengths, self.attention, c.clamp_cosine)
            parts.append(aggregate(h, batch.query_lengths))
        return concat(parts, axis=-1)

    def forward_batch(self, batch: Batch, train: bool = False,
                      rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
        """Log-probabilities ``[B, 2]`` and hidden states ``o`` ``[B, final_hidden]``."""
        c = self.config
        x = dropout(self.features(batch), c.dropout, train, rng)
        o = relu(matmul(x, self.reduce_weight) + self.reduce_bias)
        normed = batch_norm(o, self.bn_gamma, self.bn_beta, self.bn_running_mean, self.bn_running_var,
                            train, c.bn_momentum, c.bn_eps)
        logits = matmul(normed, self.out_weight) + self.out_bias
        return log_softmax(logits), o

    def forward(self, instance: QueryPostInstance, train: bool = False,
                rng: np.random.Generator | None = None) -> tuple[float, np.ndarray]:
        """P(relevant) and ``o`` for a single instance."""
        log_probs, o = self.forward_batch(collate([instance], self.config.kernel_size), train, rng)
        return float(np.exp(log_probs.data[0, 1])), o.data[0].copy()

    def loss(self, instances: Sequence[QueryPostInstance], train: bool = True,
             rng: np.random.Generator | None = None) -> Tensor:
        """Mean NLL of the labels under the model."""
        batch = collate(instances, self.config.kernel_size)
        if batch.labels is None:
            raise PreconditionError("every instance needs a label to compute the loss")
        log_probs, _ = self.forward_batch(batch, train, rng)
        return nll_loss(log_probs, batch.labels)

    def predict(self, instances: Sequence[QueryPostInstance], batch_size: int = 300) -> np.ndarray:
        """Eval-mode P(relevant) for each instance, in order."""
        out = np.empty(len(instances))
        with no_grad():
            for start in range(0, len(instances), batch_size):
                chunk = instances[start : start + batch_size]
                log_probs, _ = self.forward_batch(collate(chunk, self.config.kernel_size), train=False)
                out[start : start + len(chunk)] = np.exp(log_probs.data[:, 1])
        return out

    def hidden_states(self, instances: Sequence[QueryPostInstance], batch_size: int = 300) -> np.ndarray:
        out = np.empty((len(instances), self.config.final_hidden))
        with no_grad():
            for start in range(0, len(instances), batch_size):
                chunk = instances[start : start + batch_size]
                _, o = self.forward_batch(collate(chunk, self.config.kernel_size), train=False)
                out[start : start + len(chunk)] = o.data
        return out


def aggregate(h: Tensor, query_lengths: np.ndarray) -> Tensor:
    """Mean of ``h[b, :N_q]`` over the real query tokens; zero when ``N_q == 0``."""
    lengths = np.asarray(query_lengths)
    n = h.shape[1]
    mask = (np.arange(n)[None, :] < lengths[:, None]).astype(np.float64)
    scale = mask / np.maximum(lengths, 1)[:, None]
    return (h * scale[:, :, None]).sum(axis=1)


def export_hidden(model: SamCNN, instances: Sequence[QueryPostInstance], out_path: str | Path) -> Path:
    """Write ``qid, docid, label, o_0 .. o_{H-1}`` rows as TSV."""
    out_path = Path(out_path)
    hidden = model.hidden_states(instances)
    tmp = out_path.with_name(out_path.name + ".tmp")
    try:
        with open(tmp, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(["qid", "docid", "label"] + [f"o{i}" for i in range(hidden.shape[1])])
            for inst, row in zip(instances, hidden):
                label = "" if inst.label is None else inst.label
                w.writerow([inst.qid, inst.docid, label] + [repr(float(x)) for x in row])
        os.replace(tmp, out_path)
    except OSError as exc:
        tmp.unlink(missing_ok=True)
        raise OSError(f"cannot write hidden states to {out_path}: {exc}") from exc
    return out_path


def config_items(config) -> dict[str, object]:
    return {f.name: getattr(config, f.name) for f in fields(config)}
