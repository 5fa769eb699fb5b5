"""Year-split cross-validation, SGD training with early stopping, and checkpoints."""

from __future__ import annotations

import hashlib
import json
import logging
import struct
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import MISSING, dataclass, field, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .model import ModelConfig, QueryPostInstance, SamCNN
from .tensor import Tensor, sgd_step
from .text import EmbeddingTable, Vocabulary
from .treceval import (
    Qrels,
    QueryMetrics,
    RunFile,
    evaluate_run,
    interpolate,
    mean_metrics,
    run_from_scores,
    tune_alpha,
)

log = logging.getLogger(__name__)

YEARS = ("2011", "2012", "2013", "2014")
CHECKPOINT_MAGIC = b"SAMCNNCK"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    """Unknown or malformed experiment configuration key."""


class CheckpointError(ValueError):
    """Unreadable checkpoint, wrong version, or shapes that do not fit the config."""


@dataclass(frozen=True)
class TrainConfig:
    seed: int
    lr: float = 0.03
    batch_size: int = 300
    max_epochs: int = 30
    patience: int = 8
    val_fraction: float = 0.15
    balanced_batches: bool = False

    def __post_init__(self):
        if self.lr < 0 or self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ConfigError("lr must be >= 0 and batch_size, max_epochs, patience >= 1")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in (0, 1)")


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------

_MODEL_KEYS = {f.name: f for f in fields(ModelConfig)}
_TRAIN_KEYS = {f.name: f for f in fields(TrainConfig)}


def _coerce(key: str, raw: str, default):
    kind = type(default) if default is not None else int
    try:
        if kind is bool:
            lowered = raw.strip().lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return lowered in ("true", "1", "yes")
        return kind(raw.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from None


def _default(f):
    return None if f.default is MISSING else f.default


def parse_config(text: str, overrides: Mapping[str, str] | None = None) -> tuple[ModelConfig, TrainConfig]:
    """Parse ``key = value`` lines into model and train configs; unknown keys are rejected."""
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        raw[key] = value
    raw.update(overrides or {})
    unknown = sorted(set(raw) - set(_MODEL_KEYS) - set(_TRAIN_KEYS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    model_kw = {k: _coerce(k, v, _default(_MODEL_KEYS[k])) for k, v in raw.items() if k in _MODEL_KEYS}
    train_kw = {k: _coerce(k, v, _default(_TRAIN_KEYS[k])) for k, v in raw.items() if k in _TRAIN_KEYS}
    if "seed" not in train_kw:
        raise ConfigError("seed is mandatory")
    try:
        return ModelConfig(**model_kw), TrainConfig(**train_kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | Path, overrides: Mapping[str, str] | None = None) -> tuple[ModelConfig, TrainConfig]:
    return parse_config(Path(path).read_text(encoding="utf-8"), overrides)


def format_config(model_config: ModelConfig, train_config: TrainConfig) -> str:
    lines = []
    for cfg in (model_config, train_config):
        for f in fields(cfg):
            value = getattr(cfg, f.name)
            lines.append(f"{f.name} = {str(value).lower() if isinstance(value, bool) else value}")
    return "\n".join(lines) + "\n"


def config_hash(model_config: ModelConfig, train_config: TrainConfig) -> str:
    return hashlib.sha256(format_config(model_config, train_config).encode()).hexdigest()


# ---------------------------------------------------------------------------
# folds and validation sampling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Fold:
    test_year: str
    train_years: tuple[str, ...]


def make_fold_plan(years: Sequence[str] = YEARS) -> list[Fold]:
    """Leave-one-year-out: each year is the test set once."""
    years = tuple(str(y) for y in years)
    return [Fold(y, tuple(o for o in years if o != y)) for y in years]


def sample_validation(train_queries: Sequence[str], fraction: float, seed: int) -> tuple[list[str], list[str]]:
    """Hold out ``round(fraction * n)`` whole queries (at least one, never all)."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
    queries = sorted(set(train_queries))
    if len(queries) < 2:
        raise ValueError("need at least 2 training queries to hold out a validation split")
    n_val = min(max(1, int(round(fraction * len(queries)))), len(queries) - 1)
    rng = np.random.default_rng(seed)
    picked = set(rng.choice(len(queries), size=n_val, replace=False).tolist())
    val = [q for i, q in enumerate(queries) if i in picked]
    train = [q for i, q in enumerate(queries) if i not in picked]
    return train, val


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_ap: float
    val_p30: float
    seconds: float

    def tsv(self, with_time: bool = True) -> str:
        cols = [str(self.epoch), f"{self.train_loss:.10f}", f"{self.val_ap:.10f}", f"{self.val_p30:.10f}"]
        if with_time:
            cols.append(f"{self.seconds:.3f}")
        return "\t".join(cols)


LOG_HEADER = "epoch\ttrain_loss\tval_AP\tval_P30\tseconds"


@dataclass
class Checkpoint:
    state: dict[str, np.ndarray]
    model_config: ModelConfig
    train_config: TrainConfig
    vocab_hash: str
    epoch: int
    val_metric: float
    alpha: float = 1.0
    test_year: str = ""
    train_qids: list[str] = field(default_factory=list)
    val_qids: list[str] = field(default_factory=list)
    history: list[EpochRecord] = field(default_factory=list)

    @property
    def config_hash(self) -> str:
        return config_hash(self.model_config, self.train_config)


def labels_to_qrels(instances: Sequence[QueryPostInstance]) -> Qrels:
    qrels: Qrels = {}
    for inst in instances:
        qrels.setdefault(inst.qid, {})[inst.docid] = int(inst.label or 0)
    return qrels


def score_instances(model: SamCNN, instances: Sequence[QueryPostInstance],
                    batch_size: int = 300) -> dict[str, dict[str, float]]:
    probs = model.predict(instances, batch_size)
    scores: dict[str, dict[str, float]] = {}
    for inst, p in zip(instances, probs):
        scores.setdefault(inst.qid, {})[inst.docid] = float(p)
    return scores


def ql_scores(instances: Sequence[QueryPostInstance]) -> dict[str, dict[str, float]]:
    scores: dict[str, dict[str, float]] = {}
    for inst in instances:
        scores.setdefault(inst.qid, {})[inst.docid] = float(inst.ql_score)
    return scores


def evaluate_model(model: SamCNN, instances: Sequence[QueryPostInstance], qrels: Qrels,
                   batch_size: int = 300) -> QueryMetrics:
    """Mean AP / P30 of the model's ranking over the queries present in ``instances``."""
    scores = score_instances(model, instances, batch_size)
    judged = {q: qrels.get(q, {}) for q in scores}
    return mean_metrics(evaluate_run(run_from_scores(scores, "val"), judged))


def _epoch_order(instances: Sequence[QueryPostInstance], cfg: TrainConfig,
                 rng: np.random.Generator) -> list[QueryPostInstance]:
    if not cfg.balanced_batches:
        return [instances[i] for i in rng.permutation(len(instances))]
    pos = [x for x in instances if x.label]
    neg = [x for x in instances if not x.label]
    if pos and neg:
        take = rng.choice(len(neg), size=min(len(pos), len(neg)), replace=False)
        chosen = pos + [neg[i] for i in sorted(take)]
    else:
        chosen = list(instances)
    return [chosen[i] for i in rng.permutation(len(chosen))]


def train_model(model: SamCNN, train: Sequence[QueryPostInstance], val: Sequence[QueryPostInstance],
                val_qrels: Qrels, cfg: TrainConfig, log_path: str | Path | None = None) -> tuple[int, float, list[EpochRecord]]:
    """SGD with early stopping on validation AP; the best state is restored in ``model``."""
    if not train:
        raise ValueError("empty training set")
    if any(x.label is None for x in train):
        raise ValueError("training instances must be labeled")
    rng = np.random.default_rng(cfg.seed)
    params = list(model.parameters().values())
    best_ap, best_epoch, best_state = -1.0, 0, model.state()
    history: list[EpochRecord] = []
    stale = 0
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        order = _epoch_order(train, cfg, rng)
        losses, sizes = [], []
        for start in range(0, len(order), cfg.batch_size):
            chunk = order[start : start + cfg.batch_size]
            loss = model.loss(chunk, train=True, rng=rng)
            loss.backward()
            sgd_step(params, cfg.lr)
            losses.append(loss.item())
            sizes.append(len(chunk))
        train_loss = float(np.dot(losses, sizes) / sum(sizes))
        metrics = evaluate_model(model, val, val_qrels) if val else QueryMetrics(0.0, 0.0)
        record = EpochRecord(epoch, train_loss, metrics.ap, metrics.p30, time.perf_counter() - t0)
        history.append(record)
        log.info("epoch %d loss %.4f val AP %.4f P30 %.4f (%.1fs)", epoch, train_loss, metrics.ap,
                 metrics.p30, record.seconds)
        if metrics.ap > best_ap:
            best_ap, best_epoch, best_state = metrics.ap, epoch, model.state()
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    model.load_state(best_state)
    if log_path is not None:
        write_training_log(history, log_path)
    return best_epoch, best_ap, history


def write_training_log(history: Sequence[EpochRecord], path: str | Path, with_time: bool = True) -> None:
    header = LOG_HEADER if with_time else LOG_HEADER.rsplit("\t", 1)[0]
    Path(path).write_text("\n".join([header] + [r.tsv(with_time) for r in history]) + "\n", encoding="utf-8")


def run_fold(fold: Fold, data: Mapping[str, Sequence[QueryPostInstance]], embeddings: EmbeddingTable,
             model_config: ModelConfig, train_config: TrainConfig, qrels: Qrels | None = None,
             log_path: str | Path | None = None) -> Checkpoint:
    """Train on the fold's training years, select by validation AP, tune the QL mix weight.

    ``data`` maps year to that year's labeled candidates. ``embeddings`` is the
    shared initial table; it is copied, never mutated.
    """
    missing = [y for y in (fold.test_year, *fold.train_years) if y not in data]
    if missing:
        raise ValueError(f"no data loaded for years {missing}")
    pool = [inst for y in fold.train_years for inst in data[y]]
    if not pool:
        raise ValueError(f"empty training set for fold test={fold.test_year}")
    test_qids = {inst.qid for inst in data[fold.test_year]}
    leaked = test_qids & {inst.qid for inst in pool}
    if leaked:
        raise ValueError(f"test-year queries present in training years: {sorted(leaked)[:5]}")
    qrels = qrels if qrels is not None else labels_to_qrels(pool)
    train_q, val_q = sample_validation([x.qid for x in pool], train_config.val_fraction, train_config.seed)
    val_set = set(val_q)
    train_inst = [x for x in pool if x.qid not in val_set]
    val_inst = [x for x in pool if x.qid in val_set]

    table = EmbeddingTable(Tensor(embeddings.weight.data.copy(), True, "embedding"), embeddings.vocab)
    model = SamCNN(model_config, table, seed=train_config.seed)
    epoch, val_ap, history = train_model(model, train_inst, val_inst, qrels, train_config, log_path)

    alpha = 1.0
    if val_inst:
        alpha, _ = tune_alpha(score_instances(model, val_inst), ql_scores(val_inst),
                              {q: qrels.get(q, {}) for q in val_set})
    return Checkpoint(
        state=model.state(),
        model_config=model_config,
        train_config=train_config,
        vocab_hash=embeddings.vocab.digest(),
        epoch=epoch,
        val_metric=val_ap,
        alpha=alpha,
        test_year=fold.test_year,
        train_qids=train_q,
        val_qids=val_q,
        history=history,
    )


def model_from_checkpoint(ckpt: Checkpoint, vocab: Vocabulary) -> SamCNN:
    if vocab.digest() != ckpt.vocab_hash:
        raise CheckpointError("vocabulary does not match the one the checkpoint was trained with")
    weight = Tensor(ckpt.state["embedding"].copy(), requires_grad=True, name="embedding")
    table = EmbeddingTable(weight, vocab)
    model = SamCNN(ckpt.model_config, table, seed=ckpt.train_config.seed)
    model.load_state(ckpt.state)
    return model


# ---------------------------------------------------------------------------
# checkpoint files
# ---------------------------------------------------------------------------


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    """Magic, little-endian u32 version, u64 header length, JSON header, raw <f8 arrays."""
    path = Path(path)
    names = sorted(ckpt.state)
    header = {
        "model_config": {f.name: getattr(ckpt.model_config, f.name) for f in fields(ModelConfig)},
        "train_config": {f.name: getattr(ckpt.train_config, f.name) for f in fields(TrainConfig)},
        "vocab_hash": ckpt.vocab_hash,
        "epoch": ckpt.epoch,
        "val_metric": ckpt.val_metric,
        "alpha": ckpt.alpha,
        "test_year": ckpt.test_year,
        "train_qids": ckpt.train_qids,
        "val_qids": ckpt.val_qids,
        "history": [[r.epoch, r.train_loss, r.val_ap, r.val_p30, r.seconds] for r in ckpt.history],
        "tensors": [{"name": n, "shape": list(ckpt.state[n].shape)} for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
            fh.write(blob)
            for n in names:
                fh.write(np.ascontiguousarray(ckpt.state[n], dtype="<f8").tobytes())
        tmp.replace(path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise
    return path


def load_checkpoint(path: str | Path, expected: ModelConfig | None = None) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 20 or raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a samCNN checkpoint (bad header)")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, this build reads {CHECKPOINT_VERSION}")
    try:
        header = json.loads(raw[20 : 20 + hlen].decode("utf-8"))
        model_config = ModelConfig(**header["model_config"])
        train_config = TrainConfig(**header["train_config"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint header ({exc})") from None
    if expected is not None and expected != model_config:
        raise CheckpointError(f"{path}: model config differs from the expected one")
    offset = 20 + hlen
    state = {}
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = 8 * count
        if offset + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated data for tensor {spec['name']}")
        state[spec["name"]] = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    _validate_shapes(state, model_config, path)
    return Checkpoint(
        state=state,
        model_config=model_config,
        train_config=train_config,
        vocab_hash=header["vocab_hash"],
        epoch=header["epoch"],
        val_metric=header["val_metric"],
        alpha=header["alpha"],
        test_year=header["test_year"],
        train_qids=header["train_qids"],
        val_qids=header["val_qids"],
        history=[EpochRecord(int(e), l, a, p, s) for e, l, a, p, s in header["history"]],
    )


def expected_shapes(config: ModelConfig, vocab_size: int) -> dict[str, tuple[int, ...]]:
    c = config
    enc = {"weight": (c.num_filters, c.kernel_size, c.embed_dim), "bias": (c.num_filters,),
           "mlp_weight": (c.num_filters, c.hidden), "mlp_bias": (c.hidden,)}
    shapes = {"embedding": (vocab_size, c.embed_dim)}
    for prefix in ["general"] + ([c.variant] if c.variant != "bicnn" else []):
        shapes.update({f"{prefix}.{k}": v for k, v in enc.items()})
    shapes.update({
        "head.reduce_weight": (c.head_input, c.final_hidden), "head.reduce_bias": (c.final_hidden,),
        "head.bn_gamma": (c.final_hidden,), "head.bn_beta": (c.final_hidden,),
        "head.bn_running_mean": (c.final_hidden,), "head.bn_running_var": (c.final_hidden,),
        "head.out_weight": (c.final_hidden, 2), "head.out_bias": (2,),
    })
    return shapes


def _validate_shapes(state, config: ModelConfig, path) -> None:
    if "embedding" not in state or len(state["embedding"].shape) != 2:
        raise CheckpointError(f"{path}: missing embedding table")
    want = expected_shapes(config, state["embedding"].shape[0])
    if set(want) != set(state):
        raise CheckpointError(f"{path}: tensor names {sorted(set(want) ^ set(state))} do not match the config")
    for name, shape in want.items():
        if tuple(state[name].shape) != shape:
            raise CheckpointError(f"{path}: {name} has shape {state[name].shape}, config expects {shape}")


# ---------------------------------------------------------------------------
# full cross-validation
# ---------------------------------------------------------------------------


@dataclass
class CrossValidationResult:
    checkpoints: dict[str, Checkpoint]
    neural: dict[str, dict[str, float]]
    ql: dict[str, dict[str, float]]
    interpolated: RunFile

    def neural_run(self, tag: str = "samcnn") -> RunFile:
        return run_from_scores(self.neural, tag)

    def ql_run(self, tag: str = "QL") -> RunFile:
        return run_from_scores(self.ql, tag)


def cross_validate(data: Mapping[str, Sequence[QueryPostInstance]], embeddings: EmbeddingTable,
                   model_config: ModelConfig, train_config: TrainConfig, qrels: Qrels | None = None,
                   folds: Sequence[Fold] | None = None, log_dir: str | Path | None = None,
                   workers: int = 1) -> CrossValidationResult:
    """Run every fold and pool the held-out-year rankings.

    The interpolated run mixes each test year with the alpha tuned on that
    fold's validation queries. ``workers > 1`` trains folds in separate
    processes; each fold is seeded on its own, so results do not depend on it.
    """
    folds = list(folds) if folds is not None else make_fold_plan(sorted(data))
    jobs = [(fold, data, embeddings, model_config, train_config, qrels,
             None if log_dir is None else Path(log_dir) / f"train_{fold.test_year}.tsv") for fold in folds]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            trained = list(pool.map(_fold_job, jobs))
    else:
        trained = [_fold_job(job) for job in jobs]
    checkpoints: dict[str, Checkpoint] = {}
    neural: dict[str, dict[str, float]] = {}
    ql: dict[str, dict[str, float]] = {}
    interpolated: RunFile = {}
    for fold, ckpt in zip(folds, trained):
        checkpoints[fold.test_year] = ckpt
        model = model_from_checkpoint(ckpt, embeddings.vocab)
        test = data[fold.test_year]
        scores = score_instances(model, test)
        base = ql_scores(test)
        neural.update(scores)
        ql.update(base)
        interpolated.update(interpolate(scores, base, ckpt.alpha, tag="samcnn+QL"))
    return CrossValidationResult(checkpoints, neural, ql, interpolated)


def _fold_job(job) -> Checkpoint:
    return run_fold(*job)
