"""
Reranking a synthetic collection
================================

Train the three variants with year-wise cross-validation on a small generated
collection, mix each with query likelihood, and test the differences.
Sizes are kept small so the script finishes in about a minute.
"""

# %%
from samcnn.model import VARIANTS, ModelConfig
from samcnn.synthetic import make_collection
from samcnn.trainer import TrainConfig, cross_validate
from samcnn.treceval import evaluate_run, fisher_randomization, mean_metrics

coll = make_collection(seed=0, n_queries=24, candidates=80, dim=16)
vocab = coll.vocabulary(dim=16)
table = coll.embeddings(vocab)
data = coll.instances(vocab)
print({year: len(rows) for year, rows in sorted(data.items())}, "candidates per year")

# %% the baseline: the QL run the candidates came from
ql = evaluate_run(coll.ql_run, coll.qrels)
print(f"QL       AP {mean_metrics(ql).ap:.4f}")

# %% four folds per variant: train on three years, test on the fourth
train_cfg = TrainConfig(seed=1, batch_size=32, max_epochs=8, patience=3)
per_query = {}
for variant in VARIANTS:
    model_cfg = ModelConfig(variant=variant, embed_dim=16, num_filters=24, hidden=24, final_hidden=8)
    result = cross_validate(data, table, model_cfg, train_cfg, qrels=coll.qrels)
    alone = evaluate_run(result.neural_run(), coll.qrels)
    mixed = evaluate_run(result.interpolated, coll.qrels)
    alphas = {y: ck.alpha for y, ck in sorted(result.checkpoints.items())}
    print(f"{variant:8s} AP {mean_metrics(alone).ap:.4f}  +QL {mean_metrics(mixed).ap:.4f}  alpha {alphas}")
    per_query[variant] = {q: m.ap for q, m in alone.items()}

# %% paired randomization test of the attention variants against the baseline network
for variant in ("qatt", "patt"):
    p = fisher_randomization(per_query[variant], per_query["bicnn"], iterations=20_000, seed=0)
    print(f"{variant} vs bicnn: p = {p:.4f}")
