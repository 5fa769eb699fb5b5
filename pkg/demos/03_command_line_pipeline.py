"""
The command-line pipeline
=========================

prepare -> train -> rerank -> evaluate -> sigtest on the small TREC-style
files under tests/fixtures. Each step is the same call the ``samcnn``
executable makes, so every line below can be pasted into a shell as
``samcnn <args>``.
"""

# %%
import tempfile
from pathlib import Path

from samcnn.cli import main

fix = Path(__file__).resolve().parent.parent / "tests" / "fixtures"
work = Path(tempfile.mkdtemp(prefix="samcnn-demo-"))


def run(*args):
    print("$ samcnn", " ".join(args))
    code = main(list(args))
    print("exit", code, "\n")
    return code


# %% tokenize posts, build the vocabulary and embeddings, write a hashed bundle
run("prepare", "--corpus", str(fix / "corpus.tsv"), "--topics", str(fix / "topics.tsv"),
    "--run", str(fix / "ql.run"), "--qrels", str(fix / "qrels.txt"),
    "--dim", "8", "--seed", "3", "--out", str(work / "bundle"))

# %% four year folds of a tiny PAtt model; --set overrides any config key
tiny = ["--set", "embed_dim=8", "--set", "num_filters=8", "--set", "hidden=8", "--set", "final_hidden=4",
        "--set", "max_epochs=3", "--set", "batch_size=40", "--set", "val_fraction=0.4"]
run("train", "--bundle", str(work / "bundle"), "--seed", "7", "--set", "variant=patt", *tiny,
    "--out", str(work / "model"))
print(sorted(p.name for p in (work / "model").iterdir()))

# %% rerank alone and mixed with QL (each fold's tuned alpha)
run("rerank", "--bundle", str(work / "bundle"), "--checkpoints", str(work / "model"),
    "--out", str(work / "patt.run"))
run("rerank", "--bundle", str(work / "bundle"), "--checkpoints", str(work / "model"),
    "--interpolate", "--out", str(work / "patt_ql.run"))

# %% evaluate; --checkpoints checks the run was made with this model directory
for name in ("patt.run", "patt_ql.run"):
    run("evaluate", "--run", str(work / name), "--qrels", str(fix / "qrels.txt"),
        "--checkpoints", str(work / "model"))
run("evaluate", "--run", str(fix / "ql.run"), "--qrels", str(fix / "qrels.txt"))

# %% a run from elsewhere has no matching manifest: exit 4 unless --force
run("evaluate", "--run", str(fix / "ql.run"), "--qrels", str(fix / "qrels.txt"), "--checkpoints", str(work / "model"))

# %% paired significance, with a per-query table of AP differences
run("sigtest", "--qrels", str(fix / "qrels.txt"), f"patt+ql={work / 'patt_ql.run'}", f"ql={fix / 'ql.run'}",
    "--exhaustive", "--report", str(work / "per_query.tsv"))
print((work / "per_query.tsv").read_text())
print("outputs in", work)
