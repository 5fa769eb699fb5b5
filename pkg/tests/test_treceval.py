import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import oracle_ap, oracle_fisher, oracle_p30
from samcnn import treceval as te
from samcnn.treceval import RunEntry, TrecFormatError


def entries(docids, scores=None, tag="t"):
    scores = scores if scores is not None else [float(len(docids) - i) for i in range(len(docids))]
    return [RunEntry(d, i + 1, s, tag) for i, (d, s) in enumerate(zip(docids, scores))]


def random_case(rng):
    pool = [f"d{i}" for i in range(int(rng.integers(5, 80)))]
    n_ret = int(rng.integers(0, len(pool) + 1))
    retrieved = list(rng.choice(pool, size=n_ret, replace=False))
    scores = [float(x) for x in rng.integers(0, 6, size=n_ret)]  # coarse scores force ties
    grades = {d: int(rng.integers(0, 3)) for d in rng.choice(pool, size=int(rng.integers(1, len(pool) + 1)),
                                                             replace=False)}
    grades[str(rng.choice(pool))] = 1
    ordered = [e for e in entries(retrieved, scores)]
    return ordered, list(zip(retrieved, scores)), grades


class TestMetricOracle:
    def test_random_cases_match_brute_force(self):
        rng = np.random.default_rng(2024)
        for _ in range(200):
            run, pairs, grades = random_case(rng)
            assert abs(te.average_precision(run, grades) - oracle_ap(pairs, grades)) < 1e-12
            assert abs(te.precision_at_30(run, grades) - oracle_p30(pairs, grades)) < 1e-12

    def test_hand_cases(self):
        assert te.average_precision(["a"], {"a": 1}) == 1.0
        assert te.average_precision(["a", "b", "c"], {"a": 1, "c": 1}) == (1 + 2 / 3) / 2
        assert round(te.average_precision(["a", "b", "c"], {"a": 1, "c": 1}), 4) == 0.8333
        assert te.precision_at_30(["a", "x", "b", "c"], {"a": 1, "b": 1, "c": 1}) == 0.1
        assert te.precision_at_30([], {"a": 1}) == 0.0
        top = [f"d{i}" for i in range(30)]
        assert te.precision_at_30(top, {d: 1 for d in top}) == 1.0

    def test_unretrieved_relevant_counts_in_denominator(self):
        assert te.average_precision(["a", "b"], {"a": 1, "z": 1}) == 0.5

    def test_no_relevant_is_undefined(self):
        with pytest.raises(ValueError):
            te.average_precision(["a"], {"a": 0})

    def test_score_ties_break_by_docid_descending(self):
        run = entries(["a", "b"], [1.0, 1.0])
        assert te.evaluation_order(run) == ["b", "a"]
        assert te.average_precision(run, {"a": 1}) == 0.5

    def test_evaluate_run_skips_and_zero_fills(self, caplog):
        qrels = {"1": {"a": 1}, "2": {"b": 0}, "3": {"c": 1}}
        per_query = te.evaluate_run({"1": entries(["a"])}, qrels)
        assert sorted(per_query) == ["1", "3"]
        assert per_query["3"] == te.QueryMetrics(0.0, 0.0)
        assert "no relevant" in caplog.text

    def test_mean_is_order_invariant(self):
        rng = np.random.default_rng(0)
        metrics = {str(i): te.QueryMetrics(float(rng.random()), float(rng.random())) for i in range(30)}
        shuffled = dict(sorted(metrics.items(), key=lambda kv: rng.random()))
        assert te.mean_metrics(metrics) == te.mean_metrics(shuffled)


class TestFormats:
    def test_parse_qrels_line(self, tmp_path):
        path = tmp_path / "q"
        path.write_text("101 0 d7 1\n")
        assert te.parse_qrels(path) == {"101": {"d7": 1}}

    def test_duplicate_qrels_last_wins(self, tmp_path, caplog):
        path = tmp_path / "q"
        path.write_text("1 0 a 1\n1 0 a 2\n")
        assert te.parse_qrels(path) == {"1": {"a": 2}}
        assert "duplicate" in caplog.text.lower()

    def test_malformed_qrels_line_number(self, tmp_path):
        path = tmp_path / "q"
        path.write_text("1 0 a 1\n1 0 b\n")
        with pytest.raises(TrecFormatError, match=":2:"):
            te.parse_qrels(path)

    def test_non_contiguous_ranks(self, tmp_path):
        path = tmp_path / "r"
        path.write_text("1 Q0 a 1 3.0 t\n1 Q0 b 2 2.0 t\n1 Q0 c 4 1.0 t\n")
        with pytest.raises(TrecFormatError, match="contiguous"):
            te.parse_run(path)

    def test_duplicate_run_doc(self, tmp_path):
        path = tmp_path / "r"
        path.write_text("1 Q0 a 1 3.0 t\n1 Q0 a 2 2.0 t\n")
        with pytest.raises(TrecFormatError, match="duplicate"):
            te.parse_run(path)

    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(5)
        scores = {str(q): {f"d{i}": float(rng.normal()) for i in range(20)} for q in range(3)}
        run = te.run_from_scores(scores, "tag")
        te.write_run(run, tmp_path / "r")
        again = te.parse_run(tmp_path / "r")
        assert again == run
        te.write_run(again, tmp_path / "r2")
        assert (tmp_path / "r").read_bytes() == (tmp_path / "r2").read_bytes()
        qrels = {"1": {"a": 1, "b": 0}, "2": {"c": 2}}
        te.write_qrels(qrels, tmp_path / "q")
        assert te.parse_qrels(tmp_path / "q") == qrels

    def test_run_depth_limit(self):
        ranked = te.rank_scores({f"d{i}": float(i) for i in range(1500)}, "t")
        assert len(ranked) == te.MAX_RUN_DEPTH and ranked[0].docid == "d1499"


class TestInterpolation:
    neural = {"1": {"a": 0.9, "b": 0.1, "c": 0.5}}
    ql = {"1": {"a": -9.0, "b": -2.0, "c": -5.0}}

    def test_alpha_zero_is_ql_order(self):
        run = te.interpolate(self.neural, self.ql, 0.0)
        assert [e.docid for e in run["1"]] == ["b", "c", "a"]

    def test_alpha_one_is_neural_order(self):
        run = te.interpolate(self.neural, self.ql, 1.0)
        assert [e.docid for e in run["1"]] == ["a", "c", "b"]

    def test_symmetric_tie_uses_docid_rule(self):
        run = te.interpolate({"1": {"A": 1.0, "B": 0.0}}, {"1": {"A": 0.0, "B": 1.0}}, 0.5)
        assert [e.score for e in run["1"]] == [0.5, 0.5]
        assert [e.docid for e in run["1"]] == ["B", "A"]

    def test_alpha_zero_reproduces_ql_metrics(self):
        rng = np.random.default_rng(8)
        ql = {str(q): {f"d{i}": float(rng.normal()) for i in range(40)} for q in range(5)}
        neural = {q: {d: float(rng.random()) for d in docs} for q, docs in ql.items()}
        qrels = {q: {d: int(rng.random() < 0.3) for d in docs} for q, docs in ql.items()}
        base = te.evaluate_run(te.run_from_scores(ql, "QL"), qrels)
        assert te.evaluate_run(te.interpolate(neural, ql, 0.0), qrels) == base

    def test_candidate_mismatch_lists_docids(self):
        with pytest.raises(ValueError, match="'z'"):
            te.interpolate({"1": {"a": 1.0, "z": 0.0}}, {"1": {"a": 1.0}}, 0.5)

    def test_constant_scores_normalize_to_zero(self):
        run = te.interpolate({"1": {"a": 3.0, "b": 3.0}}, {"1": {"a": 1.0, "b": 0.0}}, 0.5)
        assert run["1"][0] == RunEntry("a", 1, 0.5, "interp")

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(-5, 5), min_size=2, max_size=8), st.integers(0, 7), st.floats(0.01, 3.0),
           st.sampled_from([0.1, 0.3, 0.5, 0.9, 1.0]), st.integers(0, 2**16))
    def test_raising_neural_score_never_lowers_rank(self, values, pick, bump, alpha, seed):
        docs = [f"d{i}" for i in range(len(values))]
        target = docs[pick % len(docs)]
        ql_rng = np.random.default_rng(seed)
        ql = {"1": {d: float(ql_rng.normal()) for d in docs}}
        before = {"1": dict(zip(docs, values))}
        after = {"1": dict(before["1"], **{target: before["1"][target] + bump})}
        rank = lambda run: [e.docid for e in run["1"]].index(target)
        assert rank(te.interpolate(after, ql, alpha)) <= rank(te.interpolate(before, ql, alpha))

    def test_tune_alpha_smallest_on_ties(self):
        docs = {"1": {"a": 1.0, "b": 0.0}}
        best, table = te.tune_alpha(docs, docs, {"1": {"a": 1}})
        assert best == 0.0 and set(table.values()) == {1.0}


class TestFisher:
    def test_identical_systems(self):
        a = {str(i): float(i) / 10 for i in range(10)}
        assert te.fisher_randomization(a, dict(a), exhaustive=True) == 1.0
        assert te.fisher_randomization(a, dict(a), iterations=1000) == 1.0

    def test_constant_shift_n12(self):
        b = {str(i): 0.05 * i for i in range(12)}
        a = {q: v + 0.3 for q, v in b.items()}
        assert te.fisher_randomization(a, b, exhaustive=True) == 2 / 4096

    def test_exhaustive_brute_force(self):
        rng = np.random.default_rng(4)
        a = {str(i): float(rng.random()) for i in range(7)}
        b = {str(i): float(rng.random()) for i in range(7)}
        d = [a[q] - b[q] for q in sorted(a)]
        assert te.fisher_randomization(a, b, exhaustive=True) == oracle_fisher(d)

    @pytest.mark.parametrize("n", [10, 12])
    def test_monte_carlo_close_to_exhaustive(self, n):
        rng = np.random.default_rng(n)
        a = {str(i): float(rng.random()) for i in range(n)}
        b = {q: v + float(rng.normal(0.05, 0.2)) for q, v in a.items()}
        exact = te.fisher_randomization(a, b, exhaustive=True)
        approx = te.fisher_randomization(a, b, iterations=100_000, seed=1)
        assert abs(exact - approx) < 0.01

    def test_p_value_in_unit_interval(self):
        rng = np.random.default_rng(6)
        a = {str(i): float(rng.random()) for i in range(30)}
        b = {str(i): float(rng.random()) + 1 for i in range(30)}
        p = te.fisher_randomization(a, b, iterations=500, seed=0)
        assert 0 < p <= 1 and p == 1 / 500

    def test_seeded(self):
        rng = np.random.default_rng(7)
        a = {str(i): float(rng.random()) for i in range(25)}
        b = {str(i): float(rng.random()) for i in range(25)}
        assert te.fisher_randomization(a, b, 2000, seed=3) == te.fisher_randomization(a, b, 2000, seed=3)

    def test_qid_mismatch(self):
        with pytest.raises(ValueError, match="identical query sets"):
            te.fisher_randomization({"1": 0.1}, {"2": 0.1})

    def test_exhaustive_limit(self):
        a = {str(i): 0.0 for i in range(21)}
        with pytest.raises(ValueError, match="n <= 20"):
            te.fisher_randomization(a, dict(a), exhaustive=True)


class TestPerQueryReport:
    def _data(self):
        rng = np.random.default_rng(11)
        qrels = {str(q): {f"d{i}": int(rng.random() < 0.3) for i in range(30)} for q in range(8)}
        qrels["7"] = {"d0": 0}
        mk = lambda: te.run_from_scores({q: {d: float(rng.random()) for d in qrels[q]} for q in qrels}, "x")
        return qrels, mk(), mk()

    def test_identical_systems_zero_delta(self, tmp_path):
        qrels, a, _ = self._data()
        rows = te.per_query_report(a, a, qrels, tmp_path / "r.tsv").read_text().splitlines()[1:]
        assert all(float(r.split("\t")[3]) == 0.0 for r in rows)

    def test_rows_sorted_and_sum(self, tmp_path):
        qrels, a, b = self._data()
        lines = te.per_query_report(a, b, qrels, tmp_path / "r.tsv", ("PAtt", "QL")).read_text().splitlines()
        assert lines[0] == "qid\tAP_PAtt\tAP_QL\tdelta"
        rows = [ln.split("\t") for ln in lines[1:]]
        judged = [q for q in qrels if any(g > 0 for g in qrels[q].values())]
        assert len(rows) == len(judged)
        deltas = [float(r[3]) for r in rows]
        assert deltas == sorted(deltas, reverse=True)
        ma = te.mean_metrics(te.evaluate_run(a, qrels)).ap
        mb = te.mean_metrics(te.evaluate_run(b, qrels)).ap
        assert abs(math.fsum(deltas) - len(rows) * (ma - mb)) < 1e-12
