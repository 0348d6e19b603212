import statistics

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedgeo.errors import EmptyTestSet
from fedgeo.federation import ClientUpdate, RoundRecord
from fedgeo.metrics import (
    acc_at_k,
    client_drift,
    mean_std,
    summarize,
    summarize_streams,
    table_csv,
    table_text,
    tail_std,
    topk_accuracy_direct,
)
from fedgeo.mobility import Sample, SampleSet
from fedgeo.model import HyperParams, ModelWeights, init_weights


def oracle_model(L=5):
    # E = H = L, tanh(10 * onehot) ~ onehot, output copies the last location forward by one
    w = ModelWeights(L, L, L)
    w.emb[...] = 10 * np.eye(L)
    w.W_xh[...] = np.eye(L)
    w.W_out[...] = np.roll(np.eye(L), 1, axis=1) * 10
    return w


def records(stream):
    return [RoundRecord(r, (0,), {}, {1: v, 5: v}, 0.0, 0.0) for r, v in enumerate(stream)]


class TestAccAtK:
    def test_perfect_predictor(self):
        w = oracle_model()
        test = [Sample((0, 2), 3), Sample((4, 4), 0), Sample((1, 1), 2)]
        assert acc_at_k(w, test, ks=(1,))[1] == 1.0

    def test_k_equals_L(self):
        w = init_weights(7, HyperParams(embed_dim=3, hidden_dim=3), seed=0)
        rng = np.random.default_rng(0)
        test = SampleSet(rng.integers(0, 7, (20, 4)), rng.integers(0, 7, 20), np.zeros(20, np.int64))
        assert acc_at_k(w, test, ks=(7,))[7] == 1.0

    def test_zero_weights_tie_rule(self):
        w = ModelWeights(6, 2, 2)
        targets = [0, 1, 2, 3, 4, 5, 0, 0]
        test = [Sample((1, 2), t) for t in targets]
        report = acc_at_k(w, test, ks=(1, 2, 5))
        assert report[1] == 3 / 8
        assert report[2] == 4 / 8
        assert report[5] == 7 / 8

    def test_empty(self):
        with pytest.raises(EmptyTestSet):
            acc_at_k(ModelWeights(3, 2, 2), [])

    def test_per_client(self):
        w = oracle_model()
        test = [Sample((0,), 1), Sample((0,), 2), Sample((1,), 2)]
        report = acc_at_k(w, test, ks=(1,), client_ids=[3, 3, 8])
        assert report.per_client_acc == {3: 0.5, 8: 1.0}

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_ranks_agree_with_topk_lists_and_monotone(self, seed):
        rng = np.random.default_rng(seed)
        L = int(rng.integers(2, 9))
        w = init_weights(L, HyperParams(embed_dim=2, hidden_dim=3), seed=seed)
        # coarse weights create exact logit ties
        w.buffer[...] = np.round(w.buffer)
        n = int(rng.integers(1, 15))
        test = SampleSet(rng.integers(0, L, (n, 3)), rng.integers(0, L, n), np.zeros(n, np.int64))
        ks = tuple(range(1, L + 1))
        report = acc_at_k(w, test, ks=ks)
        for k in ks:
            assert report[k] == topk_accuracy_direct(w, test, k)
        assert all(report[a] <= report[b] for a, b in zip(ks, ks[1:]))


class TestDrift:
    def _update(self, buf, k=0):
        return ClientUpdate(k, ModelWeights(2, 1, 1, np.asarray(buf, float)), 1)

    def test_all_equal(self):
        buf = np.arange(9.0)
        temp = ModelWeights(2, 1, 1, buf.copy())
        assert client_drift([self._update(buf), self._update(buf, 1)], temp) == 0.0

    def test_single_offset(self):
        temp = ModelWeights(2, 1, 1, np.zeros(9))
        buf = np.zeros(9)
        buf[4] = 3.0
        assert client_drift([self._update(buf)], temp) == 3.0

    def test_translation_invariant(self):
        rng = np.random.default_rng(0)
        bufs = rng.normal(size=(3, 9))
        temp = rng.normal(size=9)
        shift = rng.normal(size=9)
        a = client_drift([self._update(b, i) for i, b in enumerate(bufs)], ModelWeights(2, 1, 1, temp))
        b = client_drift([self._update(b + shift, i) for i, b in enumerate(bufs)], ModelWeights(2, 1, 1, temp + shift))
        assert a == pytest.approx(b, rel=1e-12)

    def test_empty(self):
        with pytest.raises(ValueError):
            client_drift([], ModelWeights(2, 1, 1))


class TestSummarize:
    def test_one_to_twenty(self):
        s = summarize(records(range(1, 21)))
        assert s.best[1] == 20
        assert s.last_std[1] == pytest.approx(3.0277, abs=1e-3)
        assert s.last_std[1] == pytest.approx(statistics.stdev(range(11, 21)), abs=1e-12)

    def test_constant(self):
        assert summarize(records([0.3] * 15)).last_std[5] == 0.0

    def test_single_round(self):
        s = summarize(records([0.42]))
        assert s.best[1] == 0.42 and s.last_std[1] == 0.0
        assert s.rounds == 1

    def test_short_run_uses_all_rounds(self):
        assert tail_std([1.0, 2.0, 3.0]) == pytest.approx(1.0)

    def test_empty(self):
        with pytest.raises(ValueError):
            summarize([])
        with pytest.raises(ValueError):
            summarize_streams({1: []})

    def test_mean_std(self):
        m, s = mean_std([1.0, 3.0])
        assert m == 2.0 and s == pytest.approx(2 ** 0.5)
        assert mean_std([5.0]) == (5.0, 0.0)


def test_tables():
    header = ["row", "value"]
    rows = [["A", 0.5], ["B", 1]]
    assert table_csv(header, rows) == "row,value\nA,0.500000\nB,1\n"
    text = table_text(header, rows).splitlines()
    assert text[0].startswith("row") and set(text[1]) <= {"-", " "}
    assert text[2].endswith("0.500000")
