import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedgeo.errors import ConfigError, DimensionMismatch, EmptyDataset, ShapeMismatch
from fedgeo.federation import (
    ClientUpdate,
    FederationConfig,
    FederationState,
    aggregate_fedavg,
    aggregate_lwa,
    apply_gaa,
    fedavg_coefficients,
    layer_similarity,
    lwa_aggregate_detailed,
    run_federation,
    run_round,
    sample_ebs,
    sample_uniform,
    train_centralized,
)
from fedgeo.geogrid import GridSpec, build_spatial_weights, row_normalize, standardized_weights
from fedgeo.mobility import FederatedDataset
from fedgeo.model import HyperParams, ModelWeights, init_weights, train_local

from conftest import make_client, random_client_set, reference_fedavg

SMALL_HP = HyperParams(embed_dim=3, hidden_dim=3, learning_rate=0.05, local_epochs=2, batch_size=4)


def update(k, buf, n=1, dims=(2, 1, 1)):
    return ClientUpdate(k, ModelWeights(*dims, np.asarray(buf, dtype=float)), n)


def random_updates(rng, m, dims=(3, 2, 2)):
    size = ModelWeights(*dims).buffer.size
    return [ClientUpdate(k, ModelWeights(*dims, rng.normal(size=size) * rng.uniform(0.1, 3)), int(rng.integers(1, 50)))
            for k in rng.permutation(100)[:m]]


class TestGAA:
    def test_identity_matrix(self):
        spec = GridSpec(0, 0, 100, 2, 3)
        w = init_weights(6, SMALL_HP, seed=0)
        assert apply_gaa(w, row_normalize(build_spatial_weights(spec, 50, 1.0))) == w

    def test_only_embedding_changes(self):
        spec = GridSpec(0, 0, 100, 3, 3)
        w = init_weights(9, SMALL_HP, seed=0)
        out = apply_gaa(w, standardized_weights(spec, 150, 2.0))
        for z in (2, 3):
            np.testing.assert_array_equal(out.flatten_layer(z), w.flatten_layer(z))
        assert not np.array_equal(out.emb, w.emb)

    def test_two_mutual_neighbors(self):
        spec = GridSpec(0, 0, 100, 1, 2)
        w = init_weights(2, SMALL_HP, seed=1)
        out = apply_gaa(w, standardized_weights(spec, 150, 1.0))
        np.testing.assert_allclose(out.emb, np.tile(w.emb.mean(axis=0), (2, 1)), rtol=1e-14)

    def test_size_mismatch(self):
        with pytest.raises(DimensionMismatch):
            apply_gaa(init_weights(5, SMALL_HP, seed=0), standardized_weights(GridSpec(0, 0, 100, 2, 2)))


class TestSampling:
    def test_all_clients(self):
        assert sample_uniform(5, 5, 0, 3) == [0, 1, 2, 3, 4]
        assert sample_ebs([0.1, 2, 0.3, 1, 0.5], 5, 0, 3) == [0, 1, 2, 3, 4]

    def test_deterministic(self):
        assert sample_uniform(20, 4, 7, 2) == sample_uniform(20, 4, 7, 2)
        assert sample_ebs(np.arange(1.0, 21), 4, 7, 2) == sample_ebs(np.arange(1.0, 21), 4, 7, 2)

    def test_bad_count(self):
        with pytest.raises(ValueError):
            sample_uniform(3, 0, 0, 0)
        with pytest.raises(ValueError):
            sample_ebs([1.0, 1.0], 3, 0, 0)

    def test_uniform_frequencies(self):
        K, kr, rounds = 10, 3, 10_000
        counts = np.zeros(K)
        for r in range(rounds):
            counts[sample_uniform(K, kr, 1, r)] += 1
        p = kr / K
        assert np.all(np.abs(counts / rounds - p) <= 3 * math.sqrt(p * (1 - p) / rounds))

    def test_only_nonzero_client(self):
        assert all(sample_ebs([math.log(2), 0, 0, 0], 1, 0, r) == [0] for r in range(200))

    def test_partial_zero_fill(self):
        chosen = sample_ebs([1.0, 0, 0, 0], 3, 0, 0)
        assert 0 in chosen and len(chosen) == 3

    def test_all_zero_falls_back(self, caplog):
        chosen = sample_ebs([0.0, 0.0, 0.0], 2, 0, 0)
        assert len(set(chosen)) == 2
        assert "falling back" in caplog.text

    def test_ebs_without_replacement_matches_sequential(self):
        # P(first pair) under sequential renormalized draws
        e = np.array([3.0, 2.0, 1.0])
        p = e / e.sum()
        expected = {}
        for i in range(3):
            for j in range(3):
                if i != j:
                    key = tuple(sorted((i, j)))
                    expected[key] = expected.get(key, 0) + p[i] * p[j] / (1 - p[i])
        n = 20_000
        counts = {}
        for r in range(n):
            key = tuple(sample_ebs(e, 2, 5, r))
            counts[key] = counts.get(key, 0) + 1
        for key, q in expected.items():
            assert abs(counts.get(key, 0) / n - q) <= 3 * math.sqrt(q * (1 - q) / n)


class TestFedAvg:
    def test_single(self):
        u = update(0, np.arange(9.0), 4)
        assert aggregate_fedavg([u]) == u.weights

    def test_equal_weights_mean(self):
        a, b = np.arange(9.0), np.arange(9.0)[::-1].copy()
        out = aggregate_fedavg([update(0, a, 2), update(1, b, 2)])
        np.testing.assert_allclose(out.buffer, (a + b) / 2)

    def test_scalar_example(self):
        out = aggregate_fedavg([update(0, np.zeros(9), 1), update(1, np.full(9, 4.0), 3)])
        np.testing.assert_allclose(out.buffer, 3.0)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            aggregate_fedavg([update(0, np.zeros(9)), ClientUpdate(1, ModelWeights(3, 1, 1), 1)])

    def test_empty(self):
        with pytest.raises(EmptyDataset):
            aggregate_fedavg([])

    def test_permutation_bitwise(self):
        rng = np.random.default_rng(0)
        ups = random_updates(rng, 5)
        ref = aggregate_fedavg(ups)
        for _ in range(5):
            perm = [ups[i] for i in rng.permutation(5)]
            assert np.array_equal(aggregate_fedavg(perm).buffer, ref.buffer)
            assert np.array_equal(aggregate_lwa(perm).buffer, aggregate_lwa(ups).buffer)


class TestLWA:
    def test_alpha_uses_flattened_size(self):
        # layer 3 of a (1, 1, 1) model is W_out and b_out, so d_w = 2
        temp = ModelWeights(1, 1, 1, np.ones(6))
        a = layer_similarity([update(0, [1, 1, 1, 1, 1, 2], dims=(1, 1, 1)),
                              update(1, [1, 1, 1, 1, 1, 0], dims=(1, 1, 1))], temp, 3)
        s = np.array([3.0, 1.0]) / math.sqrt(2)
        np.testing.assert_allclose(a, np.exp(s) / np.exp(s).sum(), rtol=1e-14)

    def test_alpha_scalar_layer(self):
        # the embedding of a 1-location, E=1 model is a single scalar
        temp = ModelWeights(1, 1, 1, np.array([1.0, 0, 0, 0, 0, 0]))
        a = layer_similarity([update(0, [2.0, 0, 0, 0, 0, 0], dims=(1, 1, 1)),
                              update(1, [0.0, 0, 0, 0, 0, 0], dims=(1, 1, 1))], temp, 1)
        np.testing.assert_allclose(a, [0.8808, 0.1192], atol=1e-4)
        np.testing.assert_allclose(a, [math.e ** 2 / (math.e ** 2 + 1), 1 / (math.e ** 2 + 1)], rtol=1e-14)

    def test_single_client_exact(self):
        u = update(3, np.random.default_rng(0).normal(size=9))
        assert aggregate_lwa([u]) == u.weights

    def test_identical_clients(self):
        buf = np.random.default_rng(1).normal(size=9)
        ups = [update(k, buf, n) for k, n in ((0, 1), (1, 5), (2, 9))]
        out, _, alphas = lwa_aggregate_detailed(ups, (1, 2, 3))
        assert np.array_equal(out.buffer, buf)
        for a in alphas.values():
            np.testing.assert_allclose(a, 1 / 3, atol=1e-12)

    def test_selective_layers(self):
        ups = random_updates(np.random.default_rng(2), 4)
        fed = aggregate_fedavg(ups)
        out = aggregate_lwa(ups, (3,))
        for z in (1, 2):
            np.testing.assert_array_equal(out.flatten_layer(z), fed.flatten_layer(z))

    def test_huge_scores_finite(self):
        ups = [update(0, np.full(9, 1e4)), update(1, np.full(9, -1e4))]
        out = aggregate_lwa(ups)
        assert out.is_finite()

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 2**31), m=st.integers(1, 6))
    def test_weights_sum_to_one_and_convex(self, seed, m):
        rng = np.random.default_rng(seed)
        ups = random_updates(rng, m)
        c = fedavg_coefficients(sorted(ups, key=lambda u: u.client_id))
        assert abs(c.sum() - 1) <= 1e-9 and np.all(c > 0)
        stack = np.stack([u.weights.buffer for u in ups])
        lo, hi = stack.min(axis=0) - 1e-12, stack.max(axis=0) + 1e-12
        out, temp, alphas = lwa_aggregate_detailed(ups, (1, 2, 3))
        for a in alphas.values():
            assert abs(a.sum() - 1) <= 1e-9 and np.all(a >= 0)
        for agg in (out, temp):
            assert np.all(agg.buffer >= lo) and np.all(agg.buffer <= hi)


def tiny_dataset(seed=0, n_clients=4, L=5, T=3):
    rng = np.random.default_rng(seed)
    return random_client_set(rng, n_clients, L, T)


class TestConfig:
    def test_clients_per_round(self):
        assert FederationConfig(fraction=0.2).clients_per_round(10) == 2
        assert FederationConfig(fraction=0.01).clients_per_round(10) == 1
        assert FederationConfig(fraction=1.0).clients_per_round(3) == 3

    @pytest.mark.parametrize("kw", [dict(fraction=0.0), dict(fraction=1.5), dict(rounds=0), dict(sampler="x"),
                                    dict(aggregator="mean"), dict(aggregator="lwa", lwa_layers=()), dict(lwa_layers=(4,)),
                                    dict(q=0.0), dict(d=-1.0), dict(prox_mu=-0.1)])
    def test_rejects(self, kw):
        with pytest.raises(ConfigError):
            FederationConfig(**kw)


class TestRounds:
    def test_single_client_lwa_is_that_client(self):
        ds = tiny_dataset()
        cfg = FederationConfig(rounds=1, fraction=0.2, aggregator="lwa", hp=SMALL_HP, seed=3)
        w0 = init_weights(ds.n_locations, SMALL_HP, seed=0)
        state, rec = run_round(FederationState(0, w0), ds, cfg)
        (cid,) = rec.participants
        from fedgeo.federation import client_seed
        expected, _ = train_local(w0, ds.client(cid).train, SMALL_HP, seed=client_seed(3, 0, cid))
        assert state.weights == expected
        assert rec.alphas[1] == (1.0,)

    @pytest.mark.parametrize("aggregator", ["fedavg", "lwa"])
    def test_zero_lr_fixed_point(self, aggregator):
        ds = tiny_dataset()
        hp = replace(SMALL_HP, learning_rate=0.0)
        cfg = FederationConfig(rounds=3, fraction=0.5, aggregator=aggregator, hp=hp)
        w0 = init_weights(ds.n_locations, hp, seed=0)
        res = run_federation(ds, cfg, init=w0)
        assert np.array_equal(res.weights.buffer, w0.buffer)
        assert all(r.drift == 0.0 for r in res.records)

    def test_gaa_applied_before_broadcast(self):
        ds = tiny_dataset()
        hp = replace(SMALL_HP, learning_rate=0.0)
        cfg = FederationConfig(rounds=1, fraction=1.0, gaa_enabled=True, d=150, q=1.0, hp=hp)
        w0 = init_weights(ds.n_locations, hp, seed=0)
        s = standardized_weights(ds.grid, 150, 1.0)
        res = run_federation(ds, cfg, s_star=s, init=w0)
        assert res.weights == apply_gaa(w0, s)

    def test_client_order_irrelevant(self):
        ds = tiny_dataset()
        cfg = FederationConfig(rounds=2, fraction=0.75, aggregator="lwa", hp=SMALL_HP)

        def reversed_map(fn, jobs):
            return list(map(fn, jobs))[::-1]

        a = run_federation(ds, cfg)
        b = run_federation(ds, cfg, map_fn=reversed_map)
        assert np.array_equal(a.weights.buffer, b.weights.buffer)

    def test_deterministic_records(self):
        ds = tiny_dataset()
        cfg = FederationConfig(rounds=3, fraction=0.5, sampler="ebs", aggregator="lwa", gaa_enabled=True,
                               hp=SMALL_HP, prox_mu=0.1)
        a, b = run_federation(ds, cfg), run_federation(ds, cfg)
        assert a.weights == b.weights
        for ra, rb in zip(a.records, b.records):
            assert (ra.participants, ra.alphas, ra.acc, ra.drift) == (rb.participants, rb.alphas, rb.acc, rb.drift)

    def test_one_round_equals_run_round(self):
        ds = tiny_dataset()
        cfg = FederationConfig(rounds=1, fraction=0.5, hp=SMALL_HP, seed=4)
        res = run_federation(ds, cfg)
        state, rec = run_round(FederationState(0, init_weights(ds.n_locations, SMALL_HP, seed=4)), ds, cfg)
        assert res.weights == state.weights
        assert res.records[0].participants == rec.participants

    def test_accuracies_recorded(self):
        res = run_federation(tiny_dataset(), FederationConfig(rounds=2, fraction=0.5, hp=SMALL_HP))
        for r in res.records:
            assert 0 <= r.acc1 <= r.acc5 <= 1


@pytest.mark.parametrize("fraction", [1.0, 0.34, 0.67])
def test_fedavg_matches_reference(fraction):
    rng = np.random.default_rng(9)
    clients = []
    for k in range(3):
        n = int(rng.integers(5, 9))
        clients.append(make_client(k, rng.integers(0, 2, (n, 2)), rng.integers(0, 2, n), n_test=1))
    ds = FederatedDataset(tuple(clients), GridSpec(0, 0, 100, 1, 2), 2, is_split=True)
    hp = HyperParams(embed_dim=1, hidden_dim=1, learning_rate=0.3, momentum=0.9, weight_decay=1e-3,
                     batch_size=3, local_epochs=2)
    cfg = FederationConfig(rounds=20, fraction=fraction, hp=hp, seed=5, eval_ks=(1, 2))
    w0 = init_weights(2, hp, seed=5)
    res = run_federation(ds, cfg, init=w0)
    ref = reference_fedavg(clients, w0, hp, 20, 5, cfg.clients_per_round(3))
    assert np.array_equal(res.weights.buffer, ref)


class TestCentralized:
    def test_single_client_equals_local(self):
        ds = tiny_dataset(n_clients=1)
        w0 = init_weights(ds.n_locations, SMALL_HP, seed=2)
        central, history = train_centralized(ds, SMALL_HP, epochs=3, seed=6, init=w0)
        local, _ = train_local(w0, ds.clients[0].train, replace(SMALL_HP, local_epochs=3), seed=6)
        assert central == local
        assert len(history) == 3

    def test_zero_lr(self):
        ds = tiny_dataset()
        hp = replace(SMALL_HP, learning_rate=0.0)
        w, _ = train_centralized(ds, hp, epochs=2, seed=1)
        assert w == init_weights(ds.n_locations, hp, seed=1)

    def test_empty(self):
        c = make_client(0, np.zeros((1, 2), int), [0], n_test=1)
        with pytest.raises(EmptyDataset):
            train_centralized(FederatedDataset((c,), GridSpec(0, 0, 100, 1, 2), 2, True), SMALL_HP)
