import numpy as np
import pytest

from fedgeo.geogrid import GridSpec
from fedgeo.mobility import ClientDataset, FederatedDataset, SampleSet
from fedgeo.model import loss_and_grad_arrays


@pytest.fixture
def grid4():
    return GridSpec(origin_lat=39.9, origin_lon=116.3, cell_size_m=100.0, n_rows=3, n_cols=4)


def make_client(client_id, windows, targets, n_test=0, segments=None):
    windows = np.asarray(windows, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.int64)
    if segments is None:
        segments = np.zeros(len(targets), np.int64)
    s = SampleSet(windows, targets, np.asarray(segments, np.int64))
    return ClientDataset(client_id, s, s.location_counts(), n_test)


def random_client_set(rng, n_clients, n_locations, T, n_samples=(6, 20), test=2):
    grid = GridSpec(0.0, 0.0, 100.0, 1, n_locations)
    clients = []
    for k in range(n_clients):
        n = int(rng.integers(*n_samples))
        w = rng.integers(0, n_locations, (n, T))
        y = rng.integers(0, n_locations, n)
        clients.append(make_client(k, w, y, n_test=test))
    return FederatedDataset(tuple(clients), grid, T, is_split=True)


def reference_fedavg(clients, w0, hp, rounds, seed, k_round):
    """Textbook FedAvg written against the raw loss/gradient only."""
    w = w0.buffer.copy()
    K = len(clients)
    for r in range(rounds):
        picked = sorted(np.random.default_rng([seed, r, 1]).choice(K, size=k_round, replace=False).tolist())
        new, total = None, sum(clients[i].n_k for i in picked)
        for i in picked:
            c = clients[i]
            x, v = w.copy(), np.zeros_like(w)
            ss = np.random.SeedSequence([seed, r, 2, c.client_id]).generate_state(1)[0]
            rng = np.random.default_rng(int(ss))
            for _ in range(hp.local_epochs):
                order = rng.permutation(c.n_k)
                for s in range(0, c.n_k, hp.batch_size):
                    idx = order[s:s + hp.batch_size]
                    _, g = loss_and_grad_arrays(w0.like(x), c.train.windows[idx], c.train.targets[idx])
                    v = hp.momentum * v + (g.buffer + hp.weight_decay * x)
                    x = x - hp.learning_rate * v
            term = (c.n_k / total) * x
            new = term if new is None else new + term
        w = new
    return w
