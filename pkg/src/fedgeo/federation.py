"""Server-side federation loop: alignment, sampling, local training, aggregation.

One round, in order: optionally smooth the global embedding over the spatial
weight matrix, pick ``max(floor(G * K), 1)`` clients (uniformly or with
probability proportional to their location entropy), train each selected
client from the broadcast weights, aggregate with sample-size weights
(FedAvg) or with per-layer softmax similarity to that FedAvg result, then
evaluate on the union of client test splits.

Every reduction runs in ascending client-id order, so the result does not
depend on the order in which client updates arrive.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigError, DimensionMismatch, EmptyDataset, ShapeMismatch
from .geogrid import (
    DEFAULT_NEIGHBOR_DISTANCE_M,
    DEFAULT_SELF_WEIGHT,
    SpatialWeightMatrix,
    apply_to_embedding,
    standardized_weights,
)
from .metrics import DEFAULT_KS, acc_at_k, client_drift
from .mobility import FederatedDataset, location_entropy
from .model import N_LAYERS, HyperParams, ModelWeights, init_weights, train_epochs, train_local

log = logging.getLogger(__name__)

SAMPLERS = ("uniform", "ebs")
AGGREGATORS = ("fedavg", "lwa")
DEFAULT_PROX_MU = 0.5

# stream tags keep sampling and training randomness independent
_SAMPLE_STREAM = 1
_TRAIN_STREAM = 2


@dataclass(frozen=True)
class FederationConfig:
    rounds: int = 50
    fraction: float = 0.2
    sampler: str = "uniform"
    aggregator: str = "fedavg"
    gaa_enabled: bool = False
    lwa_layers: tuple[int, ...] = (1, 2, 3)
    q: float = DEFAULT_SELF_WEIGHT
    d: float = DEFAULT_NEIGHBOR_DISTANCE_M
    prox_mu: Optional[float] = None
    hp: HyperParams = field(default_factory=HyperParams)
    seed: int = 0
    eval_ks: tuple[int, ...] = DEFAULT_KS

    def __post_init__(self):
        object.__setattr__(self, "lwa_layers", tuple(sorted(set(self.lwa_layers))))
        object.__setattr__(self, "eval_ks", tuple(sorted(set(self.eval_ks))))
        if self.rounds < 1:
            raise ConfigError(f"rounds: must be >= 1, got {self.rounds}")
        if not 0 < self.fraction <= 1:
            raise ConfigError(f"fraction: must lie in (0, 1], got {self.fraction}")
        if self.sampler not in SAMPLERS:
            raise ConfigError(f"sampler: must be one of {SAMPLERS}, got {self.sampler!r}")
        if self.aggregator not in AGGREGATORS:
            raise ConfigError(f"aggregator: must be one of {AGGREGATORS}, got {self.aggregator!r}")
        if self.aggregator == "lwa" and not self.lwa_layers:
            raise ConfigError("lwa_layers: must be nonempty when aggregator is lwa")
        if any(z not in range(1, N_LAYERS + 1) for z in self.lwa_layers):
            raise ConfigError(f"lwa_layers: entries must lie in 1..{N_LAYERS}, got {self.lwa_layers}")
        if not self.q > 0:
            raise ConfigError(f"q: must be > 0, got {self.q}")
        if self.d < 0:
            raise ConfigError(f"d: must be >= 0, got {self.d}")
        if self.prox_mu is not None and self.prox_mu < 0:
            raise ConfigError(f"prox_mu: must be >= 0, got {self.prox_mu}")
        if not self.eval_ks or self.eval_ks[0] < 1:
            raise ConfigError(f"eval_ks: must be positive integers, got {self.eval_ks}")

    def clients_per_round(self, n_clients: int) -> int:
        return max(int(np.floor(self.fraction * n_clients)), 1)


@dataclass(frozen=True)
class ClientUpdate:
    client_id: int
    weights: ModelWeights
    n_k: int
    train_loss: float = float("nan")


@dataclass(frozen=True)
class RoundRecord:
    round: int
    participants: tuple[int, ...]
    alphas: dict[int, tuple[float, ...]]
    acc: dict[int, float]
    drift: float
    seconds: float
    train_loss: float = float("nan")

    @property
    def acc1(self) -> float:
        return self.acc.get(1, float("nan"))

    @property
    def acc5(self) -> float:
        return self.acc.get(5, float("nan"))


@dataclass
class FederationState:
    round: int
    weights: ModelWeights


@dataclass
class FederationResult:
    records: list[RoundRecord]
    weights: ModelWeights


# ---------------------------------------------------------------- alignment


def apply_gaa(global_weights: ModelWeights, s: SpatialWeightMatrix) -> ModelWeights:
    """Replace the embedding layer with ``S* @ embedding``; other layers are copied."""
    if s.size != global_weights.n_locations:
        raise DimensionMismatch(f"spatial matrix is {s.size}x{s.size}, model has |L|={global_weights.n_locations}")
    return global_weights.with_layer(1, apply_to_embedding(s, global_weights.emb))


# ---------------------------------------------------------------- sampling


def _rng(seed: int, round_: int, stream: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(round_), stream, *map(int, extra)])


def sample_uniform(K: int, k_round: int, seed: int, round_: int) -> list[int]:
    """``k_round`` distinct client indices from ``range(K)``, uniformly, sorted."""
    if not 1 <= k_round <= K:
        raise ValueError(f"need 1 <= K^r <= K, got K^r={k_round}, K={K}")
    rng = _rng(seed, round_, _SAMPLE_STREAM)
    return sorted(rng.choice(K, size=k_round, replace=False).tolist())


def sample_ebs(entropies: Sequence[float], k_round: int, seed: int, round_: int) -> list[int]:
    """Entropy-proportional sampling without replacement via exponential keys.

    Each client with ``p_k > 0`` draws ``key_k = u_k ** (1 / p_k)`` and the
    ``k_round`` largest keys win, which matches drawing one client at a time
    with probabilities renormalized over those not yet drawn.  Comparison is
    done on ``log(u_k) / p_k`` to avoid underflow.
    """
    e = np.asarray(entropies, dtype=np.float64)
    K = len(e)
    if not 1 <= k_round <= K:
        raise ValueError(f"need 1 <= K^r <= K, got K^r={k_round}, K={K}")
    total = e.sum()
    if not (np.isfinite(total) and e.min() >= 0):
        raise ValueError("entropies must be finite and nonnegative")
    rng = _rng(seed, round_, _SAMPLE_STREAM)
    u = 1.0 - rng.random(K)  # (0, 1]
    if total <= 0:
        log.warning("all client entropies are zero; falling back to uniform sampling")
        return sorted(np.argsort(u, kind="stable")[:k_round].tolist())
    p = e / total
    positive = p > 0
    keys = np.full(K, -np.inf)
    keys[positive] = np.log(u[positive]) / p[positive]
    n_pos = int(positive.sum())
    if n_pos < k_round:
        log.warning("only %d clients have positive entropy for %d slots; filling uniformly", n_pos, k_round)
        # zero-entropy clients fill the remaining slots in uniform order
        fill = np.flatnonzero(~positive)[np.argsort(u[~positive], kind="stable")]
        chosen = np.flatnonzero(positive).tolist() + fill[: k_round - n_pos].tolist()
        return sorted(chosen)
    if k_round == 1:
        return [int(np.argmax(keys))]
    order = np.argsort(-keys, kind="stable")
    return sorted(order[:k_round].tolist())


def client_entropies(ds: FederatedDataset) -> list[float]:
    return [location_entropy(c) if c.n_total > 0 else 0.0 for c in ds.clients]


# ---------------------------------------------------------------- aggregation


def _sorted_updates(updates: Iterable[ClientUpdate]) -> list[ClientUpdate]:
    ups = sorted(updates, key=lambda u: u.client_id)
    if not ups:
        raise EmptyDataset("aggregation needs at least one client update")
    ref = ups[0].weights
    for u in ups[1:]:
        if not u.weights.same_shape(ref):
            raise ShapeMismatch(f"client {u.client_id} weights {u.weights.dims} differ from {ref.dims}")
    return ups


def _combine(parts: Sequence[np.ndarray], coeffs: Sequence[float]) -> np.ndarray:
    first = parts[0]
    if all(np.array_equal(first, p) for p in parts[1:]):
        # a convex combination of identical points is that point
        return first.copy()
    out = coeffs[0] * parts[0]
    for c, p in zip(coeffs[1:], parts[1:]):
        out += c * p
    return out


def fedavg_coefficients(updates: Sequence[ClientUpdate]) -> np.ndarray:
    n = np.array([u.n_k for u in updates], dtype=np.float64)
    if np.any(n <= 0):
        raise ValueError("every client update needs n_k >= 1")
    return n / n.sum()


def aggregate_fedavg(updates: Iterable[ClientUpdate]) -> ModelWeights:
    """Sample-size weighted mean of client weights, layer by layer."""
    ups = _sorted_updates(updates)
    coeffs = fedavg_coefficients(ups)
    ref = ups[0].weights
    buf = np.empty_like(ref.buffer)
    for z in range(1, N_LAYERS + 1):
        s = ref.layer_slice(z)
        buf[s] = _combine([u.weights.buffer[s] for u in ups], coeffs)
    return ref.like(buf)


def layer_similarity(updates: Iterable[ClientUpdate], temp: ModelWeights, z: int) -> np.ndarray:
    """Softmax over clients of ``<W_{z,k}, W_{z,temp}> / sqrt(d_w)``.

    Returned in ascending client-id order; ``d_w`` is the flattened size of
    layer ``z``.
    """
    ups = _sorted_updates(updates)
    s = temp.layer_slice(z)
    ref = temp.buffer[s]
    scores = np.array([u.weights.buffer[s] @ ref for u in ups]) / np.sqrt(s.stop - s.start)
    scores -= scores.max()
    e = np.exp(scores)
    return e / e.sum()


def lwa_aggregate_detailed(updates: Iterable[ClientUpdate], lwa_layers: Iterable[int]
                           ) -> tuple[ModelWeights, ModelWeights, dict[int, np.ndarray]]:
    """Returns ``(aggregated, fedavg_temp, alphas_by_layer)``."""
    ups = _sorted_updates(updates)
    temp = aggregate_fedavg(ups)
    layers = sorted(set(lwa_layers))
    buf = temp.buffer.copy()
    alphas = {}
    for z in layers:
        a = layer_similarity(ups, temp, z)
        s = temp.layer_slice(z)
        buf[s] = _combine([u.weights.buffer[s] for u in ups], a)
        alphas[z] = a
    return temp.like(buf), temp, alphas


def aggregate_lwa(updates: Iterable[ClientUpdate], lwa_layers: Iterable[int] = (1, 2, 3)) -> ModelWeights:
    """Layer-wise similarity aggregation; layers outside ``lwa_layers`` keep the FedAvg result."""
    return lwa_aggregate_detailed(updates, lwa_layers)[0]


# ---------------------------------------------------------------- rounds


def client_seed(seed: int, round_: int, client_id: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(round_), _TRAIN_STREAM, int(client_id)]).generate_state(1)[0])


def _train_client(args) -> ClientUpdate:
    weights, client, hp, prox, seed = args
    w, loss = train_local(weights, client.train, hp, prox=prox, seed=seed)
    return ClientUpdate(client.client_id, w, client.n_k, loss)


def evaluate(weights: ModelWeights, ds: FederatedDataset, ks: Sequence[int]):
    test = ds.test_union()
    cids = np.concatenate([np.full(c.n_test, c.client_id) for c in ds.clients]) if len(test) else None
    return acc_at_k(weights, test, ks, client_ids=cids)


def run_round(state: FederationState, ds: FederatedDataset, cfg: FederationConfig,
              s_star: Optional[SpatialWeightMatrix] = None,
              entropies: Optional[Sequence[float]] = None,
              map_fn: Callable = map) -> tuple[FederationState, RoundRecord]:
    """One communication round; ``map_fn`` may fan client training out to workers."""
    t0 = time.perf_counter()
    r = state.round
    weights = state.weights
    if cfg.gaa_enabled:
        if s_star is None:
            raise ConfigError("gaa_enabled requires a spatial weight matrix")
        weights = apply_gaa(weights, s_star)

    K = len(ds.clients)
    k_round = cfg.clients_per_round(K)
    if cfg.sampler == "ebs":
        if entropies is None:
            entropies = client_entropies(ds)
        chosen = sample_ebs(entropies, k_round, cfg.seed, r)
    else:
        chosen = sample_uniform(K, k_round, cfg.seed, r)
    clients = [ds.clients[i] for i in chosen]

    prox = (cfg.prox_mu, weights) if cfg.prox_mu else None
    jobs = [(weights, c, cfg.hp, prox, client_seed(cfg.seed, r, c.client_id)) for c in clients]
    updates = sorted(map_fn(_train_client, jobs), key=lambda u: u.client_id)

    if cfg.aggregator == "lwa":
        new, temp, alphas = lwa_aggregate_detailed(updates, cfg.lwa_layers)
    else:
        new = temp = aggregate_fedavg(updates)
        alphas = {}
    drift = client_drift(updates, temp)
    acc = evaluate(new, ds, cfg.eval_ks).acc_at if ds.is_split and any(c.n_test for c in ds.clients) else {}
    record = RoundRecord(
        round=r,
        participants=tuple(u.client_id for u in updates),
        alphas={z: tuple(float(x) for x in a) for z, a in alphas.items()},
        acc=acc,
        drift=drift,
        seconds=time.perf_counter() - t0,
        train_loss=float(np.mean([u.train_loss for u in updates])),
    )
    return FederationState(r + 1, new), record


def run_federation(ds: FederatedDataset, cfg: FederationConfig,
                   s_star: Optional[SpatialWeightMatrix] = None,
                   init: Optional[ModelWeights] = None,
                   map_fn: Callable = map,
                   on_round: Optional[Callable[[RoundRecord], None]] = None) -> FederationResult:
    """All ``cfg.rounds`` rounds from a seeded initialization."""
    if cfg.gaa_enabled and s_star is None:
        s_star = standardized_weights(ds.grid, cfg.d, cfg.q)
    weights = init.copy() if init is not None else init_weights(ds.n_locations, cfg.hp, seed=cfg.seed)
    entropies = client_entropies(ds) if cfg.sampler == "ebs" else None
    state = FederationState(0, weights)
    records = []
    for _ in range(cfg.rounds):
        state, rec = run_round(state, ds, cfg, s_star, entropies, map_fn)
        records.append(rec)
        if on_round is not None:
            on_round(rec)
    return FederationResult(records, state.weights)


def train_centralized(ds: FederatedDataset, hp: HyperParams, epochs: Optional[int] = None,
                      seed: int = 0, ks: Sequence[int] = DEFAULT_KS,
                      init: Optional[ModelWeights] = None) -> tuple[ModelWeights, list[dict[int, float]]]:
    """Pool every client's training split and train a single model.

    Returns the final weights and Acc@k on the union test set after each epoch
    (empty dicts when the dataset has no test split).
    """
    pooled = ds.train_union()
    if len(pooled) == 0:
        raise EmptyDataset("no training samples across clients")
    weights = init.copy() if init is not None else init_weights(ds.n_locations, hp, seed=seed)
    history: list[dict[int, float]] = []
    has_test = ds.is_split and any(c.n_test for c in ds.clients)

    def on_epoch(_epoch, w):
        history.append(evaluate(w, ds, ks).acc_at if has_test else {})

    out, _ = train_epochs(weights, pooled, hp, epochs or hp.local_epochs, seed=seed, on_epoch=on_epoch)
    return out, history
