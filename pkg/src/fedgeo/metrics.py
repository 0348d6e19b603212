"""Evaluation and reporting: Acc@k, client drift, run summaries."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import EmptyTestSet
from .model import ModelWeights, forward_batch, topk_from_logits

DEFAULT_KS = (1, 5)
LAST_N_ROUNDS = 10
_EVAL_CHUNK = 512


@dataclass(frozen=True)
class EvalReport:
    acc_at: dict[int, float]
    n_eval: int
    per_client_acc: dict[int, float] = field(default_factory=dict)

    def __getitem__(self, k: int) -> float:
        return self.acc_at[k]


def _as_arrays(test) -> tuple[np.ndarray, np.ndarray]:
    if hasattr(test, "windows"):
        return np.asarray(test.windows), np.asarray(test.targets)
    test = list(test)
    if not test:
        return np.zeros((0, 1), np.int64), np.zeros(0, np.int64)
    return (np.array([s.window for s in test], dtype=np.int64),
            np.array([s.target for s in test], dtype=np.int64))


def target_ranks(w: ModelWeights, windows: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """0-based position of each target in the model's tie-broken ranking."""
    ranks = np.empty(len(targets), dtype=np.int64)
    ids = np.arange(w.n_locations)
    for start in range(0, len(targets), _EVAL_CHUNK):
        sl = slice(start, start + _EVAL_CHUNK)
        logits = forward_batch(w, windows[sl])
        t = targets[sl]
        tl = logits[np.arange(len(t)), t][:, None]
        # ids ranked ahead of the target: larger logit, or equal logit and smaller id
        ahead = (logits > tl) | ((logits == tl) & (ids[None, :] < t[:, None]))
        ranks[sl] = ahead.sum(axis=1)
    return ranks


def acc_at_k(w: ModelWeights, test, ks: Sequence[int] = DEFAULT_KS,
             client_ids: Sequence[int] | None = None) -> EvalReport:
    """Fraction of samples whose target is among the top-k predictions.

    ``client_ids``, when given, labels each test sample with its client so the
    report also carries per-client Acc@1.
    """
    windows, targets = _as_arrays(test)
    if len(targets) == 0:
        raise EmptyTestSet("Acc@k needs at least one test sample")
    for k in ks:
        if not 1 <= k <= w.n_locations:
            raise ValueError(f"k must lie in [1, {w.n_locations}], got {k}")
    ranks = target_ranks(w, windows, targets)
    acc = {int(k): float(np.mean(ranks < k)) for k in ks}
    per_client = {}
    if client_ids is not None:
        cids = np.asarray(client_ids)
        for cid in np.unique(cids):
            per_client[int(cid)] = float(np.mean(ranks[cids == cid] < 1))
    return EvalReport(acc, len(targets), per_client)


def topk_accuracy_direct(w: ModelWeights, test, k: int) -> float:
    """Acc@k by explicit top-k lists; slower, used to cross-check ranks."""
    windows, targets = _as_arrays(test)
    top = topk_from_logits(forward_batch(w, windows), k)
    return float(np.mean([t in row for t, row in zip(targets.tolist(), top.tolist())]))


def client_drift(updates: Sequence, temp: ModelWeights) -> float:
    """Mean L2 distance between each client's full parameter vector and ``temp``."""
    if not updates:
        raise ValueError("client drift needs at least one update")
    ref = temp.buffer
    return float(np.mean([np.linalg.norm(u.weights.buffer - ref) for u in updates]))


# ---------------------------------------------------------------- summaries


@dataclass(frozen=True)
class Summary:
    best: dict[int, float]
    last_std: dict[int, float]
    rounds: int

    def row(self, ks: Sequence[int] = DEFAULT_KS) -> dict[str, float]:
        out: dict[str, float] = {}
        for k in ks:
            out[f"best_acc{k}"] = self.best[k]
            out[f"std_acc{k}"] = self.last_std[k]
        return out


def tail_std(values: Sequence[float], n: int = LAST_N_ROUNDS) -> float:
    """Sample standard deviation of the last ``min(n, len)`` values; 0 for a single value."""
    tail = np.asarray(values[-n:], dtype=np.float64)
    if len(tail) < 2 or np.all(tail == tail[0]):
        return 0.0
    return float(np.std(tail, ddof=1))


def summarize_streams(streams: Mapping[int, Sequence[float]]) -> Summary:
    if not streams or any(len(v) == 0 for v in streams.values()):
        raise ValueError("summary needs at least one round")
    best = {k: float(max(v)) for k, v in streams.items()}
    std = {k: tail_std(list(v)) for k, v in streams.items()}
    rounds = len(next(iter(streams.values())))
    return Summary(best, std, rounds)


def summarize(records: Sequence) -> Summary:
    """Best accuracy over all rounds plus the spread of the final rounds."""
    if not records:
        raise ValueError("summary needs at least one round")
    ks = sorted(records[0].acc)
    return summarize_streams({k: [r.acc[k] for r in records] for k in ks})


def mean_std(values: Iterable[float]) -> tuple[float, float]:
    """Mean and sample std across seeds (std 0 for a single seed)."""
    v = np.asarray(list(values), dtype=np.float64)
    if len(v) == 0:
        return math.nan, math.nan
    return float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0


def format_value(v) -> str:
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def table_csv(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([format_value(v) for v in row])
    return buf.getvalue()


def table_text(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    cells = [list(header)] + [[format_value(v) for v in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = []
    for n, r in enumerate(cells):
        lines.append("  ".join(c.ljust(wd) if i == 0 else c.rjust(wd) for i, (c, wd) in enumerate(zip(r, widths))).rstrip())
        if n == 0:
            lines.append("  ".join("-" * wd for wd in widths))
    return "\n".join(lines) + "\n"
