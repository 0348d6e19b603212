"""Per-client trajectory datasets: ingestion, synthesis, windowing, statistics.

A client's samples are kept as dense arrays (``windows`` of shape ``(n, T)``
and ``targets`` of shape ``(n,)``) in time order.  ``segments`` records which
source trajectory each sample was cut from, which is enough to rebuild the
location tallies of any contiguous slice of samples.
"""

from __future__ import annotations

import csv
import logging
import math
from collections import Counter
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .errors import (
    ClientTooSmall,
    ConfigError,
    DegenerateDataset,
    EmptyFile,
    OutOfBounds,
    ParseError,
)
from .geogrid import GridSpec, locate

log = logging.getLogger(__name__)

PLT_HEADER_LINES = 6
DEFAULT_SPLIT_GAP_S = 30 * 60
DEFAULT_RESAMPLE_S = 60
MIN_TRAJECTORY_RECORDS = 11  # "more than ten" records


@dataclass(frozen=True)
class Trajectory:
    timestamps: np.ndarray
    locs: np.ndarray

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=np.float64)
        locs = np.asarray(self.locs, dtype=np.int64)
        if ts.ndim != 1 or ts.shape != locs.shape:
            raise ValueError("timestamps and locs must be 1-d and equally long")
        if len(ts) < 1:
            raise ValueError("a trajectory needs at least one point")
        if np.any(np.diff(ts) <= 0):
            raise ValueError("trajectory timestamps must be strictly increasing")
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "locs", locs)

    def __len__(self):
        return len(self.locs)

    @property
    def points(self) -> list[tuple[float, int]]:
        return list(zip(self.timestamps.tolist(), self.locs.tolist()))


class Sample(NamedTuple):
    window: tuple[int, ...]
    target: int


@dataclass(frozen=True)
class SampleSet:
    """Time-ordered samples as arrays; ``segments`` tags the source trajectory."""

    windows: np.ndarray
    targets: np.ndarray
    segments: np.ndarray

    @classmethod
    def empty(cls, T: int) -> "SampleSet":
        return cls(np.zeros((0, T), np.int64), np.zeros(0, np.int64), np.zeros(0, np.int64))

    @classmethod
    def from_samples(cls, samples: Sequence[Sample], segments=None) -> "SampleSet":
        windows = np.array([s.window for s in samples], dtype=np.int64)
        targets = np.array([s.target for s in samples], dtype=np.int64)
        if segments is None:
            segments = np.zeros(len(samples), np.int64)
        return cls(windows.reshape(len(samples), -1), targets, np.asarray(segments, np.int64))

    def __len__(self):
        return len(self.targets)

    @property
    def window_len(self) -> int:
        return self.windows.shape[1]

    def __getitem__(self, idx) -> "SampleSet":
        return SampleSet(self.windows[idx], self.targets[idx], self.segments[idx])

    def samples(self) -> list[Sample]:
        return [Sample(tuple(w), int(t)) for w, t in zip(self.windows.tolist(), self.targets.tolist())]

    @staticmethod
    def concat(parts: Sequence["SampleSet"]) -> "SampleSet":
        return SampleSet(
            np.concatenate([p.windows for p in parts]),
            np.concatenate([p.targets for p in parts]),
            np.concatenate([p.segments for p in parts]),
        )

    def location_counts(self) -> dict[int, int]:
        """Tally locations of the trajectory stretches these samples cover.

        With stride-1 windows the stretch is the first window of each segment
        followed by every target, so nothing is counted twice.
        """
        if len(self) == 0:
            return {}
        first = np.ones(len(self), dtype=bool)
        first[1:] = self.segments[1:] != self.segments[:-1]
        locs = np.concatenate([self.windows[first].ravel(), self.targets])
        ids, counts = np.unique(locs, return_counts=True)
        return dict(zip(ids.tolist(), counts.tolist()))


@dataclass(frozen=True)
class ClientDataset:
    client_id: int
    samples: SampleSet
    location_counts: Mapping[int, int]
    n_test: int = 0

    @property
    def train(self) -> SampleSet:
        return self.samples[: len(self.samples) - self.n_test]

    @property
    def test(self) -> SampleSet:
        return self.samples[len(self.samples) - self.n_test:]

    @property
    def n_k(self) -> int:
        """Training sample count (the aggregation weight)."""
        return len(self.samples) - self.n_test

    @property
    def n_total(self) -> int:
        return int(sum(self.location_counts.values()))

    @property
    def distinct_locations(self) -> set[int]:
        return {loc for loc, n in self.location_counts.items() if n > 0}


@dataclass(frozen=True)
class FederatedDataset:
    clients: tuple[ClientDataset, ...]
    grid: GridSpec
    window: int
    is_split: bool = False

    def __post_init__(self):
        ids = [c.client_id for c in self.clients]
        if len(set(ids)) != len(ids):
            raise ValueError(f"client ids must be unique, got {ids}")
        object.__setattr__(self, "clients", tuple(self.clients))

    @property
    def n_locations(self) -> int:
        return self.grid.n_locations

    def client(self, client_id: int) -> ClientDataset:
        for c in self.clients:
            if c.client_id == client_id:
                return c
        raise KeyError(client_id)

    def test_union(self) -> SampleSet:
        return SampleSet.concat([c.test for c in self.clients] or [SampleSet.empty(self.window)])

    def train_union(self) -> SampleSet:
        return SampleSet.concat([c.train for c in self.clients] or [SampleSet.empty(self.window)])


# ---------------------------------------------------------------- ingestion


def _parse_plt_time(date: str, time: str) -> float:
    dt = datetime.strptime(f"{date.strip()} {time.strip()}", "%Y-%m-%d %H:%M:%S")
    return dt.replace(tzinfo=timezone.utc).timestamp()


def ingest_plt(path, spec: GridSpec, split_gap_s: float = DEFAULT_SPLIT_GAP_S) -> list[Trajectory]:
    """Read a GeoLife ``.plt`` file into gridded trajectories.

    Records outside the grid are dropped, as are records whose timestamp does
    not advance.  A gap longer than ``split_gap_s`` starts a new trajectory.

    Raises:
        EmptyFile: the file does not even hold the 6 header lines.
        ParseError: a record line is malformed (reports the 1-based line number).
    """
    path = Path(path)
    with path.open("r", encoding="utf-8", errors="replace") as fh:
        lines = fh.read().splitlines()
    if len(lines) < PLT_HEADER_LINES:
        raise EmptyFile(f"{path}: expected {PLT_HEADER_LINES} header lines, found {len(lines)}")

    segments: list[tuple[list[float], list[int]]] = []
    ts: list[float] = []
    locs: list[int] = []
    last_t = None
    for lineno, line in enumerate(lines[PLT_HEADER_LINES:], start=PLT_HEADER_LINES + 1):
        if not line.strip():
            continue
        fields = line.split(",")
        if len(fields) != 7:
            raise ParseError(f"expected 7 comma-separated fields, got {len(fields)}", path, lineno)
        try:
            lat, lon = float(fields[0]), float(fields[1])
            t = _parse_plt_time(fields[5], fields[6])
        except ValueError as exc:
            raise ParseError(str(exc), path, lineno) from None
        try:
            loc = locate(spec, lat, lon)
        except OutOfBounds:
            continue
        if last_t is not None and t <= last_t:
            continue
        if last_t is not None and t - last_t > split_gap_s and ts:
            segments.append((ts, locs))
            ts, locs = [], []
        ts.append(t)
        locs.append(loc)
        last_t = t
    if ts:
        segments.append((ts, locs))
    return [Trajectory(np.array(a), np.array(b)) for a, b in segments]


def ingest_user_dir(user_dir, spec: GridSpec, split_gap_s: float = DEFAULT_SPLIT_GAP_S) -> list[Trajectory]:
    """All trajectories of one GeoLife user (``<user>/Trajectory/*.plt`` or ``<user>/*.plt``)."""
    user_dir = Path(user_dir)
    files = sorted(user_dir.glob("Trajectory/*.plt")) or sorted(user_dir.glob("*.plt"))
    out: list[Trajectory] = []
    for f in files:
        try:
            out.extend(ingest_plt(f, spec, split_gap_s))
        except EmptyFile:
            log.warning("skipping empty PLT file %s", f)
    out.sort(key=lambda t: t.timestamps[0])
    return out


def resample_fixed_interval(t: Trajectory, interval: float) -> Trajectory:
    """Keep, at each tick ``t0 + k * interval``, the latest record at or before it."""
    if not interval > 0:
        raise ValueError(f"interval must be > 0, got {interval}")
    t0 = t.timestamps[0]
    n_ticks = int(math.floor((t.timestamps[-1] - t0) / interval)) + 1
    ticks = t0 + interval * np.arange(n_ticks)
    idx = np.searchsorted(t.timestamps, ticks, side="right") - 1
    return Trajectory(ticks, t.locs[idx])


def _window_arrays(locs: np.ndarray, T: int) -> tuple[np.ndarray, np.ndarray]:
    n = len(locs) - T
    if n <= 0:
        return np.zeros((0, T), np.int64), np.zeros(0, np.int64)
    windows = np.lib.stride_tricks.sliding_window_view(locs, T)[:n]
    return np.array(windows, dtype=np.int64), np.array(locs[T:], dtype=np.int64)


def windowize(t: Trajectory, T: int) -> list[Sample]:
    """Stride-1 windows of length ``T``, each paired with the following location."""
    if T < 1:
        raise ValueError(f"window length must be >= 1, got {T}")
    windows, targets = _window_arrays(t.locs, T)
    return [Sample(tuple(w), int(y)) for w, y in zip(windows.tolist(), targets.tolist())]


def build_client_dataset(client_id: int, trajectories: Iterable[Trajectory], T: int,
                         min_records: int = MIN_TRAJECTORY_RECORDS) -> ClientDataset:
    """Window every usable trajectory of one client, in time order.

    A trajectory is kept when it has at least ``min_records`` points and is
    long enough to yield a sample (``> T`` points); location tallies cover the
    kept trajectories only.
    """
    parts = []
    counts: Counter = Counter()
    seg = 0
    for traj in trajectories:
        if len(traj) < max(min_records, T + 1):
            continue
        w, y = _window_arrays(traj.locs, T)
        parts.append(SampleSet(w, y, np.full(len(y), seg, np.int64)))
        counts.update(traj.locs.tolist())
        seg += 1
    samples = SampleSet.concat(parts) if parts else SampleSet.empty(T)
    return ClientDataset(client_id, samples, dict(sorted(counts.items())))


# ---------------------------------------------------------------- synthesis


@dataclass(frozen=True)
class SynthConfig:
    """Knobs of the home/downtown lazy-walk generator.

    Each client owns a square home block (side drawn from
    ``[home_min, home_max]``) and starts every trajectory from one fixed home
    cell inside it; all clients share a downtown block at the grid
    center unless ``downtown_size`` is 0.  A walker stays put with
    ``stay_prob``; otherwise it commutes to the other block with
    ``commute_prob``, keeps its previous heading with ``forward_prob`` when
    that cell is inside the current block, or steps to a random 8-neighbor in
    the block.
    """

    home_min: int = 2
    home_max: int = 5
    downtown_size: int = 4
    stay_prob: float = 0.3
    forward_prob: float = 0.6
    commute_prob: float = 0.08
    trajectories_min: int = 6
    trajectories_max: int = 14
    length_min: int = 45
    length_max: int = 90
    interval_s: float = 60.0

    def validate(self) -> None:
        if not 1 <= self.home_min <= self.home_max:
            raise ConfigError(f"need 1 <= home_min <= home_max, got {self.home_min}, {self.home_max}")
        if self.downtown_size < 0:
            raise ConfigError(f"downtown_size must be >= 0, got {self.downtown_size}")
        for name in ("stay_prob", "forward_prob", "commute_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if not 1 <= self.trajectories_min <= self.trajectories_max:
            raise ConfigError("need 1 <= trajectories_min <= trajectories_max")
        if not 1 <= self.length_min <= self.length_max:
            raise ConfigError("need 1 <= length_min <= length_max")
        if not self.interval_s > 0:
            raise ConfigError("interval_s must be > 0")


_STEPS = [(dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1) if (dr, dc) != (0, 0)]


@dataclass(frozen=True)
class _Block:
    row: int
    col: int
    side: int

    def contains(self, r: int, c: int) -> bool:
        return self.row <= r < self.row + self.side and self.col <= c < self.col + self.side

    def overlaps(self, other: "_Block") -> bool:
        return not (self.row + self.side <= other.row or other.row + other.side <= self.row
                    or self.col + self.side <= other.col or other.col + other.side <= self.col)

    def random_cell(self, rng) -> tuple[int, int]:
        return self.row + int(rng.integers(self.side)), self.col + int(rng.integers(self.side))


def _place_blocks(spec: GridSpec, n_clients: int, cfg: SynthConfig, rng) -> tuple[list[_Block], _Block | None]:
    downtown = None
    if cfg.downtown_size > 0:
        s = cfg.downtown_size
        if s > min(spec.n_rows, spec.n_cols):
            raise ConfigError(f"downtown_size {s} does not fit a {spec.n_rows}x{spec.n_cols} grid")
        downtown = _Block((spec.n_rows - s) // 2, (spec.n_cols - s) // 2, s)
    slot = cfg.home_max
    slots = [
        _Block(r, c, slot)
        for r in range(0, spec.n_rows - slot + 1, slot)
        for c in range(0, spec.n_cols - slot + 1, slot)
    ]
    if downtown is not None:
        slots = [b for b in slots if not b.overlaps(downtown)]
    if len(slots) < n_clients:
        raise ConfigError(
            f"only {len(slots)} disjoint home blocks of side {slot} fit the grid; need {n_clients}"
        )
    chosen = rng.permutation(len(slots))[:n_clients]
    homes = []
    for k in chosen:
        side = int(rng.integers(cfg.home_min, cfg.home_max + 1))
        b = slots[int(k)]
        homes.append(_Block(b.row, b.col, side))
    return homes, downtown


def _walk(home: _Block, anchor: tuple[int, int], downtown: _Block | None, length: int,
          cfg: SynthConfig, rng, spec: GridSpec) -> np.ndarray:
    block = home
    r, c = anchor
    heading = None
    out = np.empty(length, np.int64)
    for t in range(length):
        out[t] = r * spec.n_cols + c
        if rng.random() < cfg.stay_prob:
            continue
        if downtown is not None and rng.random() < cfg.commute_prob:
            block = downtown if block is home else home
            r, c = block.random_cell(rng)
            heading = None
            continue
        if heading is not None and rng.random() < cfg.forward_prob and block.contains(r + heading[0], c + heading[1]):
            r, c = r + heading[0], c + heading[1]
            continue
        moves = [(dr, dc) for dr, dc in _STEPS if block.contains(r + dr, c + dc)]
        if not moves:
            heading = None
            continue
        heading = moves[int(rng.integers(len(moves)))]
        r, c = r + heading[0], c + heading[1]
    return out


def synth_trajectories(spec: GridSpec, n_clients: int, cfg: SynthConfig, seed: int) -> list[list[Trajectory]]:
    """Raw per-client trajectories; deterministic in ``(spec, n_clients, cfg, seed)``."""
    if n_clients < 1:
        raise ConfigError(f"n_clients must be >= 1, got {n_clients}")
    cfg.validate()
    rng = np.random.default_rng(seed)
    homes, downtown = _place_blocks(spec, n_clients, cfg, rng)
    result = []
    for home in homes:
        anchor = home.random_cell(rng)
        n_traj = int(rng.integers(cfg.trajectories_min, cfg.trajectories_max + 1))
        trajs = []
        for day in range(n_traj):
            length = int(rng.integers(cfg.length_min, cfg.length_max + 1))
            locs = _walk(home, anchor, downtown, length, cfg, rng, spec)
            start = day * 86_400.0 + 8 * 3_600.0
            trajs.append(Trajectory(start + cfg.interval_s * np.arange(length), locs))
        result.append(trajs)
    return result


def synth_generate(spec: GridSpec, n_clients: int, cfg: SynthConfig, seed: int, T: int = 32) -> FederatedDataset:
    """Synthetic non-IID federated dataset (one client per simulated user)."""
    per_client = synth_trajectories(spec, n_clients, cfg, seed)
    clients = [
        build_client_dataset(k, trajs, T, min_records=MIN_TRAJECTORY_RECORDS)
        for k, trajs in enumerate(per_client)
    ]
    return FederatedDataset(tuple(clients), spec, T)


# ---------------------------------------------------------------- statistics


def location_entropy(c: ClientDataset | Mapping[int, int]) -> float:
    """Shannon entropy (natural log) of a client's location frequencies."""
    counts = c.location_counts if isinstance(c, ClientDataset) else c
    n = np.array([v for v in counts.values() if v > 0], dtype=np.float64)
    total = n.sum()
    if total < 1:
        raise DegenerateDataset("location entropy needs at least one location record")
    p = n / total
    return float(-(p * np.log(p)).sum())


def heterogeneity_index(ds: FederatedDataset) -> float:
    """``1 - (c - 1) / (C_max - 1)`` with ``c`` the largest per-client location count."""
    per_client = [c.distinct_locations for c in ds.clients]
    c_max = len(set().union(*per_client)) if per_client else 0
    if c_max < 2:
        raise DegenerateDataset(f"heterogeneity index needs >= 2 distinct locations, found {c_max}")
    c = max(len(s) for s in per_client)
    return 1.0 - (c - 1) / (c_max - 1)


def split_train_test(ds: FederatedDataset, test_frac: float = 0.1) -> FederatedDataset:
    """Hold out the last ``ceil(test_frac * n)`` samples of each client.

    Location tallies of the result describe the training portion only, so
    statistics computed downstream never see held-out data.
    """
    if not 0.0 < test_frac < 1.0:
        raise ConfigError(f"test_frac must lie in (0, 1), got {test_frac}")
    out = []
    for c in ds.clients:
        n = len(c.samples)
        n_test = math.ceil(test_frac * n)
        if n - n_test < 1:
            raise ClientTooSmall(f"client {c.client_id} has {n} samples; nothing left to train on")
        train = c.samples[: n - n_test]
        out.append(ClientDataset(c.client_id, c.samples, train.location_counts(), n_test))
    return replace(ds, clients=tuple(out), is_split=True)


# ---------------------------------------------------------------- cache file


def write_dataset_cache(ds: FederatedDataset, path) -> None:
    """CSV: ``client_id,sample_index,loc_0..loc_{T-1},target,segment``."""
    T = ds.window
    header = ["client_id", "sample_index"] + [f"loc_{i}" for i in range(T)] + ["target", "segment"]
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for c in ds.clients:
            s = c.samples
            for i in range(len(s)):
                w.writerow([c.client_id, i, *s.windows[i].tolist(), int(s.targets[i]), int(s.segments[i])])


def read_dataset_cache(path, grid: GridSpec) -> FederatedDataset:
    """Load a cache written by :func:`write_dataset_cache`.

    A missing ``segment`` column is read as one contiguous trajectory per client.
    """
    path = Path(path)
    with path.open("r", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyFile(f"{path}: no header line") from None
        loc_cols = [h for h in header if h.startswith("loc_")]
        T = len(loc_cols)
        has_seg = header[-1] == "segment"
        expected = 2 + T + 1 + int(has_seg)
        if T < 1 or header[:2] != ["client_id", "sample_index"] or len(header) != expected:
            raise ParseError(f"unexpected header {header[:4]}...", path, 1)
        rows: dict[int, list[list[int]]] = {}
        for lineno, row in enumerate(reader, start=2):
            if len(row) != expected:
                raise ParseError(f"expected {expected} fields, got {len(row)}", path, lineno)
            try:
                vals = [int(v) for v in row]
            except ValueError as exc:
                raise ParseError(str(exc), path, lineno) from None
            for v in vals[2:2 + T + 1]:
                if not 0 <= v < grid.n_locations:
                    raise ParseError(f"location {v} outside grid of {grid.n_locations} cells", path, lineno)
            rows.setdefault(vals[0], []).append(vals)
    clients = []
    for cid in sorted(rows):
        data = sorted(rows[cid], key=lambda r: r[1])
        arr = np.array(data, dtype=np.int64)
        seg = arr[:, -1] if has_seg else np.zeros(len(arr), np.int64)
        s = SampleSet(arr[:, 2:2 + T].copy(), arr[:, 2 + T].copy(), seg.copy())
        clients.append(ClientDataset(cid, s, s.location_counts()))
    return FederatedDataset(tuple(clients), grid, T)


def location_frequency_table(ds: FederatedDataset) -> list[tuple[int, int, int]]:
    """``(client_id, location, count)`` rows sorted by client then location."""
    return [
        (c.client_id, loc, n)
        for c in ds.clients
        for loc, n in sorted(c.location_counts.items())
    ]
