"""Experiment configuration and the run / ablate / sweep / report drivers.

Config files are INI (``configparser``) with these sections, all optional
except ``[dataset]``::

    [dataset]      source = synthetic | ingest | cache, grid geometry,
                   window, test_frac, resample_s, split_gap_s, ...
    [synthetic]    SynthConfig fields (only for source = synthetic)
    [model]        HyperParams fields (seed comes from the seed list)
    [federation]   FederationConfig fields
    [sweep]        comma-separated lists for fraction / local_epochs / q
    [experiment]   seeds, out, jobs, centralized_epochs

Output layout under the output directory::

    dataset/   samples.csv, entropy.csv, location_freq.csv, heterogeneity.txt
    run/       rounds_seed<S>.csv, checkpoint_seed<S>.bin, summary.csv, summary.txt
    ablate/    <row>/rounds_seed<S>.csv, ablation.csv, ablation.txt
    sweep/     <cell>/rounds_seed<S>.csv, sweep.csv, sweep.txt
"""

from __future__ import annotations

import configparser
import csv
import io
import itertools
import logging
import os
import shutil
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence

from .errors import ConfigError
from .federation import FederationConfig, RoundRecord, run_federation, train_centralized
from .geogrid import GridSpec, standardized_weights
from .metrics import mean_std, summarize, summarize_streams, table_csv, table_text
from .mobility import (
    DEFAULT_RESAMPLE_S,
    DEFAULT_SPLIT_GAP_S,
    MIN_TRAJECTORY_RECORDS,
    FederatedDataset,
    SynthConfig,
    build_client_dataset,
    heterogeneity_index,
    ingest_user_dir,
    location_entropy,
    location_frequency_table,
    read_dataset_cache,
    resample_fixed_interval,
    split_train_test,
    synth_generate,
    write_dataset_cache,
)
from .model import HyperParams, checkpoint_bytes

log = logging.getLogger(__name__)

DATASET_SOURCES = ("synthetic", "ingest", "cache")
ROUND_LOG_HEADER = ["round", "sampler", "aggregator", "gaa", "acc1", "acc5", "drift", "seconds"]
SWEEP_AXES = ("fraction", "local_epochs", "q")

# (label, gaa, lwa, ebs) on top of FedAvg
ABLATION_ROWS = (
    ("A", "FedAvg", False, False, False),
    ("B", "+GAA", True, False, False),
    ("C", "+LWA", False, True, False),
    ("D", "+EBS", False, False, True),
    ("E", "+GAA+LWA", True, True, False),
    ("F", "+GAA+EBS", True, False, True),
    ("G", "+LWA+EBS", False, True, True),
    ("H", "+GAA+LWA+EBS", True, True, True),
)


@dataclass(frozen=True)
class DatasetConfig:
    source: str
    grid: GridSpec
    window: int = 32
    test_frac: float = 0.1
    n_clients: int = 10
    synth_seed: int = 0
    synth: SynthConfig = field(default_factory=SynthConfig)
    paths: tuple[str, ...] = ()
    cache: Optional[str] = None
    resample_s: float = DEFAULT_RESAMPLE_S
    split_gap_s: float = DEFAULT_SPLIT_GAP_S
    min_records: int = MIN_TRAJECTORY_RECORDS


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig
    federation: FederationConfig
    seeds: tuple[int, ...] = (0,)
    out: str = "runs"
    sweep: dict[str, tuple] = field(default_factory=dict)
    jobs: int = 1
    centralized_epochs: int = 0

    def federation_for(self, seed: int, **overrides) -> FederationConfig:
        hp_over = {k: overrides.pop(k) for k in list(overrides) if k in _HP_FIELDS}
        hp = replace(self.federation.hp, seed=seed, **hp_over)
        return replace(self.federation, seed=seed, hp=hp, **overrides)


_HP_FIELDS = {f.name for f in fields(HyperParams)}


# ---------------------------------------------------------------- parsing


def _split_list(raw: str) -> list[str]:
    return [v.strip() for v in raw.replace("\n", ",").split(",") if v.strip()]


def _get(section, key, conv, default=None, required=False):
    if section is None or key not in section:
        if required:
            raise ConfigError(f"{key}: missing required key")
        return default
    raw = section[key].strip()
    try:
        return conv(raw)
    except (ValueError, ConfigError) as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} ({exc})") from None


def _bool(raw: str) -> bool:
    low = raw.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected a boolean")


def _optional_float(raw: str) -> Optional[float]:
    return None if raw.lower() in ("", "none", "off") else float(raw)


def _int_list(raw: str) -> tuple[int, ...]:
    return tuple(int(v) for v in _split_list(raw))


def parse_seeds(raw: str) -> tuple[int, ...]:
    try:
        seeds = _int_list(raw)
    except ValueError:
        raise ConfigError(f"seeds: expected comma-separated integers, got {raw!r}") from None
    if not seeds:
        raise ConfigError("seeds: list is empty")
    return seeds


def _dataclass_from_section(cls, section, skip=()):
    kwargs = {}
    if section is None:
        return kwargs
    known = {f.name: f for f in fields(cls)}
    for key in section:
        if key in skip:
            continue
        if key not in known:
            raise ConfigError(f"{key}: unknown key in [{section.name}]")
        default = getattr(cls(), key) if cls is not GridSpec else None
        conv = type(default) if default is not None else float
        if conv is bool:
            conv = _bool
        kwargs[key] = _get(section, key, conv)
    return kwargs


def load_config(path=None, text: Optional[str] = None) -> ExperimentConfig:
    """Parse and validate an experiment config; every error names the offending key."""
    cp = configparser.ConfigParser(interpolation=None)
    if text is None:
        if path is None or not Path(path).is_file():
            raise ConfigError(f"config: file {path} not found")
        text = Path(path).read_text()
    try:
        cp.read_string(text, source=str(path or "<string>"))
    except configparser.Error as exc:
        raise ConfigError(f"config: {exc}") from None
    if "dataset" not in cp:
        raise ConfigError("dataset: missing [dataset] section")
    ds = cp["dataset"]
    try:
        grid = GridSpec(
            origin_lat=_get(ds, "origin_lat", float, 39.9),
            origin_lon=_get(ds, "origin_lon", float, 116.3),
            cell_size_m=_get(ds, "cell_size_m", float, 100.0),
            n_rows=_get(ds, "n_rows", int, 20),
            n_cols=_get(ds, "n_cols", int, 20),
        )
    except ConfigError as exc:
        raise ConfigError(f"dataset grid: {exc}") from None
    source = _get(ds, "source", str, required=True)
    if source not in DATASET_SOURCES:
        raise ConfigError(f"source: must be one of {DATASET_SOURCES}, got {source!r}")
    paths = tuple(_split_list(ds.get("paths", "")))
    cache = ds.get("cache", "").strip() or None
    if source == "ingest" and not paths:
        raise ConfigError("paths: ingest source needs at least one user directory")
    if source == "cache" and not cache:
        raise ConfigError("cache: cache source needs a cache path")
    if source != "ingest" and paths:
        raise ConfigError("paths: only valid with source = ingest (exactly one dataset source)")
    if source == "synthetic" and "synthetic" not in cp:
        synth = SynthConfig()
    else:
        synth = SynthConfig(**_dataclass_from_section(SynthConfig, cp["synthetic"] if "synthetic" in cp else None))
    if source == "synthetic":
        synth.validate()
    dcfg = DatasetConfig(
        source=source,
        grid=grid,
        window=_get(ds, "window", int, 32),
        test_frac=_get(ds, "test_frac", float, 0.1),
        n_clients=_get(ds, "n_clients", int, 10),
        synth_seed=_get(ds, "synth_seed", int, 0),
        synth=synth,
        paths=paths,
        cache=cache,
        resample_s=_get(ds, "resample_s", float, DEFAULT_RESAMPLE_S),
        split_gap_s=_get(ds, "split_gap_s", float, DEFAULT_SPLIT_GAP_S),
        min_records=_get(ds, "min_records", int, MIN_TRAJECTORY_RECORDS),
    )
    if dcfg.window < 1:
        raise ConfigError(f"window: must be >= 1, got {dcfg.window}")
    if not 0 < dcfg.test_frac < 1:
        raise ConfigError(f"test_frac: must lie in (0, 1), got {dcfg.test_frac}")
    if dcfg.n_clients < 1:
        raise ConfigError(f"n_clients: must be >= 1, got {dcfg.n_clients}")
    if not dcfg.resample_s > 0:
        raise ConfigError(f"resample_s: must be > 0, got {dcfg.resample_s}")

    hp = HyperParams(**_dataclass_from_section(HyperParams, cp["model"] if "model" in cp else None))
    fed_kwargs = {}
    if "federation" in cp:
        f = cp["federation"]
        allowed = {"rounds", "fraction", "sampler", "aggregator", "gaa", "lwa_layers", "q", "d", "prox_mu", "eval_ks"}
        for key in f:
            if key not in allowed:
                raise ConfigError(f"{key}: unknown key in [federation]")
        fed_kwargs = {
            "rounds": _get(f, "rounds", int, 50),
            "fraction": _get(f, "fraction", float, 0.2),
            "sampler": _get(f, "sampler", str, "uniform"),
            "aggregator": _get(f, "aggregator", str, "fedavg"),
            "gaa_enabled": _get(f, "gaa", _bool, False),
            "lwa_layers": _get(f, "lwa_layers", _int_list, (1, 2, 3)),
            "q": _get(f, "q", float, 1e4),
            "d": _get(f, "d", float, 150.0),
            "prox_mu": _get(f, "prox_mu", _optional_float, None),
            "eval_ks": _get(f, "eval_ks", _int_list, (1, 5)),
        }
    fed = FederationConfig(hp=hp, **fed_kwargs)
    for k in fed.eval_ks:
        if k > grid.n_locations:
            raise ConfigError(f"eval_ks: k={k} exceeds |L|={grid.n_locations}")

    ex = cp["experiment"] if "experiment" in cp else None
    seeds = parse_seeds(ex["seeds"]) if ex is not None and "seeds" in ex else (0,)
    sweep: dict[str, tuple] = {}
    if "sweep" in cp:
        for key in cp["sweep"]:
            if key not in SWEEP_AXES:
                raise ConfigError(f"{key}: unknown sweep axis (expected one of {SWEEP_AXES})")
            conv = int if key == "local_epochs" else float
            values = _get(cp["sweep"], key, lambda raw: tuple(conv(v) for v in _split_list(raw)))
            if not values:
                raise ConfigError(f"{key}: sweep list is empty")
            for v in values:
                try:
                    _check_axis(fed, key, v)
                except ConfigError as exc:
                    raise ConfigError(f"{key}: sweep value {v} invalid ({exc})") from None
            sweep[key] = values
    cfg = ExperimentConfig(
        dataset=dcfg,
        federation=fed,
        seeds=seeds,
        out=_get(ex, "out", str, "runs"),
        sweep=sweep,
        jobs=_get(ex, "jobs", int, 1),
        centralized_epochs=_get(ex, "centralized_epochs", int, 0),
    )
    if cfg.jobs < 1:
        raise ConfigError(f"jobs: must be >= 1, got {cfg.jobs}")
    if cfg.centralized_epochs < 0:
        raise ConfigError(f"centralized_epochs: must be >= 0, got {cfg.centralized_epochs}")
    return cfg


def _check_axis(fed: FederationConfig, key: str, value) -> None:
    if key == "local_epochs":
        replace(fed.hp, local_epochs=int(value))
    else:
        replace(fed, **{key: value})


# ---------------------------------------------------------------- datasets


def build_dataset(cfg: DatasetConfig) -> FederatedDataset:
    """Materialize the (unsplit) federated dataset described by ``cfg``."""
    if cfg.source == "synthetic":
        return synth_generate(cfg.grid, cfg.n_clients, cfg.synth, cfg.synth_seed, T=cfg.window)
    if cfg.source == "cache":
        ds = read_dataset_cache(cfg.cache, cfg.grid)
        if ds.window != cfg.window:
            raise ConfigError(f"window: cache has T={ds.window}, config says {cfg.window}")
        return ds
    clients = []
    for k, user_dir in enumerate(cfg.paths):
        if not Path(user_dir).is_dir():
            raise ConfigError(f"paths: {user_dir} is not a directory")
        trajs = [resample_fixed_interval(t, cfg.resample_s) for t in ingest_user_dir(user_dir, cfg.grid, cfg.split_gap_s)]
        clients.append(build_client_dataset(k, trajs, cfg.window, cfg.min_records))
    return FederatedDataset(tuple(clients), cfg.grid, cfg.window)


def prepare_dataset(cfg: DatasetConfig) -> FederatedDataset:
    """Dataset with the per-client train/test split applied."""
    ds = build_dataset(cfg)
    empty = [c.client_id for c in ds.clients if len(c.samples) == 0]
    if empty:
        log.warning("dropping clients without samples: %s", empty)
        ds = replace(ds, clients=tuple(c for c in ds.clients if len(c.samples)))
    return split_train_test(ds, cfg.test_frac)


# ---------------------------------------------------------------- file output


def atomic_write(path: Path, data: str | bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data.encode() if isinstance(data, str) else data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def claim_dir(path: Path, force: bool) -> Path:
    """Create ``path`` for fresh output; refuse to reuse a nonempty one unless forced."""
    if path.exists() and any(path.iterdir()):
        if not force:
            raise ConfigError(f"out: {path} already holds results (pass --force to overwrite)")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def round_log_csv(records: Sequence[RoundRecord], cfg: FederationConfig) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ROUND_LOG_HEADER)
    for r in records:
        w.writerow([
            r.round, cfg.sampler, cfg.aggregator, int(cfg.gaa_enabled),
            f"{r.acc.get(1, float('nan')):.6f}", f"{r.acc.get(5, float('nan')):.6f}",
            f"{r.drift:.9g}", f"{r.seconds:.3f}",
        ])
    return buf.getvalue()


def read_round_log(path) -> dict[str, list]:
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    header, body = rows[0], rows[1:]
    if header != ROUND_LOG_HEADER:
        raise ConfigError(f"{path}: not a round log (header {header})")
    cols = {h: [row[i] for row in body] for i, h in enumerate(header)}
    return {
        "round": [int(v) for v in cols["round"]],
        "acc1": [float(v) for v in cols["acc1"]],
        "acc5": [float(v) for v in cols["acc5"]],
        "drift": [float(v) for v in cols["drift"]],
        "seconds": [float(v) for v in cols["seconds"]],
    }


# ---------------------------------------------------------------- running


@dataclass(frozen=True)
class SeedRun:
    seed: int
    best_acc1: float
    best_acc5: float
    std_acc1: float
    std_acc5: float
    final_drift: float
    log_csv: str


def _run_one(args) -> tuple[SeedRun, bytes]:
    ds, fcfg, s_star = args
    result = run_federation(ds, fcfg, s_star if fcfg.gaa_enabled else None)
    summ = summarize(result.records)
    log_text = round_log_csv(result.records, fcfg)
    return SeedRun(
        seed=fcfg.seed,
        best_acc1=summ.best.get(1, float("nan")),
        best_acc5=summ.best.get(5, float("nan")),
        std_acc1=summ.last_std.get(1, float("nan")),
        std_acc5=summ.last_std.get(5, float("nan")),
        final_drift=result.records[-1].drift,
        log_csv=log_text,
    ), checkpoint_bytes(result.weights)


def run_cells(ds: FederatedDataset, configs: Sequence[FederationConfig], jobs: int = 1) -> list[tuple[SeedRun, bytes]]:
    """Run independent federations, optionally in worker processes; order is preserved."""
    s_cache = {}
    args = []
    for c in configs:
        s = None
        if c.gaa_enabled:
            key = (c.d, c.q)
            if key not in s_cache:
                s_cache[key] = standardized_weights(ds.grid, c.d, c.q)
            s = s_cache[key]
        args.append((ds, c, s))
    if jobs > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_run_one, args))
    return [_run_one(a) for a in args]


SUMMARY_HEADER = ["seed", "best_acc1", "best_acc5", "std_acc1", "std_acc5", "final_drift"]


def seed_summary_rows(runs: Sequence[SeedRun]) -> list[list]:
    rows = [[r.seed, r.best_acc1, r.best_acc5, r.std_acc1, r.std_acc5, r.final_drift] for r in runs]
    for label, fn in (("mean", lambda v: mean_std(v)[0]), ("std", lambda v: mean_std(v)[1])):
        rows.append([label] + [fn([getattr(r, name) for r in runs]) for name in SUMMARY_HEADER[1:]])
    return rows


def cmd_synth(cfg: ExperimentConfig, out: Path, force: bool = False) -> dict:
    """Write the dataset cache and the heterogeneity audit."""
    if cfg.dataset.source == "cache":
        raise ConfigError("source: synth/ingest need a synthetic or ingest source, not a cache")
    ds = build_dataset(cfg.dataset)
    target = claim_dir(out / "dataset", force)
    tmp_cache = target / "samples.csv.tmp"
    write_dataset_cache(ds, tmp_cache)
    os.replace(tmp_cache, target / "samples.csv")
    ent_rows = [[c.client_id, len(c.samples), c.n_total, len(c.distinct_locations),
                 location_entropy(c) if c.n_total else 0.0] for c in ds.clients]
    atomic_write(target / "entropy.csv", table_csv(
        ["client_id", "n_samples", "n_records", "n_locations", "entropy"], ent_rows))
    atomic_write(target / "location_freq.csv", table_csv(
        ["client_id", "location", "count"], location_frequency_table(ds)))
    hi = heterogeneity_index(ds)
    report = table_text(["client_id", "n_samples", "n_records", "n_locations", "entropy"], ent_rows)
    report += f"\nheterogeneity_index {hi:.6f}\n"
    atomic_write(target / "heterogeneity.txt", report)
    return {"heterogeneity_index": hi, "entropies": [r[-1] for r in ent_rows], "dir": target}


def cmd_run(cfg: ExperimentConfig, out: Path, force: bool = False) -> dict:
    ds = prepare_dataset(cfg.dataset)
    target = claim_dir(out / "run", force)
    configs = [cfg.federation_for(s) for s in cfg.seeds]
    results = run_cells(ds, configs, cfg.jobs)
    runs = []
    for (run, ckpt), fcfg in zip(results, configs):
        atomic_write(target / f"rounds_seed{fcfg.seed}.csv", run.log_csv)
        atomic_write(target / f"checkpoint_seed{fcfg.seed}.bin", ckpt)
        runs.append(run)
    rows = seed_summary_rows(runs)
    atomic_write(target / "summary.csv", table_csv(SUMMARY_HEADER, rows))
    atomic_write(target / "summary.txt", table_text(SUMMARY_HEADER, rows))
    return {"runs": runs, "dir": target}


def ablation_configs(cfg: ExperimentConfig, seed: int) -> list[tuple[str, str, FederationConfig]]:
    out = []
    for label, name, gaa, lwa, ebs in ABLATION_ROWS:
        fcfg = cfg.federation_for(
            seed,
            gaa_enabled=gaa,
            aggregator="lwa" if lwa else "fedavg",
            sampler="ebs" if ebs else "uniform",
        )
        out.append((label, name, fcfg))
    return out


ABLATION_HEADER = ["row", "components", "mean_best_acc1", "std_best_acc1", "mean_best_acc5",
                   "std_best_acc5", "mean_final_drift"]


def cmd_ablate(cfg: ExperimentConfig, out: Path, force: bool = False) -> dict:
    """Eight-row component grid on top of FedAvg, plus an optional centralized reference."""
    ds = prepare_dataset(cfg.dataset)
    target = claim_dir(out / "ablate", force)
    cells = [(label, name, fcfg) for s in cfg.seeds for (label, name, fcfg) in ablation_configs(cfg, s)]
    results = run_cells(ds, [c for _, _, c in cells], cfg.jobs)
    by_row: dict[str, list[SeedRun]] = {}
    for (label, name, fcfg), (run, _) in zip(cells, results):
        atomic_write(target / label / f"rounds_seed{fcfg.seed}.csv", run.log_csv)
        by_row.setdefault(label, []).append(run)
    rows = []
    for label, name, *_ in ABLATION_ROWS:
        runs = by_row[label]
        m1, s1 = mean_std(r.best_acc1 for r in runs)
        m5, s5 = mean_std(r.best_acc5 for r in runs)
        rows.append([label, name, m1, s1, m5, s5, mean_std(r.final_drift for r in runs)[0]])
    central = None
    if cfg.centralized_epochs > 0:
        central = centralized_runs(cfg, ds)
        m1, s1 = mean_std(c["best_acc1"] for c in central)
        m5, s5 = mean_std(c["best_acc5"] for c in central)
        rows.append(["central", "centralized", m1, s1, m5, s5, float("nan")])
        atomic_write(target / "centralized.csv", table_csv(
            ["seed", "best_acc1", "best_acc5"], [[c["seed"], c["best_acc1"], c["best_acc5"]] for c in central]))
    atomic_write(target / "ablation.csv", table_csv(ABLATION_HEADER, rows))
    atomic_write(target / "ablation.txt", table_text(ABLATION_HEADER, rows))
    return {"rows": rows, "by_row": by_row, "centralized": central, "dir": target}


def centralized_runs(cfg: ExperimentConfig, ds: FederatedDataset) -> list[dict]:
    out = []
    for seed in cfg.seeds:
        hp = replace(cfg.federation.hp, seed=seed)
        _, history = train_centralized(ds, hp, epochs=cfg.centralized_epochs, seed=seed, ks=cfg.federation.eval_ks)
        summ = summarize_streams({k: [h[k] for h in history] for k in cfg.federation.eval_ks})
        out.append({"seed": seed, "best_acc1": summ.best.get(1, float("nan")),
                    "best_acc5": summ.best.get(5, float("nan")), "history": history})
    return out


def sweep_cells(cfg: ExperimentConfig) -> list[dict]:
    axes = [a for a in SWEEP_AXES if a in cfg.sweep]
    if not axes:
        raise ConfigError("sweep: section is empty or missing")
    return [dict(zip(axes, combo)) for combo in itertools.product(*(cfg.sweep[a] for a in axes))]


def _cell_name(cell: dict) -> str:
    return "_".join(f"{k}={v:g}" if isinstance(v, float) else f"{k}={v}" for k, v in cell.items())


def cmd_sweep(cfg: ExperimentConfig, out: Path, force: bool = False) -> dict:
    ds = prepare_dataset(cfg.dataset)
    target = claim_dir(out / "sweep", force)
    cells = sweep_cells(cfg)
    jobs = [(cell, cfg.federation_for(s, **dict(cell))) for cell in cells for s in cfg.seeds]
    results = run_cells(ds, [c for _, c in jobs], cfg.jobs)
    grouped: dict[str, list[SeedRun]] = {}
    for (cell, fcfg), (run, _) in zip(jobs, results):
        name = _cell_name(cell)
        atomic_write(target / name / f"rounds_seed{fcfg.seed}.csv", run.log_csv)
        grouped.setdefault(name, []).append(run)
    axes = list(cells[0])
    header = axes + ["mean_best_acc1", "std_best_acc1", "mean_best_acc5", "std_best_acc5"]
    rows = []
    for cell in cells:
        runs = grouped[_cell_name(cell)]
        m1, s1 = mean_std(r.best_acc1 for r in runs)
        m5, s5 = mean_std(r.best_acc5 for r in runs)
        rows.append([cell[a] for a in axes] + [m1, s1, m5, s5])
    atomic_write(target / "sweep.csv", table_csv(header, rows))
    atomic_write(target / "sweep.txt", table_text(header, rows))
    return {"rows": rows, "header": header, "dir": target}


def cmd_report(run_dir: Path) -> str:
    """Re-summarize every round log found under ``run_dir`` (recursively)."""
    logs = sorted(Path(run_dir).rglob("rounds_seed*.csv"))
    if not logs:
        raise ConfigError(f"out: no round logs under {run_dir}")
    header = ["log", "rounds", "best_acc1", "std_acc1", "best_acc5", "std_acc5"]
    rows = []
    for p in logs:
        data = read_round_log(p)
        summ = summarize_streams({1: data["acc1"], 5: data["acc5"]})
        rows.append([str(p.relative_to(run_dir)), summ.rounds, summ.best[1], summ.last_std[1],
                     summ.best[5], summ.last_std[5]])
    atomic_write(Path(run_dir) / "report.csv", table_csv(header, rows))
    text = table_text(header, rows)
    atomic_write(Path(run_dir) / "report.txt", text)
    return text


def describe_plan(cfg: ExperimentConfig, command: str, out: Path) -> str:
    d, f = cfg.dataset, cfg.federation
    lines = [
        f"command      {command}",
        f"output       {out}",
        f"dataset      source={d.source} grid={d.grid.n_rows}x{d.grid.n_cols}@{d.grid.cell_size_m:g}m "
        f"T={d.window} test_frac={d.test_frac:g}",
        f"federation   rounds={f.rounds} fraction={f.fraction:g} sampler={f.sampler} aggregator={f.aggregator} "
        f"gaa={f.gaa_enabled} lwa_layers={','.join(map(str, f.lwa_layers))} q={f.q:g} d={f.d:g} "
        f"prox_mu={f.prox_mu}",
        f"model        E={f.hp.embed_dim} H={f.hp.hidden_dim} lr={f.hp.learning_rate:g} momentum={f.hp.momentum:g} "
        f"weight_decay={f.hp.weight_decay:g} batch={f.hp.batch_size} local_epochs={f.hp.local_epochs}",
        f"seeds        {','.join(map(str, cfg.seeds))}",
    ]
    if command == "ablate":
        lines.append(f"cells        {len(ABLATION_ROWS)} rows x {len(cfg.seeds)} seeds")
    if command == "sweep":
        lines.append(f"cells        {len(sweep_cells(cfg))} grid cells x {len(cfg.seeds)} seeds")
    return "\n".join(lines) + "\n"
