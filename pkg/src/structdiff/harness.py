"""Experiment grids: paired multi-seed runs, resumable result CSVs, summaries.

A grid is the cross product datasets x regularizers x schedules x seeds. Every
run lives in ``<out>/runs/<run_id>/`` (config, checkpoint, training log,
generated points) and contributes one row to ``<out>/results.csv``. Rows are
appended as runs finish, so an interrupted grid resumes by skipping run ids
that already have an ``ok`` row.

``results.csv`` holds only quantities that are a pure function of the grid
config. Wall-clock times go to ``<out>/timings.csv`` so two executions of the
same grid produce byte-identical result rows.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .diffusion import SamplerConfig, TrainConfig, sample, train
from .prdc import DEFAULT_K, build_manifold, membership_counts, prdc_fast
from .regularizers import RegularizerSpec
from .schedules import ScheduleKind
from .synthetic_data import DatasetKind, generate, load_points, save_points
from .tensor_net import save_checkpoint

log = logging.getLogger(__name__)

METRICS = ("precision", "recall", "density", "coverage")
# the evaluation real set for seed s is drawn with seed s + EVAL_SEED_OFFSET
EVAL_SEED_OFFSET = 1000
# "final" losses average this many trailing steps
LOSS_WINDOW = 1000


class MissingBaselineError(ValueError):
    """A summary cell has no regularizer-free baseline to compare against."""


class ArtifactError(FileNotFoundError):
    """A run artifact needed for plotting or evaluation is missing."""


@dataclass
class ExperimentGrid:
    datasets: list[DatasetKind]
    regularizers: list[RegularizerSpec]
    schedules: list[ScheduleKind] = field(default_factory=lambda: [ScheduleKind()])
    seeds: list[int] = field(default_factory=lambda: [1, 2, 3, 4, 5])
    # template for everything except dataset, schedule, regularizer and seed
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    k: int = DEFAULT_K
    eval_n: int | None = None  # real-set size for evaluation; None: dataset n_samples

    def __post_init__(self):
        for name in ("datasets", "regularizers", "schedules", "seeds"):
            if not getattr(self, name):
                raise ValueError(f"grid needs at least one entry in {name}")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError(f"seeds must be distinct, got {self.seeds}")
        for s in self.seeds:
            if not 0 <= int(s) < 2**64:
                raise ValueError(f"seed {s} is not an unsigned 64-bit integer")
        ids = [r.run_id for r in self.runs()]
        dup = {i for i in ids if ids.count(i) > 1}
        if dup:
            raise ValueError(f"grid produces duplicate run ids: {sorted(dup)}")

    def runs(self) -> list["RunSpec"]:
        out = []
        for ds in self.datasets:
            for sched in self.schedules:
                for reg in self.regularizers:
                    for seed in self.seeds:
                        out.append(RunSpec(ds, sched, reg, int(seed)))
        return out

    def train_config(self, run: "RunSpec") -> TrainConfig:
        return replace(
            self.train,
            dataset=replace(run.dataset, seed=run.seed),
            schedule=run.schedule,
            regularizer=run.regularizer,
            seed=run.seed,
        )

    def sampler_config(self, run: "RunSpec") -> SamplerConfig:
        return replace(self.sampler, seed=run.seed)

    def eval_dataset(self, dataset: DatasetKind, seed: int) -> DatasetKind:
        n = self.eval_n or dataset.n_samples
        return replace(dataset, n_samples=n, seed=seed + EVAL_SEED_OFFSET)

    def to_dict(self) -> dict:
        t = self.train.to_dict()
        for key in ("data", "schedule", "regularizer", "seed"):
            t.pop(key)
        return {
            "datasets": [d.to_dict() for d in self.datasets],
            "regularizers": [r.to_dict() for r in self.regularizers],
            "schedules": [s.to_dict() for s in self.schedules],
            "seeds": list(self.seeds),
            "train": t,
            "sampler": asdict(self.sampler),
            "k": self.k,
            "eval_n": self.eval_n,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentGrid":
        kw = {}
        if "schedules" in d:
            kw["schedules"] = [ScheduleKind.from_dict(s) for s in d["schedules"]]
        if "seeds" in d:
            kw["seeds"] = [int(s) for s in d["seeds"]]
        if "sampler" in d:
            kw["sampler"] = SamplerConfig(**d["sampler"])
        return cls(
            datasets=[DatasetKind.from_dict(x) for x in d.get("datasets", [])],
            regularizers=[RegularizerSpec.from_dict(x) for x in d.get("regularizers", [{}])],
            train=TrainConfig.from_dict(d.get("train", {})),
            k=int(d.get("k", DEFAULT_K)),
            eval_n=d.get("eval_n"),
            **kw,
        )

    @classmethod
    def load(cls, path) -> "ExperimentGrid":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class RunSpec:
    dataset: DatasetKind
    schedule: ScheduleKind
    regularizer: RegularizerSpec
    seed: int

    @property
    def reg_label(self) -> str:
        r = self.regularizer
        return "none" if not r.active else f"{r.kind}-{r.lam:g}"

    @property
    def run_id(self) -> str:
        return f"{self.dataset.variant}__{self.schedule.variant}__{self.reg_label}__s{self.seed}"


@dataclass
class ResultRow:
    run_id: str
    dataset: str
    schedule: str
    regularizer: str
    lam: float
    seed: int
    precision: float = math.nan
    recall: float = math.nan
    density: float = math.nan
    coverage: float = math.nan
    final_simple_loss: float = math.nan
    final_penalty: float = math.nan
    status: str = "ok"
    error: str = ""
    wall_time: float = math.nan  # not written to results.csv

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    @property
    def reg_label(self) -> str:
        return "none" if self.regularizer == "none" or self.lam == 0 else f"{self.regularizer}-{self.lam:g}"


CSV_FIELDS = [f.name for f in fields(ResultRow) if f.name != "wall_time"]
_FLOATS = {"lam", "precision", "recall", "density", "coverage", "final_simple_loss", "final_penalty"}


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _row_from_record(rec: dict) -> ResultRow:
    kw = {}
    for name in CSV_FIELDS:
        v = rec[name]
        if name in _FLOATS:
            v = float(v)
        elif name == "seed":
            v = int(v)
        kw[name] = v
    return ResultRow(**kw)


def load_results(path) -> list[ResultRow]:
    """Rows of a results CSV; a truncated trailing line (from a crash) is dropped."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_FIELDS:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        for rec in reader:
            try:
                rows.append(_row_from_record(rec))
            except (KeyError, TypeError, ValueError):
                log.warning("%s: skipping malformed row %r", path, rec)
    timings = Path(path).with_name("timings.csv")
    if timings.exists():
        with open(timings, newline="") as fh:
            wall = {r["run_id"]: float(r["wall_time"]) for r in csv.DictReader(fh)}
        for r in rows:
            r.wall_time = wall.get(r.run_id, math.nan)
    return rows


def _write_rows(path, rows, mode):
    new = mode == "w" or not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, mode, newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(CSV_FIELDS)
        for r in rows:
            w.writerow([_fmt(getattr(r, name)) for name in CSV_FIELDS])


def _append_timing(path, row):
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(["run_id", "wall_time"])
        w.writerow([row.run_id, f"{row.wall_time:.3f}"])


def real_set_path(out_dir, dataset: DatasetKind, seed: int) -> Path:
    return Path(out_dir) / "real" / f"{dataset.variant}__s{seed}.csv"


def run_one(grid: ExperimentGrid, run: RunSpec, out_dir) -> ResultRow:
    """Train, sample and evaluate one run, persisting its artifacts."""
    t0 = time.perf_counter()
    row = ResultRow(
        run.run_id, run.dataset.variant, run.schedule.variant,
        run.regularizer.kind, float(run.regularizer.lam), run.seed,
    )
    run_dir = Path(out_dir) / "runs" / run.run_id
    try:
        run_dir.mkdir(parents=True, exist_ok=True)
        cfg = grid.train_config(run)
        with open(run_dir / "config.json", "w") as fh:
            json.dump({"train": cfg.to_dict(), "sampler": asdict(grid.sampler_config(run)), "k": grid.k}, fh, indent=2)
        res = train(cfg)
        save_checkpoint(run_dir / "checkpoint.sdf", res.net, res.ema, res.opt)
        res.log.write_csv(run_dir / "train_log.csv")
        gen = sample(res.net, res.ema, res.schedule, grid.sampler_config(run))
        save_points(gen, run_dir / "generated.csv")

        real_path = real_set_path(out_dir, run.dataset, run.seed)
        real = generate(grid.eval_dataset(run.dataset, run.seed))
        if not real_path.exists():
            real_path.parent.mkdir(parents=True, exist_ok=True)
            tmp = real_path.with_suffix(f".{os.getpid()}.tmp")
            save_points(real, tmp)
            os.replace(tmp, real_path)
        rep = prdc_fast(real, gen, grid.k)
        w = min(LOSS_WINDOW, len(res.log.simple))
        row.precision, row.recall, row.density, row.coverage = rep.fields()
        row.final_simple_loss = float(np.mean(res.log.simple[-w:])) if w else math.nan
        row.final_penalty = float(np.mean(res.log.penalty[-w:])) if w else math.nan
    except Exception as exc:  # recorded as an error row; the grid carries on
        log.error("run %s failed: %s", run.run_id, exc)
        log.debug("%s", traceback.format_exc())
        row.status = "error"
        row.error = f"{type(exc).__name__}: {exc}".replace("\n", " ")
    row.wall_time = time.perf_counter() - t0
    return row


def _run_one_star(args):
    return run_one(*args)


def run_grid(grid: ExperimentGrid, out_dir, threads: int = 1) -> list[ResultRow]:
    """Execute every pending run of ``grid`` and return all rows for it.

    Completed (``ok``) rows already in ``<out_dir>/results.csv`` are kept and
    their runs skipped; error rows are dropped and retried. With
    ``threads > 1`` runs execute in a process pool while this process remains
    the only writer of the CSV.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "grid.json", "w") as fh:
        json.dump(grid.to_dict(), fh, indent=2)
    csv_path = out / "results.csv"
    timing_path = out / "timings.csv"

    wanted = {r.run_id: r for r in grid.runs()}
    done = {}
    if csv_path.exists() and csv_path.stat().st_size > 0:
        for r in load_results(csv_path):
            if r.ok and r.run_id in wanted:
                done[r.run_id] = r
        # rewrite without error rows or truncated lines
        _write_rows(csv_path, list(done.values()), "w")
    pending = [r for rid, r in wanted.items() if rid not in done]
    log.info("%d runs total, %d already complete", len(wanted), len(done))

    def record(row):
        _write_rows(csv_path, [row], "a")
        _append_timing(timing_path, row)
        done[row.run_id] = row
        log.info("%s: %s precision=%.4f density=%.4f (%.0fs)",
                 row.run_id, row.status, row.precision, row.density, row.wall_time)

    if threads <= 1 or len(pending) <= 1:
        for run in pending:
            record(run_one(grid, run, out))
    else:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(_run_one_star, (grid, run, out)) for run in pending]
            for fut in as_completed(futures):
                record(fut.result())
    return [done[rid] for rid in wanted]


# -- summaries ------------------------------------------------------------------


def percent_difference(x: float, base: float) -> float:
    if base == 0:
        raise ZeroDivisionError("percent difference against a zero baseline")
    return 100.0 * (x - base) / base


@dataclass
class SummaryCell:
    dataset: str
    schedule: str
    regularizer: str  # label, e.g. "none" or "iso_trace_mean-0.1"
    n: int
    mean: dict
    std: dict
    pct: dict  # percent difference of the mean vs the baseline mean
    wins: dict  # paired seeds where this cell beats the baseline
    paired: int  # seeds present in both this cell and the baseline


def summarize(rows: list[ResultRow]) -> list[SummaryCell]:
    """Per (dataset, schedule, regularizer) mean and sample std across seeds.

    Percent differences and paired win counts are taken against the
    regularizer-free cell with the same dataset and schedule.
    """
    groups: dict[tuple, dict[int, ResultRow]] = {}
    for r in rows:
        if r.ok:
            groups.setdefault((r.dataset, r.schedule, r.reg_label), {})[r.seed] = r
    cells = []
    for (ds, sched, label), by_seed in sorted(groups.items(), key=lambda kv: (kv[0][0], kv[0][1], kv[0][2] != "none", kv[0][2])):
        base = groups.get((ds, sched, "none"))
        if base is None:
            raise MissingBaselineError(f"no baseline (regularizer none) rows for {ds}/{sched}")
        mean, std, pct, wins = {}, {}, {}, {}
        common = sorted(set(by_seed) & set(base))
        for m in METRICS:
            vals = np.array([getattr(r, m) for r in by_seed.values()])
            bvals = np.array([getattr(r, m) for r in base.values()])
            mean[m] = float(vals.mean())
            std[m] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
            pct[m] = percent_difference(mean[m], float(bvals.mean()))
            wins[m] = sum(getattr(by_seed[s], m) > getattr(base[s], m) for s in common)
        cells.append(SummaryCell(ds, sched, label, len(by_seed), mean, std, pct, wins, len(common)))
    return cells


def write_summary(cells: list[SummaryCell], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = ["dataset", "schedule", "regularizer", "n"]
        for m in METRICS:
            header += [f"{m}_mean", f"{m}_std", f"{m}_pct", f"{m}_wins"]
        w.writerow(header)
        for c in cells:
            line = [c.dataset, c.schedule, c.regularizer, c.n]
            for m in METRICS:
                line += [f"{c.mean[m]:.6f}", f"{c.std[m]:.6f}", f"{c.pct[m]:+.3f}", f"{c.wins[m]}/{c.paired}"]
            w.writerow(line)


def format_summary(cells: list[SummaryCell]) -> str:
    lines = [f"{'dataset':<16}{'schedule':<10}{'regularizer':<24}" + "".join(f"{m:>24}" for m in METRICS)]
    for c in cells:
        parts = []
        for m in METRICS:
            s = f"{c.mean[m]:.4f}±{c.std[m]:.4f}"
            if c.regularizer != "none":
                s += f" ({c.pct[m]:+.2f}%)"
            parts.append(f"{s:>24}")
        lines.append(f"{c.dataset:<16}{c.schedule:<10}{c.regularizer:<24}" + "".join(parts))
    return "\n".join(lines)


# -- plot data ----------------------------------------------------------------------


def emit_plot_data(out_dir, dataset: str, seed: int, variant: str, dest=None, k: int = DEFAULT_K,
                   schedule: str = "linear") -> list[Path]:
    """Write the three point clouds behind a radius/membership scatter plot.

    ``<dataset>_real.csv`` has the evaluation real set with each point's k-NN
    radius; ``<dataset>_ddpm.csv`` and ``<dataset>_regularized.csv`` hold the
    baseline and ``variant`` generated sets with, per point, the number of
    real spheres containing it. ``variant`` is a run label such as
    ``iso_trace_mean-0.1``.
    """
    out_dir = Path(out_dir)
    dest = Path(dest) if dest is not None else out_dir / "plots"
    real_path = out_dir / "real" / f"{dataset}__s{seed}.csv"
    runs = {
        "ddpm": out_dir / "runs" / f"{dataset}__{schedule}__none__s{seed}" / "generated.csv",
        "regularized": out_dir / "runs" / f"{dataset}__{schedule}__{variant}__s{seed}" / "generated.csv",
    }
    for p in [real_path, *runs.values()]:
        if not p.exists():
            raise ArtifactError(f"missing run artifact {p}")
    dest.mkdir(parents=True, exist_ok=True)
    real = load_points(real_path)
    manifold = build_manifold(real, k)
    written = []
    path = dest / f"{dataset}_real.csv"
    _write_columns(path, real, "radius", manifold.radii)
    written.append(path)
    for tag, gen_path in runs.items():
        gen = load_points(gen_path)
        counts = membership_counts(real, manifold.radii, gen)
        path = dest / f"{dataset}_{tag}.csv"
        _write_columns(path, gen, "count", counts)
        written.append(path)
    return written


def _write_columns(path, points, name, column):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{i}" for i in range(points.shape[1])] + [name])
        for p, c in zip(points, column):
            w.writerow([repr(float(v)) for v in p] + [_fmt(c) if name == "radius" else int(c)])
