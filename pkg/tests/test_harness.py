import csv
import json

import numpy as np
import pytest

from structdiff import harness
from structdiff.cli import main
from structdiff.diffusion import SamplerConfig, TrainConfig
from structdiff.prdc import build_manifold, membership_naive, prdc
from structdiff.regularizers import RegularizerSpec
from structdiff.schedules import ScheduleKind
from structdiff.synthetic_data import DatasetKind, load_points
from structdiff.tensor_net import load_checkpoint


def tiny_grid(**kw):
    base = dict(
        datasets=[DatasetKind("central_banana", 300)],
        regularizers=[RegularizerSpec("none"), RegularizerSpec("iso_trace_mean", 0.1)],
        schedules=[ScheduleKind(T=20)],
        seeds=[1, 2],
        train=TrainConfig(steps=25, batch_size=32, hidden=(8,), embed_dim=4),
        sampler=SamplerConfig(n=150),
    )
    base.update(kw)
    return harness.ExperimentGrid(**base)


def read_rows(path):
    with open(path) as fh:
        return sorted(fh.read().splitlines()[1:])


def test_single_run_grid(tmp_path):
    grid = tiny_grid(regularizers=[RegularizerSpec("none")], seeds=[3])
    rows = harness.run_grid(grid, tmp_path)
    assert len(rows) == 1 and rows[0].ok
    assert len(read_rows(tmp_path / "results.csv")) == 1
    run_dir = tmp_path / "runs" / rows[0].run_id
    for name in ("checkpoint.sdf", "generated.csv", "train_log.csv", "config.json"):
        assert (run_dir / name).exists()


def test_metrics_reproducible_from_persisted_points(tmp_path):
    grid = tiny_grid(seeds=[1])
    rows = harness.run_grid(grid, tmp_path)
    for r in rows:
        gen = load_points(tmp_path / "runs" / r.run_id / "generated.csv")
        real = load_points(tmp_path / "real" / f"{r.dataset}__s{r.seed}.csv")
        assert prdc(real, gen, grid.k).fields() == (r.precision, r.recall, r.density, r.coverage)


def test_grid_is_deterministic_and_resumable(tmp_path):
    grid = tiny_grid()
    harness.run_grid(grid, tmp_path / "a")
    harness.run_grid(grid, tmp_path / "b", threads=2)
    a, b = read_rows(tmp_path / "a" / "results.csv"), read_rows(tmp_path / "b" / "results.csv")
    assert a == b and len(a) == 4
    for r in grid.runs():
        ca = (tmp_path / "a" / "runs" / r.run_id / "checkpoint.sdf").read_bytes()
        cb = (tmp_path / "b" / "runs" / r.run_id / "checkpoint.sdf").read_bytes()
        assert ca == cb

    # drop the last row: exactly that run executes again
    path = tmp_path / "a" / "results.csv"
    lines = path.read_text().splitlines()
    dropped = lines[-1].split(",")[0]
    path.write_text("\n".join(lines[:-1]) + "\n")
    stamp = {r.run_id: (tmp_path / "a" / "runs" / r.run_id / "checkpoint.sdf").stat().st_mtime_ns for r in grid.runs()}
    harness.run_grid(grid, tmp_path / "a")
    for rid, t in stamp.items():
        now = (tmp_path / "a" / "runs" / rid / "checkpoint.sdf").stat().st_mtime_ns
        assert (now != t) == (rid == dropped)
    assert read_rows(path) == b


def test_truncated_trailing_line_is_rerun(tmp_path):
    grid = tiny_grid(seeds=[1])
    harness.run_grid(grid, tmp_path)
    path = tmp_path / "results.csv"
    text = path.read_text()
    path.write_text(text[: text.rfind(",")])  # half-written last row
    rows = harness.run_grid(grid, tmp_path)
    assert len(rows) == 2 and all(r.ok for r in rows)
    assert len(read_rows(path)) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_failed_run_records_error_row(tmp_path):
    # a diverging learning rate makes the kl run fail; the grid continues
    grid = tiny_grid(
        regularizers=[RegularizerSpec("none"), RegularizerSpec("kl", 0.1)],
        seeds=[1],
        train=TrainConfig(steps=25, batch_size=32, hidden=(8,), embed_dim=4, lr=1e300, clip_norm=None),
    )
    rows = harness.run_grid(grid, tmp_path)
    assert len(rows) == 2
    assert any(not r.ok for r in rows)
    recs = list(csv.DictReader(open(tmp_path / "results.csv")))
    assert any(rec["status"] == "error" and rec["error"] for rec in recs)


def test_grid_validation():
    with pytest.raises(ValueError):
        tiny_grid(seeds=[1, 1])
    with pytest.raises(ValueError):
        tiny_grid(datasets=[])
    with pytest.raises(ValueError):
        tiny_grid(regularizers=[RegularizerSpec("none"), RegularizerSpec("none")])


def test_grid_json_round_trip():
    grid = tiny_grid()
    again = harness.ExperimentGrid.from_dict(json.loads(json.dumps(grid.to_dict())))
    assert [r.run_id for r in again.runs()] == [r.run_id for r in grid.runs()]
    assert again.train_config(again.runs()[0]) == grid.train_config(grid.runs()[0])


def row(reg, lam, seed, precision, density=0.9, recall=0.9, coverage=0.9):
    return harness.ResultRow(f"x{reg}{seed}", "central_banana", "linear", reg, lam, seed,
                             precision, recall, density, coverage, 0.4, 0.0)


def test_percent_difference_values():
    assert harness.percent_difference(0.984, 0.974) == pytest.approx(1.027, abs=5e-4)
    assert harness.percent_difference(0.976, 0.967) == pytest.approx(0.931, abs=5e-4)
    assert harness.percent_difference(0.5, 0.5) == 0.0


def test_summarize_means_std_and_wins():
    rows = [row("none", 0.1, s, p) for s, p in zip((1, 2, 3), (0.96, 0.97, 0.98))]
    rows += [row("iso_trace_mean", 0.1, s, p) for s, p in zip((1, 2, 3), (0.97, 0.965, 0.99))]
    base, var = harness.summarize(rows)
    assert base.regularizer == "none" and var.regularizer == "iso_trace_mean-0.1"
    assert base.mean["precision"] == pytest.approx(0.97)
    assert base.std["precision"] == pytest.approx(0.01)
    assert var.pct["precision"] == pytest.approx(100 * (0.975 - 0.97) / 0.97)
    assert var.wins["precision"] == 2 and var.paired == 3
    assert var.pct["density"] == 0.0


def test_summarize_missing_baseline():
    with pytest.raises(harness.MissingBaselineError):
        harness.summarize([row("iso_trace_mean", 0.1, 1, 0.9)])


def test_error_rows_are_ignored_in_summary():
    bad = row("none", 0.1, 2, float("nan"))
    bad.status = "error"
    cells = harness.summarize([row("none", 0.1, 1, 0.9), bad])
    assert cells[0].n == 1


def test_plot_data(tmp_path):
    grid = tiny_grid(seeds=[1])
    harness.run_grid(grid, tmp_path)
    paths = harness.emit_plot_data(tmp_path, "central_banana", 1, "iso_trace_mean-0.1", k=grid.k)
    real = load_points(tmp_path / "real" / "central_banana__s1.csv")
    radii = build_manifold(real, grid.k).radii
    with open(paths[0]) as fh:
        recs = list(csv.DictReader(fh))
    assert len(recs) == len(real)
    np.testing.assert_array_equal([float(r["radius"]) for r in recs], radii)
    for p, tag in zip(paths[1:], ("none", "iso_trace_mean-0.1")):
        gen = load_points(tmp_path / "runs" / f"central_banana__linear__{tag}__s1" / "generated.csv")
        with open(p) as fh:
            counts = [int(r["count"]) for r in csv.DictReader(fh)]
        assert counts == membership_naive(real, radii, gen).sum(axis=1).tolist()
    with pytest.raises(harness.ArtifactError):
        harness.emit_plot_data(tmp_path, "swiss_roll", 1, "iso_trace_mean-0.1")


def test_plot_counts_zero_outside_every_sphere(tmp_path):
    real = np.random.default_rng(0).standard_normal((50, 2))
    radii = build_manifold(real, 5).radii
    far = np.array([[100.0, 100.0]])
    assert harness.membership_counts(real, radii, far).tolist() == [0]


# -- CLI ---------------------------------------------------------------------------


def test_cli_end_to_end(tmp_path, capsys):
    pts = tmp_path / "pts.csv"
    assert main(["gen", "--dataset", "swiss_roll", "--n", "200", "--seed", "7", "--out", str(pts)]) == 0
    assert load_points(pts).shape == (200, 2)

    cfg = tmp_path / "train.json"
    tc = TrainConfig(dataset=DatasetKind("swiss_roll", 200), schedule=ScheduleKind(T=10),
                     steps=10, batch_size=16, hidden=(8,), embed_dim=4)
    cfg.write_text(json.dumps(tc.to_dict()))
    ckpt = tmp_path / "model.sdf"
    assert main(["train", "--config", str(cfg), "--regularizer", "iso_trace_mean", "--lambda", "0.1",
                 "--data", str(pts), "--out", str(ckpt), "--log", str(tmp_path / "log.csv")]) == 0
    net, _, opt = load_checkpoint(ckpt)
    assert opt.step == 10 and net.widths == [6, 8, 2]

    gen = tmp_path / "gen.csv"
    assert main(["sample", "--config", str(cfg), "--checkpoint", str(ckpt), "--n", "100",
                 "--seed", "1", "--out", str(gen)]) == 0
    capsys.readouterr()
    assert main(["eval", "--real", str(pts), "--gen", str(gen), "--k", "3"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["n_real"] == 200 and report["n_gen"] == 100
    assert 0.0 <= report["precision"] <= 1.0


def test_cli_grid_summarize_plotdata(tmp_path, capsys):
    grid = tiny_grid(seeds=[1])
    cfg = tmp_path / "grid.json"
    cfg.write_text(json.dumps(grid.to_dict()))
    out = tmp_path / "g"
    assert main(["grid", "--config", str(cfg), "--out", str(out), "--threads", "1"]) == 0
    assert main(["summarize", "--results", str(out / "results.csv"), "--out", str(tmp_path / "s.csv")]) == 0
    assert "iso_trace_mean-0.1" in capsys.readouterr().out
    assert main(["plotdata", "--grid-dir", str(out), "--dataset", "central_banana", "--seed", "1",
                 "--out", str(tmp_path / "plots")]) == 0
    assert (tmp_path / "plots" / "central_banana_regularized.csv").exists()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_cli_errors(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("x0,x1\n1,oops\n")
    good = tmp_path / "good.csv"
    main(["gen", "--dataset", "swiss_roll", "--n", "20", "--out", str(good)])
    assert main(["eval", "--real", str(bad), "--gen", str(good)]) == 2
    assert main(["eval", "--real", str(tmp_path / "missing.csv"), "--gen", str(good)]) == 2
    assert main(["gen", "--dataset", "swiss_roll", "--seed", str(2**64), "--out", str(good)]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["gen", "--dataset", "nope", "--out", str(good)])
    assert exc.value.code == 2
    # a grid with a failing run exits 1
    grid = tiny_grid(
        regularizers=[RegularizerSpec("none")], seeds=[1],
        train=TrainConfig(steps=25, batch_size=32, hidden=(8,), embed_dim=4, lr=1e300, clip_norm=None),
    )
    cfg = tmp_path / "grid.json"
    cfg.write_text(json.dumps(grid.to_dict()))
    assert main(["grid", "--config", str(cfg), "--out", str(tmp_path / "g")]) == 1
