"""Command-line entry point: ``structdiff <command> ...``.

Exit status is 0 only when everything requested succeeded, 1 when a run or
evaluation failed, and 2 for bad arguments or unreadable inputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace

from . import harness
from .diffusion import SamplerConfig, TrainConfig, sample, train
from .prdc import DEFAULT_K, prdc, prdc_fast
from .regularizers import KINDS
from .schedules import build_schedule
from .synthetic_data import VARIANTS, DatasetKind, PointsFormatError, generate, load_points, save_points
from .tensor_net import load_checkpoint, save_checkpoint

log = logging.getLogger("structdiff")


def _load_json(path):
    if path is None:
        return {}
    with open(path) as fh:
        return json.load(fh)


def _train_config(args) -> TrainConfig:
    cfg = TrainConfig.from_dict(_load_json(args.config))
    if args.dataset:
        cfg = replace(cfg, dataset=replace(cfg.dataset, variant=args.dataset))
    if args.regularizer:
        cfg = replace(cfg, regularizer=replace(cfg.regularizer, kind=args.regularizer))
    if args.lam is not None:
        cfg = replace(cfg, regularizer=replace(cfg.regularizer, lam=args.lam))
    if args.steps is not None:
        cfg = replace(cfg, steps=args.steps)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed, dataset=replace(cfg.dataset, seed=args.seed))
    return TrainConfig.from_dict(cfg.to_dict())  # re-validate after overrides


def cmd_gen(args) -> int:
    kind = DatasetKind(args.dataset, args.n, args.noise, args.seed or 0)
    save_points(generate(kind), args.out)
    log.info("wrote %d %s points to %s", args.n, args.dataset, args.out)
    return 0


def cmd_train(args) -> int:
    cfg = _train_config(args)
    data = load_points(args.data) if args.data else None
    res = train(cfg, data=data, progress_every=args.progress)
    save_checkpoint(args.out, res.net, res.ema, res.opt)
    if args.log:
        res.log.write_csv(args.log)
    if args.save_config:
        with open(args.save_config, "w") as fh:
            json.dump(cfg.to_dict(), fh, indent=2)
    log.info("trained %d steps; final simple loss %.4f", cfg.steps, float(res.log.simple[-1:].mean()) if cfg.steps else float("nan"))
    return 0


def cmd_sample(args) -> int:
    cfg = TrainConfig.from_dict(_load_json(args.config))
    net, ema, _ = load_checkpoint(args.checkpoint)
    scfg = SamplerConfig(n=args.n, sigma=args.sigma, seed=args.seed or 0, use_ema=not args.no_ema)
    pts = sample(net, ema, build_schedule(cfg.schedule), scfg)
    save_points(pts, args.out)
    return 0


def cmd_eval(args) -> int:
    real, gen = load_points(args.real), load_points(args.gen)
    fn = prdc if args.naive else prdc_fast
    rep = fn(real, gen, args.k)
    text = json.dumps(rep.to_dict(), indent=2)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    print(text)
    return 0


def cmd_grid(args) -> int:
    if not args.config:
        raise ValueError("grid needs --config")
    grid = harness.ExperimentGrid.load(args.config)
    if args.seed is not None:
        grid = replace(grid, seeds=[args.seed])
    rows = harness.run_grid(grid, args.out, threads=args.threads)
    failed = [r for r in rows if not r.ok]
    for r in failed:
        log.error("run %s failed: %s", r.run_id, r.error)
    try:
        cells = harness.summarize(rows)
    except harness.MissingBaselineError:
        cells = None
    if cells:
        print(harness.format_summary(cells))
    return 1 if failed else 0


def cmd_summarize(args) -> int:
    cells = harness.summarize(harness.load_results(args.results))
    if args.out:
        harness.write_summary(cells, args.out)
    print(harness.format_summary(cells))
    return 0


def cmd_plotdata(args) -> int:
    paths = harness.emit_plot_data(args.grid_dir, args.dataset, args.seed or 1, args.variant,
                                   dest=args.out, k=args.k, schedule=args.schedule)
    for p in paths:
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="structdiff", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--out", required=out_required, help="output path")
        sp.add_argument("--seed", type=int, help="seed (unsigned 64-bit)")

    g = sub.add_parser("gen", help="generate a standardised synthetic dataset")
    common(g)
    g.add_argument("--dataset", choices=VARIANTS, required=True)
    g.add_argument("--n", type=int, default=10000)
    g.add_argument("--noise", type=float, default=None)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train one denoiser and write a checkpoint")
    common(t)
    t.add_argument("--dataset", choices=VARIANTS)
    t.add_argument("--regularizer", choices=KINDS)
    t.add_argument("--lambda", dest="lam", type=float)
    t.add_argument("--steps", type=int)
    t.add_argument("--data", help="train on points from this CSV instead of generating")
    t.add_argument("--log", help="write the per-step loss log here")
    t.add_argument("--save-config", help="write the resolved config JSON here")
    t.add_argument("--progress", type=int, default=0, help="log every N steps")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="draw points from a checkpoint")
    common(s)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--n", type=int, default=10000)
    s.add_argument("--sigma", choices=("posterior", "beta"), default="posterior")
    s.add_argument("--no-ema", action="store_true", help="sample with raw rather than EMA weights")
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="precision/recall/density/coverage of two point CSVs")
    common(e, out_required=False)
    e.add_argument("--real", required=True)
    e.add_argument("--gen", required=True)
    e.add_argument("--k", type=int, default=DEFAULT_K)
    e.add_argument("--naive", action="store_true", help="use the brute-force implementation")
    e.set_defaults(func=cmd_eval)

    gr = sub.add_parser("grid", help="run an experiment grid (resumable)")
    common(gr)
    gr.add_argument("--threads", type=int, default=1)
    gr.set_defaults(func=cmd_grid)

    sm = sub.add_parser("summarize", help="aggregate a results CSV")
    common(sm, out_required=False)
    sm.add_argument("--results", required=True)
    sm.set_defaults(func=cmd_summarize)

    pd = sub.add_parser("plotdata", help="emit scatter-plot CSVs for one dataset/seed")
    common(pd)
    pd.add_argument("--grid-dir", required=True)
    pd.add_argument("--dataset", choices=VARIANTS, required=True)
    pd.add_argument("--variant", default="iso_trace_mean-0.1", help="run label of the regularised runs")
    pd.add_argument("--schedule", default="linear")
    pd.add_argument("--k", type=int, default=DEFAULT_K)
    pd.set_defaults(func=cmd_plotdata)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.seed is not None and not 0 <= args.seed < 2**64:
        log.error("seed must be an unsigned 64-bit integer")
        return 2
    try:
        return args.func(args)
    except (OSError, PointsFormatError, json.JSONDecodeError, ValueError, KeyError) as exc:
        log.error("%s", exc)
        return 2
    except FloatingPointError as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
