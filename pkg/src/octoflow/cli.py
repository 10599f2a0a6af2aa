"""``octoflow`` command line: gen-data, train, predict, eval, bench.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import contextlib
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import config as cf
from .autodiff import checkpoint
from .evaluate import benchmark, evaluate_cases, format_bench_csv, format_stats_csv, write_text
from .flow_oracle import dumps_record, loads_record
from .model import SurrogateModel
from .train import SPLITS, TrainConfig, build_dataset, fit, load_case, load_dataset, save_dataset, split_sizes

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


class UsageError(Exception):
    pass


def _seed(args, cfg: dict) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("OCTOFLOW_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"OCTOFLOW_SEED must be an integer, got {env!r}") from None
    return cfg["seed"]


def _floats(text: str, what: str) -> np.ndarray:
    try:
        vals = np.array([float(v) for v in text.split(",")])
    except ValueError:
        raise UsageError(f"malformed {what}: {text!r}") from None
    if vals.size == 0 or not np.all(np.isfinite(vals)):
        raise UsageError(f"malformed {what}: {text!r}")
    return vals


def _ints(text: str, what: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"malformed {what}: {text!r}") from None
    if not vals or min(vals) < 1:
        raise UsageError(f"malformed {what}: {text!r}")
    return vals


def uniform_dt(times: np.ndarray) -> float:
    """Spacing of a uniform time list, or 0 for single or irregular lists."""
    if len(times) < 2:
        return 0.0
    d = np.diff(times)
    return float(d[0]) if d[0] > 0 and np.allclose(d, d[0], rtol=1e-9, atol=0) else 0.0


def sidecar_path(model_path: str | Path) -> Path:
    return Path(str(model_path) + ".cfg")


def save_model(model: SurrogateModel, path: str | Path, cfg: dict) -> None:
    checkpoint.save(model.state_dict(), path)
    side = {k.name: cfg[k.name] for k in cf.MODEL_SCHEMA}
    side["velocity_scale_ms"] = model.velocity_scale
    cf.write_config(side, sidecar_path(path), cf.MODEL_SCHEMA)


def load_model(path: str | Path) -> SurrogateModel:
    side = cf.read_config(sidecar_path(path), cf.MODEL_SCHEMA)
    model = SurrogateModel(cf.model_config(side), velocity_scale=side["velocity_scale_ms"])
    model.load_state_dict(checkpoint.load(path))
    return model


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_data(args) -> int:
    cfg = cf.read_config(args.config)
    n = args.cases if args.cases is not None else cfg["n_cases"]
    try:
        split_sizes(n)
    except ValueError as e:
        raise UsageError(str(e)) from None
    seed = _seed(args, cfg)
    cfg = {**cfg, "seed": seed, "n_cases": n}
    ds = build_dataset(n, cfg, seed, workers=args.threads or 1)
    save_dataset(ds, args.out_dir, cfg)
    for c in ds.cases:
        print(f"case {c.case_id} split={ds.split[c.case_id]} points={len(c.cloud)} "
              f"frames={c.record.n_frames} outlets={len(c.tree.outlet_segments)}")
    return 0


def cmd_train(args) -> int:
    data = Path(args.data)
    if not (data / "split.csv").is_file():
        raise FileNotFoundError(f"no dataset at {data}")
    cfg_path = args.config or (data / "run.cfg" if (data / "run.cfg").is_file() else None)
    cfg = cf.read_config(cfg_path)
    cfg["seed"] = _seed(args, cfg)
    if args.max_epochs is not None:
        cfg["max_epochs"] = args.max_epochs
    if args.deterministic:
        cfg["time_budget_s"] = 0.0  # wall-clock stopping would break reproducibility
    ds = load_dataset(data)
    model = SurrogateModel(cf.model_config(cfg), seed=cfg["model_seed"], velocity_scale=cfg["velocity_scale_ms"])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path = out.parent / "train_log.csv"

    def progress(epoch, row):
        print(f"epoch {row[0]} train_mae={row[1]:.6g} val_mae={row[2]:.6g}", flush=True)

    res = fit(model, ds, TrainConfig.from_run_config(cfg), log_path, progress)
    save_model(model, out, cfg)
    print(f"best epoch {res.best_epoch} val_mae={res.best_val:.6g}")
    return 0


def cmd_predict(args) -> int:
    times = _floats(args.times, "times")
    model = load_model(args.model)
    case = load_case(args.case_dir)
    pred = model.predict(case.cloud, case.waveform, case.cloud.points, times, case.duration)
    Path(args.out).write_bytes(dumps_record(pred, uniform_dt(times)))
    if args.debug_counters:
        print(f"unet_calls={model.counters.unet_calls}")
    return 0


def cmd_eval(args) -> int:
    if args.split not in SPLITS:
        raise UsageError(f"unknown split {args.split!r}")
    model = load_model(args.model)
    ds = load_dataset(args.data)
    cases = ds.subset(args.split)
    if not cases:
        raise ValueError(f"split {args.split!r} is empty")
    preds = None
    if args.pred_dir:
        preds = {}
        for c in cases:
            v, _ = loads_record((Path(args.pred_dir) / f"case_{c.case_id}.bin").read_bytes())
            if v.shape != c.record.velocities.shape:
                raise ValueError(f"case {c.case_id}: prediction shape {v.shape} != record {c.record.velocities.shape}")
            preds[c.case_id] = v
    res = evaluate_cases(model, cases, preds)
    write_text(format_stats_csv(res), args.out)
    p = res.pooled
    print(f"pooled mae={p.mean:.6g} median={p.median:.6g} r2={p.r_squared:.6g} mean_speed={res.mean_speed:.6g}")
    return 0


def cmd_bench(args) -> int:
    cfg = cf.read_config(args.config)
    model = load_model(args.model)
    case = load_case(args.case_dir)
    res = benchmark(model, case, _ints(args.ns, "ns"), _ints(args.nt, "nt"),
                    args.runs or cfg["bench_runs"], cfg["bench_warmup"], _seed(args, cfg))
    write_text(format_bench_csv(res.report), args.out)
    r = res.report
    print(f"t_net={r.t_net.mean_ms:.2f}±{r.t_net.std_ms:.2f} ms "
          f"t_spatial/1e6={r.t_spatial.mean_ms:.2f}±{r.t_spatial.std_ms:.2f} ms "
          f"t_temporal/1e2={r.t_temporal.mean_ms:.2f}±{r.t_temporal.std_ms:.2f} ms threads={r.threads}")
    print(f"cost model residual={res.fit.max_rel_residual:.4f} spatial doubling={res.spatial_doubling:.3f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="octoflow", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="flat key = value run configuration")
        sp.add_argument("--seed", type=int, help="overrides OCTOFLOW_SEED and the config seed")
        sp.add_argument("--threads", type=int, help="worker/BLAS thread count; 1 is deterministic")
        return sp

    g = common(sub.add_parser("gen-data", help="generate an oracle dataset"))
    g.add_argument("--out-dir", required=True)
    g.add_argument("--cases", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = common(sub.add_parser("train", help="train and keep the best validation checkpoint"))
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path; train_log.csv goes next to it")
    t.add_argument("--max-epochs", type=int)
    t.add_argument("--deterministic", action="store_true", help="single thread, no wall-clock stopping")
    t.set_defaults(func=cmd_train)

    q = common(sub.add_parser("predict", help="velocities at all cloud points and given times"))
    q.add_argument("--model", required=True)
    q.add_argument("--case-dir", required=True)
    q.add_argument("--times", required=True, help="comma-separated times in ms")
    q.add_argument("--out", required=True)
    q.add_argument("--debug-counters", action="store_true")
    q.set_defaults(func=cmd_predict)

    e = common(sub.add_parser("eval", help="time-averaged error statistics on a split"))
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--out", required=True)
    e.add_argument("--pred-dir", help="use case_<id>.bin predictions instead of running the model")
    e.set_defaults(func=cmd_eval)

    b = common(sub.add_parser("bench", help="phase timings and cost-model fit"))
    b.add_argument("--model", required=True)
    b.add_argument("--case-dir", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--runs", type=int)
    b.add_argument("--ns", default="10000,100000")
    b.add_argument("--nt", default="10,100")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    threads = 1 if getattr(args, "deterministic", False) else args.threads
    if threads is not None and threads < 1:
        print("octoflow: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    limit = threadpool_limits(threads) if threads else contextlib.nullcontext()
    try:
        with limit:
            return args.func(args)
    except UsageError as e:
        print(f"octoflow: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as e:
        print(f"octoflow: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError, KeyError) as e:
        print(f"octoflow: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
