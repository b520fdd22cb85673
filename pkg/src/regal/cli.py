"""Command-line front end: gen / run / eval / report.

Config files are JSON with a schema_version field. The only environment
variable honored is REGAL_WORKERS (worker count for method comparisons).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import ConfigError
from .harness import RunConfig, Runner, compare_methods, run
from .metrics import evaluate_pool
from .scenegen import generate_pool, load_gen_config, save_pool


def _load_json(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        blob = json.load(f)
    if not isinstance(blob, dict):
        raise ConfigError("config", f"{path} must hold a JSON object")
    blob.pop("schema_version", None)
    return blob


def cmd_gen(args: argparse.Namespace) -> int:
    cfg = load_gen_config(_load_json(args.config))
    scenes = generate_pool(cfg)
    path = save_pool(scenes, cfg, args.out)
    n_actors = sum(len(s.actors) for s in scenes)
    print(f"wrote {len(scenes)} scenes ({n_actors} actors) to {path}")
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    blob = _load_json(args.config)
    if args.out:
        blob["out_dir"] = args.out
    cfg = RunConfig.from_json(blob)
    state = run(cfg)
    last = state.reports[-1]
    print(f"run complete: {state.iteration} iterations, "
          f"{state.pool_state.spent} actors labeled, "
          f"final meanADE={last['mean_ade']} mAP={last['map']}")
    print(f"artifacts in {cfg.out_dir}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    run_dir = Path(args.run)
    cfg = RunConfig.from_json(json.loads((run_dir / "config.json").read_text(encoding="utf-8")))
    runner = Runner(cfg)
    state = runner._load_latest_checkpoint()
    if state is None:
        print(f"no checkpoint found under {run_dir}", file=sys.stderr)
        return 1
    report = evaluate_pool(state.params, runner.eval_scenes, runner.eval_cfg)
    print(json.dumps(report.as_row(), indent=2))
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["run,iteration,cumulative_actors,map,mean_ade,recall"]
    dat: dict[str, list[str]] = {}
    for run_dir in args.runs:
        run_dir = Path(run_dir)
        metrics = run_dir / "metrics.csv"
        if not metrics.is_file():
            print(f"skipping {run_dir}: no metrics.csv", file=sys.stderr)
            continue
        rows = metrics.read_text(encoding="utf-8").strip().splitlines()
        header = rows[0].split(",")
        idx = {name: header.index(name) for name in
               ("iteration", "cumulative_actors", "map", "mean_ade", "recall")}
        name = run_dir.name
        dat[name] = ["# iteration cumulative_actors map mean_ade"]
        for row in rows[1:]:
            vals = row.split(",")
            lines.append(",".join([name] + [vals[idx[c]] for c in
                                            ("iteration", "cumulative_actors", "map", "mean_ade", "recall")]))
            dat[name].append(" ".join(vals[idx[c]] for c in
                                      ("iteration", "cumulative_actors", "map", "mean_ade")))
    (out / "report.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    for name, content in dat.items():
        (out / f"{name}.dat").write_text("\n".join(content) + "\n", encoding="utf-8")
    print(f"report for {len(dat)} runs written to {out}")
    return 0


def cmd_compare(args: argparse.Namespace) -> int:
    blob = _load_json(args.config)
    methods = blob.pop("methods")
    seeds = blob.pop("seeds")
    if args.out:
        blob["out_dir"] = args.out
    cfg = RunConfig.from_json(blob)
    compare_methods(cfg, methods, seeds)
    print(f"comparison artifacts in {cfg.out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="regal",
                                description="Cost-aware region-level active labeling simulator")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a scene pool")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen)

    r = sub.add_parser("run", help="execute or resume an active-labeling run")
    r.add_argument("--config", required=True)
    r.add_argument("--out", default=None)
    r.set_defaults(fn=cmd_run)

    e = sub.add_parser("eval", help="re-evaluate the latest checkpoint of a run")
    e.add_argument("--run", required=True)
    e.set_defaults(fn=cmd_eval)

    c = sub.add_parser("compare", help="run a multi-method, multi-seed comparison")
    c.add_argument("--config", required=True)
    c.add_argument("--out", default=None)
    c.set_defaults(fn=cmd_compare)

    rep = sub.add_parser("report", help="aggregate metrics from finished runs")
    rep.add_argument("--runs", nargs="+", required=True)
    rep.add_argument("--out", required=True)
    rep.set_defaults(fn=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    raise SystemExit(main())
