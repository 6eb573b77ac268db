"""``meshprop run | sweep | render``."""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from meshprop import __version__, engine, metrics, render
from meshprop.config import ConfigError, RunConfig
from meshprop.topology import Topology

log = logging.getLogger("meshprop")


@dataclass
class ExperimentPlan:
    base: RunConfig
    strategies: list[dict]
    topologies: list[dict]
    ood_ranks: list[int]
    seeds: list[int]
    output_root: str | None = None

    @classmethod
    def load(cls, path) -> ExperimentPlan:
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError("<plan>", f"invalid JSON: {exc}") from exc
        base = RunConfig.from_dict(raw.get("base", {}))
        strategies = [s if isinstance(s, dict) else {"kind": s} for s in raw.get("strategies", [base.strategy])]
        strategies = [{"tau": base.strategy["tau"], **s} for s in strategies]
        plan = cls(
            base=base,
            strategies=strategies,
            topologies=raw.get("topologies", [base.topology]),
            ood_ranks=[int(r) for r in raw.get("ood_ranks", [base.partition.get("ood_rank") or 1])],
            seeds=[int(s) for s in raw.get("seeds", [base.master_seed])],
            output_root=raw.get("output_root"),
        )
        for field_name in ("strategies", "topologies", "ood_ranks", "seeds"):
            if not getattr(plan, field_name):
                raise ConfigError(field_name, "sweep axis must not be empty")
        return plan

    def cells(self) -> list[RunConfig]:
        """Cross product in declaration order: strategy, topology, OOD rank, seed."""
        out = []
        for strat, topo, rank, seed in itertools.product(self.strategies, self.topologies, self.ood_ranks,
                                                          self.seeds):
            out.append(self.base.replace(strategy=strat, topology=topo, master_seed=seed,
                                         partition={"ood_rank": rank, "ood_device": None}))
        return out


def _cell_key(cfg: RunConfig) -> str:
    return metrics.run_id_for(cfg, engine.build_topology(cfg).label())


def _run_cell(cfg_dict: dict, out_dir: str) -> tuple[str, list[str] | None, str | None]:
    cfg = RunConfig.from_dict(cfg_dict)
    key = _cell_key(cfg)
    cell = Path(out_dir) / key
    try:
        done = cell / "config.json"
        if done.exists() and (cell / "summary.csv").exists():
            stored = json.loads(done.read_text())
            if stored.get("content_hash") == cfg.fingerprint()["content_hash"]:
                row = metrics.read_summary(cell / "summary.csv")[0]
                return key, [row[c] for c in metrics.SUMMARY_COLUMNS], None
        result = engine.run(cfg)
        s = metrics.export(result, cell, run_id=key)
        return key, [str(x) for x in s.summary_row()], None
    except Exception:
        return key, None, traceback.format_exc()


def cmd_run(args) -> int:
    cfg = RunConfig.load(args.config)
    if args.seed is not None:
        cfg = cfg.replace(master_seed=args.seed)
    result = engine.run(cfg, threads=args.threads, checkpoint_dir=args.checkpoint)
    s = metrics.export(result, args.out)
    log.info("wrote %s  mean_auc_iid=%.4f mean_auc_ood=%.4f pct_diff=%.2f", args.out, s.mean_auc_iid,
             s.mean_auc_ood, s.pct_diff())
    return 0


def cmd_sweep(args) -> int:
    plan = ExperimentPlan.load(args.plan)
    out = Path(args.out or plan.output_root or "sweep_out")
    out.mkdir(parents=True, exist_ok=True)
    cells = plan.cells()
    keys = [_cell_key(c) for c in cells]
    if len(set(keys)) != len(keys):
        dupes = sorted({k for k in keys if keys.count(k) > 1})
        raise ConfigError("topologies", f"sweep cells collide: {', '.join(dupes)}")
    log.info("sweep: %d cells -> %s", len(cells), out)
    jobs = [(c.to_dict(), str(out)) for c in cells]
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            results = list(pool.map(_run_cell, *zip(*jobs)))
    else:
        results = []
        for i, job in enumerate(jobs, 1):
            results.append(_run_cell(*job))
            log.info("cell %d/%d %s %s", i, len(jobs), results[-1][0], "ok" if results[-1][2] is None else "FAILED")
    rows, failed = [], []
    for key, row, err in results:
        if err is None:
            rows.append(row)
        else:
            failed.append({"cell": key, "error": err})
            log.error("cell %s failed:\n%s", key, err)
    metrics._atomic_write(out / "summary.csv", metrics._csv_text(metrics.SUMMARY_COLUMNS, rows))
    if failed:
        metrics._atomic_write(out / "failures.json", json.dumps(failed, indent=2))
        return 1
    stale = out / "failures.json"
    if stale.exists():
        stale.unlink()
    return 0


def cmd_render(args) -> int:
    if args.run:
        topo = Topology.load(Path(args.run) / "topology.json")
    else:
        topo = Topology.load(args.topology)
    values, vmin, vmax, ood = render.node_values(topo, args.metric, args.run)
    seed = topo.seed if args.layout_seed is None else args.layout_seed
    title = f"{topo.label()}  {args.metric}"
    svg = render.render_svg(topo, values, vmin, vmax, title, ood, layout=args.layout, seed=seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(svg)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="meshprop", description="Decentralized learning propagation simulator")
    ap.add_argument("--version", action="version", version=f"meshprop {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="execute one configured run")
    r.add_argument("--config", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--threads", type=int, default=1)
    r.add_argument("--checkpoint", help="per-round checkpoint directory (resumes if present)")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="run every cell of an experiment plan")
    s.add_argument("--plan", required=True)
    s.add_argument("--out")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_sweep)

    v = sub.add_parser("render", help="SVG heatmap of a topology or finished run")
    src = v.add_mutually_exclusive_group(required=True)
    src.add_argument("--topology")
    src.add_argument("--run")
    v.add_argument("--metric", required=True)
    v.add_argument("--out", required=True)
    v.add_argument("--layout", choices=("spring", "ring"), default="spring")
    v.add_argument("--layout-seed", type=int)
    v.set_defaults(func=cmd_render)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose or args.command != "render" else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except render.RenderError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        log.error("%s", exc)
        if args.verbose:
            traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
