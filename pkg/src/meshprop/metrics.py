"""Propagation measurements from per-round accuracy records, and their CSV export."""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

ROUNDS_COLUMNS = ("run_id", "round", "device", "acc_iid", "acc_ood")
SUMMARY_COLUMNS = ("run_id", "strategy", "topology", "ood_rank", "seed",
                   "mean_auc_iid", "mean_auc_ood", "pct_diff")


class MetricsError(ValueError):
    pass


def accuracy_auc(series: Sequence[float]) -> float:
    """Trapezoid area over round index, scaled by the span so a constant-c curve scores c."""
    y = np.asarray(series, dtype=np.float64)
    if y.size == 0:
        raise MetricsError("AUC of an empty series")
    if y.size == 1:
        return float(y[0])
    return float((y[0] / 2 + y[1:-1].sum() + y[-1] / 2) / (y.size - 1))


def device_aucs(records, which: str) -> np.ndarray:
    if not records:
        raise MetricsError("no round records")
    attr = {"IID": "acc_iid", "OOD": "acc_ood"}[which.upper()]
    curves = np.stack([getattr(r, attr) for r in records], axis=1)
    return np.array([accuracy_auc(c) for c in curves])


def topology_mean_auc(records, which: str) -> float:
    """Unweighted mean over devices of each device's accuracy AUC."""
    return float(np.mean(device_aucs(records, which)))


def percent_difference(auc_iid: float, auc_ood: float, base: str = "iid") -> float:
    """Signed OOD shortfall in percent, relative to IID AUC (or to the pair mean)."""
    if base == "iid":
        if auc_iid == 0:
            raise MetricsError("percent difference undefined for zero IID AUC")
        return 100.0 * (auc_iid - auc_ood) / auc_iid
    if base == "mean":
        mean = (auc_iid + auc_ood) / 2
        if mean == 0:
            raise MetricsError("percent difference undefined for zero mean AUC")
        return 100.0 * (auc_iid - auc_ood) / mean
    raise MetricsError(f"unknown percent-difference base {base!r}")


@dataclass
class RunSummary:
    run_id: str
    strategy: str
    topology: str
    ood_rank: int | None
    ood_device: int
    seed: int
    auc_iid: np.ndarray
    auc_ood: np.ndarray
    final_acc_iid: np.ndarray
    final_acc_ood: np.ndarray
    fingerprint: dict

    @property
    def mean_auc_iid(self) -> float:
        return float(np.mean(self.auc_iid))

    @property
    def mean_auc_ood(self) -> float:
        return float(np.mean(self.auc_ood))

    def pct_diff(self, base: str = "iid") -> float:
        return percent_difference(self.mean_auc_iid, self.mean_auc_ood, base)

    def summary_row(self) -> list:
        return [self.run_id, self.strategy, self.topology,
                "" if self.ood_rank is None else self.ood_rank, self.seed,
                repr(self.mean_auc_iid), repr(self.mean_auc_ood), repr(self.pct_diff())]


def run_id_for(cfg, topology_label: str) -> str:
    """Cell key ``strategy__topology__placement__seed``; also used as the sweep subdirectory name."""
    rank = cfg.partition.get("ood_rank")
    where = f"dev{cfg.partition['ood_device']}" if cfg.partition.get("ood_device") is not None else f"rank{rank}"
    return f"{cfg.strategy['kind']}__{topology_label}__{where}__seed{cfg.master_seed}"


def summarize(result, run_id: str | None = None) -> RunSummary:
    cfg = result.config
    exp = result.experiment
    last = result.records[-1]
    return RunSummary(
        run_id=run_id or run_id_for(cfg, exp.topology.label()),
        strategy=cfg.strategy["kind"],
        topology=exp.topology.label(),
        ood_rank=None if cfg.partition.get("ood_device") is not None else cfg.partition.get("ood_rank"),
        ood_device=exp.ood_device,
        seed=cfg.master_seed,
        auc_iid=device_aucs(result.records, "IID"),
        auc_ood=device_aucs(result.records, "OOD"),
        final_acc_iid=last.acc_iid,
        final_acc_ood=last.acc_ood,
        fingerprint=cfg.fingerprint(),
    )


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_text(header, rows: Iterable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def rounds_rows(run_id: str, records) -> list[list]:
    rows = []
    for rec in records:
        for dev, (a, b) in enumerate(zip(rec.acc_iid, rec.acc_ood)):
            rows.append([run_id, rec.round, dev, repr(float(a)), repr(float(b))])
    return rows


def write_summary(summaries: Sequence[RunSummary], path) -> None:
    _atomic_write(Path(path), _csv_text(SUMMARY_COLUMNS, [s.summary_row() for s in summaries]))


def export(result, out_dir, run_id: str | None = None) -> RunSummary:
    """Write rounds.csv, summary.csv, config.json and topology.json into ``out_dir``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        summary = summarize(result, run_id)
        _atomic_write(out / "rounds.csv", _csv_text(ROUNDS_COLUMNS, rounds_rows(summary.run_id, result.records)))
        write_summary([summary], out / "summary.csv")
        extra = {
            "ood_device": summary.ood_device,
            "auc_iid": summary.auc_iid.tolist(),
            "auc_ood": summary.auc_ood.tolist(),
            "final_acc_iid": summary.final_acc_iid.tolist(),
            "final_acc_ood": summary.final_acc_ood.tolist(),
            "initial_acc_iid": result.initial.acc_iid.tolist(),
            "initial_acc_ood": result.initial.acc_ood.tolist(),
            "modularity": result.experiment.topology.metrics.modularity,
            "planted_modularity": result.experiment.topology.metrics.planted_modularity,
        }
        _atomic_write(out / "config.json", json.dumps({**summary.fingerprint, "run": extra}, indent=2,
                                                      sort_keys=True))
        _atomic_write(out / "topology.json", result.experiment.topology.to_json())
    except OSError as exc:
        raise OSError(f"export to {out} failed: {exc}") from exc
    return summary


def read_rounds(path) -> dict[str, dict[int, dict[str, list[float]]]]:
    """Parse rounds.csv into ``{run_id: {device: {"iid": [...], "ood": [...]}}}`` ordered by round."""
    out: dict = {}
    with open(path, newline="", encoding="utf-8") as fh:
        rows = sorted(csv.DictReader(fh), key=lambda r: (r["run_id"], int(r["device"]), int(r["round"])))
    for r in rows:
        dev = out.setdefault(r["run_id"], {}).setdefault(int(r["device"]), {"iid": [], "ood": []})
        dev["iid"].append(float(r["acc_iid"]))
        dev["ood"].append(float(r["acc_ood"]))
    return out


def read_summary(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
