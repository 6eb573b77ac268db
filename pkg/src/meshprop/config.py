"""Run configuration: one JSON document, validated field by field."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from meshprop.aggregation import STRATEGIES


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


DEFAULTS = {
    "topology": {"kind": "BA", "n": 33, "p": 2},
    "data": {"dataset": "mnist", "path": "data/mnist", "train_subset": 6600, "test_subset": None,
             "trigger_size": 3, "target": 0},
    "partition": {"alpha_l": 1000.0, "alpha_s": 1000.0, "Q": 0.1, "ood_rank": 1, "ood_device": None},
    "strategy": {"kind": "Unweighted", "tau": 0.1},
    "train": {"epochs": 5, "lr": 1e-2, "optimizer": "sgd", "batch_size": 32,
              "beta1": 0.9, "beta2": 0.999, "eps": 1e-8},
    "model": {"hidden": [128, 64]},
    "rounds": 40,
    "eval_every": 1,
    "master_seed": 0,
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass(frozen=True)
class RunConfig:
    topology: dict = field(default_factory=lambda: dict(DEFAULTS["topology"]))
    data: dict = field(default_factory=lambda: dict(DEFAULTS["data"]))
    partition: dict = field(default_factory=lambda: dict(DEFAULTS["partition"]))
    strategy: dict = field(default_factory=lambda: dict(DEFAULTS["strategy"]))
    train: dict = field(default_factory=lambda: dict(DEFAULTS["train"]))
    model: dict = field(default_factory=lambda: dict(DEFAULTS["model"]))
    rounds: int = 40
    eval_every: int = 1
    master_seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        unknown = set(d) - set(DEFAULTS)
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown field")
        merged = _merge(DEFAULTS, d)
        # partial sub-dicts inherit defaults; a topology kind switch must not keep stale keys
        if "topology" in d:
            merged["topology"] = copy.deepcopy(d["topology"])
        if "data" in d and d["data"].get("dataset", "mnist") != "mnist":
            merged["data"] = _merge({"trigger_size": 3, "target": 0, "test_subset": None}, d["data"])
        cfg = cls(**merged)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> RunConfig:
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError("<document>", f"invalid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("<document>", "top level must be an object")
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **changes) -> RunConfig:
        """Copy with sections updated key-by-key; ``topology`` is replaced whole."""
        merged = _merge(self.to_dict(), {k: v for k, v in changes.items() if k != "topology"})
        if "topology" in changes:
            merged["topology"] = copy.deepcopy(changes["topology"])
        return RunConfig.from_dict(merged)

    def fingerprint(self) -> dict:
        body = self.to_dict()
        digest = hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()
        return {**body, "content_hash": digest}

    @property
    def topology_seed(self) -> int:
        return int(self.topology.get("seed", self.master_seed))

    def validate(self) -> None:
        _validate(self)


def _num(section: dict, key: str, prefix: str, *, integer=False, lo=None, hi=None, lo_open=False):
    name = f"{prefix}.{key}" if prefix else key
    if key not in section:
        raise ConfigError(name, "missing")
    v = section[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or (integer and not float(v).is_integer()):
        raise ConfigError(name, f"expected {'an integer' if integer else 'a number'}, got {v!r}")
    if lo is not None and (v <= lo if lo_open else v < lo):
        raise ConfigError(name, f"must be {'>' if lo_open else '>='} {lo}, got {v}")
    if hi is not None and v > hi:
        raise ConfigError(name, f"must be <= {hi}, got {v}")
    return int(v) if integer else float(v)


def _validate(cfg: RunConfig) -> None:
    t = cfg.topology
    kind = t.get("kind")
    if kind == "BA":
        n = _num(t, "n", "topology", integer=True, lo=2)
        p = _num(t, "p", "topology", integer=True, lo=1)
        if p >= n:
            raise ConfigError("topology.p", f"must be < n={n}, got {p}")
    elif kind == "WS":
        n = _num(t, "n", "topology", integer=True, lo=3)
        k = _num(t, "k", "topology", integer=True, lo=1)
        if k % 2:
            raise ConfigError("topology.k", f"must be even, got {k}")
        if k >= n:
            raise ConfigError("topology.k", f"must be < n={n}, got {k}")
        _num(t, "u", "topology", lo=0, hi=1)
    elif kind == "SB":
        sizes = t.get("sizes")
        if not isinstance(sizes, list) or not sizes or not all(isinstance(s, int) and s > 0 for s in sizes):
            raise ConfigError("topology.sizes", "expected a non-empty list of positive integers")
        if "p_matrix" in t:
            pm = np.asarray(t["p_matrix"], dtype=float)
            if pm.shape != (len(sizes), len(sizes)):
                raise ConfigError("topology.p_matrix", f"expected {len(sizes)}x{len(sizes)} matrix")
            if not np.array_equal(pm, pm.T):
                raise ConfigError("topology.p_matrix", "must be symmetric")
            if np.any(pm < 0) or np.any(pm > 1):
                raise ConfigError("topology.p_matrix", "entries must lie in [0, 1]")
        else:
            _num(t, "p_in", "topology", lo=0, hi=1)
            _num(t, "p_out", "topology", lo=0, hi=1)
    elif kind == "custom":
        if "path" not in t and "edges" not in t:
            raise ConfigError("topology", "custom topology needs 'path' or 'edges'")
        if "edges" in t:
            _num(t, "n", "topology", integer=True, lo=1)
    else:
        raise ConfigError("topology.kind", f"expected BA, WS, SB or custom, got {kind!r}")
    if "seed" in t:
        _num(t, "seed", "topology", integer=True)

    d = cfg.data
    ds = d.get("dataset")
    if ds in ("mnist", "fmnist"):
        if not isinstance(d.get("path"), str):
            raise ConfigError("data.path", "expected a directory holding the IDX files")
        if d.get("train_subset") is not None:
            _num(d, "train_subset", "data", integer=True, lo=1)
    elif ds == "blobs":
        _num(d, "n_train", "data", integer=True, lo=2)
        _num(d, "n_test", "data", integer=True, lo=1)
        c = _num(d, "n_classes", "data", integer=True, lo=2)
        _num(d, "dim", "data", integer=True, lo=2)
        _num(d, "spread", "data", lo=0, lo_open=True)
        if d["n_train"] < c:
            raise ConfigError("data.n_train", f"must be >= n_classes={c}")
    else:
        raise ConfigError("data.dataset", f"expected mnist, fmnist or blobs, got {ds!r}")
    if d.get("test_subset") is not None:
        _num(d, "test_subset", "data", integer=True, lo=1)
    _num(d, "trigger_size", "data", integer=True, lo=1)
    _num(d, "target", "data", integer=True, lo=0)

    p = cfg.partition
    _num(p, "alpha_l", "partition", lo=0, lo_open=True)
    _num(p, "alpha_s", "partition", lo=0, lo_open=True)
    _num(p, "Q", "partition", lo=0, hi=1, lo_open=True)
    if p.get("ood_device") is not None:
        _num(p, "ood_device", "partition", integer=True, lo=0)
    elif p.get("ood_rank") is not None:
        _num(p, "ood_rank", "partition", integer=True, lo=1)
    else:
        raise ConfigError("partition.ood_rank", "one of ood_rank or ood_device is required")

    s = cfg.strategy
    if s.get("kind") not in STRATEGIES:
        raise ConfigError("strategy.kind", f"expected one of {', '.join(STRATEGIES)}, got {s.get('kind')!r}")
    _num(s, "tau", "strategy", lo=0, lo_open=True)

    tr = cfg.train
    _num(tr, "epochs", "train", integer=True, lo=1)
    _num(tr, "lr", "train", lo=0, lo_open=True)
    _num(tr, "batch_size", "train", integer=True, lo=1)
    if tr.get("optimizer") not in ("sgd", "adam"):
        raise ConfigError("train.optimizer", f"expected 'sgd' or 'adam', got {tr.get('optimizer')!r}")
    _num(tr, "beta1", "train", lo=0, hi=1)
    _num(tr, "beta2", "train", lo=0, hi=1)
    _num(tr, "eps", "train", lo=0, lo_open=True)

    hidden = cfg.model.get("hidden")
    if not isinstance(hidden, list) or not all(isinstance(h, int) and h >= 1 for h in hidden):
        raise ConfigError("model.hidden", "expected a list of positive integers")

    _num({"rounds": cfg.rounds}, "rounds", "", integer=True, lo=1)
    _num({"eval_every": cfg.eval_every}, "eval_every", "", integer=True, lo=1)
    _num({"master_seed": cfg.master_seed}, "master_seed", "", integer=True)
