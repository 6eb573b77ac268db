"""Round-synchronous decentralized training.

Each round every device trains locally from its current parameters, all
post-training parameters are frozen into one snapshot, and every device then
mixes its neighborhood out of that snapshot. Evaluation follows aggregation.
"""

from __future__ import annotations

import functools
import hashlib
import json
import logging
import os
import shutil
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from meshprop import aggregation, data as data_mod, model as model_mod, topology as topo_mod
from meshprop.aggregation import CoefficientRow, StrategySpec
from meshprop.config import RunConfig
from meshprop.data import Dataset, DeviceShard, PartitionSpec
from meshprop.model import AdamState, ParamVector, TrainConfig
from meshprop.rng import derive_rng
from meshprop.topology import Topology

log = logging.getLogger(__name__)


class RunError(RuntimeError):
    def __init__(self, device: int, round_: int, cause: BaseException):
        super().__init__(f"device {device}, round {round_}: {type(cause).__name__}: {cause}")
        self.device = device
        self.round = round_


@dataclass(frozen=True, eq=False)
class RoundRecord:
    round: int
    acc_iid: np.ndarray
    acc_ood: np.ndarray

    def to_dict(self) -> dict:
        return {"round": self.round, "acc_iid": self.acc_iid.tolist(), "acc_ood": self.acc_ood.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> RoundRecord:
        return cls(int(d["round"]), np.asarray(d["acc_iid"], float), np.asarray(d["acc_ood"], float))


@dataclass
class Experiment:
    """Everything a run needs that is fixed before round 1."""
    config: RunConfig
    topology: Topology
    train: Dataset
    shards: list[DeviceShard]
    test_iid: Dataset
    test_ood: Dataset
    ood_device: int
    layer_dims: list[int]

    @property
    def shard_sizes(self) -> list[int]:
        return [len(s) for s in self.shards]


@dataclass
class RunState:
    round: int
    params: list[ParamVector]
    opt_states: list[AdamState | None]


@dataclass
class RunResult:
    experiment: Experiment
    records: list[RoundRecord]
    initial: RoundRecord
    final_params: list[ParamVector] = field(repr=False, default_factory=list)

    @property
    def config(self) -> RunConfig:
        return self.experiment.config


@functools.lru_cache(maxsize=4)
def _load_idx_split(path: str, split: str, name: str) -> Dataset:
    return data_mod.load_mnist_dir(path, split, name=name)


def load_datasets(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    d = cfg.data
    seed = cfg.master_seed
    if d["dataset"] == "blobs":
        full = data_mod.synth_blobs(d["n_train"] + d["n_test"], d["n_classes"], d["dim"], d["spread"], seed)
        train, test = full.subset(np.arange(d["n_train"])), full.subset(np.arange(d["n_train"], len(full)))
    else:
        path = str(Path(d["path"]).resolve())
        train = _load_idx_split(path, "train", d["dataset"])
        test = _load_idx_split(path, "test", d["dataset"])
        if d.get("train_subset") is not None and d["train_subset"] < len(train):
            pick = derive_rng(seed, -1, -1, "data:train_subset").choice(len(train), d["train_subset"], replace=False)
            train = train.subset(np.sort(pick))
    if d.get("test_subset") is not None and d["test_subset"] < len(test):
        pick = derive_rng(seed, -1, -1, "data:test_subset").choice(len(test), d["test_subset"], replace=False)
        test = test.subset(np.sort(pick))
    return train, test


def build_topology(cfg: RunConfig) -> Topology:
    return topo_mod.generate(cfg.topology, cfg.topology_seed)


def prepare(cfg: RunConfig) -> Experiment:
    """Generate the topology, partition and backdoor the data, build both test sets."""
    topo = build_topology(cfg)
    train, test = load_datasets(cfg)
    p = cfg.partition
    if p.get("ood_device") is not None:
        ood = int(p["ood_device"])
        if ood >= topo.n:
            raise topo_mod.TopologyError(f"ood_device {ood} outside topology of {topo.n} nodes")
    else:
        ood = topo_mod.rank_by_degree(topo, int(p["ood_rank"]))
    spec = PartitionSpec(alpha_l=p["alpha_l"], alpha_s=p["alpha_s"], n_devices=topo.n, ood_device=ood,
                         Q=p["Q"], seed=cfg.master_seed)
    shards = data_mod.partition(train, spec)
    d = cfg.data
    shards[ood], train = data_mod.backdoor_images(shards[ood], train, p["Q"], d["trigger_size"],
                                                  d["target"], cfg.master_seed)
    test_iid, test_ood = data_mod.build_test_sets(test, p["Q"], d["trigger_size"], d["target"], cfg.master_seed)
    dims = [train.dim, *cfg.model["hidden"], train.n_classes]
    return Experiment(cfg, topo, train, shards, test_iid, test_ood, ood, dims)


def _train_config(cfg: RunConfig) -> TrainConfig:
    t = cfg.train
    return TrainConfig(epochs=t["epochs"], lr=t["lr"], optimizer=t["optimizer"], batch_size=t["batch_size"],
                       beta1=t["beta1"], beta2=t["beta2"], eps=t["eps"])


def _fingerprint(p: ParamVector) -> bytes:
    return hashlib.blake2b(p.values.tobytes(), digest_size=16).digest()


class _Evaluator:
    """Accuracy on both test sets, memoized on parameter bytes (FL makes all devices equal)."""

    def __init__(self, exp: Experiment):
        self.exp = exp
        self.cache: dict[bytes, tuple[float, float]] = {}

    def __call__(self, params: ParamVector) -> tuple[float, float]:
        key = _fingerprint(params)
        if key not in self.cache:
            target = self.exp.config.data["target"]
            self.cache[key] = (model_mod.evaluate(params, self.exp.test_iid),
                               model_mod.evaluate(params, self.exp.test_ood, backdoor_target=target))
        return self.cache[key]

    def record(self, t: int, params: list[ParamVector], pool) -> RoundRecord:
        self.cache.clear()
        # fill the cache for unique parameter vectors only, then read back per device
        unique = {}
        for p in params:
            unique.setdefault(_fingerprint(p), p)
        list(pool(self, unique.values()))
        accs = [self(p) for p in params]
        return RoundRecord(t, np.array([a for a, _ in accs]), np.array([b for _, b in accs]))


def _save_checkpoint(root: Path, state: RunState, records: list[RoundRecord], initial: RoundRecord,
                     config_hash: str) -> None:
    final = root / f"round_{state.round:04d}"
    tmp = root / f".round_{state.round:04d}.tmp"
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    for i, p in enumerate(state.params):
        p.save(tmp / f"device_{i:04d}.params")
        st = state.opt_states[i]
        if st is not None:
            np.save(tmp / f"device_{i:04d}.adam_m.npy", st.m)
            np.save(tmp / f"device_{i:04d}.adam_v.npy", st.v)
    meta = {
        "round": state.round,
        "n_devices": len(state.params),
        "config_hash": config_hash,
        "adam_steps": [None if s is None else s.t for s in state.opt_states],
        "initial": initial.to_dict(),
        "records": [r.to_dict() for r in records],
    }
    (tmp / "state.json").write_text(json.dumps(meta))
    if final.exists():
        shutil.rmtree(final)
    os.replace(tmp, final)


def _load_checkpoint(root: Path, config_hash: str):
    rounds = sorted(p for p in root.glob("round_*") if (p / "state.json").exists())
    if not rounds:
        return None
    last = rounds[-1]
    meta = json.loads((last / "state.json").read_text())
    if meta["config_hash"] != config_hash:
        raise ValueError(f"checkpoint {last} was written for a different config")
    params, opts = [], []
    for i in range(meta["n_devices"]):
        params.append(ParamVector.load(last / f"device_{i:04d}.params"))
        steps = meta["adam_steps"][i]
        if steps is None:
            opts.append(None)
        else:
            opts.append(AdamState(np.load(last / f"device_{i:04d}.adam_m.npy"),
                                  np.load(last / f"device_{i:04d}.adam_v.npy"), steps))
    state = RunState(meta["round"], params, opts)
    return state, [RoundRecord.from_dict(r) for r in meta["records"]], RoundRecord.from_dict(meta["initial"])


def run(config: RunConfig, threads: int = 1, reverse_order: bool = False,
        checkpoint_dir=None, experiment: Experiment | None = None) -> RunResult:
    """Execute all rounds and return per-round, per-device accuracies.

    ``threads`` and ``reverse_order`` change scheduling only; results are
    bitwise identical for any value. With ``checkpoint_dir`` set, every round
    is checkpointed there and an interrupted run resumes from the last one.
    """
    exp = experiment if experiment is not None else prepare(config)
    cfg = exp.config
    topo = exp.topology
    n = topo.n
    metrics = topo.metrics
    tcfg = _train_config(cfg)
    strategy = StrategySpec(cfg.strategy["kind"], float(cfg.strategy["tau"]), cfg.master_seed)
    seed = cfg.master_seed
    order = list(range(n))[::-1] if reverse_order else list(range(n))
    config_hash = cfg.fingerprint()["content_hash"]

    executor = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None

    def pmap(fn, items):
        items = list(items)
        if executor is None:
            return [fn(x) for x in items]
        return list(executor.map(fn, items))

    evaluator = _Evaluator(exp)
    ckpt = Path(checkpoint_dir) if checkpoint_dir is not None else None
    resumed = _load_checkpoint(ckpt, config_hash) if ckpt is not None and ckpt.exists() else None

    try:
        if resumed is not None:
            state, records, initial = resumed
            log.info("resuming from round %d", state.round)
        else:
            init = model_mod.init_model(exp.layer_dims, seed)
            opt = [AdamState.zeros(len(init)) if tcfg.optimizer == "adam" else None for _ in range(n)]
            state = RunState(0, [init] * n, opt)
            records = []
            initial = evaluator.record(0, state.params, pmap)

        for t in range(state.round + 1, cfg.rounds + 1):
            started = time.perf_counter()

            def train_one(i, t=t):
                try:
                    rng = derive_rng(seed, i, t, "shuffle")
                    return i, model_mod.local_train(state.params[i], exp.shards[i], exp.train, tcfg, rng,
                                                    state.opt_states[i])
                except Exception as exc:
                    raise RunError(i, t, exc) from exc

            half = dict(pmap(train_one, order))
            # barrier: every aggregation below reads only this frozen snapshot
            snapshot = {i: half[i] for i in range(n)}

            def mix_one(i, t=t):
                try:
                    rng = derive_rng(seed, i, t, "aggregation:random")
                    row = aggregation.coefficients(strategy, topo, metrics, exp.shard_sizes, i, rng)
                    return i, aggregation.aggregate(row, snapshot)
                except Exception as exc:
                    raise RunError(i, t, exc) from exc

            mixed = dict(pmap(mix_one, order))
            state = RunState(t, [mixed[i] for i in range(n)], state.opt_states)

            if t % cfg.eval_every == 0 or t == cfg.rounds:
                rec = evaluator.record(t, state.params, pmap)
                records.append(rec)
                log.info("round %d/%d  %.2fs  mean_acc_iid=%.4f  mean_acc_ood=%.4f", t, cfg.rounds,
                         time.perf_counter() - started, rec.acc_iid.mean(), rec.acc_ood.mean())
            else:
                log.info("round %d/%d  %.2fs", t, cfg.rounds, time.perf_counter() - started)
            if ckpt is not None:
                _save_checkpoint(ckpt, state, records, initial, config_hash)
    finally:
        if executor is not None:
            executor.shutdown()

    return RunResult(exp, records, initial, state.params)


def coefficient_rows(exp: Experiment, round_: int) -> list[CoefficientRow]:
    """All devices' rows for one round, as the engine would compute them."""
    cfg = exp.config
    strategy = StrategySpec(cfg.strategy["kind"], float(cfg.strategy["tau"]), cfg.master_seed)
    return [aggregation.coefficients(strategy, exp.topology, exp.topology.metrics, exp.shard_sizes, i,
                                     derive_rng(cfg.master_seed, i, round_, "aggregation:random"))
            for i in range(exp.topology.n)]
