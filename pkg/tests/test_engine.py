import json
from pathlib import Path

import numpy as np
import pytest

from meshprop import engine, model as M
from meshprop.config import RunConfig
from meshprop.rng import derive_rng, stream_key

GOLDEN = Path(__file__).parent / "golden"


def blobs_cfg(topology=None, **over):
    d = {
        "topology": topology or {"kind": "BA", "n": 8, "p": 2},
        "data": {"dataset": "blobs", "n_train": 400, "n_test": 100, "n_classes": 4, "dim": 9, "spread": 0.5},
        "train": {"epochs": 1, "lr": 0.1},
        "model": {"hidden": [8]},
        "rounds": 2,
    }
    d.update(over)
    return RunConfig.from_dict(d)


def param_bytes(result):
    return [p.values.tobytes() for p in result.final_params]


# -- derive_rng ---------------------------------------------------------------

def test_derive_rng_golden():
    doc = json.loads((GOLDEN / "derive_rng.json").read_text())
    got = derive_rng(*doc["tuple"]).random(4)
    assert [repr(float(x)) for x in got] == doc["random4"]


def test_derive_rng_same_tuple_same_stream():
    a = derive_rng(3, 2, 1, "shuffle").random(16)
    b = derive_rng(3, 2, 1, "shuffle").random(16)
    np.testing.assert_array_equal(a, b)


def test_derive_rng_no_collisions():
    firsts = set()
    keys = set()
    purposes = ["shuffle", "aggregation:random", "data:backdoor", "model:init"]
    count = 0
    for seed in range(5):
        for dev in range(50):
            for rnd in range(100):
                for purpose in purposes[: 1 + (rnd % 4)]:
                    keys.add(stream_key(seed, dev, rnd, purpose))
                    count += 1
    assert len(keys) == count
    for k in range(100_000):
        firsts.add(derive_rng(0, k % 100, k // 100, "shuffle" if k % 2 else "aggregation:random").integers(2**63))
    assert len(firsts) == 100_000


# -- run examples -------------------------------------------------------------

def test_isolated_nodes_equal_solo_training():
    cfg = blobs_cfg({"kind": "custom", "n": 2, "edges": []}, rounds=1)
    exp = engine.prepare(cfg)
    res = engine.run(cfg, experiment=exp)
    init = M.init_model(exp.layer_dims, cfg.master_seed)
    tcfg = engine._train_config(cfg)
    for i in range(2):
        solo = M.local_train(init, exp.shards[i], exp.train, tcfg, derive_rng(cfg.master_seed, i, 1, "shuffle"))
        assert res.final_params[i].values.tobytes() == solo.values.tobytes()


@pytest.mark.parametrize("kind", ["Unweighted", "Weighted", "Random", "FL", "Degree", "Betweenness"])
def test_zero_step_keeps_initial_params(kind):
    # smallest positive step: every update underflows to exactly zero
    cfg = blobs_cfg(rounds=1, train={"epochs": 2, "lr": 5e-324}, strategy={"kind": kind})
    exp = engine.prepare(cfg)
    res = engine.run(cfg, experiment=exp)
    init = M.init_model(exp.layer_dims, cfg.master_seed)
    # sum_j c_j * x equals x up to rounding in the mixing sum
    for p in res.final_params:
        np.testing.assert_allclose(p.values, init.values, rtol=1e-14, atol=0)


def test_path_degree_saturation_endpoints_copy_center():
    cfg = blobs_cfg({"kind": "custom", "n": 3, "edges": [[0, 1], [1, 2]]}, rounds=1,
                    strategy={"kind": "Degree", "tau": 1e-3})
    exp = engine.prepare(cfg)
    res = engine.run(cfg, experiment=exp)
    init = M.init_model(exp.layer_dims, cfg.master_seed)
    tcfg = engine._train_config(cfg)
    center = M.local_train(init, exp.shards[1], exp.train, tcfg, derive_rng(cfg.master_seed, 1, 1, "shuffle"))
    for i in range(3):
        assert res.final_params[i].values.tobytes() == center.values.tobytes()


# -- determinism and snapshot semantics --------------------------------------

@pytest.mark.parametrize("kind", ["Unweighted", "Random", "Betweenness"])
def test_reverse_order_bitwise_identical(kind):
    cfg = blobs_cfg(strategy={"kind": kind})
    a = engine.run(cfg)
    b = engine.run(cfg, reverse_order=True)
    assert param_bytes(a) == param_bytes(b)
    for ra, rb in zip(a.records, b.records):
        assert ra.acc_iid.tobytes() == rb.acc_iid.tobytes() and ra.acc_ood.tobytes() == rb.acc_ood.tobytes()


def test_threads_bitwise_identical():
    cfg = blobs_cfg(strategy={"kind": "Random"}, train={"epochs": 1, "lr": 0.1, "optimizer": "adam"})
    a = engine.run(cfg, threads=1)
    b = engine.run(cfg, threads=8)
    assert param_bytes(a) == param_bytes(b)
    assert [r.to_dict() for r in a.records] == [r.to_dict() for r in b.records]


def test_fl_keeps_devices_identical():
    res = engine.run(blobs_cfg(strategy={"kind": "FL"}, rounds=3))
    first = res.final_params[0].values.tobytes()
    assert all(p.values.tobytes() == first for p in res.final_params)
    for rec in res.records:
        assert np.all(rec.acc_iid == rec.acc_iid[0])


def test_records_shape_and_finite():
    cfg = blobs_cfg(rounds=3)
    res = engine.run(cfg)
    assert [r.round for r in res.records] == [1, 2, 3]
    assert res.initial.round == 0
    for r in res.records:
        assert r.acc_iid.shape == (8,) and np.all((0 <= r.acc_iid) & (r.acc_iid <= 1))
    assert all(np.all(np.isfinite(p.values)) for p in res.final_params)


def test_eval_every_stride():
    res = engine.run(blobs_cfg(rounds=5, eval_every=2))
    assert [r.round for r in res.records] == [2, 4, 5]


def test_ood_device_is_rank_and_backdoored():
    exp = engine.prepare(blobs_cfg())
    deg = exp.topology.metrics.degree
    assert deg[exp.ood_device] == deg.max()
    for i, s in enumerate(exp.shards):
        assert s.backdoored.any() == (i == exp.ood_device)
    assert len(exp.test_ood) == 10 and np.all(exp.test_ood.labels == 0)


def test_checkpoint_resume(tmp_path):
    cfg = blobs_cfg(rounds=3, train={"epochs": 1, "lr": 0.05, "optimizer": "adam"})
    full = engine.run(cfg)
    engine.run(cfg.replace(rounds=2), checkpoint_dir=tmp_path / "ck")
    # the 2-round checkpoint was written under a different config; rewrite as if interrupted
    meta_path = tmp_path / "ck" / "round_0002" / "state.json"
    meta = json.loads(meta_path.read_text())
    meta["config_hash"] = cfg.fingerprint()["content_hash"]
    meta_path.write_text(json.dumps(meta))
    resumed = engine.run(cfg, checkpoint_dir=tmp_path / "ck")
    assert param_bytes(resumed) == param_bytes(full)
    assert [r.to_dict() for r in resumed.records] == [r.to_dict() for r in full.records]
    assert (tmp_path / "ck" / "round_0003" / "device_0000.params").exists()


def test_checkpoint_rejects_other_config(tmp_path):
    engine.run(blobs_cfg(rounds=1), checkpoint_dir=tmp_path)
    with pytest.raises(ValueError):
        engine.run(blobs_cfg(rounds=1, master_seed=5), checkpoint_dir=tmp_path)


def test_device_failure_reports_context():
    cfg = blobs_cfg(rounds=1)
    exp = engine.prepare(cfg)
    exp.shards[3] = type(exp.shards[3])(3, np.array([10**9]))
    with pytest.raises(engine.RunError) as info:
        engine.run(cfg, experiment=exp)
    assert info.value.device == 3 and info.value.round == 1


def test_coefficient_rows_match_strategy():
    exp = engine.prepare(blobs_cfg(strategy={"kind": "Unweighted"}))
    rows = engine.coefficient_rows(exp, 1)
    assert len(rows) == 8
    for r in rows:
        assert r.neighborhood == exp.topology.neighborhood(r.device)
