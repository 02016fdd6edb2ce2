import json

import pytest

from fedmarket.cli import (
    EXIT_CAPACITY,
    EXIT_CONFIG,
    ExperimentConfig,
    compare_methods,
    gas_report,
    load_config,
    main,
    run_experiment,
    shipped_configs,
)
from fedmarket.federation import RoundLog, reconstruct_subset_model
from fedmarket.learner import Dataset, utility
from fedmarket.ledger import BlobStore, Chain, TxKind


def small_config(**market):
    return {
        "name": "small",
        "seed": 0,
        "scenario": {"scenario": "S1", "num_clients": 3, "test_fraction": 0.3,
                     "synthetic": {"n_samples": 300, "n_features": 5, "n_classes": 3, "cluster_std": 0.5}},
        "federation": {"rounds": 3, "learning_rate": 0.05, "batch_size": 16},
        "valuation": {"methods": ["sfsv", "single-cal", "multi-cal", "afs"]},
        "market": {"deposit": 900, "buyer_balance": 1000, "difficulty": 4, **market},
    }


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(small_config()))
    return path


def test_all_methods_produce_normalised_vectors(config_file):
    report = run_experiment(config_file)
    assert set(report.methods) == {"sfsv", "single-cal", "multi-cal", "afs"}
    for m in report.methods.values():
        assert sum(m["phi_normalized"]) == pytest.approx(1.0)
    assert report.methods["sfsv"]["d_max"] == 0.0
    assert all(t >= 0 for t in report.timings.values())
    assert sum(p for _, p in report.payouts) + report.refund == 900


def test_outputs_are_written_and_consistent(config_file, tmp_path):
    out = tmp_path / "out"
    report = run_experiment(config_file, out_dir=out)
    for name in ("report.jsonl", "summary.json", "timings.json", "chain.jsonl", "roundlog.jsonl", "settlement.json"):
        assert (out / name).exists()
    log = RoundLog.load(out / "roundlog.jsonl")
    blobs = BlobStore.load(out / "blobs")
    chain = Chain.from_jsonl((out / "chain.jsonl").read_text(), blobs)
    publish = next(tx for tx in chain.included_txs() if tx.kind == TxKind.PUBLISH)
    test_digest = bytes.fromhex(json.loads(blobs.fetch(publish.payload_hash))["test"])
    test = Dataset.from_bytes(blobs.fetch(test_digest))
    curve = [utility(m, test) for m in log.global_models()]
    assert curve == report.utility_curve
    assert reconstruct_subset_model(log, range(3)).equals(log.final)
    settlement = json.loads((out / "settlement.json").read_text())
    assert sum(p for _, p in settlement["payouts"]) + settlement["refund"] == 900


def test_reruns_are_byte_identical(config_file, tmp_path):
    run_experiment(config_file, out_dir=tmp_path / "a")
    run_experiment(config_file, out_dir=tmp_path / "b")
    for name in ("report.jsonl", "summary.json", "chain.jsonl", "roundlog.jsonl", "settlement.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_seed_override_changes_the_run(config_file):
    a = run_experiment(config_file, methods=["afs"], seed=1)
    b = run_experiment(config_file, methods=["afs"], seed=2)
    assert a.seed == 1 and b.seed == 2
    assert a.utility_curve != b.utility_curve


def test_afs_runs_beyond_exact_capacity(tmp_path):
    cfg = small_config()
    cfg["scenario"]["num_clients"] = 12
    cfg["scenario"]["synthetic"]["n_samples"] = 600
    cfg["federation"]["rounds"] = 1
    cfg["market"]["fork_round"] = 0
    cfg["valuation"] = {"methods": ["afs"], "tmc": {"max_permutations": 24}}
    path = tmp_path / "big.json"
    path.write_text(json.dumps(cfg))
    report = run_experiment(path)
    assert len(report.methods["afs"]["phi_normalized"]) == 12
    assert main(["run", str(path), "--methods", "sfsv", "--out-dir", str(tmp_path / "o")]) == EXIT_CAPACITY


def test_config_errors_exit_with_two(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["run", str(bad)]) == EXIT_CONFIG
    assert main(["run", str(tmp_path / "missing.json")]) == EXIT_CONFIG
    bad.write_text(json.dumps(small_config()))
    assert main(["run", str(bad), "--methods", "magic"]) == EXIT_CONFIG


def test_environment_overrides(config_file, tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("FEDMARKET_METHODS", "afs,single-cal")
    monkeypatch.setenv("FEDMARKET_OUT_DIR", str(tmp_path / "env"))
    assert main(["run", str(config_file)]) == 0
    summary = json.loads((tmp_path / "env" / "summary.json").read_text())
    assert set(summary["methods"]) == {"afs", "single-cal"}
    assert main(["run", str(config_file), "--out-dir", str(tmp_path / "flag"), "--methods", "afs"]) == 0
    assert set(json.loads((tmp_path / "flag" / "summary.json").read_text())["methods"]) == {"afs"}


def test_exact_alias_maps_to_sfsv():
    cfg = ExperimentConfig.from_dict(small_config(), methods=["exact", "afs"])
    assert cfg.methods == ("sfsv", "afs")


def test_compare_methods_ordering():
    report = {
        "methods": {
            "sfsv": {"phi_normalized": [0.5, 0.5]},
            "a": {"phi_normalized": [0.6, 0.4]},
            "b": {"phi_normalized": [0.6, 0.4]},
        },
        "timings": {"sfsv": 100.0, "a": 9.0, "b": 3.0},
    }
    rows = compare_methods(report)
    assert [r["method"] for r in rows] == ["sfsv", "b", "a"]
    assert rows[0]["d_max"] == 0.0
    del report["methods"]["sfsv"]
    with pytest.raises(ValueError):
        compare_methods(report)


def test_gas_report_basics():
    chain = Chain(difficulty=2)
    assert gas_report(chain)["total_gas"] == 0
    chain.register_account("a")
    chain.submit(TxKind.CONTRACT_REGISTRY, "a", b"x")
    chain.mine_block("m")
    report = gas_report(chain)
    assert report["total_gas"] == 1_459_430
    assert report["total_usd"] == pytest.approx(0.0723)


def test_shipped_configs_parse():
    names = [p.stem for p in shipped_configs()]
    assert names == ["s1", "s2", "s3", "s4"]
    for p in shipped_configs():
        assert load_config(p).scenario.num_clients == 5
