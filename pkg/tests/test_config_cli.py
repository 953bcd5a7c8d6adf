import csv
import json
import shutil

import pytest

from invr_lab import cli
from invr_lab import config as cfgmod
from invr_lab.errors import ConfigParse, InvalidConfig, MismatchedRuns

SMALL = {
    "world": {"n_users": 300, "n_items": 120, "n_publishers": 10, "latent_dim": 8, "warmup_ticks": 4, "ticks": 5},
    "train": {"dim": 8, "epochs": 2, "batch_size": 256},
    "invr": {"users_per_item": 5, "min_exposure": 8, "overfetch_factor": 3.0},
    "sim": {
        "publisher_thresholds": {"total_revenue": 1e9, "avg_impressions_per_item": 1e9, "total_clicks": 1e9,
                                 "avg_revenue_per_item": 1e9},
        "user_thresholds": {"min_history_len": 1, "min_recent_visits": 1},
    },
    "seeds": [0],
}


@pytest.fixture
def small_cfg(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(SMALL))
    return path


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- config -----------------------------------------------------------------------------


def test_defaults_round_trip():
    cfg = cfgmod.ExperimentConfig()
    assert cfgmod.loads(cfgmod.dumps(cfg)) == cfg


def test_round_trip_with_overrides():
    data = dict(SMALL, variants=["BASELINE", {"name": "INVR_SCORE", "invr_overrides": {"users_per_item": 3}}])
    cfg = cfgmod.config_from_dict(data)
    assert cfg.variant("INVR_SCORE").invr_overrides == {"users_per_item": 3}
    assert cfgmod.loads(cfgmod.dumps(cfg)) == cfg


def test_experiment_defaults():
    cfg = cfgmod.ExperimentConfig()
    assert (cfg.world.n_users, cfg.world.n_items, cfg.world.n_publishers, cfg.world.ticks) == (10_000, 2_000, 20, 50)
    assert cfg.seeds == (0, 1, 2)
    assert [v.name for v in cfg.variants] == ["BASELINE", "RANDOM", "INVR_RANDOM", "INVR_SCORE", "INVR_USER_RANK"]


@pytest.mark.parametrize("data, key", [
    ({"world": {"n_userz": 5}}, "world.n_userz"),
    ({"world": {"n_users": "many"}}, "world.n_users"),
    ({"world": {"n_users": True}}, "world.n_users"),
    ({"invr": {"ordering_mode": "SIDEWAYS"}}, "invr.ordering_mode"),
    ({"sim": {"user_thresholds": {"min_history_len": 1.5}}}, "sim.user_thresholds.min_history_len"),
    ({"variants": ["NOPE"]}, "variants[0].name"),
    ({"variants": [{"name": "INVR_SCORE", "invr_overrides": {"ordering_mode": "INVR_RANDOM"}}]},
     "variants[0].invr_overrides.ordering_mode"),
    ({"seeds": [1, "2"]}, "seeds"),
    ({"bogus": 1}, "bogus"),
])
def test_parse_errors_name_the_key(data, key):
    with pytest.raises(ConfigParse) as exc:
        cfgmod.config_from_dict(data)
    assert exc.value.key == key


def test_invalid_json_and_missing_file(tmp_path):
    with pytest.raises(ConfigParse):
        cfgmod.loads("{not json")
    with pytest.raises(ConfigParse):
        cfgmod.load(tmp_path / "absent.json")


def test_validate_rejects_semantics():
    with pytest.raises(InvalidConfig):
        cfgmod.config_from_dict({"seeds": []}).validate()
    with pytest.raises(InvalidConfig):
        cfgmod.config_from_dict({"variants": ["RANDOM", "RANDOM"]}).validate()
    with pytest.raises(InvalidConfig):
        cfgmod.config_from_dict({"invr": {"users_per_item": 0}}).validate()


def test_with_seed():
    assert cfgmod.ExperimentConfig().with_seed(7).seeds == (7,)


# -- CLI -------------------------------------------------------------------------------------


def test_usage_errors_exit_one(capsys):
    assert cli.main([]) == 1
    assert cli.main(["frobnicate"]) == 1
    assert cli.main(["run", "--seed", "x"]) == 1
    assert cli.main(["report"]) == 1


def test_config_errors_exit_one(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"world": {"n_userz": 1}}))
    assert cli.main(["print-config", "--config", str(bad)]) == 1
    assert "world.n_userz" in capsys.readouterr().err
    assert cli.main(["print-config", "--config", str(tmp_path / "absent.json")]) == 1


def test_unknown_variant_exits_one(small_cfg, tmp_path):
    assert cli.main(["run", "--config", str(small_cfg), "--variant", "NOPE", "--out", str(tmp_path / "o")]) == 1


def test_print_config_round_trips(small_cfg, capsys):
    assert cli.main(["print-config", "--config", str(small_cfg), "--seed", "4"]) == 0
    cfg = cfgmod.loads(capsys.readouterr().out)
    assert cfg.seeds == (4,) and cfg.world.n_users == 300


def test_generate_writes_world(small_cfg, tmp_path):
    out = tmp_path / "g"
    assert cli.main(["generate", "--config", str(small_cfg), "--seed", "5", "--out", str(out)]) == 0
    assert len(rows(out / "world" / "users.csv")) == 300
    assert len(rows(out / "world" / "items.csv")) == 120
    assert len(rows(out / "world" / "publishers.csv")) == 10


def test_train_writes_embeddings(small_cfg, tmp_path):
    out = tmp_path / "t"
    assert cli.main(["train", "--config", str(small_cfg), "--out", str(out)]) == 0
    text = (out / "seed_0" / "item_embeddings.txt").read_text().splitlines()
    assert text[0] == "dim=8" and len(text) == 121
    assert rows(out / "seed_0" / "cohort.csv")


@pytest.fixture(scope="module")
def sweep(tmp_path_factory):
    d = tmp_path_factory.mktemp("sweep")
    cfg = d / "small.json"
    cfg.write_text(json.dumps(dict(SMALL, seeds=[0, 1])))
    assert cli.main(["run", "--config", str(cfg), "--out", str(d / "runs")]) == 0
    return d


def test_run_layout(sweep):
    run = sweep / "runs" / "INVR_USER_RANK" / "seed_1"
    for name in ("run_info.csv", "report.csv", "ticks.csv", "logs.csv", "ledger.csv", "assignments.csv"):
        assert (run / name).is_file()
    ticks = rows(run / "ticks.csv")
    assert len(ticks) == 5 and list(ticks[0]) == list(cli.TICK_COLUMNS)
    assert rows(run / "assignments.csv")[0]["mode"] == "INVR_USER_RANK"
    info = {r["key"]: r["value"] for r in rows(run / "run_info.csv")}
    assert info["variant"] == "INVR_USER_RANK" and info["sim_seed"] == "1"


def test_baseline_has_no_invr_rows(sweep):
    logs = rows(sweep / "runs" / "BASELINE" / "seed_0" / "logs.csv")
    assert logs and all(r["source"] != "INVR" for r in logs)
    assert rows(sweep / "runs" / "BASELINE" / "seed_0" / "assignments.csv") == []


def test_rerun_is_byte_identical(sweep):
    cfg = sweep / "small.json"
    again = sweep / "again"
    assert cli.main(["run", "--config", str(cfg), "--variant", "INVR_SCORE", "--out", str(again)]) == 0
    for seed in (0, 1):
        for name in ("logs.csv", "report.csv", "ticks.csv", "ledger.csv", "assignments.csv"):
            a = (sweep / "runs" / "INVR_SCORE" / f"seed_{seed}" / name).read_bytes()
            b = (again / "INVR_SCORE" / f"seed_{seed}" / name).read_bytes()
            assert a == b, name


def test_report_over_sweep(sweep):
    out = sweep / "rep"
    assert cli.main(["report", str(sweep / "runs"), "--out", str(out)]) == 0
    rep = rows(out / "report.csv")
    assert [r["variant"] for r in rep] == ["BASELINE", "RANDOM", "INVR_RANDOM", "INVR_SCORE", "INVR_USER_RANK"] * 2
    assert [r["seed"] for r in rep] == ["0"] * 5 + ["1"] * 5
    for r in rep:
        if r["variant"] == "BASELINE":
            assert all(r[c] == "0.0" for c in r if c.startswith("rel_"))
    series = rows(out / "psei_series.csv")
    assert len(series) == 10 * 5


def test_aa_report_is_zero(sweep, tmp_path):
    a = tmp_path / "a" / "BASELINE" / "seed_0"
    shutil.copytree(sweep / "runs" / "BASELINE" / "seed_0", a)
    assert cli.main(["report", str(sweep / "runs" / "BASELINE" / "seed_0"), str(a), "--out", str(tmp_path / "r")]) == 0
    for r in rows(tmp_path / "r" / "report.csv"):
        assert all(r[c] == "0.0" for c in r if c.startswith("rel_"))


def test_report_missing_baseline_exits_two(sweep, tmp_path, capsys):
    code = cli.main(["report", str(sweep / "runs" / "RANDOM"), "--out", str(tmp_path / "r")])
    assert code == 2
    assert "MismatchedRuns" in capsys.readouterr().err


def test_report_mismatched_runs(sweep, tmp_path):
    other = tmp_path / "other" / "RANDOM" / "seed_0"
    shutil.copytree(sweep / "runs" / "RANDOM" / "seed_0", other)
    info = other / "run_info.csv"
    info.write_text(info.read_text().replace("ticks,5", "ticks,6"))
    with pytest.raises(MismatchedRuns):
        cli.collect_runs([sweep / "runs" / "BASELINE", other])
    assert cli.main(["report", str(sweep / "runs" / "BASELINE"), str(other), "--out", str(tmp_path / "r")]) == 2


def test_report_missing_path_exits_two(tmp_path):
    assert cli.main(["report", str(tmp_path / "nothing"), "--out", str(tmp_path / "r")]) == 2
