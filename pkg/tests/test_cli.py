import json

import pytest

from chipwm import cli
from chipwm.model import ArchConfig, ChipModel
from pipelines import pipeline, run, tree_bytes


@pytest.fixture(scope="module")
def epoch_env():
    mp = pytest.MonkeyPatch()
    mp.setenv("SOURCE_DATE_EPOCH", "1700000000")
    yield
    mp.undo()


@pytest.fixture(scope="module")
def ws_results(tmp_path_factory, epoch_env):
    ws = tmp_path_factory.mktemp("ws")
    return ws, pipeline(ws)


def test_pipeline_exit_codes(ws_results):
    _, res = ws_results
    assert {k: v[0] for k, v in res.items()} == {"keygen": 0, "watermark": 0, "forge": 0, "verify": 0,
                                                  "verify_user": 2, "trace": 0}


def test_pipeline_outputs(ws_results):
    ws, res = ws_results
    assert res["watermark"][1]["sda"] == 1.0 and res["watermark"][1]["C"] == 24
    assert [u["user_id"] for u in res["forge"][1]["users"]] == ["user0", "user1"]
    assert res["verify"][1]["ownership"] is True and res["verify"][1]["licensor_text"] == "Owner"
    user = res["verify_user"][1]
    assert user["verdicts"]["V_L"] is False and user["verdicts"]["V_D"] and user["verdicts"]["V_H"]
    assert res["trace"][1]["user_id"] == "user1"
    for name in ("model.chpm", "arch.json", "passport.bin", "certificate.json", "signature.json", "metrics.json"):
        assert (ws / "master" / name).exists()
    assert (ws / "keys" / "owner.pub.json").exists()
    assert json.loads((ws / "reports" / "verify-master.json").read_text())["ownership"] is True
    lines = (ws / "users" / "registry.jsonl").read_text().splitlines()
    assert [json.loads(line)["user_id"] for line in lines] == ["user0", "user1"]


def test_seeded_rerun_is_byte_identical(ws_results, tmp_path, epoch_env):
    ws, _ = ws_results
    other = tmp_path / "again"
    pipeline(other)
    a, b = tree_bytes(ws), tree_bytes(other)
    assert sorted(a) == sorted(b)
    differing = [k for k in a if a[k] != b[k]]
    assert differing == []


def test_human_output(ws_results):
    ws, _ = ws_results
    code, out = run(ws, "verify", "--suspect", "master", as_json=False)
    assert code == 0 and "CONFIRMED" in out


def test_incompatible_suspect_exit(ws_results, tmp_path):
    ws, _ = ws_results
    other = ChipModel(ArchConfig(widths=(4, 16)))
    (tmp_path / "odd").mkdir()
    other.save(tmp_path / "odd" / "model.chpm")
    (tmp_path / "odd" / "arch.json").write_text(json.dumps(other.arch.to_dict()))
    code, out = run(ws, "verify", "--suspect", str(tmp_path / "odd"))
    assert code == 3 and out["reason"].startswith("incompatible")


def test_usage_errors(ws_results, tmp_path, capsys):
    ws, _ = ws_results
    with pytest.raises(SystemExit) as exc:
        cli.main(["verify", "--workspace", str(ws)])
    assert exc.value.code == 4
    with pytest.raises(SystemExit) as exc:
        cli.main(["nonsense"])
    assert exc.value.code == 4
    assert run(tmp_path, "watermark")[0] == 4  # no key file
    assert run(ws, "forge")[0] == 4  # neither --users nor --user-id
    assert run(ws, "forge", "--user-id", "user0")[0] == 4
    assert run(ws, "verify", "--suspect", "missing")[0] == 4
    assert run(ws, "attack", "--name", "nope")[0] == 4
    bad = tmp_path / "bad.toml"
    bad.write_text("[table]\nx = 1\n")
    assert run(ws, "keygen", "--config", str(bad))[0] == 4
    capsys.readouterr()


def test_attack_command(ws_results):
    ws, _ = ws_results
    code, out = run(ws, "attack", "--name", "random", "--params", "trials=3")
    assert code == 0 and out["name"] == "random" and out["outcomes"][0]["params"]["trials"] == 3
    assert (ws / "attacks" / "random.jsonl").exists() and (ws / "attacks" / "random_hist.txt").exists()
    code, out = run(ws, "attack", "--name", "prune", "--params", "rates=[0.0,0.5]")
    assert code == 0 and [o["params"]["prune_rate"] for o in out["outcomes"]] == [0.0, 0.5]
    assert run(ws, "attack", "--name", "prune", "--params", "rates=half")[0] == 4
    assert (ws / "attacks" / "prune.csv").read_text().splitlines()[0] == "param,acc,sda,pha"


def test_settings_precedence(tmp_path):
    st = cli.Settings({"epochs": 5, "decay_epochs": [3, 4]}, env={"CHIP_EPOCHS": "7", "CHIP_DECAY_EPOCHS": "1,2"})
    assert st.get("epochs") == 7
    assert st.get("epochs", 9) == 9
    assert st.get("decay_epochs") == [1, 2]
    assert cli.Settings({"epochs": 5}, env={}).get("epochs") == 5
    assert cli.Settings({}, env={}).get("epochs", None, 30) == 30
    with pytest.raises(cli.UsageError):
        cli.Settings({"epochs": 5}, env={"CHIP_EPOCHS": "many"}).get("epochs")
    assert cli.read_config(tmp_path / "absent.toml") == {}


def test_keygen_toy_and_public(tmp_path):
    code, out = run(tmp_path, "keygen", "--profile", "toy")
    assert code == 0
    doc = json.loads((tmp_path / "keys" / "owner.json").read_text())
    assert (doc["p"], doc["q"], doc["g"]) == ("17", "b", "2")
    pub = json.loads((tmp_path / "keys" / "owner.pub.json").read_text())
    assert "x" not in pub


def test_param_parsing():
    assert cli._parse_params(["a=1,b=[0,0.5]", "c=x"]) == {"a": 1, "b": [0, 0.5], "c": "x"}
    with pytest.raises(cli.UsageError):
        cli._parse_params(["novalue"])
