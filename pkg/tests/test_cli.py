import json

import pytest

from kmstn.cli import sae, server
from kmstn.config import load_config_dir
from kmstn.model import KeyContainer


@pytest.fixture
def mesh(mesh_factory):
    return mesh_factory(n_islands=2)


def _url(mesh, sae_id):
    return mesh.client(sae_id).profile.kmstn_url


def run(capsys, *argv):
    code = sae.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_get_key_json_round_trip(mesh, capsys):
    url = _url(mesh, "sae1")
    code, out, _ = run(capsys, "get-key", "--kmstn", url, "--sae-id", "sae1",
                       "--slave-sae", "qkdsae2", "--number", "3", "--json")
    assert code == 0
    kc = KeyContainer.from_wire(json.loads(out))
    assert len(kc.keys) == 3
    args = ["get-key-with-ids", "--kmstn", _url(mesh, "sae2"), "--sae-id", "sae2",
            "--slave-sae", "qkdsae1", "--json"]
    for kid in kc.key_ids:
        args += ["--key-id", kid]
    code, out, _ = run(capsys, *args)
    assert code == 0 and KeyContainer.from_wire(json.loads(out)) == kc


def test_plain_output_and_relay_target(mesh, capsys):
    code, out, _ = run(capsys, "get-key", "--kmstn", _url(mesh, "sae1"), "--sae-id", "sae1",
                       "--slave-sae", "qkdsae2", "--slave-sae", "sae4")
    assert code == 0
    kid, material = out.split()
    assert mesh.node("kmstn1").wait_for_ack([kid], "sae4", timeout=20).value == "relayed"


def test_status_json(mesh, capsys):
    code, out, _ = run(capsys, "status", "--kmstn", _url(mesh, "sae1"), "--sae-id", "sae1",
                       "--slave-sae", "sae4", "--json")
    assert code == 0 and json.loads(out)["route"] == ["kmstn1", "kmstn2", "kmstn3", "kmstn4"]


def test_profile_from_env(mesh, capsys, tmp_path, monkeypatch):
    prof = tmp_path / "sae1.json"
    prof.write_text(json.dumps(mesh.client("sae1").profile.to_dict()))
    monkeypatch.setenv("SAE_CONFIG", str(prof))
    code, out, _ = run(capsys, "status", "--slave-sae", "qkdsae2")
    assert code == 0 and "stored_key_count: 1000" in out


@pytest.mark.parametrize("argv,expected", [
    (["get-key", "--slave-sae", "bogus"], sae.EXIT_NOT_FOUND),
    (["get-key-with-ids", "--slave-sae", "qkdsae1"], sae.EXIT_USAGE),
    (["get-key-with-ids", "--slave-sae", "qkdsae2",
      "--key-id", "00000000-0000-4000-8000-000000000000"], sae.EXIT_NOT_FOUND),
    (["get-key", "--slave-sae", "qkdsae2", "--number", "0"], sae.EXIT_USAGE),
])
def test_error_exit_codes(mesh, capsys, argv, expected):
    code, _, err = run(capsys, *argv, "--kmstn", _url(mesh, "sae1"), "--sae-id", "sae1")
    assert code == expected and err.startswith("error: ")


def test_depleted_exit_code(mesh, capsys):
    pair = mesh.pair_of("kmstn1")
    pair.pause()
    mesh.client("sae1").get_key("qkdsae2", 1000)
    code, _, err = run(capsys, "get-key", "--kmstn", _url(mesh, "sae1"), "--sae-id", "sae1",
                       "--slave-sae", "qkdsae2")
    assert code == sae.EXIT_DEPLETED and "depleted" in err


def test_unauthorized_exit_code(mesh, capsys):
    code, _, _ = run(capsys, "get-key", "--kmstn", _url(mesh, "sae1"), "--sae-id", "sae3",
                     "--slave-sae", "qkdsae2")
    assert code == sae.EXIT_UNAUTHORIZED


def test_unreachable_exit_code(capsys):
    code, _, _ = run(capsys, "status", "--kmstn", "http://127.0.0.1:9", "--sae-id", "sae1",
                     "--slave-sae", "x", "--timeout", "2")
    assert code == sae.EXIT_UNREACHABLE


def test_missing_profile_is_usage_error(capsys, monkeypatch):
    monkeypatch.delenv("SAE_CONFIG", raising=False)
    code, _, _ = run(capsys, "status", "--slave-sae", "x")
    assert code == sae.EXIT_USAGE
    code, _, _ = run(capsys, "status", "--slave-sae", "x", "--kmstn", "http://h:1",
                     "--sae-id", "a", "--cert", "c.pem")
    assert code == sae.EXIT_USAGE


def test_init_config_writes_loadable_bundle(tmp_path, capsys):
    out = tmp_path / "cfg"
    assert server.main(["init-config", "--out", str(out), "--islands", "3",
                        "--slow-island", "1", "--time-mode", "sim"]) == 0
    bundle = load_config_dir(out)
    assert len(bundle.kmstns) == 6
    assert bundle.pair_doc("qkd34")["profile"]["mean_skr_bps"] == 500.0
    assert bundle.settings["time_mode"] == "sim"
