import json

import pytest

from cerec import cli
from cerec.oracle import CheckResult

from conftest import write

SPEC = "n_users=30\nn_items=40\nn_attributes=10\ninteractions_per_user=8\nn_groups=3\n"
SMALL = ["--set", "dims=8,8", "--set", "d=8", "--set", "K=5", "--set", "init_epochs=1"]


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = write(root / "spec.conf", SPEC)
    assert run("synth", "--spec", spec, "--seed", 1, "--out", root / "raw") == 0
    raw = root / "raw"
    assert run("preprocess", "--interactions", raw / "interactions.tsv", "--triples", raw / "triples.tsv",
               "--alignment", raw / "alignment.tsv", "--out", root / "data",
               "--kcore", 1, "--entity-min", 1, "--relation-min", 1) == 0
    assert run("train", "--data", root / "data", "--out-dir", root / "run", *SMALL,
               "--set", "epochs=2") == 0
    return root


class TestSynth:
    def test_deterministic(self, tmp_path):
        spec = write(tmp_path / "s.conf", SPEC)
        assert run("synth", "--spec", spec, "--seed", 4, "--out", tmp_path / "a") == 0
        assert run("synth", "--spec", spec, "--seed", 4, "--out", tmp_path / "b") == 0
        for name in ("interactions.tsv", "triples.tsv", "alignment.tsv", "names.tsv", "planted.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


class TestPreprocess:
    def test_outputs_and_header(self, workspace):
        d = workspace / "data"
        for name in ("interactions", "triples", "relations", "alignment", "train", "valid", "test", "names"):
            first = (d / f"{name}.tsv").read_text().splitlines()[0]
            assert first.startswith("# cerec ") and "input_sha256" in first
        stats = json.loads((d / "stats.json").read_text())
        assert stats["stats"]["train"] + stats["stats"]["valid"] + stats["stats"]["test"] == stats["stats"]["interactions"]
        assert "config" in stats

    def test_byte_identical_rerun(self, workspace, tmp_path):
        raw = workspace / "raw"
        args = ["preprocess", "--interactions", raw / "interactions.tsv", "--triples", raw / "triples.tsv",
                "--alignment", raw / "alignment.tsv", "--kcore", 1, "--entity-min", 1, "--relation-min", 1]
        assert run(*args, "--out", tmp_path / "again") == 0
        for f in (workspace / "data").iterdir():
            assert (tmp_path / "again" / f.name).read_bytes() == f.read_bytes()

    def test_empty_triples(self, workspace, tmp_path):
        raw = workspace / "raw"
        empty = write(tmp_path / "t.tsv", "")
        assert run("preprocess", "--interactions", raw / "interactions.tsv", "--triples", empty,
                   "--alignment", raw / "alignment.tsv", "--out", tmp_path / "o", "--kcore", 1) == 0
        assert json.loads((tmp_path / "o" / "stats.json").read_text())["stats"]["kg_triplets"] == 0

    def test_malformed_input(self, workspace, tmp_path):
        raw = workspace / "raw"
        bad = write(tmp_path / "i.tsv", "1\tx\n")
        assert run("preprocess", "--interactions", bad, "--triples", raw / "triples.tsv",
                   "--alignment", raw / "alignment.tsv", "--out", tmp_path / "o") == 2


def test_stats_density(capsys):
    assert run("stats", "--users", 23566, "--items", 48123, "--interactions", 3034796) == 0
    assert json.loads(capsys.readouterr().out)["density_percent"] == 0.268


class TestTrain:
    def test_outputs(self, workspace):
        d = workspace / "run"
        for name in ("config.json", "model.tsv", "policy.final.npz", "log.jsonl", "reward_curve.tsv",
                     "state.json", "factors.tsv", "policy.npz"):
            assert (d / name).exists(), name
        log = (d / "log.jsonl").read_text().splitlines()
        assert "header" in json.loads(log[0]) and len(log) == 3
        assert "input_sha256" in json.loads((d / "config.json").read_text())

    def test_zero_epochs(self, workspace, tmp_path):
        assert run("train", "--data", workspace / "data", "--out-dir", tmp_path, *SMALL, "--set", "epochs=0") == 0
        assert (tmp_path / "model.tsv").exists()
        assert len((tmp_path / "log.jsonl").read_text().splitlines()) == 1

    def test_resume(self, workspace, tmp_path):
        base = ["train", "--data", workspace / "data", *SMALL]
        assert run(*base, "--out-dir", tmp_path / "full", "--set", "epochs=3") == 0
        assert run(*base, "--out-dir", tmp_path / "part", "--set", "epochs=1") == 0
        assert run(*base, "--out-dir", tmp_path / "part", "--set", "epochs=3", "--resume") == 0
        assert (tmp_path / "full" / "factors.tsv").read_bytes() == (tmp_path / "part" / "factors.tsv").read_bytes()

    def test_grid(self, workspace, tmp_path):
        assert run("train", "--data", workspace / "data", "--out-dir", tmp_path, *SMALL,
                   "--set", "epochs=1", "--set", "T=1|2") == 0
        dirs = sorted(p.name for p in tmp_path.iterdir())
        assert dirs == ["grid_000", "grid_001"]
        assert json.loads((tmp_path / "grid_001" / "config.json").read_text())["config"]["T"] == 2

    def test_bad_config(self, workspace, tmp_path):
        assert run("train", "--data", workspace / "data", "--out-dir", tmp_path, "--set", "T=9") == 1


class TestExplain:
    def _args(self, ws):
        return ["explain", "--data", ws / "data", "--model", ws / "run" / "model.tsv",
                "--policy", ws / "run" / "policy.final.npz", *SMALL]

    def test_all_test_deterministic(self, workspace, tmp_path):
        assert run(*self._args(workspace), "--all-test", "--out", tmp_path / "a.jsonl") == 0
        assert run(*self._args(workspace), "--all-test", "--out", tmp_path / "b.jsonl") == 0
        a = (tmp_path / "a.jsonl").read_text()
        assert a == (tmp_path / "b.jsonl").read_text()
        rows = [json.loads(x) for x in a.splitlines()]
        assert "header" in rows[0]
        assert all(r["delta_size"] >= 1 and r["text"].startswith("Had a minimal set") for r in rows[1:])
        test_pairs = sum(1 for x in (workspace / "data" / "test.tsv").read_text().splitlines() if not x.startswith("#"))
        assert 0 < len(rows) - 1 <= test_pairs

    def test_single_pair(self, workspace, capsys):
        line = next(x for x in (workspace / "data" / "train.tsv").read_text().splitlines() if not x.startswith("#"))
        u, i = line.split("\t")
        assert run(*self._args(workspace), "--user", u, "--item", i) == 0
        out = capsys.readouterr().out.strip()
        if out:
            row = json.loads(out)
            assert row["user"] == int(u) and row["item"] == int(i)

    def test_unknown_user(self, workspace):
        assert run(*self._args(workspace), "--user", 99999, "--item", 0) == 2

    def test_missing_target(self, workspace):
        assert run(*self._args(workspace)) == 1


class TestEvaluate:
    def test_ks_parse(self, workspace, tmp_path):
        assert run("evaluate", "--data", workspace / "data", "--model", workspace / "run" / "model.tsv", *SMALL,
                   "--Ks", "20,40", "--out", tmp_path / "r.jsonl", "--csv", tmp_path / "r.csv") == 0
        rep = json.loads((tmp_path / "r.jsonl").read_text())
        assert sorted(rep["ranking"]) == ["20", "40"]
        assert "input_sha256" in rep["extra"]

    def test_with_policy(self, workspace, tmp_path):
        assert run("evaluate", "--data", workspace / "data", "--model", workspace / "run" / "model.tsv",
                   "--policy", workspace / "run" / "policy.final.npz", *SMALL, "--set", "dns_rounds=2",
                   "--Ks", "20", "--out", tmp_path / "r.jsonl") == 0
        rep = json.loads((tmp_path / "r.jsonl").read_text())
        assert 0.0 <= rep["explanation"]["f1"] <= 1.0

    def test_bad_ks(self, workspace):
        assert run("evaluate", "--data", workspace / "data", "--model", workspace / "run" / "model.tsv",
                   *SMALL, "--Ks", "a,b") == 1


def test_sweep(workspace, tmp_path):
    assert run("sweep", "--data", workspace / "data", "--out-dir", tmp_path, *SMALL, "--set", "epochs=1",
               "--Ts", "1,2") == 0
    rows = (tmp_path / "depth_sweep.tsv").read_text().splitlines()
    assert rows[1].startswith("T\t") and [r.split("\t")[0] for r in rows[2:]] == ["1", "2"]


class TestOracle:
    def test_shipped_fixture_passes(self):
        assert run("oracle", "--fixture", "tiny", "--samples", 20_000) == 0

    def test_failure_exit_code(self, monkeypatch):
        import cerec.oracle
        monkeypatch.setattr(cerec.oracle, "run_suite", lambda *a: [CheckResult("x", False, 1.0, 0.0)])
        assert run("oracle", "--fixture", "tiny") == 3

    def test_unknown_fixture(self):
        assert run("oracle", "--fixture", "nope") == 2


def test_usage_errors():
    assert run("train") == 1
    assert run("bogus") == 1
