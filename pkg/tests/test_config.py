import pytest

from cerec.config import ConfigError, RunConfig, expand_grid, load_config, read_kv

from conftest import write


class TestRunConfig:
    def test_defaults_validate(self):
        cfg = RunConfig().validate()
        assert (cfg.d, cfg.K, cfg.T, cfg.gamma, cfg.lr_policy, cfg.patience) == (64, 20, 2, 0.95, 0.005, 10)

    @pytest.mark.parametrize("kw", [dict(T=0), dict(T=6), dict(epochs=401), dict(gamma=0.0), dict(gamma=1.5),
                                    dict(dims=(8, 16), d=8), dict(leaky_slope=1.0), dict(K=0),
                                    dict(split=(0.5, 0.2, 0.2)), dict(negatives="other"), dict(patience=0)])
    def test_rejects_out_of_range(self, kw):
        with pytest.raises(ConfigError):
            RunConfig(**kw).validate()

    def test_overrides_coerce(self):
        cfg = RunConfig().with_overrides({"T": "3", "gamma": "0.9", "dims": "8,4,8", "d": "8",
                                          "baseline_on": "true", "seeds": "1,2"}).validate()
        assert cfg.T == 3 and cfg.gamma == 0.9 and cfg.dims == (8, 4, 8) and cfg.baseline_on is True
        assert cfg.seeds == (1, 2)

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            RunConfig().with_overrides({"nope": "1"})

    def test_bad_value(self):
        with pytest.raises(ConfigError):
            RunConfig().with_overrides({"T": "two"})


def test_read_kv(tmp_path):
    p = write(tmp_path / "c.conf", "# comment\nT=3\n\n gamma = 0.8 # inline\n")
    assert read_kv(p) == {"T": "3", "gamma": "0.8"}


def test_read_kv_rejects_bare_line(tmp_path):
    with pytest.raises(ConfigError):
        read_kv(write(tmp_path / "c.conf", "T\n"))


def test_load_config_overrides_file(tmp_path):
    p = write(tmp_path / "c.conf", "T=3\nK=10\n")
    cfg = load_config(p, {"T": "4"})
    assert (cfg.T, cfg.K) == (4, 10)


def test_expand_grid():
    grid = expand_grid({"T": "1|2", "lr": "0.1|0.01", "K": "20"})
    assert len(grid) == 4
    assert {(g["T"], g["lr"]) for g in grid} == {("1", "0.1"), ("1", "0.01"), ("2", "0.1"), ("2", "0.01")}
    assert all(g["K"] == "20" for g in grid)


def test_expand_grid_single():
    assert expand_grid({"T": "2"}) == [{"T": "2"}]


def test_shipped_synthetic_config():
    cfg = load_config("configs/synthetic.conf")
    assert cfg.seeds == (0, 1, 2, 3, 4) and cfg.kcore == 1
