"""Run configuration: defaults, validation, key=value files and grid expansion."""

from __future__ import annotations

import dataclasses
import itertools
from dataclasses import dataclass, field, fields


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # data
    interactions: str = ""
    triples: str = ""
    alignment: str = ""
    data_dir: str = ""
    kcore: int = 10
    entity_min: int = 10
    relation_min: int = 50
    split: tuple = (0.6, 0.2, 0.2)

    # graph learning module
    dims: tuple = (64, 32, 64)
    leaky_slope: float = 0.01
    init_scale: float = 0.01
    pretrain_glm: bool = False

    # recommender
    d: int = 64
    K: int = 20
    lr: float = 0.01
    reg: float = 1e-4
    factor_init_scale: float = 0.1
    init_epochs: int = 5

    # policy
    lr_policy: float = 0.005
    policy_optimizer: str = "adam"
    policy_batch: int = 32
    gamma: float = 0.95
    T: int = 2
    baseline_on: bool = False
    baseline_decay: float = 0.9
    mask_observed: bool = True

    # schedule
    epochs: int = 400
    patience: int = 10
    eval_k: int = 20
    exclude_train_at_eval: bool = True
    seed: int = 0
    seeds: tuple = (0,)
    negatives: str = "policy"

    # dns ground truth
    dns_rounds: int = 20
    dns_pool: int = 10
    dns_dim: int = 16
    dns_negatives: int = 2
    dns_epochs: int = 30
    dns_lr: float = 0.05

    def validate(self) -> "RunConfig":
        checks = [
            (len(self.dims) >= 2 and all(x > 0 for x in self.dims), "dims needs >= 2 positive entries"),
            (self.dims[-1] == self.d, "final GLM dim must equal d"),
            (0 <= self.leaky_slope < 1, "leaky_slope in [0, 1)"),
            (self.init_scale > 0, "init_scale > 0"),
            (self.d > 0, "d > 0"),
            (self.K >= 1, "K >= 1"),
            (self.lr >= 0 and self.lr_policy >= 0, "learning rates >= 0"),
            (self.reg >= 0, "reg >= 0"),
            (0 < self.gamma <= 1, "gamma in (0, 1]"),
            (1 <= self.T <= 5, "T in 1..5"),
            (0 <= self.epochs <= 400, "epochs in 0..400"),
            (self.patience >= 1, "patience >= 1"),
            (self.policy_batch >= 1, "policy_batch >= 1"),
            (self.policy_optimizer in ("sgd", "adam"), "policy_optimizer is sgd or adam"),
            (self.negatives in ("policy", "uniform"), "negatives is policy or uniform"),
            (0 < self.baseline_decay < 1, "baseline_decay in (0, 1)"),
            (self.kcore >= 1 and self.entity_min >= 1 and self.relation_min >= 1, "thresholds >= 1"),
            (len(self.split) == 3 and abs(sum(self.split) - 1) <= 1e-9, "split ratios sum to 1"),
            (self.init_epochs >= 0, "init_epochs >= 0"),
            (self.dns_rounds >= 0 and self.dns_pool >= 1 and self.dns_dim >= 1, "dns settings"),
            (self.eval_k >= 1, "eval_k >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    def with_overrides(self, items: dict) -> "RunConfig":
        """Apply string values, coercing by field type; comma lists stay raw strings."""
        kw = {}
        types = {f.name: f for f in fields(self)}
        for k, v in items.items():
            if k not in types:
                raise ConfigError(f"unknown config key {k!r}")
            kw[k] = _coerce(getattr(self, k), v, k)
        return self.replace(**kw)


def _coerce(default, value, key):
    if not isinstance(value, str):
        return tuple(value) if isinstance(value, list) else value
    try:
        if isinstance(default, bool):
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            elem = type(default[0]) if default else float
            return tuple(elem(x) for x in value.replace(" ", "").split(",") if x)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {value!r}") from None
    return value


def read_kv(path) -> dict[str, str]:
    """Flat ``key=value`` file; ``#`` starts a comment."""
    out = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    items = read_kv(path) if path else {}
    items.update(overrides or {})
    return RunConfig().with_overrides(items).validate()


GRID_SEP = "|"


def expand_grid(items: dict[str, str]) -> list[dict[str, str]]:
    """Cartesian product over values written as ``a|b|c``."""
    keys = sorted(items)
    choices = [items[k].split(GRID_SEP) if isinstance(items[k], str) else [items[k]] for k in keys]
    return [dict(zip(keys, combo)) for combo in itertools.product(*choices)]
