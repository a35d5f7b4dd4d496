"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 oracle failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

from .agent import co_train
from .ckg import (
    CKGBuildError,
    InteractionSet,
    ParseError,
    RelationVocab,
    density,
    load_alignment,
    load_interactions,
    load_triples,
    save_interactions,
    save_triples,
    split_interactions,
    build_ckg,
    ckg_stats,
    remap_interactions,
)
from .config import ConfigError, RunConfig, expand_grid, read_kv, GRID_SEP
from .embed import GlmParams
from .evaluation import (
    GroundTruthSet,
    depth_sweep,
    dns_ground_truth,
    evaluate_run,
    explain_interactions,
    write_reports,
    write_reward_curve,
)
from .explain import name_table, write_jsonl
from .pipeline import dataset_from_splits, prepare_dataset, preprocess, raw_pairs
from .recommender import LatentFactors
from .synth import make_planted, read_names, write_names, write_planted

logger = logging.getLogger("cerec")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_ORACLE = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def file_hash(paths) -> str:
    h = hashlib.sha256()
    for p in sorted(str(x) for x in paths):
        h.update(Path(p).name.encode())
        h.update(Path(p).read_bytes())
    return h.hexdigest()


def _meta(cfg: RunConfig | None, inputs, **extra) -> dict:
    out = {"input_sha256": file_hash(inputs)}
    if cfg is not None:
        out["config"] = cfg.to_dict()
    out.update(extra)
    return out


def _header(meta: dict) -> str:
    return "# cerec " + json.dumps(meta, sort_keys=True) + "\n"


def _data_files(d: Path) -> dict[str, Path]:
    return {k: d / f"{k}.tsv" for k in ("interactions", "triples", "alignment", "relations", "train", "valid", "test", "names")}


# ----------------------------------------------------------------- config

def _config(args, extra: dict | None = None) -> RunConfig:
    items = read_kv(args.config) if getattr(args, "config", None) else {}
    for kv in getattr(args, "set", None) or []:
        if "=" not in kv:
            raise UsageError(f"--set expects key=value, got {kv!r}")
        k, v = kv.split("=", 1)
        items[k.strip()] = v.strip()
    items.update({k: str(v) for k, v in (extra or {}).items() if v is not None})
    if any(GRID_SEP in str(v) for v in items.values()):
        raise UsageError(f"grid values ({GRID_SEP!r}) are only accepted by 'train'")
    return RunConfig().with_overrides(items).validate()


def _load_dataset(data_dir: Path, cfg: RunConfig):
    """Dataset from a preprocessed directory, or preprocess and split raw files on the fly."""
    f = _data_files(data_dir)
    for k in ("interactions", "triples", "alignment"):
        if not f[k].exists():
            raise DataError(f"missing {f[k]}")
    vocab = RelationVocab.load(f["relations"]) if f["relations"].exists() else None
    triples = load_triples(f["triples"], vocab)
    alignment = load_alignment(f["alignment"])
    if all(f[k].exists() for k in ("train", "valid", "test")):
        ds = dataset_from_splits(load_interactions(f["train"]), load_interactions(f["valid"]),
                                 load_interactions(f["test"]), triples, alignment)
        inputs = [f[k] for k in ("train", "valid", "test", "triples", "alignment")]
    else:
        ds = prepare_dataset(load_interactions(f["interactions"]), triples, alignment, cfg)
        inputs = [f[k] for k in ("interactions", "triples", "alignment")]
    names = name_table(ds.ckg, read_names(f["names"])) if f["names"].exists() else {}
    return ds, names, inputs


# ----------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    spec = {}
    if args.spec:
        for k, v in read_kv(args.spec).items():
            spec[k] = float(v) if "." in v else int(v)
    data = make_planted(spec, args.seed)
    paths = write_planted(data, args.out)
    print(json.dumps({k: str(v) for k, v in paths.items()}, indent=1))
    return EXIT_OK


def cmd_preprocess(args) -> int:
    cfg = _config(args, {"kcore": args.kcore, "entity_min": args.entity_min,
                         "relation_min": args.relation_min, "seed": args.seed})
    vocab = RelationVocab()
    inputs = [Path(args.interactions), Path(args.triples), Path(args.alignment)]
    inter = load_interactions(args.interactions)
    triples = load_triples(args.triples, vocab)
    alignment = load_alignment(args.alignment)
    inter, triples = preprocess(inter, triples, alignment, cfg)
    if len(inter) == 0:
        raise DataError("no interactions survive preprocessing")
    ckg = build_ckg(inter, triples, alignment)
    train, valid, test = split_interactions(remap_interactions(ckg, inter), tuple(cfg.split), cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    header = _header(_meta(cfg, inputs))
    save_interactions(inter, out / "interactions.tsv", header)
    save_triples(triples, out / "triples.tsv", vocab, header)
    vocab.save(out / "relations.tsv", header)
    kept = set(inter.items())
    with open(out / "alignment.tsv", "w", encoding="utf-8") as f:
        f.write(header)
        for i, e in sorted(alignment.items()):
            if i in kept:
                f.write(f"{i}\t{e}\n")
    for name, part in (("train", train), ("valid", valid), ("test", test)):
        save_interactions(raw_pairs(ckg, part), out / f"{name}.tsv", header)
    names_in = Path(args.interactions).parent / "names.tsv"
    if names_in.exists():
        write_names(read_names(names_in), out / "names.tsv", header)
    stats = ckg_stats(ckg, inter)
    stats.update(train=len(train), valid=len(valid), test=len(test))
    stats["density_percent"] = round(100 * stats["density"], 3)
    (out / "stats.json").write_text(json.dumps({"stats": stats, **_meta(cfg, inputs)}, indent=1, sort_keys=True))
    print(json.dumps(stats, indent=1, sort_keys=True))
    return EXIT_OK


def cmd_stats(args) -> int:
    """Density check for raw counts (users, items, interactions)."""
    d = density(args.interactions, args.users, args.items)
    print(json.dumps({"users": args.users, "items": args.items, "interactions": args.interactions,
                      "density": d, "density_percent": round(100 * d, 3)}, sort_keys=True))
    return EXIT_OK


def _train_one(cfg: RunConfig, data_dir: Path, out: Path, resume: bool) -> dict:
    ds, _, inputs = _load_dataset(data_dir, cfg)
    meta = json.dumps(_meta(cfg, inputs), sort_keys=True)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(json.loads(meta), indent=1, sort_keys=True))
    res = co_train(ds.ckg, ds.train, ds.valid, cfg, out_dir=out, resume=resume)
    res.factors.save_tsv(out / "model.tsv", meta)
    res.policy.glm.save(out / "policy.final.npz", meta)
    with open(out / "log.jsonl", "w", encoding="utf-8") as f:
        f.write(json.dumps({"header": json.loads(meta)}, sort_keys=True) + "\n")
        for e in res.log:
            f.write(json.dumps(e, sort_keys=True) + "\n")
    write_reward_curve(res.log, out / "reward_curve.tsv", header=_header(json.loads(meta)))
    return {"out_dir": str(out), "best_epoch": res.best_epoch, "epochs_run": len(res.log),
            "best_valid_recall": max((e["valid_recall"] for e in res.log), default=0.0)}


def cmd_train(args) -> int:
    items = read_kv(args.config) if args.config else {}
    for kv in args.set or []:
        if "=" not in kv:
            raise UsageError(f"--set expects key=value, got {kv!r}")
        k, v = kv.split("=", 1)
        items[k.strip()] = v.strip()
    if args.seed is not None:
        items["seed"] = str(args.seed)
    grid = expand_grid(items)
    out = Path(args.out_dir)
    results = []
    for n, combo in enumerate(grid):
        cfg = RunConfig().with_overrides(combo).validate()
        target = out if len(grid) == 1 else out / f"grid_{n:03d}"
        results.append(_train_one(cfg, Path(args.data), target, args.resume))
    print(json.dumps(results, indent=1))
    return EXIT_OK


def _load_model(args, ds):
    factors = LatentFactors.load_tsv(args.model)
    if factors.n_users != ds.ckg.n_users or factors.n_items != ds.ckg.n_items:
        raise DataError("model shape does not match the dataset")
    glm = GlmParams.load(args.policy) if getattr(args, "policy", None) else None
    if glm is not None and glm.base.shape[0] != ds.ckg.n_entities:
        raise DataError("policy shape does not match the dataset")
    return factors, glm


def cmd_explain(args) -> int:
    cfg = _config(args)
    ds, names, inputs = _load_dataset(Path(args.data), cfg)
    factors, glm = _load_model(args, ds)
    if glm is None:
        raise UsageError("--policy is required")
    ckg = ds.ckg
    if args.all_test:
        pairs = sorted(ds.test.pairs)
    else:
        if args.user is None or args.item is None:
            raise UsageError("give --user and --item, or --all-test")
        try:
            pairs = [(ckg.user_index(args.user), ckg.item_index(args.item))]
        except KeyError as e:
            raise DataError(f"unknown id: {e}") from None
    records = explain_interactions(pairs, ckg, glm, factors, ds.train, cfg, names)
    meta = _meta(cfg, inputs + [Path(args.model), Path(args.policy)])
    if args.out:
        write_jsonl(records, args.out, names, header=meta, ckg=ckg)
    else:
        for r in records:
            print(json.dumps(r.to_json(names, ckg), sort_keys=True))
    if not records:
        logger.warning("no explanation with a non-empty attribute difference")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    ds, _, inputs = _load_dataset(Path(args.data), cfg)
    factors, glm = _load_model(args, ds)
    try:
        Ks = tuple(int(k) for k in args.Ks.split(",") if k)
    except ValueError:
        raise UsageError(f"bad --Ks {args.Ks!r}") from None
    if not Ks or min(Ks) < 1:
        raise UsageError("--Ks needs positive integers")
    if args.split == "valid":
        target, held = ds.valid, InteractionSet()
    else:
        target, held = ds.test, ds.valid
    truth = None
    if glm is not None:
        truth = GroundTruthSet.load(args.truth) if args.truth else dns_ground_truth(ds.train, ds.ckg, cfg, seed=cfg.seed)
    report = evaluate_run(ds.ckg, ds.train, held, target, factors, glm, cfg, truth, Ks)
    report.extra.update(split=args.split, **_meta(None, inputs + [Path(args.model)]))
    write_reports([report], args.out, args.csv, meta=_meta(cfg, inputs + [Path(args.model)]))
    print(json.dumps(report.to_json()["ranking"], indent=1, sort_keys=True))
    if report.explanation:
        print(json.dumps(report.explanation, indent=1, sort_keys=True))
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _config(args)
    ds, _, inputs = _load_dataset(Path(args.data), cfg)
    Ts = tuple(int(t) for t in args.Ts.split(",") if t)
    truth = dns_ground_truth(ds.train, ds.ckg, cfg, seed=cfg.seed) if args.explain else None
    reports = depth_sweep(ds.ckg, ds.train, ds.valid, ds.test, cfg, Ts, truth, (cfg.eval_k,))
    for r in reports:
        r.extra.update(_meta(None, inputs))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_reports(reports, out / "depth_sweep.jsonl", out / "depth_sweep.csv", meta=_meta(cfg, inputs))
    with open(out / "depth_sweep.tsv", "w", encoding="utf-8") as f:
        f.write(_header(_meta(cfg, inputs)))
        f.write("T\trecall\tndcg\thr\tf1\n")
        for r in reports:
            row = r.ranking[cfg.eval_k]
            f1 = r.explanation.get("f1", float("nan"))
            f.write(f"{r.config['T']}\t{row['recall']:.6f}\t{row['ndcg']:.6f}\t{row['hr']:.6f}\t{f1:.6f}\n")
    print((out / "depth_sweep.tsv").read_text(), end="")
    return EXIT_OK


def cmd_oracle(args) -> int:
    from .oracle import FIXTURES, run_suite

    fixtures = args.fixture or list(FIXTURES)
    failed = False
    for fx in fixtures:
        for r in run_suite(fx, args.seed, args.samples):
            print(f"[{fx}] {r.line()}")
            failed |= not r.passed
    return EXIT_ORACLE if failed else EXIT_OK


# ----------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cerec", description="Counterfactual knowledge-graph recommender")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, data=True):
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        if data:
            sp.add_argument("--data", required=True, help="dataset directory")

    s = sub.add_parser("synth", help="write a planted-structure dataset")
    s.add_argument("--spec", help="key=value file of generator settings")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("preprocess", help="k-core, frequency filtering and splits")
    common(s, data=False)
    s.add_argument("--interactions", required=True)
    s.add_argument("--triples", required=True)
    s.add_argument("--alignment", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--kcore", type=int)
    s.add_argument("--entity-min", dest="entity_min", type=int)
    s.add_argument("--relation-min", dest="relation_min", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("stats", help="density of raw counts")
    s.add_argument("--users", type=int, required=True)
    s.add_argument("--items", type=int, required=True)
    s.add_argument("--interactions", type=int, required=True)
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("train", help="co-train recommender and explanation policy")
    common(s)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--resume", action="store_true")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("explain", help="counterfactual explanations with frozen parameters")
    common(s)
    s.add_argument("--model", required=True, help="factor checkpoint (TSV)")
    s.add_argument("--policy", required=True, help="policy parameters (npz)")
    s.add_argument("--user", type=int, help="raw user id")
    s.add_argument("--item", type=int, help="raw item id")
    s.add_argument("--all-test", action="store_true")
    s.add_argument("--out", help="JSONL output (default stdout)")
    s.set_defaults(func=cmd_explain)

    s = sub.add_parser("evaluate", help="ranking and explanation metrics")
    common(s)
    s.add_argument("--model", required=True)
    s.add_argument("--policy", help="also score explanations against DNS ground truth")
    s.add_argument("--truth", help="precomputed ground truth file")
    s.add_argument("--split", choices=("test", "valid"), default="test")
    s.add_argument("--Ks", default="20,40,60,80")
    s.add_argument("--out", help="JSONL report")
    s.add_argument("--csv", help="CSV report")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("sweep", help="reinforcement depth sweep")
    common(s)
    s.add_argument("--Ts", default="1,2,3,4,5")
    s.add_argument("--explain", action="store_true", help="include explanation metrics")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("oracle", help="enumeration, finite-difference and minimality audits")
    s.add_argument("--fixture", action="append", help="shipped fixture name or directory (repeatable)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--samples", type=int, default=100_000)
    s.set_defaults(func=cmd_oracle)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # usage errors and --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"cerec: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ParseError, CKGBuildError, FileNotFoundError, KeyError) as e:
        print(f"cerec: data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
