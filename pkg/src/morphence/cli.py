"""Command line: ``morphence <subcommand> [--config FILE] [overrides]``.

Every subcommand reads an optional JSON config file; explicit flags win over
the file, and the file wins over built-in defaults.  Reports are CSV files
written next to a JSON run manifest.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from morphence import evaluation as ev
from morphence import server as srv
from morphence.attacks import AttackSpec
from morphence.data import save_dataset
from morphence.poolgen import PoolConfig, generate_pool
from morphence.scheduler import PoolManager
from morphence.workflow import (
    BASE_DEFAULTS,
    generate_pools,
    load_setup,
    save_setup,
    train_base,
    write_manifest,
)

log = logging.getLogger("morphence")


def _load_config(path) -> dict:
    if not path:
        return {}
    return json.loads(Path(path).read_text())


def _merge(defaults: dict, file_cfg: dict, args: argparse.Namespace, keys) -> dict:
    cfg = {**defaults, **file_cfg}
    for key in keys:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


def _attacks(cfg: dict) -> list[AttackSpec]:
    out = []
    for a in cfg.get("attacks", [{"kind": "fgsm"}, {"kind": "cw"}]):
        a = {"kind": a} if isinstance(a, str) else dict(a)
        if cfg.get("epsilon") is not None:
            a.setdefault("epsilon", cfg["epsilon"])
        out.append(AttackSpec(**a))
    return out


def _pool_config(cfg: dict) -> PoolConfig:
    return PoolConfig.from_dict(cfg.get("pool", {}))


def _report(run_dir, name: str, rows, command: str, cfg: dict, extra: dict | None = None) -> Path:
    reports = Path(run_dir) / "reports"
    csv_path = ev.write_csv(rows, reports / f"{name}.csv")
    write_manifest(reports / f"{name}.manifest.json", command, cfg, [str(csv_path)], extra)
    print(csv_path)
    return csv_path


# -- subcommands --------------------------------------------------------------
def cmd_train_base(args) -> int:
    keys = ("dataset", "epochs", "lr", "batch_size", "seed", "test_fraction")
    cfg = _merge({**BASE_DEFAULTS, "run_dir": "run"}, _load_config(args.config), args, keys + ("run_dir",))
    setup = train_base(cfg)
    save_setup(setup, cfg["run_dir"])
    row = {"dataset": cfg["dataset"], "seed": cfg["seed"], "test_accuracy": setup.base_accuracy}
    _report(cfg["run_dir"], "train_base", [row], "train-base", cfg)
    return 0


def cmd_gen_pool(args) -> int:
    cfg = _merge({"run_dir": "run", "count": 1, "first_id": 1, "pool": {}}, _load_config(args.config), args,
                 ("run_dir", "count", "first_id"))
    for key in ("n", "p", "seed"):
        if getattr(args, key) is not None:
            cfg["pool"][key] = getattr(args, key)
    if args.lam is not None:
        cfg["pool"]["lam"] = args.lam
    setup = load_setup(cfg["run_dir"])
    pool_dir = Path(cfg.get("pool_dir") or Path(cfg["run_dir"]) / "pools")
    pools = generate_pools(setup, _pool_config(cfg), cfg["count"], cfg["first_id"], pool_dir)
    rows = [
        {"pool_id": p.pool_id, "n": p.n, "p": p.p, "gen_seconds": p.gen_duration,
         "min_clean_acc": min(i["clean_acc"] for i in p.info), "base_acc": setup.base_accuracy}
        for p in pools
    ]
    _report(cfg["run_dir"], "gen_pool", rows, "gen-pool", cfg)
    return 0


def cmd_serve(args) -> int:
    keys = ("listen", "admin", "pool_dir", "base_model", "fixed_qmax", "expose_confidence", "wait_timeout")
    cfg = _merge({}, _load_config(args.config), args, keys)
    srv.serve(srv.ServerConfig.from_dict(cfg))
    return 0


def _target(cfg: dict, setup):
    """The thing being attacked: the base model, a local pool deployment or a remote service."""
    kind = cfg.get("target", "morphence")
    if kind == "fixed":
        return setup.base
    if kind == "remote":
        return srv.RemoteTarget(cfg["address"], cfg.get("remote_mode", "confidence"))
    pool_dir = cfg.get("pool_dir") or Path(cfg["run_dir"]) / "pools"
    pools = srv.load_pools(pool_dir)
    manager = PoolManager(pools, q_max=cfg.get("q_max", 1000), fixed_qmax=cfg.get("fixed_qmax"))
    if cfg.get("regenerate", True):
        pool_cfg = _pool_config(cfg)
        manager.start_background(
            lambda pid: generate_pool(setup.base, pool_cfg, setup.train, setup.test, pool_id=pid),
            target_depth=cfg.get("buffer_depth", 2),
        )
    return manager


def _release(target) -> None:
    if isinstance(target, PoolManager):
        target.stop()
    elif isinstance(target, srv.RemoteTarget):
        target.close()


def cmd_attack(args) -> int:
    cfg = _merge({"run_dir": "run", "target": "fixed", "attack": {"kind": "fgsm"}, "limit": None},
                 _load_config(args.config), args, ("run_dir", "target", "address", "limit"))
    if args.kind:
        cfg["attack"] = {**cfg["attack"], "kind": args.kind}
    if args.epsilon is not None:
        cfg["attack"] = {**cfg["attack"], "epsilon": args.epsilon}
    setup = load_setup(cfg["run_dir"])
    test = setup.test if not cfg["limit"] else setup.test.subset(np.arange(cfg["limit"]))
    spec = AttackSpec(**cfg["attack"])
    target = _target(cfg, setup)
    try:
        x_adv, queries = ev.craft(spec, test, setup.base, target, probe=setup.train)
        acc = float(np.mean(ev.labeler(target)(x_adv) == test.y))
    finally:
        _release(target)
    out = Path(cfg["run_dir"]) / "adversarial" / f"{spec.kind}_eps{spec.epsilon}.npz"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(test.with_inputs(x_adv), out, {"attack": spec.to_dict(), "target": cfg["target"]})
    row = {"attack": spec.kind, "epsilon": spec.epsilon, "target": cfg["target"], "accuracy": acc,
           "queries": queries, "adversarial_set": str(out)}
    _report(cfg["run_dir"], f"attack_{spec.kind}", [row], "attack", cfg)
    return 0


def cmd_eval_robustness(args) -> int:
    cfg = _merge({"run_dir": "run", "target": "morphence", "limit": None}, _load_config(args.config), args,
                 ("run_dir", "target", "address", "fixed_qmax", "limit", "epsilon"))
    setup = load_setup(cfg["run_dir"])
    test = setup.test if not cfg["limit"] else setup.test.subset(np.arange(cfg["limit"]))
    target = _target(cfg, setup)
    try:
        rows = ev.robustness_eval(target, _attacks(cfg), test, setup.base, probe=setup.train,
                                  provenance={"target": cfg["target"]})
    except ev.PartialResults as exc:
        _report(cfg["run_dir"], "robustness_partial", exc.rows, "eval-robustness", cfg)
        log.error("%s", exc)
        return 2
    finally:
        _release(target)
    _report(cfg["run_dir"], f"robustness_{cfg['target']}", rows, "eval-robustness", cfg)
    return 0


def cmd_eval_transfer(args) -> int:
    cfg = _merge({"run_dir": "run", "attack": {"kind": "fgsm", "epsilon": 0.1}}, _load_config(args.config), args,
                 ("run_dir",))
    if args.epsilon is not None:
        cfg["attack"] = {**cfg["attack"], "epsilon": args.epsilon}
    setup = load_setup(cfg["run_dir"])
    spec = AttackSpec(**cfg["attack"])
    rows = []
    for pool in srv.load_pools(cfg.get("pool_dir") or Path(cfg["run_dir"]) / "pools"):
        matrix, avg = ev.pool_transferability(pool, setup.test, spec)
        for i in range(matrix.n):
            for j in range(matrix.n):
                if i != j:
                    rows.append({"pool_id": pool.pool_id, "source": i, "dest": j, "rate": matrix.rates[i, j],
                                 "n_adv_source": int(matrix.n_adv[i]), "average": avg,
                                 "attack_spec": json.dumps(spec.to_dict(), sort_keys=True)})
    _report(cfg["run_dir"], "transferability", rows, "eval-transfer", cfg)
    return 0


def cmd_eval_frq(args) -> int:
    cfg = _merge({"run_dir": "run", "attack": {"kind": "spsa"}, "limit": None}, _load_config(args.config), args,
                 ("run_dir", "limit"))
    setup = load_setup(cfg["run_dir"])
    test = setup.test if not cfg["limit"] else setup.test.subset(np.arange(cfg["limit"]))
    pools = srv.load_pools(cfg.get("pool_dir") or Path(cfg["run_dir"]) / "pools")
    if len(pools) < 2:
        raise SystemExit("eval-frq needs at least two pools")
    spec = AttackSpec(**cfg["attack"])
    x_adv, _ = ev.craft(spec, test, setup.base, pools[0])
    try:
        report = ev.frq(pools[0], pools[1:], x_adv, test.y)
    except ev.UndefinedMetric as exc:
        log.error("%s", exc)
        return 3
    rows = [{**r, "first_pool": pools[0].pool_id, "first_accuracy": report.first_accuracy,
             "attack_spec": json.dumps(spec.to_dict(), sort_keys=True)} for r in report.rows()]
    extra = {"frq_mean_over_pools": report.mean_over_pools, "frq_pooled": report.pooled}
    _report(cfg["run_dir"], "frq", rows, "eval-frq", cfg, extra)
    return 0


def cmd_sweep(args) -> int:
    cfg = _merge({"run_dir": "run", "dimension": "p", "grid": None, "pool": {}, "workers": 1},
                 _load_config(args.config), args, ("run_dir", "dimension", "workers"))
    if args.grid:
        cfg["grid"] = json.loads(args.grid)
    setup = load_setup(cfg["run_dir"])
    result = ev.sweep(cfg["dimension"], setup.base, setup.train, setup.test, _pool_config(cfg), _attacks(cfg),
                      cfg["grid"], AttackSpec(**cfg.get("transfer_attack", {"kind": "fgsm", "epsilon": 0.1})),
                      workers=cfg["workers"])
    _report(cfg["run_dir"], f"sweep_{cfg['dimension']}", result.rows, "sweep", cfg,
            {"lambda_max": result.lambda_max})
    return 0


# -- parser -------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="morphence", description="Moving-target defense toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--run-dir", dest="run_dir")
        p.set_defaults(func=func)
        return p

    p = add("train-base", cmd_train_base, "train the base model and store the data split")
    p.add_argument("--dataset")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--test-fraction", dest="test_fraction", type=float)
    p.add_argument("--seed", type=int)

    p = add("gen-pool", cmd_gen_pool, "generate student pools")
    p.add_argument("--count", type=int)
    p.add_argument("--first-id", dest="first_id", type=int)
    p.add_argument("-n", type=int)
    p.add_argument("-p", type=int)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--seed", type=int)

    p = add("serve", cmd_serve, "serve predictions over TCP")
    p.add_argument("--listen")
    p.add_argument("--admin")
    p.add_argument("--pool-dir", dest="pool_dir")
    p.add_argument("--base-model", dest="base_model")
    p.add_argument("--qmax", dest="fixed_qmax", type=int, help="fixed query budget per pool")
    p.add_argument("--expose-confidence", dest="expose_confidence", action="store_true", default=None)
    p.add_argument("--wait-timeout", dest="wait_timeout", type=float,
                   help="seconds a request waits for a standby pool before failing")

    p = add("attack", cmd_attack, "craft one adversarial set")
    p.add_argument("--kind")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--target", choices=["fixed", "morphence", "remote"])
    p.add_argument("--address")
    p.add_argument("--limit", type=int)

    p = add("eval-robustness", cmd_eval_robustness, "accuracy table under attack")
    p.add_argument("--target", choices=["fixed", "morphence", "remote"])
    p.add_argument("--address")
    p.add_argument("--qmax", dest="fixed_qmax", type=int)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--limit", type=int)

    p = add("eval-transfer", cmd_eval_transfer, "average transferability per pool")
    p.add_argument("--epsilon", type=float)

    p = add("eval-frq", cmd_eval_frq, "failed repeated queries across pools")
    p.add_argument("--limit", type=int)

    p = add("sweep", cmd_sweep, "hyper-parameter sweep")
    p.add_argument("--dimension", choices=["p", "lambda", "transform"])
    p.add_argument("--grid", help="JSON list of grid values")
    p.add_argument("--workers", type=int, help="processes to spread grid points over")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
