"""Experiment driver: scenario -> deal on the simulated ledger -> valuation -> settlement -> reports.

Usage::

    fedmarket run CONFIG [--methods afs,sfsv] [--seed 3] [--out-dir out] [--difficulty 8]

Each flag can also come from an environment variable ``FEDMARKET_<FLAG>``
(``FEDMARKET_METHODS``, ``FEDMARKET_SEED``, ...); explicit flags win.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import CapacityError, ConfigError, InvariantViolation
from .federation import FederationConfig, RoundLog, run_training
from .learner import Hyperparams, init_params
from .ledger import DEFAULT_SCHEDULE, BlobStore, Chain, collect_acks, validate_chain
from .market import DealState, Market, receipt_bytes, settlement_report
from .scenarios import ScenarioSpec, build
from .shapley import (
    MAX_EXACT_PLAYERS,
    MAX_SFSV_PLAYERS,
    TmcConfig,
    afs,
    d_max,
    multi_cal,
    normalize,
    sfsv,
    single_cal,
    timed,
)

ENV_PREFIX = "FEDMARKET_"
REFERENCE = "sfsv"
ALL_METHODS = ("sfsv", "single-cal", "multi-cal", "afs")
_ALIASES = {"exact": "sfsv"}

EXIT_OK, EXIT_CONFIG, EXIT_CAPACITY, EXIT_INVARIANT = 0, 2, 3, 4


def config_dir() -> Path:
    return Path(str(resources.files("fedmarket") / "configs"))


def shipped_configs() -> list[Path]:
    return sorted(config_dir().glob("*.json"))


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    seed: int
    scenario: ScenarioSpec
    rounds: int
    clients_per_round: int
    hyper: Hyperparams
    arch: str = "linear"
    hidden: int = 16
    methods: tuple[str, ...] = ALL_METHODS
    settlement_method: str = "afs"
    tmc: TmcConfig = field(default_factory=TmcConfig)
    deposit: int = 1_000_000
    buyer_balance: int = 2_000_000
    accuracy_target: float = 0.0
    difficulty: int = 8
    miners: int = 3
    fork_round: int | None = 1

    @classmethod
    def from_dict(cls, raw: dict, seed: int | None = None, methods: Sequence[str] | None = None,
                  difficulty: int | None = None) -> "ExperimentConfig":
        """Parse a config document.

        ``seed`` overrides the master seed, which drives partitioning,
        initialisation, SGD shuffling, client selection and permutation
        sampling. The synthetic dataset itself is fixed by its own
        ``scenario.synthetic.seed`` so that different master seeds resample
        splits of the same data.
        """
        try:
            master = int(raw.get("seed", 0) if seed is None else seed)
            sc = dict(raw.get("scenario", {}))
            sc["seed"] = master
            scenario = ScenarioSpec.from_dict(sc)
            fed = dict(raw.get("federation", {}))
            hyper = Hyperparams(
                learning_rate=float(fed.get("learning_rate", 0.1)),
                batch_size=int(fed.get("batch_size", 16)),
                local_epochs=int(fed.get("local_epochs", 1)),
                seed=master,
            )
            val = dict(raw.get("valuation", {}))
            tmc = TmcConfig(**{**val.get("tmc", {}), "seed": master})
            chosen = methods if methods is not None else val.get("methods", ALL_METHODS)
            chosen = tuple(dict.fromkeys(_ALIASES.get(m, m) for m in chosen))
            unknown = [m for m in chosen if m not in ALL_METHODS]
            if unknown or not chosen:
                raise ConfigError(f"unknown methods {unknown}; choose from {list(ALL_METHODS)}")
            settle_with = _ALIASES.get(val.get("settlement_method", "afs"), val.get("settlement_method", "afs"))
            if settle_with not in chosen:
                settle_with = chosen[-1]
            mk = dict(raw.get("market", {}))
            cfg = cls(
                name=str(raw.get("name", "experiment")),
                seed=master,
                scenario=scenario,
                rounds=int(fed.get("rounds", 5)),
                clients_per_round=int(fed.get("clients_per_round", scenario.num_clients)),
                hyper=hyper,
                arch=str(fed.get("arch", "linear")),
                hidden=int(fed.get("hidden", 16)),
                methods=chosen,
                settlement_method=settle_with,
                tmc=tmc,
                deposit=int(mk.get("deposit", 1_000_000)),
                buyer_balance=int(mk.get("buyer_balance", 2_000_000)),
                accuracy_target=float(mk.get("accuracy_target", 0.0)),
                difficulty=int(mk.get("difficulty", 8) if difficulty is None else difficulty),
                miners=int(mk.get("miners", 3)),
                fork_round=mk.get("fork_round", 1),
            )
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError, AttributeError) as exc:
            raise ConfigError(f"bad config: {exc}") from None
        cfg.check()
        return cfg

    def check(self) -> None:
        n = self.scenario.num_clients
        if not 1 <= self.clients_per_round <= n:
            raise ConfigError("clients_per_round must lie in [1, num_clients]")
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.arch not in ("linear", "mlp"):
            raise ConfigError(f"unknown architecture {self.arch!r}")
        if self.deposit < 1 or self.buyer_balance < self.deposit:
            raise ConfigError("deposit must be positive and covered by buyer_balance")
        if not 0.0 <= self.accuracy_target <= 1.0:
            raise ConfigError("accuracy_target must lie in [0, 1]")
        if not 0 <= self.difficulty <= 20:
            raise ConfigError("difficulty must lie in [0, 20]")
        if self.miners < 2:
            raise ConfigError("need at least two miners")
        if self.fork_round is not None and not 0 <= int(self.fork_round) < self.rounds:
            raise ConfigError("fork_round must name a training round")
        if "sfsv" in self.methods and n > MAX_SFSV_PLAYERS:
            raise CapacityError(f"sfsv supports at most {MAX_SFSV_PLAYERS} clients, config has {n}")
        for m in ("single-cal", "multi-cal"):
            if m in self.methods and n > MAX_EXACT_PLAYERS:
                raise CapacityError(f"{m} supports at most {MAX_EXACT_PLAYERS} clients, config has {n}")

    def federation(self) -> FederationConfig:
        return FederationConfig(
            num_clients=self.scenario.num_clients,
            clients_per_round=self.clients_per_round,
            rounds=self.rounds,
            hyper=self.hyper,
            client_selection_seed=self.seed,
        )


def load_config(path: str | Path, **overrides) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    return ExperimentConfig.from_dict(raw, **overrides)


def account_id(label: str) -> str:
    return "0x" + hashlib.sha256(label.encode()).hexdigest()[:8].upper()


@dataclass
class ExperimentReport:
    name: str
    scenario: str
    seed: int
    methods: dict[str, dict]
    settlement_method: str
    deal_state: str
    payouts: list[list]
    refund: int
    deposit: int
    gas: dict
    utility_curve: list[float]
    receipt_counts: dict[str, int]
    timings: dict[str, float] = field(default_factory=dict)
    # live objects for callers that want to inspect the run; never serialised
    chain: Chain | None = field(default=None, repr=False)
    market: Market | None = field(default=None, repr=False)
    deal_id: str | None = None
    token_totals: list[int] = field(default_factory=list, repr=False)

    def summary(self) -> dict:
        """Everything except wall-clock times, so reruns compare byte for byte."""
        return {
            "name": self.name,
            "scenario": self.scenario,
            "seed": self.seed,
            "methods": self.methods,
            "settlement_method": self.settlement_method,
            "deal_state": self.deal_state,
            "payouts": self.payouts,
            "refund": self.refund,
            "deposit": self.deposit,
            "gas": self.gas,
            "utility_curve": self.utility_curve,
            "receipt_counts": self.receipt_counts,
        }

    def records(self) -> list[dict]:
        rows = [{"type": "run", "name": self.name, "scenario": self.scenario, "seed": self.seed}]
        for t, u in enumerate(self.utility_curve):
            rows.append({"type": "utility", "round": t, "accuracy": u})
        for name, m in self.methods.items():
            rows.append({"type": "valuation", "method": name, **m})
        for seller, amount in self.payouts:
            rows.append({"type": "payout", "seller": seller, "amount": amount})
        rows.append({"type": "refund", "amount": self.refund, "deposit": self.deposit})
        for kind, row in self.gas["by_kind"].items():
            rows.append({"type": "gas", "kind": kind, **row})
        return rows


def gas_report(chain: Chain) -> dict:
    """Per-kind transaction counts and costs over the main chain.

    Ether and USD use the per-row values of the cost table; gas is summed
    from what each transaction was charged at submission.
    """
    by_kind: dict[str, dict] = {}
    for tx in chain.included_txs():
        row = chain.schedule.row(tx.kind, tx.slot)
        entry = by_kind.setdefault(tx.kind.value, {"count": 0, "gas": 0, "ether": 0.0, "usd": 0.0})
        entry["count"] += 1
        entry["gas"] += tx.gas_used
        entry["ether"] += row.ether
        entry["usd"] += row.usd
    for entry in by_kind.values():
        entry["ether"] = round(entry["ether"], 12)
        entry["usd"] = round(entry["usd"], 10)
    return {
        "by_kind": dict(sorted(by_kind.items())),
        "total_gas": sum(e["gas"] for e in by_kind.values()),
        "total_ether": round(sum(e["ether"] for e in by_kind.values()), 12),
        "total_usd": round(sum(e["usd"] for e in by_kind.values()), 10),
    }


def compare_methods(report: ExperimentReport | dict) -> list[dict]:
    """Rows of (method, wall_time_ms, d_max) sorted by d_max, then time."""
    methods = report.methods if isinstance(report, ExperimentReport) else report["methods"]
    timings = report.timings if isinstance(report, ExperimentReport) else report.get("timings", {})
    if REFERENCE not in methods:
        raise ValueError(f"comparison needs the exact reference method {REFERENCE!r}")
    ref = np.asarray(methods[REFERENCE]["phi_normalized"])
    rows = []
    for name, m in methods.items():
        gap = float(np.max(np.abs(np.asarray(m["phi_normalized"]) - ref)))
        rows.append({"method": name, "wall_time_ms": float(timings.get(name, 0.0)), "d_max": gap})
    return sorted(rows, key=lambda r: (r["d_max"], r["wall_time_ms"]))


def _mine_with_fork(chain: Chain, miners: Sequence[str], seed: int) -> None:
    """Two miners race for the next block; the ACK majority decides.

    The second candidate carries only half of the pending transactions, so
    whichever loses, the pool keeps what was not included.
    """
    half = chain.pending[: max(1, len(chain.pending) // 2)]
    candidates = [chain.build_candidate(miners[0]), chain.build_candidate(miners[1], half)]
    chain.resolve_fork(candidates, collect_acks(candidates, miners, seed))
    while chain.pending:
        chain.mine_block(miners[2 % len(miners)])


def run_experiment(
    config_path: str | Path | None = None,
    *,
    config: ExperimentConfig | None = None,
    methods: Sequence[str] | None = None,
    seed: int | None = None,
    out_dir: str | Path | None = None,
    difficulty: int | None = None,
    workers: int = 1,
) -> ExperimentReport:
    """Run one full deal and every requested valuation; write report files if ``out_dir`` is set."""
    if config is None:
        if config_path is None:
            raise ConfigError("need a config path or a config")
        config = load_config(config_path, seed=seed, methods=methods, difficulty=difficulty)
    cfg = config
    n = cfg.scenario.num_clients

    clients, test, _ = build(cfg.scenario)
    initial = init_params(clients[0].num_features, clients[0].num_classes, cfg.arch, cfg.hidden, seed=cfg.seed)

    blobs = BlobStore()
    chain = Chain(difficulty=cfg.difficulty, blobs=blobs, schedule=DEFAULT_SCHEDULE)
    market = Market(chain, operator=account_id("market"))
    miners = [f"miner-{k}" for k in range(cfg.miners)]
    buyer = account_id(f"buyer-{cfg.seed}")
    sellers = [account_id(f"seller-{cfg.seed}-{k}") for k in range(n)]
    market.register_account(buyer, cfg.buyer_balance)
    for s in sellers:
        market.register_account(s)
    minted = market.tokens.total()
    token_totals = [minted]

    def mine():
        k = 0
        while chain.pending:
            chain.mine_block(miners[k % len(miners)])
            k += 1
        token_totals.append(market.tokens.total())
        if token_totals[-1] != minted:
            raise InvariantViolation("token conservation violated")

    market.deploy()
    mine()
    deal = market.publish_model(
        buyer, blobs.store(initial.to_bytes()), blobs.store(test.to_bytes()), cfg.accuracy_target, cfg.deposit
    )
    mine()
    for s in sellers:
        market.register_seller(deal, s)
    mine()

    fed = cfg.federation()
    final, log = run_training(fed, clients, test, initial=initial, workers=workers)
    models = log.global_models()
    for rec in log.records:
        updates = {}
        for d in rec.deltas:
            payload = json.dumps(
                {"client": d.client_id, "round": d.round, "size": d.dataset_size,
                 "delta": d.delta.astype("<f8").tobytes().hex()},
                sort_keys=True,
            ).encode()
            updates[sellers[d.client_id]] = blobs.store(payload)
        market.record_round(deal, rec.round, updates, blobs.store(models[rec.round + 1].to_bytes()))
        if cfg.fork_round is not None and rec.round == int(cfg.fork_round):
            _mine_with_fork(chain, miners, cfg.seed)
            token_totals.append(market.tokens.total())
        else:
            mine()

    state = market.verify_and_close(deal, final)
    mine()

    methods_out: dict[str, dict] = {}
    timings: dict[str, float] = {}
    vectors = {}
    runners = {
        "sfsv": lambda: sfsv(fed, clients, test, initial=initial),
        "single-cal": lambda: single_cal(log, test),
        "multi-cal": lambda: multi_cal(log, test),
        "afs": lambda: afs(log, test, cfg.tmc),
    }
    for name in cfg.methods:
        sv, ms = timed(runners[name])
        vectors[name] = normalize(sv)
        timings[name] = ms
        methods_out[name] = {
            "phi": sv.values.tolist(),
            "phi_normalized": vectors[name].values.tolist(),
            "utility_evaluations": sv.utility_evaluations,
            "permutations_used": sv.permutations_used,
        }
    if REFERENCE in vectors:
        for name, v in vectors.items():
            methods_out[name]["d_max"] = d_max(v, vectors[REFERENCE])

    if state == DealState.VERIFIED:
        payout = market.settle(deal, vectors[cfg.settlement_method], method=cfg.settlement_method)
        payouts, refund = [list(p) for p in payout.payments], payout.refund
    else:
        market.abort(deal)
        payouts, refund = [], cfg.deposit
    mine()

    receipt = market.receipt(deal)
    problems = validate_chain(chain)
    if problems:
        raise InvariantViolation(f"chain validation failed: {problems[:3]}")
    if market.tokens.total() != minted or market.tokens.escrow.get(deal, 0) != 0:
        raise InvariantViolation("token conservation violated")
    if sum(p for _, p in payouts) + refund != cfg.deposit:
        raise InvariantViolation("payouts do not add up to the deposit")

    report = ExperimentReport(
        name=cfg.name,
        scenario=cfg.scenario.scenario,
        seed=cfg.seed,
        methods=methods_out,
        settlement_method=cfg.settlement_method,
        deal_state=market.deals[deal].state.value,
        payouts=payouts,
        refund=refund,
        deposit=cfg.deposit,
        gas=gas_report(chain),
        utility_curve=list(log.utilities),
        receipt_counts=receipt["counts"],
        timings=timings,
        chain=chain,
        market=market,
        deal_id=deal,
        token_totals=token_totals,
    )
    if out_dir is not None:
        write_outputs(Path(out_dir), report, chain, log, receipt)
    return report


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def write_outputs(out: Path, report: ExperimentReport, chain: Chain, log: RoundLog, receipt: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in report.records()))
    (out / "summary.json").write_text(_dump(report.summary()))
    (out / "timings.json").write_text(_dump(report.timings))
    (out / "chain.jsonl").write_text(chain.to_jsonl())
    (out / "roundlog.jsonl").write_text(log.to_jsonl())
    (out / "settlement.json").write_text(_dump(settlement_report(receipt)))
    (out / "receipt.json").write_bytes(receipt_bytes(receipt) + b"\n")
    chain.blobs.save(out / "blobs")


def _env(name: str):
    return os.environ.get(ENV_PREFIX + name.upper().replace("-", "_"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedmarket", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run one experiment config")
    run.add_argument("config", help="path to a JSON config, or the name of a shipped one (s1..s4)")
    run.add_argument("--methods", help="comma-separated: sfsv (alias exact), single-cal, multi-cal, afs")
    run.add_argument("--seed", type=int)
    run.add_argument("--out-dir")
    run.add_argument("--difficulty", type=int)
    sub.add_parser("configs", help="list shipped configs")
    return parser


def _resolve_config(name: str) -> Path:
    p = Path(name)
    if p.exists():
        return p
    shipped = config_dir() / f"{name}.json"
    if shipped.exists():
        return shipped
    raise ConfigError(f"no such config: {name}")


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "configs":
        for p in shipped_configs():
            print(p.stem, p)
        return EXIT_OK
    try:
        methods = args.methods or _env("methods")
        seed = args.seed if args.seed is not None else _env("seed")
        difficulty = args.difficulty if args.difficulty is not None else _env("difficulty")
        out_dir = args.out_dir or _env("out_dir") or "out"
        cfg = load_config(
            _resolve_config(args.config),
            seed=None if seed is None else int(seed),
            methods=None if methods is None else [m.strip() for m in methods.split(",") if m.strip()],
            difficulty=None if difficulty is None else int(difficulty),
        )
        report = run_experiment(config=cfg, out_dir=out_dir)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CapacityError as exc:
        print(f"capacity error: {exc}", file=sys.stderr)
        return EXIT_CAPACITY
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT

    print(f"{report.name}: deal {report.deal_state}, final accuracy {report.utility_curve[-1]:.4f}")
    width = max(len(m) for m in report.methods)
    for name, m in report.methods.items():
        phi = " ".join(f"{v:.4f}" for v in m["phi_normalized"])
        print(f"  {name:<{width}}  {report.timings[name]:10.1f} ms  phi = {phi}")
    if REFERENCE in report.methods:
        for row in compare_methods(report):
            print(f"  d_max[{row['method']}] = {row['d_max']:.4f}")
    print(f"  payouts: {[p for _, p in report.payouts]} refund {report.refund}")
    print(f"  gas: {report.gas['total_gas']} ({report.gas['total_usd']:.4f} USD)")
    print(f"  written to {out_dir}")
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(main())
