"""FedAvg orchestration, the per-round delta log, and subset-model replay."""

from __future__ import annotations

import base64
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyInputError, RoundLogError
from .learner import Dataset, Hyperparams, ModelParams, init_params, local_train, utility


@dataclass(frozen=True)
class FederationConfig:
    num_clients: int
    clients_per_round: int
    rounds: int
    hyper: Hyperparams = field(default_factory=Hyperparams)
    client_selection_seed: int = 0

    def __post_init__(self):
        if self.num_clients < 1:
            raise ValueError("num_clients must be >= 1")
        if not 1 <= self.clients_per_round <= self.num_clients:
            raise ValueError("clients_per_round must lie in [1, num_clients]")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")


@dataclass(frozen=True, eq=False)
class RoundDelta:
    client_id: int
    round: int
    delta: np.ndarray
    dataset_size: int

    def __post_init__(self):
        d = np.array(self.delta, dtype=np.float64, copy=True).ravel()
        d.setflags(write=False)
        object.__setattr__(self, "delta", d)
        if self.dataset_size < 1:
            raise ValueError("dataset_size must be >= 1")


@dataclass(frozen=True, eq=False)
class RoundRecord:
    round: int
    global_hash: str
    deltas: tuple[RoundDelta, ...]

    @property
    def participants(self) -> tuple[int, ...]:
        return tuple(d.client_id for d in self.deltas)


@dataclass(eq=False)
class RoundLog:
    """Everything needed to replay a federation: ``M^0``, per-round deltas, ``M^T``.

    ``utilities`` is the per-round global test accuracy, ``utilities[t]``
    being the accuracy of the global model entering round ``t`` (so it has
    ``rounds + 1`` entries, the last one for the final model).
    """

    initial: ModelParams
    num_clients: int
    records: list[RoundRecord] = field(default_factory=list)
    final: ModelParams | None = None
    utilities: list[float] = field(default_factory=list)

    @property
    def rounds(self) -> int:
        return len(self.records)

    def validate(self) -> None:
        if self.final is None:
            raise RoundLogError("log has no final model; training did not complete")
        if not self.records:
            raise RoundLogError("log has no rounds")
        for t, rec in enumerate(self.records):
            if rec.round != t:
                raise RoundLogError(f"rounds not contiguous: expected {t}, found {rec.round}")
            if not rec.deltas:
                raise RoundLogError(f"round {t} has no deltas")
            ids = rec.participants
            if len(set(ids)) != len(ids):
                raise RoundLogError(f"round {t} has duplicate client deltas")
            for d in rec.deltas:
                if not 0 <= d.client_id < self.num_clients:
                    raise RoundLogError(f"round {t}: unknown client {d.client_id}")
                if d.round != t:
                    raise RoundLogError(f"delta for client {d.client_id} filed under wrong round")
                if d.delta.shape[0] != len(self.initial):
                    raise RoundLogError("delta length does not match the model")

    def global_models(self) -> list[ModelParams]:
        """Replay ``M^0 .. M^T`` from the logged deltas."""
        models = [self.initial]
        for rec in self.records:
            models.append(aggregate(models[-1], rec.deltas))
        return models

    def to_jsonl(self) -> str:
        header = {
            "type": "header",
            "arch": self.initial.arch,
            "dims": list(self.initial.dims),
            "num_clients": self.num_clients,
            "rounds": self.rounds,
            "initial": _b64(self.initial.weights),
            "final": None if self.final is None else _b64(self.final.weights),
            "utilities": self.utilities,
        }
        lines = [json.dumps(header, sort_keys=True)]
        for rec in self.records:
            for d in rec.deltas:
                lines.append(
                    json.dumps(
                        {
                            "round": rec.round,
                            "global_hash": rec.global_hash,
                            "client_id": d.client_id,
                            "dataset_size": d.dataset_size,
                            "delta": _b64(d.delta),
                        },
                        sort_keys=True,
                    )
                )
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "RoundLog":
        rows = [json.loads(line) for line in text.splitlines() if line.strip()]
        if not rows or rows[0].get("type") != "header":
            raise RoundLogError("missing header record")
        head = rows[0]
        dims, arch = tuple(head["dims"]), head["arch"]
        initial = ModelParams(_unb64(head["initial"]), dims, arch)
        final = None if head["final"] is None else ModelParams(_unb64(head["final"]), dims, arch)
        by_round: dict[int, list[RoundDelta]] = {}
        hashes: dict[int, str] = {}
        for r in rows[1:]:
            t = r["round"]
            hashes[t] = r["global_hash"]
            by_round.setdefault(t, []).append(
                RoundDelta(r["client_id"], t, _unb64(r["delta"]), r["dataset_size"])
            )
        records = [
            RoundRecord(t, hashes[t], tuple(sorted(by_round[t], key=lambda d: d.client_id)))
            for t in sorted(by_round)
        ]
        return cls(initial, head["num_clients"], records, final, list(head["utilities"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def load(cls, path: str | Path) -> "RoundLog":
        return cls.from_jsonl(Path(path).read_text())


def _b64(a: np.ndarray) -> str:
    return base64.b64encode(np.asarray(a, dtype="<f8").tobytes()).decode()


def _unb64(s: str) -> np.ndarray:
    return np.frombuffer(base64.b64decode(s), dtype="<f8").copy()


def select_clients(config: FederationConfig, t: int) -> tuple[int, ...]:
    """Deterministic ``m``-subset of client ids for round ``t`` (sorted)."""
    if not 0 <= t < config.rounds:
        raise ValueError(f"round {t} outside [0, {config.rounds})")
    n, m = config.num_clients, config.clients_per_round
    if m == n:
        return tuple(range(n))
    rng = np.random.default_rng([config.client_selection_seed, t])
    return tuple(sorted(int(i) for i in rng.choice(n, size=m, replace=False)))


def aggregation_weights(sizes: Sequence[int]) -> np.ndarray:
    sizes = np.asarray(sizes, dtype=np.float64)
    return sizes / sizes.sum()


def aggregate(global_model: ModelParams, deltas: Iterable[RoundDelta]) -> ModelParams:
    """``global + sum_i |D_i| / sum_j |D_j| * delta_i``, summed in client-id order."""
    deltas = sorted(deltas, key=lambda d: d.client_id)
    if not deltas:
        raise EmptyInputError("cannot aggregate an empty delta set")
    for d in deltas:
        if d.delta.shape[0] != len(global_model):
            raise RoundLogError(f"client {d.client_id} delta has wrong length")
    weights = aggregation_weights([d.dataset_size for d in deltas])
    update = np.zeros(len(global_model))
    for w, d in zip(weights, deltas):
        update += w * d.delta
    return global_model.with_weights(global_model.weights + update)


def run_training(
    config: FederationConfig,
    partitions: Sequence[Dataset],
    test: Dataset,
    initial: ModelParams | None = None,
    workers: int = 1,
) -> tuple[ModelParams, RoundLog]:
    """Run ``config.rounds`` rounds of FedAvg and return the final model and its log.

    With ``initial=None`` a linear model is initialised from ``hyper.seed``.
    Local training within a round may use a thread pool; deltas are always
    merged by client id so the result does not depend on completion order.
    """
    if len(partitions) != config.num_clients:
        raise ValueError(f"expected {config.num_clients} partitions, got {len(partitions)}")
    for i, p in enumerate(partitions):
        if p.size == 0:
            raise EmptyInputError(f"partition {i} is empty")
    if initial is None:
        first = partitions[0]
        initial = init_params(first.num_features, first.num_classes, seed=config.hyper.seed)

    log = RoundLog(initial=initial, num_clients=config.num_clients)
    current = initial
    log.utilities.append(utility(current, test))
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for t in range(config.rounds):
            selected = select_clients(config, t)
            if pool is None:
                local = [local_train(current, partitions[i], config.hyper) for i in selected]
            else:
                local = list(
                    pool.map(lambda i: local_train(current, partitions[i], config.hyper), selected)
                )
            deltas = tuple(
                RoundDelta(i, t, m.weights - current.weights, partitions[i].size)
                for i, m in zip(selected, local)
            )
            log.records.append(RoundRecord(t, current.digest(), deltas))
            current = aggregate(current, deltas)
            log.utilities.append(utility(current, test))
    finally:
        if pool is not None:
            pool.shutdown()
    log.final = current
    return current, log


def reconstruct_subset_model(log: RoundLog, subset: Iterable[int]) -> ModelParams:
    """Replay the log using only the deltas of clients in ``subset``.

    Each round applies the ``subset``-restricted delta sum with weights
    renormalised over the participating members; rounds without any member
    leave the model unchanged. The empty subset yields ``M^0``.
    """
    members = frozenset(int(i) for i in subset)
    unknown = [i for i in members if not 0 <= i < log.num_clients]
    if unknown:
        raise RoundLogError(f"unknown client ids {sorted(unknown)}")
    model = log.initial
    for rec in log.records:
        chosen = [d for d in rec.deltas if d.client_id in members]
        if chosen:
            model = aggregate(model, chosen)
    return model
