"""Shapley valuation of federated clients.

Methods
-------
exact       plain enumeration over a utility oracle
sfsv        retrain a federation for every client subset, then enumerate
single-cal  rebuild every subset model by replaying logged deltas, then enumerate
multi-cal   per-round enumeration around the true global model, summed over rounds
afs         truncated Monte-Carlo permutation sampling over replayed prefix models

All methods take ``U(empty set)`` to be the accuracy of the initial model.
"""

from __future__ import annotations

import math
import threading
import time
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import CapacityError
from .federation import (
    FederationConfig,
    RoundLog,
    aggregate,
    reconstruct_subset_model,
    run_training,
)
from .learner import Dataset, ModelParams, init_params, utility

METHODS = ("exact", "sfsv", "single-cal", "multi-cal", "afs")
MAX_EXACT_PLAYERS = 20
MAX_SFSV_PLAYERS = 10

UtilityFn = Callable[[frozenset], float]


@dataclass(frozen=True, eq=False)
class ShapleyVector:
    values: np.ndarray
    method: str
    normalized: bool = False
    permutations_used: int = 0
    utility_evaluations: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        v = np.array(self.values, dtype=np.float64, copy=True).ravel()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        if self.normalized and abs(v.sum() - 1.0) > 1e-9:
            raise ValueError("normalized vector must sum to 1")

    def __len__(self) -> int:
        return int(self.values.shape[0])

    def __getitem__(self, i):
        return self.values[i]


@dataclass(frozen=True)
class TmcConfig:
    """Truncated Monte-Carlo settings.

    ``sampler`` is ``"random"`` for i.i.d. uniform permutations or
    ``"cyclic"``, which draws one uniform permutation per block of ``n`` and
    uses its ``n`` cyclic rotations, so every client occupies every position
    exactly once per block.
    """

    truncation_threshold: float = 0.01
    convergence_tolerance: float = 0.01
    max_permutations: int | None = None
    seed: int = 0
    sampler: str = "cyclic"

    def __post_init__(self):
        if self.truncation_threshold < 0:
            raise ValueError("truncation_threshold must be >= 0")
        if not self.convergence_tolerance > 0:
            raise ValueError("convergence_tolerance must be positive")
        if self.max_permutations is not None and self.max_permutations < 1:
            raise ValueError("max_permutations must be >= 1")
        if self.sampler not in ("random", "cyclic"):
            raise ValueError(f"unknown sampler {self.sampler!r}")

    def permutation_cap(self, n: int) -> int:
        return self.max_permutations if self.max_permutations is not None else 500 * n


@dataclass(frozen=True)
class SamplingBound:
    epsilon: float
    alpha: float
    value_range: float
    required_permutations: int


class CachedOracle:
    """Memoises a subset utility by bitmask and counts distinct evaluations.

    Safe to share between threads: a key may be computed twice under a race
    but the stored value is whatever was written first.
    """

    def __init__(self, fn: UtilityFn):
        self._fn = fn
        self._cache: dict[int, float] = {}
        self._lock = threading.Lock()

    @property
    def evaluations(self) -> int:
        return len(self._cache)

    def by_mask(self, mask: int) -> float:
        try:
            return self._cache[mask]
        except KeyError:
            pass
        value = float(self._fn(_members(mask)))
        with self._lock:
            return self._cache.setdefault(mask, value)

    def __call__(self, subset: Iterable[int]) -> float:
        return self.by_mask(_mask(subset))


def _mask(subset: Iterable[int]) -> int:
    m = 0
    for i in subset:
        m |= 1 << int(i)
    return m


def _members(mask: int) -> frozenset:
    out, i = [], 0
    while mask:
        if mask & 1:
            out.append(i)
        mask >>= 1
        i += 1
    return frozenset(out)


def _as_cached(oracle) -> CachedOracle:
    return oracle if isinstance(oracle, CachedOracle) else CachedOracle(oracle)


def _shapley_from_table(values: np.ndarray, n: int) -> np.ndarray:
    masks = np.arange(1 << n)
    sizes = np.zeros(1 << n, dtype=np.int64)
    for i in range(n):
        sizes += (masks >> i) & 1
    # weight of a coalition of size s not containing i: 1 / (n * C(n-1, s))
    coef = np.array([1.0 / (n * math.comb(n - 1, s)) for s in range(n)])
    phi = np.empty(n)
    for i in range(n):
        without = masks[((masks >> i) & 1) == 0]
        marg = values[without | (1 << i)] - values[without]
        phi[i] = np.dot(coef[sizes[without]], marg)
    return phi


def exact_shapley(oracle: UtilityFn, n: int, method: str = "exact") -> ShapleyVector:
    """Shapley values by enumerating all ``2**n`` coalitions of ``oracle``."""
    if n < 1:
        raise ValueError("need at least one player")
    if n > MAX_EXACT_PLAYERS:
        raise CapacityError(f"exact Shapley limited to {MAX_EXACT_PLAYERS} players, got {n}")
    cached = _as_cached(oracle)
    values = np.array([cached.by_mask(m) for m in range(1 << n)])
    return ShapleyVector(
        _shapley_from_table(values, n), method, utility_evaluations=cached.evaluations
    )


def replay_oracle(log: RoundLog, test: Dataset) -> CachedOracle:
    return CachedOracle(lambda s: utility(reconstruct_subset_model(log, s), test))


def retrain_oracle(
    config: FederationConfig,
    partitions: Sequence[Dataset],
    test: Dataset,
    initial: ModelParams,
) -> CachedOracle:
    """``U(S)``: accuracy after a fresh FedAvg run over the clients in ``S`` only."""

    def u(subset: frozenset) -> float:
        members = sorted(subset)
        if not members:
            return utility(initial, test)
        sub = FederationConfig(
            num_clients=len(members),
            clients_per_round=min(config.clients_per_round, len(members)),
            rounds=config.rounds,
            hyper=config.hyper,
            client_selection_seed=config.client_selection_seed,
        )
        final, _ = run_training(sub, [partitions[i] for i in members], test, initial=initial)
        return utility(final, test)

    return CachedOracle(u)


def sfsv(
    config: FederationConfig,
    partitions: Sequence[Dataset],
    test: Dataset,
    initial: ModelParams | None = None,
) -> ShapleyVector:
    """Standard federated Shapley value: one full federation per client subset."""
    n = len(partitions)
    if n > MAX_SFSV_PLAYERS:
        raise CapacityError(f"SFSV retrains 2**n federations; limited to {MAX_SFSV_PLAYERS}, got {n}")
    if initial is None:
        initial = init_params(partitions[0].num_features, partitions[0].num_classes, seed=config.hyper.seed)
    return exact_shapley(retrain_oracle(config, partitions, test, initial), n, method="sfsv")


def single_cal(log: RoundLog, test: Dataset) -> ShapleyVector:
    log.validate()
    return exact_shapley(replay_oracle(log, test), log.num_clients, method="single-cal")


def multi_cal(log: RoundLog, test: Dataset) -> ShapleyVector:
    """Sum over rounds of the Shapley values of the one-round game around ``M^t``.

    Round ``t``'s game is ``U_t(S) = accuracy(M^t + renormalised S-deltas)``
    with ``U_t(empty) = accuracy(M^t)``. Clients that skipped a round are null
    players there, so each round is enumerated over its participants only.
    """
    log.validate()
    phi = np.zeros(log.num_clients)
    evaluations = 0
    for rec, start in zip(log.records, log.global_models()):
        ids = sorted(rec.participants)
        by_id = {d.client_id: d for d in rec.deltas}

        def u(local: frozenset, ids=ids, by_id=by_id, start=start) -> float:
            if not local:
                return utility(start, test)
            return utility(aggregate(start, [by_id[ids[k]] for k in local]), test)

        sv = exact_shapley(u, len(ids), method="multi-cal")
        evaluations += sv.utility_evaluations
        phi[ids] += sv.values
    return ShapleyVector(phi, "multi-cal", utility_evaluations=evaluations)


def _relative_change(new: np.ndarray, old: np.ndarray) -> float:
    return float(np.mean(np.abs(new - old) / np.maximum(np.abs(new), 1e-9)))


def _permutations(n: int, cfg: TmcConfig):
    rng = np.random.default_rng(cfg.seed)
    while True:
        base = rng.permutation(n)
        if cfg.sampler == "random":
            yield base
            continue
        for shift in range(n):
            yield np.roll(base, -shift)


def tmc_shapley(oracle: UtilityFn, n: int, cfg: TmcConfig, method: str = "afs") -> ShapleyVector:
    """Truncated Monte-Carlo Shapley estimate over ``n`` players.

    For each sampled permutation the prefix coalitions are scanned in order;
    once the running value is within ``truncation_threshold`` of the grand
    coalition's value the remaining marginals are taken to be zero. Stops when
    the mean relative change of the estimate over one permutation drops below
    ``convergence_tolerance`` or the permutation cap is reached.
    """
    cached = _as_cached(oracle)
    cap = cfg.permutation_cap(n)
    v_empty = cached.by_mask(0)
    v_full = cached.by_mask((1 << n) - 1)
    phi = np.zeros(n)
    m = 0
    for perm in _permutations(n, cfg):
        m += 1
        previous = phi.copy()
        v_prev, prefix = v_empty, 0
        for i in perm:
            prefix |= 1 << int(i)
            if abs(v_full - v_prev) < cfg.truncation_threshold:
                v = v_prev
            else:
                v = cached.by_mask(prefix)
            phi[i] = (m - 1) / m * phi[i] + (v - v_prev) / m
            v_prev = v
        if m >= cap or _relative_change(phi, previous) < cfg.convergence_tolerance:
            break
    return ShapleyVector(phi, method, permutations_used=m, utility_evaluations=cached.evaluations)


def afs(log: RoundLog, test: Dataset, cfg: TmcConfig | None = None) -> ShapleyVector:
    """Approximate federated Shapley: TMC sampling over replay-reconstructed models."""
    log.validate()
    return tmc_shapley(replay_oracle(log, test), log.num_clients, cfg or TmcConfig())


def normalize(sv: ShapleyVector) -> ShapleyVector:
    """Scale so the values sum to one."""
    total = float(sv.values.sum())
    if abs(total) <= 1e-12:
        raise ZeroDivisionError(f"cannot normalize {sv.method} values that sum to zero")
    if sv.normalized:
        return sv
    return replace(sv, values=sv.values / total, normalized=True)


def d_max(phi_f: ShapleyVector, phi_s: ShapleyVector) -> float:
    """Largest per-client gap between two normalized vectors."""
    if len(phi_f) != len(phi_s):
        raise ValueError(f"length mismatch: {len(phi_f)} vs {len(phi_s)}")
    if not (phi_f.normalized and phi_s.normalized):
        raise ValueError("d_max needs normalized vectors")
    return float(np.max(np.abs(phi_f.values - phi_s.values)))


def _hoeffding_tail(k: int, epsilon: float, value_range: float) -> float:
    return 2.0 * math.exp(-2.0 * k * epsilon**2 / value_range**2)


def min_permutations(epsilon: float, alpha: float, value_range: float) -> int:
    """Smallest permutation count ``k`` with ``2 exp(-2 k eps^2 / v^2) <= alpha``."""
    if not 0 < epsilon <= 1:
        raise ValueError("epsilon must lie in (0, 1]")
    if not 0 < alpha <= 1:
        raise ValueError("alpha must lie in (0, 1]")
    if not value_range > 0:
        raise ValueError("value range must be positive")
    k = max(1, math.ceil(value_range**2 * math.log(2.0 / alpha) / (2.0 * epsilon**2)))
    # the closed form can be off by one under rounding; settle on the inequality itself
    while k > 1 and _hoeffding_tail(k - 1, epsilon, value_range) <= alpha:
        k -= 1
    while _hoeffding_tail(k, epsilon, value_range) > alpha:
        k += 1
    return k


def sampling_bound(epsilon: float, alpha: float, value_range: float) -> SamplingBound:
    return SamplingBound(epsilon, alpha, value_range, min_permutations(epsilon, alpha, value_range))


def estimate_range(oracle: UtilityFn, n: int) -> float:
    """Heuristic marginal-contribution range: spread of the singleton marginals.

    Falls back to the largest singleton marginal, then to 1.0 (the width of
    the accuracy scale) when the marginals carry no spread.
    """
    cached = _as_cached(oracle)
    base = cached.by_mask(0)
    marg = np.array([cached.by_mask(1 << i) - base for i in range(n)])
    spread = float(marg.max() - marg.min())
    if spread > 0:
        return spread
    top = float(np.abs(marg).max())
    return top if top > 0 else 1.0


def valuation_record(sv: ShapleyVector, wall_time_ms: float | None = None) -> dict:
    try:
        normalized = normalize(sv).values.tolist()
    except ZeroDivisionError:
        normalized = None
    return {
        "method": sv.method,
        "phi": sv.values.tolist(),
        "phi_normalized": normalized,
        "permutations_used": sv.permutations_used,
        "utility_evaluations": sv.utility_evaluations,
        "wall_time_ms": wall_time_ms,
    }


def timed(fn, *args, **kwargs) -> tuple[ShapleyVector, float]:
    start = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, (time.perf_counter() - start) * 1000.0
