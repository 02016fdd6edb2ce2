"""Synthetic data and the four client-partitioning scenarios.

S1  equal-size IID shards
S2  IID shards with sizes proportional to integer ratios
S3  equal-size shards, label-skewed towards a per-client "home" label group
S4  S1 shards with additive Gaussian feature noise
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, EmptyInputError
from .learner import Dataset

SCENARIOS = ("S1", "S2", "S3", "S4")


@dataclass(frozen=True)
class SyntheticSource:
    n_samples: int = 2000
    n_features: int = 20
    n_classes: int = 10
    seed: int = 0
    separation: float = 1.0
    cluster_std: float = 0.25


@dataclass(frozen=True)
class ScenarioSpec:
    scenario: str = "S1"
    num_clients: int = 5
    ratios: tuple[int, ...] | None = None
    noise_sigma: float | tuple[float, ...] = 0.0
    skew: float = 0.8
    synthetic: SyntheticSource | None = field(default_factory=SyntheticSource)
    csv_path: str | None = None
    test_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}")
        if self.num_clients < 1:
            raise ConfigError("num_clients must be >= 1")
        if self.scenario == "S2":
            if self.ratios is None or len(self.ratios) != self.num_clients:
                raise ConfigError("S2 needs one ratio per client")
            if min(self.ratios) < 1:
                raise ConfigError("ratios must be positive integers")
        if self.scenario == "S4":
            sigmas = np.atleast_1d(np.asarray(self.noise_sigma, dtype=float))
            if sigmas.size not in (1, self.num_clients) or np.any(sigmas <= 0):
                raise ConfigError("S4 needs sigma > 0 (scalar or one per client)")
        if not 0.0 <= self.skew <= 1.0:
            raise ConfigError("skew must lie in [0, 1]")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("test_fraction must lie in (0, 1)")
        if (self.synthetic is None) == (self.csv_path is None):
            raise ConfigError("exactly one of synthetic / csv_path must be given")

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        d = dict(d)
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"unknown scenario keys {sorted(unknown)}")
        if "ratios" in d and d["ratios"] is not None:
            d["ratios"] = tuple(int(r) for r in d["ratios"])
        if isinstance(d.get("noise_sigma"), list):
            d["noise_sigma"] = tuple(float(s) for s in d["noise_sigma"])
        if "csv_path" in d and d["csv_path"] is not None:
            d.setdefault("synthetic", None)
        syn = d.get("synthetic", {})
        if isinstance(syn, dict):
            try:
                d["synthetic"] = SyntheticSource(**syn)
            except TypeError as exc:
                raise ConfigError(f"bad synthetic source: {exc}") from None
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


@dataclass(frozen=True)
class PartitionPlan:
    clients: tuple[tuple[int, ...], ...]
    test: tuple[int, ...]

    def sizes(self) -> tuple[int, ...]:
        return tuple(len(c) for c in self.clients)


def generate_synthetic(
    n_samples: int,
    n_features: int,
    n_classes: int,
    seed: int,
    separation: float = 1.0,
    cluster_std: float = 0.25,
) -> Dataset:
    """Gaussian class clusters around means of norm ``separation``.

    Labels are exactly balanced (``i % n_classes`` before shuffling). With
    ``n_features >= n_classes`` the means are scaled orthonormal directions,
    so every pair of means is ``separation * sqrt(2)`` apart.
    """
    if min(n_samples, n_features, n_classes) < 1:
        raise ValueError("n_samples, n_features and n_classes must be positive")
    rng = np.random.default_rng(seed)
    if n_features >= n_classes:
        q, _ = np.linalg.qr(rng.standard_normal((n_features, n_classes)))
        means = separation * q.T
    else:
        raw = rng.standard_normal((n_classes, n_features))
        means = separation * raw / np.linalg.norm(raw, axis=1, keepdims=True)
    labels = rng.permutation(np.arange(n_samples) % n_classes)
    x = means[labels] + cluster_std * rng.standard_normal((n_samples, n_features))
    return Dataset(x, labels, n_classes)


def load_delimited(path: str | Path, num_classes: int | None = None, delimiter: str = ",") -> Dataset:
    """One sample per line: feature values followed by an integer label."""
    raw = np.loadtxt(path, delimiter=delimiter, ndmin=2)
    labels = raw[:, -1].astype(np.int64)
    if not np.array_equal(labels, raw[:, -1]):
        raise ConfigError(f"{path}: last column must hold integer labels")
    classes = num_classes if num_classes is not None else int(labels.max()) + 1
    return Dataset(raw[:, :-1], labels, classes)


def _equal_sizes(total: int, k: int) -> list[int]:
    base, extra = divmod(total, k)
    return [base + (1 if i < extra else 0) for i in range(k)]


def apportion(total: int, ratios: Sequence[int]) -> list[int]:
    """Largest-remainder apportionment of ``total`` items by ``ratios``.

    Remainder ties go to the earlier client.
    """
    r = np.asarray(ratios, dtype=np.int64)
    quotas = [total * int(x) for x in r]
    denom = int(r.sum())
    sizes = [q // denom for q in quotas]
    remainders = [q % denom for q in quotas]
    left = total - sum(sizes)
    for i in sorted(range(len(r)), key=lambda i: (-remainders[i], i))[:left]:
        sizes[i] += 1
    return sizes


def _stratified_order(pool: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Reorder ``pool`` so every contiguous chunk holds labels in proportion.

    Each sample is keyed by its relative rank inside its own class, so
    slicing the result into chunks gives every chunk each class's share to
    within one sample.
    """
    y = labels[pool]
    key = np.empty(pool.size)
    for c in np.unique(y):
        where = np.flatnonzero(y == c)
        key[where] = (np.arange(where.size) + 0.5) / where.size
    return pool[np.lexsort((y, key))]


def _home_groups(num_clients: int, num_classes: int) -> list[list[int]]:
    if num_clients <= num_classes:
        return [[c for c in range(num_classes) if c % num_clients == k] for k in range(num_clients)]
    return [[k % num_classes] for k in range(num_clients)]


def _skewed(pool: np.ndarray, labels: np.ndarray, spec: ScenarioSpec, num_classes: int, rng) -> list[list[int]]:
    sizes = _equal_sizes(pool.size, spec.num_clients)
    queues = {c: list(pool[labels[pool] == c]) for c in range(num_classes)}
    taken: set[int] = set()
    out: list[list[int]] = []
    for k, group in enumerate(_home_groups(spec.num_clients, num_classes)):
        quota = int(round(spec.skew * sizes[k]))
        mine: list[int] = []
        c = 0
        while len(mine) < quota and any(queues[g] for g in group):
            g = group[c % len(group)]
            c += 1
            if queues[g]:
                idx = queues[g].pop()
                mine.append(int(idx))
                taken.add(int(idx))
        out.append(mine)
    rest = [int(i) for i in pool if int(i) not in taken]
    rest = list(rng.permutation(rest)) if rest else []
    for k in range(spec.num_clients):
        need = sizes[k] - len(out[k])
        out[k].extend(int(i) for i in rest[:need])
        rest = rest[need:]
    return out


def partition(spec: ScenarioSpec, dataset: Dataset) -> PartitionPlan:
    """Split ``dataset`` into a held-out test set and one index list per client."""
    n = dataset.size
    n_test = int(round(spec.test_fraction * n))
    if n - n_test < spec.num_clients or n_test < 1:
        raise EmptyInputError(
            f"{n} samples cannot give a test set and {spec.num_clients} non-empty clients"
        )
    rng = np.random.default_rng([spec.seed, 1])
    order = rng.permutation(n)
    test, pool = np.sort(order[:n_test]), order[n_test:]

    if spec.scenario == "S3":
        clients = _skewed(pool, dataset.labels, spec, dataset.num_classes, rng)
    else:
        if spec.scenario == "S2":
            sizes = apportion(pool.size, spec.ratios)
        else:
            sizes = _equal_sizes(pool.size, spec.num_clients)
        if min(sizes) < 1:
            raise EmptyInputError("a client would receive no samples")
        pool = _stratified_order(pool, dataset.labels)
        bounds = np.cumsum([0] + sizes)
        clients = [pool[bounds[k] : bounds[k + 1]] for k in range(spec.num_clients)]
    return PartitionPlan(
        tuple(tuple(sorted(int(i) for i in c)) for c in clients),
        tuple(int(i) for i in test),
    )


def add_gaussian_noise(dataset: Dataset, sigma: float, seed: int) -> Dataset:
    """``features + N(0, sigma^2)``; labels are left untouched."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return dataset
    rng = np.random.default_rng(seed)
    noisy = dataset.features + sigma * rng.standard_normal(dataset.features.shape)
    return Dataset(noisy, dataset.labels, dataset.num_classes)


def load_source(spec: ScenarioSpec) -> Dataset:
    if spec.csv_path is not None:
        return load_delimited(spec.csv_path)
    s = spec.synthetic
    return generate_synthetic(s.n_samples, s.n_features, s.n_classes, s.seed, s.separation, s.cluster_std)


def build(spec: ScenarioSpec) -> tuple[list[Dataset], Dataset, PartitionPlan]:
    """Materialise client datasets and the test set for ``spec``.

    S4 noise is added to every client's training shard (one sigma for all, or
    one per client); the test set stays clean.
    """
    data = load_source(spec)
    plan = partition(spec, data)
    clients = [data.subset(idx) for idx in plan.clients]
    if spec.scenario == "S4":
        sigmas = np.broadcast_to(np.atleast_1d(np.asarray(spec.noise_sigma, dtype=float)), (spec.num_clients,))
        clients = [
            add_gaussian_noise(c, float(s), seed=spec.seed * 1000 + k)
            for k, (c, s) in enumerate(zip(clients, sigmas))
        ]
    return clients, data.subset(plan.test), plan


def load_spec(path: str | Path) -> ScenarioSpec:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read scenario {path}: {exc}") from None
    return ScenarioSpec.from_dict(raw.get("scenario", raw))
