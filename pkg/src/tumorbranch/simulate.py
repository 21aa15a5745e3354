"""Exact event-driven simulation of the branching particle system.

The law is the product here, so events are simulated one at a time (no
tau-leaping): waiting times are exponential in the total rate
``sum_x counts[x] * (q(x) + beta(x))`` and the event kind is chosen with its
exact categorical weights.  ``step`` is the plain-numpy reference used by the
distributional tests; ``run_trajectory`` drives the compiled kernel in
``_gillespie`` for whole replicas and is reproducible per
``(base_seed, replica_index)``.
"""

from __future__ import annotations

import concurrent.futures
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ._gillespie import run_events
from .branching import BranchingModel
from .errors import (
    DimensionMismatch,
    ExtinctPopulation,
    InvalidParameter,
)

RNG_FAMILY = "numba-mt19937-per-replica"

_MASK64 = (1 << 64) - 1


def derive_replica_seed(base_seed: int, replica_index: int) -> int:
    """Stable 32-bit stream seed for one replica (splitmix64 of the pair)."""
    z = ((int(base_seed) & _MASK64) ^ (int(replica_index) * 0x9E3779B97F4A7C15)) & _MASK64
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    z = z ^ (z >> 31)
    return int(z & 0xFFFFFFFF)


@dataclass(frozen=True)
class PopulationState:
    """Counts per type at one instant, with cumulative event counters.

    ``counts[i]`` holds the particles of type ``i+1``; ``total`` caches the
    population size and must equal ``counts.sum()``.
    """

    counts: np.ndarray
    time: float
    total: int
    moves: int = 0
    absorptions: int = 0
    creations: int = 0

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        counts.flags.writeable = False
        object.__setattr__(self, "counts", counts)
        if counts.ndim != 1:
            raise DimensionMismatch("counts must be one-dimensional")
        if np.any(counts < 0):
            raise InvalidParameter("counts must be nonnegative")
        if self.time < 0:
            raise InvalidParameter("time must be nonnegative")
        if self.total != int(counts.sum()):
            raise InvalidParameter(
                f"cached total {self.total} != counts.sum() {int(counts.sum())}"
            )

    @property
    def k(self) -> int:
        return self.counts.size

    def as_dict(self) -> dict:
        return {i + 1: int(c) for i, c in enumerate(self.counts) if c}


def initial_state(k: int, counts_by_type: dict) -> PopulationState:
    """State at time zero from a ``{type: count}`` association."""
    counts = np.zeros(k, dtype=np.int64)
    for x, c in counts_by_type.items():
        if not 1 <= int(x) <= k:
            raise InvalidParameter(f"type {x} outside 1..{k}")
        if int(c) < 0:
            raise InvalidParameter(f"count for type {x} is negative")
        counts[int(x) - 1] = int(c)
    return PopulationState(counts=counts, time=0.0, total=int(counts.sum()))


@dataclass(frozen=True)
class RunConfig:
    """One simulation experiment: model, horizon, snapshots, replicas, seed."""

    model: BranchingModel
    horizon: float
    snapshot_times: tuple
    initial: dict = field(default_factory=lambda: {1: 1})
    replicas: int = 1
    base_seed: int = 0
    population_cap: int = 10_000_000

    def __post_init__(self):
        snaps = tuple(float(s) for s in self.snapshot_times)
        object.__setattr__(self, "snapshot_times", snaps)
        if self.horizon < 0:
            raise InvalidParameter("horizon must be nonnegative")
        if any(s < 0 or s > self.horizon for s in snaps):
            raise InvalidParameter("snapshot times must lie within [0, horizon]")
        if any(b < a for a, b in zip(snaps, snaps[1:])):
            raise InvalidParameter("snapshot times must be nondecreasing")
        if self.replicas < 1:
            raise InvalidParameter("replica count must be >= 1")
        if self.population_cap < 1:
            raise InvalidParameter("population cap must be >= 1")
        # validates the type labels
        initial_state(self.model.k, self.initial)


class _SamplingTables:
    """Flat per-type outcome tables consumed by both samplers."""

    def __init__(self, model: BranchingModel):
        k = model.k
        self.a = np.asarray(model.jump_rates, dtype=float)
        self.p_create = np.asarray(model.beta / self.a, dtype=float)
        row_ptr = np.zeros(k + 1, dtype=np.int64)
        targets: list[int] = []
        cumprob: list[float] = []
        off = model.rates.offdiag
        absorption = model.rates.absorption
        exit_rates = model.rates.exit_rates
        for x in range(k):
            row = off.getrow(x)
            weights = list(zip(row.indices.tolist(), row.data.tolist()))
            if absorption[x] > 0.0:
                weights.append((-1, float(absorption[x])))
            if weights:
                total = exit_rates[x]
                acc = 0.0
                for tgt, wgt in weights:
                    acc += wgt / total
                    targets.append(tgt)
                    cumprob.append(acc)
                cumprob[-1] = 1.0
            row_ptr[x + 1] = len(targets)
        self.row_ptr = row_ptr
        self.targets = np.asarray(targets, dtype=np.int64)
        self.cumprob = np.asarray(cumprob, dtype=float)


def _tables(model: BranchingModel) -> _SamplingTables:
    cached = getattr(model, "_sampling_tables", None)
    if cached is None:
        cached = _SamplingTables(model)
        object.__setattr__(model, "_sampling_tables", cached)
    return cached


def step(state: PopulationState, model: BranchingModel, rng) -> PopulationState:
    """Apply exactly one event and return the advanced state.

    The waiting time is exponential with the total event rate; the event is a
    move ``x -> y`` with weight ``counts[x] q(x,y)``, an absorption with
    weight ``counts[x] q(x,0)``, or a creation at type 1 with weight
    ``counts[x] beta(x)``.
    """
    if state.k != model.k:
        raise DimensionMismatch("state and model sizes differ")
    if state.total <= 0:
        raise ExtinctPopulation("cannot step an empty population")
    tab = _tables(model)
    weights = state.counts * tab.a
    total_rate = float(weights.sum())
    dt = rng.exponential(1.0 / total_rate)
    x = int(np.searchsorted(np.cumsum(weights), rng.random() * total_rate))
    x = min(x, state.k - 1)

    counts = state.counts.copy()
    moves, absorbs, creates = state.moves, state.absorptions, state.creations
    if rng.random() < tab.p_create[x]:
        counts[0] += 1
        creates += 1
    else:
        lo, hi = tab.row_ptr[x], tab.row_ptr[x + 1]
        idx = lo + int(
            np.searchsorted(tab.cumprob[lo:hi], rng.random(), side="right")
        )
        idx = min(idx, hi - 1)
        y = tab.targets[idx]
        counts[x] -= 1
        if y < 0:
            absorbs += 1
        else:
            counts[y] += 1
            moves += 1
    return PopulationState(
        counts=counts,
        time=state.time + dt,
        total=int(counts.sum()),
        moves=moves,
        absorptions=absorbs,
        creations=creates,
    )


@dataclass(frozen=True)
class Trajectory:
    """Snapshots of one replica plus its termination record."""

    replica: int
    seed: int
    snapshots: tuple
    final_time: float
    moves: int
    absorptions: int
    creations: int
    censored: bool
    cap_time: float

    @property
    def extinct(self) -> bool:
        return not self.censored and self.snapshots[-1].total == 0


def run_trajectory(config: RunConfig, replica_index: int) -> Trajectory:
    """Simulate one replica; deterministic given (base_seed, replica_index)."""
    if not 0 <= replica_index < config.replicas:
        raise InvalidParameter(
            f"replica index {replica_index} outside 0..{config.replicas - 1}"
        )
    tab = _tables(config.model)
    seed = derive_replica_seed(config.base_seed, replica_index)
    counts0 = initial_state(config.model.k, config.initial).counts.copy()
    snap_times = np.asarray(config.snapshot_times, dtype=float)
    snap_counts, snap_events, t_final, events, censored, cap_time = run_events(
        counts0,
        tab.a,
        tab.p_create,
        tab.row_ptr,
        tab.targets,
        tab.cumprob,
        float(config.horizon),
        snap_times,
        int(config.population_cap),
        seed,
    )
    snapshots = tuple(
        PopulationState(
            counts=snap_counts[i],
            time=float(snap_times[i]),
            total=int(snap_counts[i].sum()),
            moves=int(snap_events[i, 0]),
            absorptions=int(snap_events[i, 1]),
            creations=int(snap_events[i, 2]),
        )
        for i in range(snap_times.size)
    )
    return Trajectory(
        replica=replica_index,
        seed=seed,
        snapshots=snapshots,
        final_time=float(t_final),
        moves=int(events[0]),
        absorptions=int(events[1]),
        creations=int(events[2]),
        censored=bool(censored),
        cap_time=float(cap_time),
    )


@dataclass(frozen=True)
class Ensemble:
    """Stacked snapshots over replicas: ``counts[r, s, i]`` at time ``times[s]``."""

    times: np.ndarray
    counts: np.ndarray
    censored: np.ndarray
    cap_times: np.ndarray
    final_times: np.ndarray
    seeds: np.ndarray

    @property
    def replicas(self) -> int:
        return self.counts.shape[0]

    def totals(self) -> np.ndarray:
        return self.counts.sum(axis=2)


def run_ensemble(config: RunConfig, n_workers: int | None = None) -> Ensemble:
    """All replicas of a config; replicas share nothing but the model tables.

    The compiled kernel releases the GIL, so replicas run on a small thread
    pool by default; results are identical to the sequential order because
    every replica seeds its own stream.
    """
    if n_workers is None:
        n_workers = min(8, os.cpu_count() or 1, config.replicas)
    indices = range(config.replicas)
    if n_workers <= 1:
        trajectories = [run_trajectory(config, r) for r in indices]
    else:
        with concurrent.futures.ThreadPoolExecutor(n_workers) as pool:
            trajectories = list(pool.map(lambda r: run_trajectory(config, r), indices))
    counts = np.stack(
        [np.stack([s.counts for s in tr.snapshots]) for tr in trajectories]
    )
    return Ensemble(
        times=np.asarray(config.snapshot_times, dtype=float),
        counts=counts,
        censored=np.array([tr.censored for tr in trajectories]),
        cap_times=np.array([tr.cap_time for tr in trajectories]),
        final_times=np.array([tr.final_time for tr in trajectories]),
        seeds=np.array([tr.seed for tr in trajectories], dtype=np.uint64),
    )


@dataclass(frozen=True)
class SnapshotStats:
    """Survival-conditioned summary of one snapshot time.

    ``ci_lo``/``ci_hi`` bound the mean of ``log(total)/t`` by its standard
    error; ``spread_lo``/``spread_hi`` use the per-replica sample deviation
    instead (the per-replica growth exponent keeps an O(1/t) offset from the
    population growth rate, so the spread interval is the honest one for
    rate comparisons).  Proportions average ``counts/total`` over surviving,
    uncensored replicas; ``tv_to_nu`` is their total-variation distance to a
    reference distribution when one is supplied.
    """

    time: float
    replicas: int
    survivors: int
    survival_fraction: float
    mean_log_growth: float
    se_log_growth: float
    ci_lo: float
    ci_hi: float
    spread_lo: float
    spread_hi: float
    proportions: np.ndarray | None
    proportion_replicas: int
    tv_to_nu: float


def survival_stats(ensemble: Ensemble, nu=None) -> list:
    """Per-snapshot survival fraction, growth statistics, and proportions.

    A replica counts as surviving when its population is positive at the
    snapshot; growth and proportion statistics additionally require the
    snapshot to predate any censoring cap.
    """
    if nu is not None:
        nu = np.asarray(nu, dtype=float)
        if nu.shape != (ensemble.counts.shape[2],):
            raise DimensionMismatch("nu length must match the type count")
    totals = ensemble.totals()
    rows = []
    for s, t in enumerate(ensemble.times):
        tot = totals[:, s]
        alive = tot > 0
        valid = alive & (t <= ensemble.cap_times)
        survivors = int(alive.sum())
        n = ensemble.replicas
        if t > 0 and valid.any():
            logs = np.log(tot[valid].astype(float)) / t
            mean = float(logs.mean())
            sd = float(logs.std(ddof=1)) if logs.size > 1 else 0.0
            se = sd / np.sqrt(logs.size) if logs.size > 1 else 0.0
        else:
            mean = sd = se = float("nan")
        if valid.any():
            props = ensemble.counts[valid, s, :] / tot[valid, None]
            avg_props = props.mean(axis=0)
            tv = (
                0.5 * float(np.abs(avg_props - nu).sum())
                if nu is not None
                else float("nan")
            )
        else:
            avg_props, tv = None, float("nan")
        rows.append(
            SnapshotStats(
                time=float(t),
                replicas=n,
                survivors=survivors,
                survival_fraction=survivors / n,
                mean_log_growth=mean,
                se_log_growth=se,
                ci_lo=mean - 1.96 * se,
                ci_hi=mean + 1.96 * se,
                spread_lo=mean - 1.96 * sd,
                spread_hi=mean + 1.96 * sd,
                proportions=avg_props,
                proportion_replicas=int(valid.sum()),
                tv_to_nu=tv,
            )
        )
    return rows
