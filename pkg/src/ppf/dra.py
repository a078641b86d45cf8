"""Distributed resampling algorithms and the per-frame filter step.

Every algorithm shares one SIS phase: propagate local particles, evaluate
log-likelihoods (thread-parallel, patch-based), rescale by the global max
log-likelihood to avoid underflow, and reduce global weight moments for the
state estimate and the effective sample size. They differ in how resampling
and particle movement happen afterwards:

  serial  plain SIR: one rank, global resample when N_eff drops.
  rna     fixed N/P particles per rank, local resampling, ring exchange of a
          fixed fraction of particles each frame.
  arna    rna with the exchange ratio adapted to the fraction of ranks whose
          best particle still tracks the object; the ring order is reshuffled
          whenever no rank tracks.
  rpa     a global resampling budget split proportionally to per-rank weight
          mass, then a scheduler (gs/sgs/lgs) routes surplus particles.

With one rank, rna and rpa take exactly the serial code path draw for draw,
so their outputs are bit-identical to serial SIR.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .core import (
    ParticleStore,
    RngStream,
    StateVector,
    records_from_bytes,
    systematic_indices,
)
from .dlb import SCHEDULERS, RouteSchedule, classify, target_loads
from .errors import AllZeroWeights, PpfError
from .likelihood import WeightEvaluator, bin_particles, build_layout
from .models import DynamicsParams, ObservationParams, propagate_store

EXCHANGE_TAG = 1
TRANSFER_TAG = 2


@dataclass
class RingTopology:
    """Cyclic rank order used for neighbor exchange."""

    order: np.ndarray

    def __post_init__(self):
        self.order = np.asarray(self.order, dtype=np.int64)
        if sorted(self.order.tolist()) != list(range(len(self.order))):
            raise ValueError("ring order must be a permutation of [0, P)")

    @classmethod
    def identity(cls, size: int) -> "RingTopology":
        return cls(np.arange(size))

    def neighbors(self, rank: int):
        """(next, previous) rank in cyclic order."""
        pos = int(np.flatnonzero(self.order == rank)[0])
        p = len(self.order)
        return int(self.order[(pos + 1) % p]), int(self.order[(pos - 1) % p])

    def shuffled(self, rng: RngStream) -> "RingTopology":
        return RingTopology(rng.gen.permutation(len(self.order)))


@dataclass
class TrackingStatus:
    """Which ranks currently see a likelihood peak above the tracking bar."""

    flags: np.ndarray

    def __post_init__(self):
        self.flags = np.asarray(self.flags, dtype=bool)

    @property
    def count(self) -> int:
        return int(np.sum(self.flags))

    @property
    def fraction(self) -> float:
        return self.count / len(self.flags)


@dataclass
class StepInfo:
    """Per-frame record, identical on every rank."""

    frame: int
    neff_global: float
    estimate: np.ndarray
    resampled: bool
    links: int
    particles_moved: int
    counts: np.ndarray
    exchange_ratio: float = 0.0
    residual_imbalance: int = 0
    reinitialized: bool = False
    tracking_count: int = -1
    schedule_rows: list = field(default_factory=list)


@dataclass
class FilterContext:
    """Everything one rank needs to run the filter loop."""

    rank: int
    endpoint: object
    store: ParticleStore
    obs: ObservationParams
    dyn: DynamicsParams
    rng: RngStream
    evaluator: WeightEvaluator
    width: int
    height: int
    n_global: int
    algo: str = "serial"
    scheduler: str = "sgs"
    threshold_ratio: float = 0.5
    exchange_ratio: float = 0.1
    pcsir: bool = False
    tau_track: float = -np.inf
    r_min: float = 0.1
    r_max: float = 0.5
    ring: RingTopology | None = None
    shared_rng: RngStream | None = None
    reinit_rng: RngStream | None = None
    i0_init: float = 10.0
    init_speed: float = 1.0
    frame_index: int = 0

    @property
    def size(self) -> int:
        return self.endpoint.size


def _sis_and_moments(ctx: FilterContext, frame):
    """Propagate, weight, and reduce global moments.

    Returns (local, total, local_max_loglik) where local and total are
    [sum w, sum w^2, sum w*state...] vectors (7 entries). Weights are scaled
    by exp(loglik - global max loglik), so the best particle anywhere keeps
    weight of order one and sharply peaked likelihoods cannot underflow all
    ranks at once.
    """
    propagate_store(ctx.store, ctx.dyn, ctx.rng)
    binning = bin_particles(ctx.store, ctx.width, ctx.height)
    layout = build_layout(binning, ctx.evaluator.threads)
    ll = ctx.evaluator.log_likelihoods(ctx.store, frame, binning, layout, ctx.pcsir)
    local_max = float(np.max(ll)) if ctx.store.count else -np.inf
    gmax = float(ctx.endpoint.allreduce_max(np.array([local_max]))[0])
    if gmax == -np.inf:
        raise AllZeroWeights("no particle anywhere produced a finite likelihood")
    ctx.store.weights = ctx.store.weights * np.exp(ll - gmax)
    w = ctx.store.weights
    local = np.empty(7)
    local[0] = np.sum(w)
    local[1] = np.sum(w * w)
    local[2:] = np.sum(ctx.store.states * w[:, None], axis=0)
    total = ctx.endpoint.allreduce_sum(local)
    if total[0] == 0.0:
        raise AllZeroWeights("global weight mass is zero")
    return local, total, local_max


def _resample_local(store: ParticleStore, n_out: int, rng: RngStream, new_weight: float):
    """Systematic resample n_out particles from the store's current weights."""
    phase = float(rng.gen.uniform())
    idx = systematic_indices(store.weights, n_out, phase)
    out = store.take(idx)
    out.weights = np.full(n_out, new_weight)
    return out


def _gather_counts(ctx: FilterContext) -> np.ndarray:
    counts = ctx.endpoint.allgather(np.array([float(ctx.store.count)]))
    return counts[:, 0].astype(np.int64)


def _reinit_rank(ctx: FilterContext) -> None:
    """Local degeneracy recovery: redraw this rank's particles from the prior.

    rna/arna only; rpa recovers through proportional allocation instead.
    """
    n = ctx.store.count
    g = ctx.reinit_rng.gen
    states = np.empty((n, 5))
    states[:, 0] = g.uniform(0.0, ctx.width, n)
    states[:, 1] = g.uniform(0.0, ctx.height, n)
    states[:, 2] = g.uniform(-ctx.init_speed, ctx.init_speed, n)
    states[:, 3] = g.uniform(-ctx.init_speed, ctx.init_speed, n)
    states[:, 4] = g.uniform(0.5 * ctx.i0_init, 1.5 * ctx.i0_init, n)
    ctx.store = ParticleStore(
        states, np.full(n, 1.0 / n), ctx.store.tags.copy(), ctx.store.capacity
    )


def _ring_exchange(ctx: FilterContext, ratio: float) -> int:
    """Send ceil(ratio * n_local) random particles to the next ring neighbor,
    receive the same count from the previous one. Returns particles sent."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"exchange ratio must be in [0, 1], got {ratio}")
    if ctx.size == 1 or ratio == 0.0:
        return 0
    n_local = ctx.store.count
    k = math.ceil(ratio * n_local)
    if k == 0:
        return 0
    nxt, prv = ctx.ring.neighbors(ctx.rank)
    sel = np.sort(ctx.rng.gen.choice(n_local, size=k, replace=False))
    handle = ctx.endpoint.send_nonblocking(nxt, EXCHANGE_TAG, ctx.store.to_bytes(sel))
    env = ctx.endpoint.receive(source=prv, tag=EXCHANGE_TAG)
    ctx.store.replace(sel, records_from_bytes(env.payload))
    handle.wait()
    return k


def _execute_transfers(ctx: FilterContext, schedule: RouteSchedule) -> None:
    """Run the transfer plan: non-blocking sends from the local tail, then
    blocking receives in schedule order so ingestion is deterministic."""
    handles = []
    for t in schedule:
        if t.src == ctx.rank:
            rec = ctx.store.drop_tail(t.count)
            handles.append(
                ctx.endpoint.send_nonblocking(t.dst, TRANSFER_TAG, rec.tobytes())
            )
    for t in schedule:
        if t.dst == ctx.rank:
            env = ctx.endpoint.receive(source=t.src, tag=TRANSFER_TAG)
            ctx.store.append_records(records_from_bytes(env.payload))
    for h in handles:
        h.wait()


def global_estimate(store: ParticleStore, endpoint) -> StateVector:
    """MMSE state estimate across all ranks from unnormalized weights."""
    local = np.empty(6)
    local[0] = np.sum(store.weights)
    local[1:] = np.sum(store.states * store.weights[:, None], axis=0)
    total = endpoint.allreduce_sum(local)
    if total[0] == 0.0:
        raise AllZeroWeights("global weight mass is zero")
    return StateVector.from_array(total[1:] / total[0])


def rpa_allocate(local_mass: float, n_global: int, endpoint) -> np.ndarray:
    """Largest-remainder apportionment of the resampling budget by weight mass.

    Every rank computes the identical allocation from the gathered masses.
    Remainder seats go to the largest fractional parts, positive-mass ranks
    first, ties broken by ascending rank.
    """
    masses = endpoint.allgather(np.array([float(local_mass)]))[:, 0]
    total = float(np.sum(masses))
    if total <= 0.0:
        raise AllZeroWeights("all ranks report zero weight mass")
    shares = n_global * (masses / total)
    base = np.floor(shares).astype(np.int64)
    rem = n_global - int(base.sum())
    frac = shares - base
    order = np.lexsort((np.arange(len(masses)), masses <= 0, -frac))
    alloc = base.copy()
    alloc[order[:rem]] += 1
    return alloc


def serial_step(ctx: FilterContext, frame) -> StepInfo:
    """One frame of plain SIR on a single rank."""
    _, total, _ = _sis_and_moments(ctx, frame)
    neff = float(total[0] * total[0] / total[1])
    estimate = total[2:] / total[0]
    ctx.store.weights = ctx.store.weights / total[0]
    resampled = neff < ctx.threshold_ratio * ctx.n_global
    if resampled:
        ctx.store = _resample_local(
            ctx.store, ctx.n_global, ctx.rng, 1.0 / ctx.n_global
        )
    return StepInfo(
        frame=ctx.frame_index,
        neff_global=neff,
        estimate=estimate,
        resampled=resampled,
        links=0,
        particles_moved=0,
        counts=_gather_counts(ctx),
    )


def _rna_body(ctx: FilterContext, local, total, ratio: float) -> StepInfo:
    neff = float(total[0] * total[0] / total[1])
    estimate = total[2:] / total[0]
    n_local = ctx.store.count
    resampled = False
    reinitialized = False
    if local[0] == 0.0:
        _reinit_rank(ctx)
        reinitialized = True
    else:
        ctx.store.weights = ctx.store.weights / local[0]
        local_neff = float(local[0] * local[0] / local[1])
        resampled = local_neff < ctx.threshold_ratio * n_local
        if resampled:
            ctx.store = _resample_local(ctx.store, n_local, ctx.rng, 1.0 / n_local)
    sent = _ring_exchange(ctx, ratio)
    counts = _gather_counts(ctx)
    return StepInfo(
        frame=ctx.frame_index,
        neff_global=neff,
        estimate=estimate,
        resampled=resampled,
        links=ctx.size if sent else 0,
        particles_moved=sent * ctx.size,
        counts=counts,
        exchange_ratio=ratio,
        reinitialized=reinitialized,
    )


def rna_step(ctx: FilterContext, frame) -> StepInfo:
    """Fixed-allocation step: local resample to N/P, then ring exchange.

    Every rank holds exactly N/P particles before and after. With P=1 the ring
    has no neighbor, no exchange happens, and the step reduces to serial SIR.
    """
    local, total, _ = _sis_and_moments(ctx, frame)
    return _rna_body(ctx, local, total, ctx.exchange_ratio)


def arna_ratio(tracking_fraction: float, r_min: float, r_max: float) -> float:
    """Exchange ratio interpolated by the fraction of tracking ranks:
    r_max when nothing tracks, r_min when everything does."""
    if not 0.0 <= tracking_fraction <= 1.0:
        raise ValueError("tracking fraction must be in [0, 1]")
    return r_max * (1.0 - tracking_fraction) + r_min * tracking_fraction


def arna_step(ctx: FilterContext, frame) -> StepInfo:
    """Adaptive rna: exchange ratio interpolates from r_max (nobody tracking)
    down to r_min (everybody tracking); the ring order is redrawn from the
    shared stream whenever no rank tracks, so all ranks stay in lockstep."""
    local, total, local_max = _sis_and_moments(ctx, frame)
    mine = 1.0 if local_max >= ctx.tau_track else 0.0
    flags = ctx.endpoint.allgather(np.array([mine]))[:, 0]
    status = TrackingStatus(flags > 0.5)
    f = status.fraction
    ratio = arna_ratio(f, ctx.r_min, ctx.r_max)
    if status.count == 0:
        ctx.ring = ctx.ring.shuffled(ctx.shared_rng)
    info = _rna_body(ctx, local, total, ratio)
    info.tracking_count = status.count
    return info


def rpa_step(ctx: FilterContext, frame) -> StepInfo:
    """Proportional-allocation step with scheduler-routed rebalancing.

    When the global N_eff trips the threshold, each rank resamples its share
    of the global budget (proportional to local weight mass), the resulting
    counts are classified, and the configured scheduler's plan is executed.
    gs/sgs leave every rank at its exact target; lgs may leave residual
    imbalance, which is reported.
    """
    local, total, _ = _sis_and_moments(ctx, frame)
    neff = float(total[0] * total[0] / total[1])
    estimate = total[2:] / total[0]
    ctx.store.weights = ctx.store.weights / total[0]
    resampled = neff < ctx.threshold_ratio * ctx.n_global
    links = 0
    moved = 0
    residual = 0
    schedule_rows: list = []
    if resampled:
        mass = float(np.sum(ctx.store.weights))
        alloc = rpa_allocate(mass, ctx.n_global, ctx.endpoint)
        n_new = int(alloc[ctx.rank])
        if n_new == 0:
            ctx.store = ParticleStore.empty(ctx.store.capacity)
        else:
            ctx.store = _resample_local(ctx.store, n_new, ctx.rng, 1.0 / ctx.n_global)
        report = _gather_counts(ctx)
        schedule = SCHEDULERS[ctx.scheduler](classify(report))
        _execute_transfers(ctx, schedule)
        links = schedule.link_count
        moved = schedule.total_moved
        after = schedule.apply(report)
        residual = int(
            np.sum(np.maximum(0, after - target_loads(ctx.n_global, ctx.size)))
        )
        schedule_rows = schedule.csv_rows(ctx.frame_index)
    counts = _gather_counts(ctx)
    return StepInfo(
        frame=ctx.frame_index,
        neff_global=neff,
        estimate=estimate,
        resampled=resampled,
        links=links,
        particles_moved=moved,
        counts=counts,
        residual_imbalance=residual,
        schedule_rows=schedule_rows,
    )


_STEPS = {
    "serial": serial_step,
    "rna": rna_step,
    "arna": arna_step,
    "rpa": rpa_step,
}


def run_filter(ctx: FilterContext, frames, timings: list | None = None) -> list:
    """Run the configured algorithm over a frame sequence.

    Checks particle conservation after every frame: the global count must stay
    exactly N, and rna/arna ranks must stay at exactly N/P. When `timings` is
    given, per-frame wall-clock seconds are appended to it (rank-local; the
    deterministic StepInfo records never contain timing).
    """
    step = _STEPS[ctx.algo]
    infos = []
    for k, frame in enumerate(frames):
        ctx.frame_index = k
        t0 = time.perf_counter()
        info = step(ctx, frame)
        if timings is not None:
            timings.append(time.perf_counter() - t0)
        if int(info.counts.sum()) != ctx.n_global:
            raise PpfError(
                f"frame {k}: global count {int(info.counts.sum())} != {ctx.n_global}"
            )
        if ctx.algo in ("rna", "arna") and ctx.store.count * ctx.size != ctx.n_global:
            raise PpfError(f"frame {k}: rank count drifted from N/P")
        infos.append(info)
    return infos
