"""Experiment driver: configuration, movie synthesis, filter runs, metrics.

A run generates (or loads) a synthetic movie, initializes particles uniformly
at random, runs the selected algorithm for every frame across P ranks and T
threads, and writes plot-ready CSVs. Estimates, effective sample sizes and
particle counts are identical for repeated runs with the same seed and across
the in-process and TCP transports; per-frame wall-clock times go to a separate
timings file so the metrics and trajectory CSVs are byte-reproducible.
"""

from __future__ import annotations

import dataclasses
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import (
    PARTICLE_BYTES,
    ParticleStore,
    RngStream,
    STREAM_CALIB,
    STREAM_MOVIE,
    STREAM_REINIT_BASE,
    STREAM_RING,
)
from .dlb import target_loads
from .dra import FilterContext, RingTopology, run_filter
from .errors import LengthMismatch
from .likelihood import WeightEvaluator
from .models import (
    DynamicsParams,
    GroundTruth,
    Movie,
    ObservationParams,
    generate_movie,
    log_likelihood,
    render_frame,
    save_movie,
)
from .transport import make_group, parse_hosts_file

ALGOS = ("serial", "rna", "arna", "rpa")
SCHEDULER_NAMES = ("gs", "sgs", "lgs")
TRANSPORTS = ("inproc", "tcp")


@dataclass
class RunConfig:
    """Everything a single experiment needs. Defaults follow the benchmark
    scenario: 512x512 frames, 50-frame movies, SNR 2, sigma_psf 1.16 px."""

    algo: str = "serial"
    scheduler: str = "sgs"
    ranks: int = 1
    threads: int = 1
    particles: int = 10_000
    frames: int = 50
    width: int = 512
    height: int = 512
    snr: float = 2.0
    sigma_psf: float = 1.16
    exchange_ratio: float = 0.1
    pcsir: bool = False
    transport: str = "inproc"
    hosts: str | None = None
    seed: int = 1
    repeats: int = 20
    out_dir: str | None = None
    # scenario knobs
    n_objects: int = 1
    i0: float = 10.0
    i_bg: float = 1.0
    sigma_xi: float | None = None  # default: the movie's noise std
    init_radius: float | None = None  # None: uniform over the whole image
    init_speed: float = 1.0
    init_i0_spread: float = 0.1  # i0 init range: (1 +- spread) * i0
    q_pos: float = 0.5
    q_vel: float = 0.2
    q_int: float | None = None  # default: 0.05 * i0
    movie_q_pos: float | None = None  # generator dynamics; default: same as filter
    movie_q_vel: float | None = None
    object_speed_min: float = 0.3
    object_speed_max: float = 0.8
    threshold_ratio: float = 0.5
    r_min: float = 0.1
    r_max: float = 0.5
    tau_track: float | None = None

    def validate(self) -> "RunConfig":
        if self.algo not in ALGOS:
            raise ValueError(f"algo must be one of {ALGOS}")
        if self.scheduler not in SCHEDULER_NAMES:
            raise ValueError(f"scheduler must be one of {SCHEDULER_NAMES}")
        if self.transport not in TRANSPORTS:
            raise ValueError(f"transport must be one of {TRANSPORTS}")
        if self.ranks < 1 or self.threads < 1 or self.frames < 1:
            raise ValueError("ranks, threads and frames must be >= 1")
        if self.particles < self.ranks:
            raise ValueError("need at least one particle per rank")
        if self.algo == "serial" and self.ranks != 1:
            raise ValueError("serial runs use exactly one rank")
        if self.algo in ("rna", "arna") and self.particles % self.ranks != 0:
            raise ValueError("rna/arna require ranks to divide particles")
        if self.snr <= 0 or self.sigma_psf <= 0:
            raise ValueError("snr and sigma_psf must be > 0")
        if not 0.0 <= self.exchange_ratio <= 1.0:
            raise ValueError("exchange ratio must be in [0, 1]")
        return self

    @property
    def sigma_noise(self) -> float:
        return self.i0 / self.snr

    def obs_params(self) -> ObservationParams:
        sigma_xi = self.sigma_xi if self.sigma_xi is not None else self.sigma_noise
        return ObservationParams(
            sigma_psf=self.sigma_psf, sigma_xi=sigma_xi, i_bg=self.i_bg
        )

    def dyn_params(self) -> DynamicsParams:
        q_int = self.q_int if self.q_int is not None else 0.05 * self.i0
        return DynamicsParams(q_pos=self.q_pos, q_vel=self.q_vel, q_int=q_int)

    def movie_dyn_params(self) -> DynamicsParams:
        """Dynamics used to synthesize trajectories (may be smoother than the
        filter's model; defaults to the same values)."""
        q_int = self.q_int if self.q_int is not None else 0.05 * self.i0
        q_pos = self.movie_q_pos if self.movie_q_pos is not None else self.q_pos
        q_vel = self.movie_q_vel if self.movie_q_vel is not None else self.q_vel
        return DynamicsParams(q_pos=q_pos, q_vel=q_vel, q_int=q_int)

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)


@dataclass
class MetricsRow:
    """One frame of the run log, plus wall-clock milliseconds."""

    frame: int
    algo: str
    scheduler: str
    ranks: int
    threads: int
    neff_global: float
    links: int
    particles_moved: int
    est_x: float
    est_y: float
    rmse_running: float
    wall_ms: float


METRICS_HEADER = (
    "frame,algo,scheduler,ranks,threads,neff_global,links,"
    "particles_moved,est_x,est_y,rmse_running"
)


@dataclass
class ExperimentResult:
    config: RunConfig
    infos: list
    rows: list
    estimates: np.ndarray
    truth_xy: np.ndarray
    errors_px: np.ndarray
    rmse: float
    counts: np.ndarray
    wall_ms: np.ndarray
    generate_s: float
    filter_s: float
    paths: dict = field(default_factory=dict)


def memory_footprint(n_particles: int) -> int:
    """Particle memory in bytes: 52 per particle."""
    if n_particles < 0:
        raise ValueError("particle count must be >= 0")
    return n_particles * PARTICLE_BYTES


def compute_rmse(estimates, truth_xy) -> float:
    """Root-mean-square position error in pixels over paired frames."""
    est = np.asarray(estimates, dtype=np.float64)
    tru = np.asarray(truth_xy, dtype=np.float64)
    if len(est) != len(tru):
        raise LengthMismatch(f"{len(est)} estimates vs {len(tru)} truth frames")
    err2 = np.sum((est[:, :2] - tru[:, :2]) ** 2, axis=1)
    return float(np.sqrt(np.mean(err2)))


def calibrate_tau(cfg: RunConfig, n_samples: int = 1000) -> float:
    """Tracking threshold for arna: the 99th percentile of log-likelihoods of
    typical-intensity particles on an object-free noisy frame. A rank whose
    best particle beats this bar is counted as tracking."""
    obs = cfg.obs_params()
    rng = RngStream(cfg.seed, STREAM_CALIB)
    empty = GroundTruth(
        np.zeros((1, 0, 2)), np.zeros((1, 0)), cfg.width, cfg.height
    )
    frame = render_frame(empty, 0, obs, cfg.snr, rng, i0_ref=cfg.i0)
    margin = obs.kernel_halfwidth + 1
    xs = rng.gen.uniform(margin, cfg.width - margin, n_samples)
    ys = rng.gen.uniform(margin, cfg.height - margin, n_samples)
    lls = np.empty(n_samples)
    for i in range(n_samples):
        from .core import StateVector

        lls[i] = log_likelihood(
            frame, StateVector(xs[i], ys[i], 0.0, 0.0, cfg.i0), obs
        )
    return float(np.percentile(lls, 99.0))


def _init_store(
    cfg: RunConfig,
    truth: GroundTruth,
    n_local: int,
    tag_offset: int,
    stream: RngStream,
) -> ParticleStore:
    """Uniform-at-random initialization of one rank's particles.

    With init_radius set, positions are drawn uniformly from a box of that
    half-width around the first true object position (the desk-scale stand-in
    for cluster-scale particle densities); otherwise from the whole image.
    """
    g = stream.gen
    if cfg.init_radius is not None and truth.n_objects > 0:
        cx, cy = truth.positions[0, 0]
        r = float(cfg.init_radius)
        lo_x, hi_x = max(0.0, cx - r), min(float(cfg.width), cx + r)
        lo_y, hi_y = max(0.0, cy - r), min(float(cfg.height), cy + r)
    else:
        lo_x, hi_x = 0.0, float(cfg.width)
        lo_y, hi_y = 0.0, float(cfg.height)
    states = np.empty((n_local, 5))
    states[:, 0] = g.uniform(lo_x, hi_x, n_local)
    states[:, 1] = g.uniform(lo_y, hi_y, n_local)
    states[:, 2] = g.uniform(-cfg.init_speed, cfg.init_speed, n_local)
    states[:, 3] = g.uniform(-cfg.init_speed, cfg.init_speed, n_local)
    lo_i = (1.0 - cfg.init_i0_spread) * cfg.i0
    hi_i = (1.0 + cfg.init_i0_spread) * cfg.i0
    states[:, 4] = g.uniform(lo_i, hi_i, n_local)
    if cfg.algo in ("rna", "arna"):
        w0 = 1.0 / n_local
    else:
        w0 = 1.0 / cfg.particles
    tags = np.arange(tag_offset, tag_offset + n_local, dtype=np.int32)
    return ParticleStore(
        states, np.full(n_local, w0), tags, capacity=cfg.particles
    )


def _rank_worker(cfg, rank, movie, truth, endpoint, tau, out, failures):
    evaluator = None
    try:
        splits = target_loads(cfg.particles, cfg.ranks)
        stream = RngStream(cfg.seed, rank)
        store = _init_store(
            cfg, truth, int(splits[rank]), int(np.sum(splits[:rank])), stream
        )
        evaluator = WeightEvaluator(cfg.obs_params(), cfg.threads)
        ctx = FilterContext(
            rank=rank,
            endpoint=endpoint,
            store=store,
            obs=cfg.obs_params(),
            dyn=cfg.dyn_params(),
            rng=stream,
            evaluator=evaluator,
            width=cfg.width,
            height=cfg.height,
            n_global=cfg.particles,
            algo=cfg.algo,
            scheduler=cfg.scheduler,
            threshold_ratio=cfg.threshold_ratio,
            exchange_ratio=cfg.exchange_ratio,
            pcsir=cfg.pcsir,
            tau_track=tau if tau is not None else -np.inf,
            r_min=cfg.r_min,
            r_max=cfg.r_max,
            ring=RingTopology.identity(cfg.ranks),
            shared_rng=RngStream(cfg.seed, STREAM_RING),
            reinit_rng=RngStream(cfg.seed, STREAM_REINIT_BASE + rank),
            i0_init=cfg.i0,
            init_speed=cfg.init_speed,
        )
        timings = [] if rank == 0 else None
        infos = run_filter(ctx, movie.frames, timings=timings)
        endpoint.barrier()
        if rank == 0:
            out["infos"] = infos
            out["wall_s"] = timings
    except Exception as err:  # surface on the main thread
        failures.append((rank, err))
    finally:
        if evaluator is not None:
            evaluator.close()


def run_experiment(
    cfg: RunConfig,
    movie: Movie | None = None,
    truth: GroundTruth | None = None,
) -> ExperimentResult:
    """Run one experiment and return (and optionally write) its metrics."""
    cfg.validate()
    t0 = time.perf_counter()
    if movie is None or truth is None:
        movie_rng = RngStream(cfg.seed, STREAM_MOVIE)
        movie, truth = generate_movie(
            cfg.frames,
            cfg.n_objects,
            cfg.width,
            cfg.height,
            cfg.obs_params(),
            cfg.movie_dyn_params(),
            cfg.snr,
            movie_rng,
            i0=cfg.i0,
            speed_range=(cfg.object_speed_min, cfg.object_speed_max),
        )
    generate_s = time.perf_counter() - t0

    tau = cfg.tau_track
    if cfg.algo == "arna" and tau is None:
        tau = calibrate_tau(cfg)

    hosts = parse_hosts_file(cfg.hosts) if cfg.hosts else None
    group = make_group(cfg.transport, cfg.ranks, hosts=hosts)
    out: dict = {}
    failures: list = []
    t1 = time.perf_counter()
    try:
        if cfg.ranks == 1:
            _rank_worker(cfg, 0, movie, truth, group.endpoint(0), tau, out, failures)
        else:
            workers = [
                threading.Thread(
                    target=_rank_worker,
                    args=(cfg, r, movie, truth, group.endpoint(r), tau, out, failures),
                )
                for r in range(cfg.ranks)
            ]
            for w in workers:
                w.start()
            # One failed rank must not leave the others blocked in a
            # collective: close the group so their receives raise.
            while any(w.is_alive() for w in workers):
                for w in workers:
                    w.join(timeout=0.2)
                if failures and any(w.is_alive() for w in workers):
                    group.close()
            for w in workers:
                w.join()
    finally:
        group.close()
    filter_s = time.perf_counter() - t1
    if failures:
        rank, err = failures[0]
        raise RuntimeError(f"rank {rank} failed: {err!r}") from err

    infos = out["infos"]
    estimates = np.stack([i.estimate for i in infos])
    truth_xy = truth.positions[:, 0, :] if truth.n_objects else np.zeros((cfg.frames, 2))
    errors_px = np.sqrt(np.sum((estimates[:, :2] - truth_xy) ** 2, axis=1))
    running = np.sqrt(np.cumsum(errors_px**2) / np.arange(1, len(errors_px) + 1))
    rmse = compute_rmse(estimates, truth_xy)
    wall_ms = np.array(out["wall_s"]) * 1000.0
    scheduler = cfg.scheduler if cfg.algo == "rpa" else ""
    rows = [
        MetricsRow(
            frame=i.frame,
            algo=cfg.algo,
            scheduler=scheduler,
            ranks=cfg.ranks,
            threads=cfg.threads,
            neff_global=i.neff_global,
            links=i.links,
            particles_moved=i.particles_moved,
            est_x=float(i.estimate[0]),
            est_y=float(i.estimate[1]),
            rmse_running=float(running[i.frame]),
            wall_ms=float(wall_ms[i.frame]),
        )
        for i in infos
    ]
    result = ExperimentResult(
        config=cfg,
        infos=infos,
        rows=rows,
        estimates=estimates,
        truth_xy=truth_xy,
        errors_px=errors_px,
        rmse=rmse,
        counts=np.stack([i.counts for i in infos]),
        wall_ms=wall_ms,
        generate_s=generate_s,
        filter_s=filter_s,
    )
    if cfg.out_dir:
        result.paths = write_outputs(result, movie, truth)
    return result


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_outputs(result: ExperimentResult, movie, truth) -> dict:
    """Write metrics/trajectory/timings (and rpa schedules) plus the movie."""
    out = Path(result.config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = save_movie(movie, truth, out)

    metrics = out / "metrics.csv"
    with open(metrics, "w") as fh:
        fh.write(METRICS_HEADER + "\n")
        for r in result.rows:
            fh.write(
                f"{r.frame},{r.algo},{r.scheduler},{r.ranks},{r.threads},"
                f"{_fmt(r.neff_global)},{r.links},{r.particles_moved},"
                f"{_fmt(r.est_x)},{_fmt(r.est_y)},{_fmt(r.rmse_running)}\n"
            )
    paths["metrics"] = metrics

    timings = out / "timings.csv"
    with open(timings, "w") as fh:
        fh.write("frame,wall_ms\n")
        for r in result.rows:
            fh.write(f"{r.frame},{_fmt(r.wall_ms)}\n")
    paths["timings"] = timings

    trajectory = out / "trajectory.csv"
    with open(trajectory, "w") as fh:
        fh.write("frame,x,y,vx,vy,i0\n")
        for k, est in enumerate(result.estimates):
            fh.write(f"{k}," + ",".join(_fmt(v) for v in est) + "\n")
    paths["trajectory"] = trajectory

    schedule_rows = [row for i in result.infos for row in i.schedule_rows]
    if schedule_rows:
        schedule = out / "schedule.csv"
        with open(schedule, "w") as fh:
            fh.write("step,from,to,count\n")
            for row in schedule_rows:
                fh.write(row + "\n")
        paths["schedule"] = schedule
    return paths


def scaling_sweep(
    base: RunConfig,
    rank_list,
    thread_list,
    mode: str = "strong",
) -> list:
    """Run the experiment on every (ranks, threads) cell and report efficiency.

    Strong scaling keeps the particle count fixed; efficiency is
    t_base * resources_base / (resources * t) with resources = ranks * threads,
    so the baseline cell always reports exactly 1.0. Weak scaling multiplies
    particles by the rank count and reports t_base / t.
    """
    if mode not in ("strong", "weak"):
        raise ValueError("mode must be 'strong' or 'weak'")
    rank_list = list(rank_list)
    if 1 not in rank_list:
        rank_list = [1] + rank_list
    thread_list = list(thread_list)
    movie = truth = None
    rows = []
    base_time = None
    base_res = None
    for ranks in rank_list:
        for threads in thread_list:
            particles = base.particles * (ranks if mode == "weak" else 1)
            cfg = base.replace(
                ranks=ranks, threads=threads, particles=particles, out_dir=None
            )
            cfg.validate()
            if movie is None:
                movie_rng = RngStream(cfg.seed, STREAM_MOVIE)
                movie, truth = generate_movie(
                    cfg.frames,
                    cfg.n_objects,
                    cfg.width,
                    cfg.height,
                    cfg.obs_params(),
                    cfg.movie_dyn_params(),
                    cfg.snr,
                    movie_rng,
                    i0=cfg.i0,
                    speed_range=(cfg.object_speed_min, cfg.object_speed_max),
                )
            res = run_experiment(cfg, movie=movie, truth=truth)
            resources = ranks * threads
            if base_time is None:
                base_time = res.filter_s
                base_res = resources
            if mode == "strong":
                eff = (base_time * base_res) / (resources * res.filter_s)
            else:
                eff = base_time / res.filter_s
            rows.append(
                {
                    "algo": cfg.algo,
                    "scheduler": cfg.scheduler if cfg.algo == "rpa" else "",
                    "mode": mode,
                    "ranks": ranks,
                    "threads": threads,
                    "particles": particles,
                    "frames": cfg.frames,
                    "filter_s": res.filter_s,
                    "efficiency": eff,
                    "rmse": res.rmse,
                }
            )
    if base.out_dir:
        out = Path(base.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "scaling.csv"
        cols = [
            "algo",
            "scheduler",
            "mode",
            "ranks",
            "threads",
            "particles",
            "frames",
            "filter_s",
            "efficiency",
            "rmse",
        ]
        with open(path, "w") as fh:
            fh.write(",".join(cols) + "\n")
            for row in rows:
                fh.write(",".join(_fmt(row[c]) if isinstance(row[c], float) else str(row[c]) for c in cols) + "\n")
    return rows
