"""Command-line driver.

Subcommands:
  run        one experiment (repeated over seeds), writing CSVs per run
  sweep      scaling sweep over rank and thread lists
  gen-movie  synthesize a movie plus ground truth and write it to disk

Every flag can also be set through an environment variable with the PPF_
prefix: dashes become underscores and names are uppercased, so e.g.
PPF_PARTICLES=20000 sets --particles and PPF_SIZE=256x256 sets --size.
Explicit flags win over environment values.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from .core import RngStream, STREAM_MOVIE
from .harness import RunConfig, run_experiment, scaling_sweep
from .models import generate_movie, save_movie

ENV_PREFIX = "PPF_"


def _env(name: str):
    return os.environ.get(ENV_PREFIX + name.replace("-", "_").upper())


def _add(parser, flag, type=str, default=None, help="", action=None):
    """Add an option whose default can come from the environment."""
    name = flag.lstrip("-")
    raw = _env(name)
    if action == "store_true":
        default = (raw or "").lower() in ("1", "true", "yes") if raw is not None else default
        parser.add_argument(flag, action="store_true", default=default, help=help)
        return
    if raw is not None:
        default = type(raw)
    parser.add_argument(flag, type=type, default=default, help=help)


def _size(text: str):
    w, h = text.lower().split("x")
    return int(w), int(h)


def _int_list(text: str):
    return [int(v) for v in text.split(",") if v]


def _add_common(p: argparse.ArgumentParser) -> None:
    _add(p, "--algo", str, "serial", "serial | rna | arna | rpa")
    _add(p, "--scheduler", str, "sgs", "rpa load balancer: gs | sgs | lgs")
    _add(p, "--ranks", int, 1, "message-passing ranks")
    _add(p, "--threads", int, 1, "weight-evaluation threads per rank")
    _add(p, "--particles", int, 10_000, "global particle count")
    _add(p, "--frames", int, 50, "movie length")
    _add(p, "--size", _size, (512, 512), "image size as WxH")
    _add(p, "--snr", float, 2.0, "amplitude signal-to-noise ratio")
    _add(p, "--sigma-psf", float, 1.16, "PSF std in pixels")
    _add(p, "--exchange-ratio", float, 0.1, "rna ring-exchange fraction")
    _add(p, "--pcsir", action="store_true", default=False,
         help="piecewise-constant likelihood (one evaluation per pixel)")
    _add(p, "--transport", str, "inproc", "inproc | tcp")
    _add(p, "--hosts", str, None, "host:port list file for the tcp backend")
    _add(p, "--seed", int, 1, "base random seed")
    _add(p, "--repeats", int, 20, "number of seeds for `run`")
    _add(p, "--out", str, None, "output directory")
    _add(p, "--objects", int, 1, "objects in the synthetic movie")
    _add(p, "--i0", float, 10.0, "object intensity")
    _add(p, "--i-bg", float, 1.0, "background intensity")
    _add(p, "--sigma-xi", float, None, "likelihood peakiness std (default: noise std)")
    _add(p, "--init-radius", float, None,
         "init particles within this box half-width around the object "
         "(default: whole image)")
    _add(p, "--tau-track", float, None, "arna tracking threshold (default: calibrated)")


def _config_from(args) -> RunConfig:
    width, height = args.size
    return RunConfig(
        algo=args.algo,
        scheduler=args.scheduler,
        ranks=args.ranks,
        threads=args.threads,
        particles=args.particles,
        frames=args.frames,
        width=width,
        height=height,
        snr=args.snr,
        sigma_psf=args.sigma_psf,
        exchange_ratio=args.exchange_ratio,
        pcsir=args.pcsir,
        transport=args.transport,
        hosts=args.hosts,
        seed=args.seed,
        repeats=args.repeats,
        out_dir=args.out,
        n_objects=args.objects,
        i0=args.i0,
        i_bg=args.i_bg,
        sigma_xi=args.sigma_xi,
        init_radius=args.init_radius,
        tau_track=args.tau_track,
    ).validate()


def _cmd_run(args) -> int:
    base = _config_from(args)
    rmses = []
    for rep in range(base.repeats):
        seed = base.seed + rep
        out_dir = str(Path(base.out_dir) / f"run_{seed}") if base.out_dir else None
        cfg = base.replace(seed=seed, out_dir=out_dir)
        res = run_experiment(cfg)
        rmses.append(res.rmse)
        print(
            f"seed={seed} algo={cfg.algo} ranks={cfg.ranks} threads={cfg.threads} "
            f"rmse={res.rmse:.4f}px filter={res.filter_s:.2f}s"
        )
    print(f"mean rmse over {len(rmses)} seeds: {np.mean(rmses):.4f}px")
    if base.out_dir:
        path = Path(base.out_dir) / "summary.csv"
        with open(path, "w") as fh:
            fh.write("seed,rmse\n")
            for rep, rmse in enumerate(rmses):
                fh.write(f"{base.seed + rep},{rmse!r}\n")
        print(f"wrote {path}")
    return 0


def _cmd_sweep(args) -> int:
    base = _config_from(args)
    rows = scaling_sweep(base, args.rank_list, args.thread_list, mode=args.mode)
    for row in rows:
        print(
            f"ranks={row['ranks']} threads={row['threads']} "
            f"particles={row['particles']} filter={row['filter_s']:.2f}s "
            f"efficiency={row['efficiency']:.2f}"
        )
    if base.out_dir:
        print(f"wrote {Path(base.out_dir) / 'scaling.csv'}")
    return 0


def _cmd_gen_movie(args) -> int:
    cfg = _config_from(args)
    if not cfg.out_dir:
        print("gen-movie requires --out", file=sys.stderr)
        return 2
    rng = RngStream(cfg.seed, STREAM_MOVIE)
    movie, truth = generate_movie(
        cfg.frames,
        cfg.n_objects,
        cfg.width,
        cfg.height,
        cfg.obs_params(),
        cfg.movie_dyn_params(),
        cfg.snr,
        rng,
        i0=cfg.i0,
        speed_range=(cfg.object_speed_min, cfg.object_speed_max),
    )
    paths = save_movie(movie, truth, cfg.out_dir)
    for name, path in paths.items():
        print(f"wrote {name}: {path}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="ppf", description="parallel particle filtering benchmark harness"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment over several seeds")
    _add_common(p_run)
    p_run.set_defaults(func=_cmd_run)

    p_sweep = sub.add_parser("sweep", help="scaling sweep over ranks and threads")
    _add_common(p_sweep)
    _add(p_sweep, "--rank-list", _int_list, [1, 2], "comma-separated rank counts")
    _add(p_sweep, "--thread-list", _int_list, [1], "comma-separated thread counts")
    _add(p_sweep, "--mode", str, "strong", "strong | weak")
    p_sweep.set_defaults(func=_cmd_sweep)

    p_gen = sub.add_parser("gen-movie", help="write a synthetic movie to disk")
    _add_common(p_gen)
    p_gen.set_defaults(func=_cmd_gen_movie)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
