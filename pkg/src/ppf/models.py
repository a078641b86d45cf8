"""Dynamics model, Gaussian-spot observation model, and synthetic movies.

The tracking target is a diffraction-limited bright spot: its image is a 2D
Gaussian of width sigma_psf on a constant background, and frames are corrupted
by additive Gaussian noise calibrated as sigma_noise = i0 / snr (amplitude SNR,
so SNR 2 corresponds to 6 dB). Objects move with a near-constant-velocity
model and reflect at the image borders.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import RngStream, StateVector, ParticleStore
from .errors import OutOfBounds


@dataclass(frozen=True)
class DynamicsParams:
    """Near-constant-velocity process noise (stds per frame)."""

    q_pos: float = 0.5
    q_vel: float = 0.2
    q_int: float = 0.5
    dt: float = 1.0

    def __post_init__(self):
        if min(self.q_pos, self.q_vel, self.q_int) < 0:
            raise ValueError("noise stds must be >= 0")


@dataclass(frozen=True)
class ObservationParams:
    """Spot appearance and likelihood shape.

    kernel_halfwidth is derived as ceil(3 * sigma_psf): the likelihood sums
    residuals over the (2h+1)^2 pixel window centered on the pixel containing
    the particle, clipped at the image borders.
    """

    sigma_psf: float
    sigma_xi: float
    i_bg: float = 1.0
    kernel_halfwidth: int = field(init=False)

    def __post_init__(self):
        if self.sigma_psf <= 0 or self.sigma_xi <= 0:
            raise ValueError("sigma_psf and sigma_xi must be > 0")
        if self.i_bg < 0:
            raise ValueError("i_bg must be >= 0")
        object.__setattr__(self, "kernel_halfwidth", math.ceil(3.0 * self.sigma_psf))


@dataclass
class Frame:
    """One 2D image; pixels[y, x] is the intensity at integer coordinates."""

    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2 or self.pixels.size == 0:
            raise ValueError("pixels must be a non-empty 2D array")
        if not np.all(np.isfinite(self.pixels)):
            raise ValueError("pixel intensities must be finite")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class GroundTruth:
    """Per-frame object positions and intensities used to render a movie.

    positions is (n_frames, n_objects, 2) as (x, y); intensities is
    (n_frames, n_objects). Velocities are tracked for diagnostics only.
    """

    positions: np.ndarray
    intensities: np.ndarray
    width: int
    height: int
    velocities: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.intensities = np.asarray(self.intensities, dtype=np.float64)
        if self.positions.ndim != 3 or self.positions.shape[2] != 2:
            raise ValueError("positions must be (n_frames, n_objects, 2)")
        if self.positions.shape[:2] != self.intensities.shape:
            raise ValueError("positions/intensities frame count mismatch")

    @property
    def n_frames(self) -> int:
        return self.positions.shape[0]

    @property
    def n_objects(self) -> int:
        return self.positions.shape[1]


@dataclass
class Movie:
    """Rendered frame sequence plus the parameters that produced it."""

    frames: list
    snr: float
    sigma_psf: float
    i_bg: float
    seed: int
    sigma_noise: float

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    @property
    def width(self) -> int:
        return self.frames[0].width

    @property
    def height(self) -> int:
        return self.frames[0].height


def propagate(state: StateVector, params: DynamicsParams, rng: RngStream) -> StateVector:
    """One near-constant-velocity step with additive Gaussian noise.

    Intensity is clamped at zero. With all stds zero this is pure drift:
    position advances by velocity * dt and everything else is unchanged.
    """
    g = rng.gen
    eps_x = g.normal(0.0, params.q_pos)
    eps_y = g.normal(0.0, params.q_pos)
    eps_vx = g.normal(0.0, params.q_vel)
    eps_vy = g.normal(0.0, params.q_vel)
    eps_i = g.normal(0.0, params.q_int)
    return StateVector(
        x_hat=state.x_hat + state.vx * params.dt + eps_x,
        y_hat=state.y_hat + state.vy * params.dt + eps_y,
        vx=state.vx + eps_vx,
        vy=state.vy + eps_vy,
        i0=max(0.0, state.i0 + eps_i),
    )


def propagate_store(store: ParticleStore, params: DynamicsParams, rng: RngStream) -> None:
    """Vectorized propagate over a whole store, in place.

    Draw order is fixed (x, y, vx, vy, i0 blocks) so rank streams stay aligned
    across runs regardless of parameter values.
    """
    n = store.count
    g = rng.gen
    eps_x = g.normal(0.0, params.q_pos, n)
    eps_y = g.normal(0.0, params.q_pos, n)
    eps_vx = g.normal(0.0, params.q_vel, n)
    eps_vy = g.normal(0.0, params.q_vel, n)
    eps_i = g.normal(0.0, params.q_int, n)
    s = store.states
    s[:, 0] += s[:, 2] * params.dt + eps_x
    s[:, 1] += s[:, 3] * params.dt + eps_y
    s[:, 2] += eps_vx
    s[:, 3] += eps_vy
    s[:, 4] = np.maximum(0.0, s[:, 4] + eps_i)


def psf_intensity(x, y, x0, y0, i0, params: ObservationParams):
    """Gaussian spot profile: i0 * exp(-r^2 / (2 sigma_psf^2)) + i_bg."""
    d2 = (x - x0) ** 2 + (y - y0) ** 2
    return i0 * np.exp(-d2 / (2.0 * params.sigma_psf**2)) + params.i_bg


def in_bounds(x: float, y: float, width: int, height: int) -> bool:
    return 0.0 <= x < width and 0.0 <= y < height


def likelihood_window(x_hat: float, y_hat: float, halfwidth: int, width: int, height: int):
    """Pixel window (x0, x1, y0, y1), inclusive, clipped to the image.

    The window is centered on the pixel containing (x_hat, y_hat) so every
    particle in the same pixel shares the same window. That is what lets the
    patch-based evaluator reuse one patch per occupied pixel.
    """
    px = int(np.floor(x_hat))
    py = int(np.floor(y_hat))
    x0 = max(0, px - halfwidth)
    x1 = min(width - 1, px + halfwidth)
    y0 = max(0, py - halfwidth)
    y1 = min(height - 1, py + halfwidth)
    return x0, x1, y0, y1


def log_likelihood(frame: Frame, state: StateVector, params: ObservationParams) -> float:
    """Log of the observation density (up to a constant), from the full frame.

    Returns -(1 / (2 sigma_xi^2)) * sum of squared residuals between the
    frame and the particle's rendered spot over the clipped kernel window.
    Raises OutOfBounds when the particle position is outside the image; the
    caller maps that to weight zero.
    """
    if not in_bounds(state.x_hat, state.y_hat, frame.width, frame.height):
        raise OutOfBounds(f"({state.x_hat}, {state.y_hat}) outside image")
    x0, x1, y0, y1 = likelihood_window(
        state.x_hat, state.y_hat, params.kernel_halfwidth, frame.width, frame.height
    )
    xs = np.arange(x0, x1 + 1, dtype=np.float64)
    ys = np.arange(y0, y1 + 1, dtype=np.float64)
    d2 = (ys[:, None] - state.y_hat) ** 2 + (xs[None, :] - state.x_hat) ** 2
    model = state.i0 * np.exp(-d2 / (2.0 * params.sigma_psf**2)) + params.i_bg
    resid = frame.pixels[y0 : y1 + 1, x0 : x1 + 1] - model
    return float(-np.sum(resid * resid) / (2.0 * params.sigma_xi**2))


def render_ideal(truth: GroundTruth, k: int, params: ObservationParams) -> np.ndarray:
    """Noise-free frame k: superposed spot profiles plus background."""
    ys = np.arange(truth.height, dtype=np.float64)
    xs = np.arange(truth.width, dtype=np.float64)
    img = np.full((truth.height, truth.width), params.i_bg, dtype=np.float64)
    for j in range(truth.n_objects):
        x0, y0 = truth.positions[k, j]
        i0 = truth.intensities[k, j]
        d2 = (ys[:, None] - y0) ** 2 + (xs[None, :] - x0) ** 2
        img += i0 * np.exp(-d2 / (2.0 * params.sigma_psf**2))
    return img


def render_frame(
    truth: GroundTruth,
    k: int,
    params: ObservationParams,
    snr: float,
    rng: RngStream,
    i0_ref: float | None = None,
) -> Frame:
    """Frame k with additive Gaussian noise of std i0_ref / snr, clamped at 0.

    i0_ref defaults to the frame's maximum object intensity. snr = inf gives
    the noiseless image.
    """
    if snr <= 0:
        raise ValueError("snr must be > 0")
    img = render_ideal(truth, k, params)
    if np.isfinite(snr):
        if i0_ref is None:
            i0_ref = float(np.max(truth.intensities[k])) if truth.n_objects else 1.0
        sigma_noise = i0_ref / snr
        img = img + rng.gen.normal(0.0, sigma_noise, img.shape)
    return Frame(np.maximum(img, 0.0))


def _reflect(pos: float, lo: float, hi: float, vel: float):
    """Reflect a coordinate into [lo, hi], flipping velocity on each bounce."""
    while pos < lo or pos > hi:
        if pos < lo:
            pos = 2 * lo - pos
            vel = -vel
        else:
            pos = 2 * hi - pos
            vel = -vel
    return pos, vel


def generate_truth(
    n_frames: int,
    n_objects: int,
    width: int,
    height: int,
    dyn: DynamicsParams,
    rng: RngStream,
    i0: float = 10.0,
    speed_range=(0.3, 0.8),
    margin: float = 20.0,
) -> GroundTruth:
    """Ground-truth trajectories under the dynamics model, reflected at borders."""
    g = rng.gen
    m = min(margin, (min(width, height) - 1) / 4.0)
    positions = np.zeros((n_frames, n_objects, 2))
    velocities = np.zeros((n_frames, n_objects, 2))
    intensities = np.zeros((n_frames, n_objects))
    x = g.uniform(m, width - 1 - m, n_objects)
    y = g.uniform(m, height - 1 - m, n_objects)
    speed = g.uniform(speed_range[0], speed_range[1], n_objects)
    theta = g.uniform(0.0, 2.0 * np.pi, n_objects)
    vx = speed * np.cos(theta)
    vy = speed * np.sin(theta)
    inten = np.full(n_objects, float(i0))
    for k in range(n_frames):
        positions[k, :, 0] = x
        positions[k, :, 1] = y
        velocities[k, :, 0] = vx
        velocities[k, :, 1] = vy
        intensities[k] = inten
        if k == n_frames - 1:
            break
        x = x + vx * dyn.dt + g.normal(0.0, dyn.q_pos, n_objects)
        y = y + vy * dyn.dt + g.normal(0.0, dyn.q_pos, n_objects)
        vx = vx + g.normal(0.0, dyn.q_vel, n_objects)
        vy = vy + g.normal(0.0, dyn.q_vel, n_objects)
        inten = np.maximum(0.0, inten + g.normal(0.0, dyn.q_int, n_objects))
        for j in range(n_objects):
            x[j], vx[j] = _reflect(x[j], 0.0, width - 1.0, vx[j])
            y[j], vy[j] = _reflect(y[j], 0.0, height - 1.0, vy[j])
    return GroundTruth(positions, intensities, width, height, velocities)


def generate_movie(
    n_frames: int,
    n_objects: int,
    width: int,
    height: int,
    params: ObservationParams,
    dyn: DynamicsParams,
    snr: float,
    rng: RngStream,
    i0: float = 10.0,
    speed_range=(0.3, 0.8),
):
    """Synthetic movie plus its exact ground truth.

    All randomness (trajectories, then per-frame noise) comes from the given
    stream, so a fixed seed reproduces the movie bit for bit.
    """
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    truth = generate_truth(
        n_frames, n_objects, width, height, dyn, rng, i0=i0, speed_range=speed_range
    )
    sigma_noise = (i0 / snr) if np.isfinite(snr) else 0.0
    frames = [
        render_frame(truth, k, params, snr, rng, i0_ref=i0) for k in range(n_frames)
    ]
    movie = Movie(
        frames=frames,
        snr=float(snr),
        sigma_psf=params.sigma_psf,
        i_bg=params.i_bg,
        seed=rng.seed,
        sigma_noise=sigma_noise,
    )
    return movie, truth


def save_movie(movie: Movie, truth: GroundTruth, out_dir) -> dict:
    """Write frames as one raw little-endian float32 file plus a JSON sidecar,
    and the ground truth as CSV rows `frame,object,x,y,i0`."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    raw_path = out / "movie.raw"
    with open(raw_path, "wb") as fh:
        for frame in movie.frames:
            fh.write(frame.pixels.astype("<f4").tobytes())
    meta = {
        "width": movie.width,
        "height": movie.height,
        "n_frames": movie.n_frames,
        "snr": movie.snr,
        "sigma_psf": movie.sigma_psf,
        "i_bg": movie.i_bg,
        "seed": movie.seed,
    }
    meta_path = out / "movie.json"
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    truth_path = out / "truth.csv"
    with open(truth_path, "w") as fh:
        fh.write("frame,object,x,y,i0\n")
        for k in range(truth.n_frames):
            for j in range(truth.n_objects):
                x, y = truth.positions[k, j]
                i0 = float(truth.intensities[k, j])
                fh.write(f"{k},{j},{float(x)!r},{float(y)!r},{i0!r}\n")
    return {"raw": raw_path, "meta": meta_path, "truth": truth_path}


def load_movie(in_dir):
    """Inverse of save_movie. Pixel data comes back as float64 frames."""
    src = Path(in_dir)
    meta = json.loads((src / "movie.json").read_text())
    w, h, n = meta["width"], meta["height"], meta["n_frames"]
    raw = np.fromfile(src / "movie.raw", dtype="<f4")
    if raw.size != w * h * n:
        raise ValueError("movie.raw size does not match sidecar dimensions")
    frames = [
        Frame(raw[i * w * h : (i + 1) * w * h].reshape(h, w).astype(np.float64))
        for i in range(n)
    ]
    rows = (src / "truth.csv").read_text().strip().splitlines()[1:]
    n_objects = max(int(r.split(",")[1]) for r in rows) + 1 if rows else 0
    positions = np.zeros((n, n_objects, 2))
    intensities = np.zeros((n, n_objects))
    for r in rows:
        k, j, x, y, i0 = r.split(",")
        positions[int(k), int(j)] = (float(x), float(y))
        intensities[int(k), int(j)] = float(i0)
    truth = GroundTruth(positions, intensities, w, h)
    i0_ref = float(np.max(intensities)) if rows else 1.0
    movie = Movie(
        frames=frames,
        snr=meta["snr"],
        sigma_psf=meta["sigma_psf"],
        i_bg=meta["i_bg"],
        seed=meta["seed"],
        sigma_noise=(i0_ref / meta["snr"]) if meta["snr"] > 0 else 0.0,
    )
    return movie, truth
