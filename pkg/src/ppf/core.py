"""Particle containers, weight bookkeeping, resampling primitives and state estimates.

Particles carry a 5-component state (x, y, vx, vy, intensity), a linear
weight and an integer tag. A particle serializes to exactly 52 bytes:
six little-endian float64 values (state plus weight) and one int32 tag.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AllZeroWeights, InvalidCount, NotNormalized

STATE_DIM = 5

# Wire/record layout shared with the transport module. Packed, not aligned.
PARTICLE_RECORD = np.dtype(
    [("state", "<f8", (STATE_DIM,)), ("weight", "<f8"), ("tag", "<i4")]
)
PARTICLE_BYTES = PARTICLE_RECORD.itemsize  # 52

# |sum(w) - 1| tolerance for operations that require normalized weights.
NORMALIZED_ATOL = 1e-9

# Stream-id conventions. Rank streams use the rank id directly; auxiliary
# streams live far above any plausible rank count.
STREAM_MOVIE = 1 << 32
STREAM_RING = (1 << 32) + 1
STREAM_CALIB = (1 << 32) + 2
STREAM_REINIT_BASE = 1 << 33


class RngStream:
    """Counter-based random stream keyed by (seed, stream_id).

    Identical (seed, stream_id) pairs reproduce identical draw sequences;
    distinct stream ids give statistically independent streams, which is how
    ranks and auxiliary generators (movie synthesis, ring shuffles) stay
    decoupled yet reproducible.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        self.gen = np.random.Generator(np.random.Philox(key=key))

    def spawn(self, stream_id: int) -> "RngStream":
        """New independent stream under the same seed."""
        return RngStream(self.seed, stream_id)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"


@dataclass(frozen=True)
class StateVector:
    """Object state: position (pixels), velocity (pixels/frame), intensity."""

    x_hat: float
    y_hat: float
    vx: float
    vy: float
    i0: float

    def __post_init__(self):
        arr = self.as_array()
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"state components must be finite, got {arr}")
        if self.i0 < 0:
            raise ValueError(f"intensity must be nonnegative, got {self.i0}")

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.x_hat, self.y_hat, self.vx, self.vy, self.i0], dtype=np.float64
        )

    @classmethod
    def from_array(cls, arr) -> "StateVector":
        x, y, vx, vy, i0 = (float(v) for v in arr)
        return cls(x, y, vx, vy, i0)


@dataclass(frozen=True)
class Particle:
    """One weighted sample with an identity tag."""

    state: StateVector
    weight: float
    tag: int = 0

    def __post_init__(self):
        if not np.isfinite(self.weight) or self.weight < 0:
            raise ValueError(f"weight must be finite and >= 0, got {self.weight}")

    def to_bytes(self) -> bytes:
        rec = np.zeros(1, dtype=PARTICLE_RECORD)
        rec["state"][0] = self.state.as_array()
        rec["weight"][0] = self.weight
        rec["tag"][0] = self.tag
        return rec.tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Particle":
        rec = np.frombuffer(buf, dtype=PARTICLE_RECORD, count=1)
        return cls(
            state=StateVector.from_array(rec["state"][0]),
            weight=float(rec["weight"][0]),
            tag=int(rec["tag"][0]),
        )


class ParticleStore:
    """Contiguous particle collection for one rank (structure of arrays).

    states is (n, 5) float64, weights (n,) float64, tags (n,) int32. The
    store is single-writer: one execution context mutates it, any number may
    read concurrently.
    """

    def __init__(self, states, weights, tags=None, capacity=None):
        self.states = np.ascontiguousarray(states, dtype=np.float64)
        self.weights = np.asarray(weights, dtype=np.float64)
        if self.states.ndim != 2 or self.states.shape[1] != STATE_DIM:
            raise ValueError(f"states must be (n, {STATE_DIM})")
        n = self.states.shape[0]
        if self.weights.shape != (n,):
            raise ValueError("weights length must match states")
        if np.any(self.weights < 0) or not np.all(np.isfinite(self.weights)):
            raise ValueError("weights must be finite and nonnegative")
        if tags is None:
            tags = np.arange(n, dtype=np.int32)
        self.tags = np.asarray(tags, dtype=np.int32)
        if self.tags.shape != (n,):
            raise ValueError("tags length must match states")
        self.capacity = int(capacity) if capacity is not None else n
        if n > self.capacity:
            raise ValueError(f"count {n} exceeds capacity {self.capacity}")

    @classmethod
    def empty(cls, capacity: int) -> "ParticleStore":
        return cls(
            np.zeros((0, STATE_DIM)), np.zeros(0), np.zeros(0, np.int32), capacity
        )

    @classmethod
    def from_particles(cls, particles, capacity=None) -> "ParticleStore":
        states = np.array([p.state.as_array() for p in particles], dtype=np.float64)
        states = states.reshape(len(particles), STATE_DIM)
        weights = np.array([p.weight for p in particles], dtype=np.float64)
        tags = np.array([p.tag for p in particles], dtype=np.int32)
        return cls(states, weights, tags, capacity)

    @property
    def count(self) -> int:
        return self.states.shape[0]

    def __len__(self) -> int:
        return self.count

    def particle(self, i: int) -> Particle:
        return Particle(
            state=StateVector.from_array(self.states[i]),
            weight=float(self.weights[i]),
            tag=int(self.tags[i]),
        )

    def copy(self) -> "ParticleStore":
        return ParticleStore(
            self.states.copy(), self.weights.copy(), self.tags.copy(), self.capacity
        )

    def take(self, indices) -> "ParticleStore":
        """New store holding the selected particles (ancestors keep tags)."""
        idx = np.asarray(indices)
        return ParticleStore(
            self.states[idx],
            self.weights[idx],
            self.tags[idx],
            max(self.capacity, len(idx)),
        )

    def to_records(self, indices=None) -> np.ndarray:
        idx = slice(None) if indices is None else np.asarray(indices)
        rec = np.zeros(self.states[idx].shape[0], dtype=PARTICLE_RECORD)
        rec["state"] = self.states[idx]
        rec["weight"] = self.weights[idx]
        rec["tag"] = self.tags[idx]
        return rec

    def to_bytes(self, indices=None) -> bytes:
        """52-byte-per-particle wire image (little endian)."""
        return self.to_records(indices).tobytes()

    @classmethod
    def from_bytes(cls, buf, capacity=None) -> "ParticleStore":
        rec = records_from_bytes(buf)
        return cls(
            rec["state"].copy(), rec["weight"].copy(), rec["tag"].copy(), capacity
        )

    def replace(self, indices, records: np.ndarray) -> None:
        """Overwrite the particles at `indices` with incoming records."""
        idx = np.asarray(indices)
        if len(idx) != len(records):
            raise ValueError("index/record count mismatch")
        self.states[idx] = records["state"]
        self.weights[idx] = records["weight"]
        self.tags[idx] = records["tag"]

    def append_records(self, records: np.ndarray) -> None:
        n_new = self.count + len(records)
        if n_new > self.capacity:
            raise ValueError(f"append exceeds capacity {self.capacity}")
        self.states = np.concatenate([self.states, records["state"]])
        self.weights = np.concatenate([self.weights, records["weight"]])
        self.tags = np.concatenate([self.tags, records["tag"].astype(np.int32)])

    def drop_tail(self, n: int) -> np.ndarray:
        """Remove and return the last n particles as records."""
        if n > self.count:
            raise ValueError("cannot drop more particles than held")
        rec = self.to_records(np.arange(self.count - n, self.count))
        self.states = self.states[: self.count - n]
        self.weights = self.weights[: len(self.states)]
        self.tags = self.tags[: len(self.states)]
        return rec


def records_from_bytes(buf) -> np.ndarray:
    if len(buf) % PARTICLE_BYTES != 0:
        raise ValueError(f"payload length {len(buf)} not a multiple of {PARTICLE_BYTES}")
    return np.frombuffer(buf, dtype=PARTICLE_RECORD)


def _require_normalized(weights: np.ndarray) -> None:
    total = float(np.sum(weights))
    if abs(total - 1.0) > NORMALIZED_ATOL:
        raise NotNormalized(f"weights sum to {total!r}, expected 1")


def normalize_weights(store: ParticleStore) -> ParticleStore:
    """Scale weights to sum to one (within 1e-12). Order is preserved.

    Raises AllZeroWeights when the total mass is zero, which signals total
    degeneracy: the caller must reinitialize rather than continue.
    """
    total = float(np.sum(store.weights))
    if total == 0.0:
        raise AllZeroWeights("cannot normalize: all weights are zero")
    store.weights = store.weights / total
    return store


def effective_sample_size(store: ParticleStore) -> float:
    """N_eff = 1 / sum(w^2) for normalized weights; lies in [1, N]."""
    _require_normalized(store.weights)
    return 1.0 / float(np.sum(store.weights * store.weights))


def systematic_indices(weights: np.ndarray, n_out: int, phase: float) -> np.ndarray:
    """Ancestor indices for systematic resampling with phase in [0, 1).

    Positions (phase + i) / n_out stride the cumulative weight evenly, so the
    multiplicity of index l stays within +-1 of n_out * w_l deterministically.
    """
    c = np.cumsum(weights)
    total = c[-1]
    positions = (phase + np.arange(n_out, dtype=np.float64)) / n_out * total
    idx = np.searchsorted(c, positions, side="right")
    return np.minimum(idx, len(weights) - 1)


def systematic_resample(store: ParticleStore, rng: RngStream, n_out: int) -> ParticleStore:
    """Draw n_out particles by systematic resampling; weights reset to 1/n_out."""
    if n_out < 1:
        raise InvalidCount(f"n_out must be >= 1, got {n_out}")
    _require_normalized(store.weights)
    phase = float(rng.gen.uniform())
    idx = systematic_indices(store.weights, n_out, phase)
    out = store.take(idx)
    out.weights = np.full(n_out, 1.0 / n_out)
    return out


def multinomial_resample(store: ParticleStore, rng: RngStream, n_out: int) -> ParticleStore:
    """Draw n_out particles i.i.d. by weight; weights reset to 1/n_out."""
    if n_out < 1:
        raise InvalidCount(f"n_out must be >= 1, got {n_out}")
    _require_normalized(store.weights)
    p = store.weights / float(np.sum(store.weights))
    idx = rng.gen.choice(store.count, size=n_out, p=p)
    out = store.take(idx)
    out.weights = np.full(n_out, 1.0 / n_out)
    return out


def mmse_estimate(store: ParticleStore) -> StateVector:
    """Posterior-mean state: the weight-weighted mean of all components."""
    _require_normalized(store.weights)
    mean = np.sum(store.states * store.weights[:, None], axis=0)
    return StateVector.from_array(mean)
