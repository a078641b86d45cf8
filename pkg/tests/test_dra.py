import numpy as np
import pytest

from helpers import run_ranks
from ppf.core import ParticleStore, RngStream, StateVector, mmse_estimate
from ppf.core import STREAM_RING, STREAM_REINIT_BASE
from ppf.dra import (
    EXCHANGE_TAG,
    FilterContext,
    RingTopology,
    TrackingStatus,
    arna_ratio,
    arna_step,
    global_estimate,
    rna_step,
    rpa_allocate,
    rpa_step,
    run_filter,
    serial_step,
)
from ppf.errors import AllZeroWeights
from ppf.likelihood import WeightEvaluator
from ppf.models import DynamicsParams, Frame, ObservationParams, render_ideal, GroundTruth

OBS = ObservationParams(sigma_psf=1.16, sigma_xi=5.0, i_bg=1.0)
CALM = DynamicsParams(q_pos=0.05, q_vel=0.01, q_int=0.05)


def object_frame(x, y, i0=10.0, size=64):
    truth = GroundTruth(
        np.array([[[x, y]]]), np.array([[i0]]), size, size
    )
    return Frame(render_ideal(truth, 0, OBS))


def make_ctx(rank, endpoint, store, seed=3, algo="rna", size=64, **kw):
    return FilterContext(
        rank=rank,
        endpoint=endpoint,
        store=store,
        obs=OBS,
        dyn=CALM,
        rng=RngStream(seed, rank),
        evaluator=WeightEvaluator(OBS, 1),
        width=size,
        height=size,
        n_global=kw.pop("n_global", store.count * endpoint.size),
        algo=algo,
        ring=RingTopology.identity(endpoint.size),
        shared_rng=RngStream(seed, STREAM_RING),
        reinit_rng=RngStream(seed, STREAM_REINIT_BASE + rank),
        **kw,
    )


def cloud_store(n, cx, cy, seed, spread=2.0, tag0=0, weight=None, vel_spread=0.0):
    g = np.random.default_rng(seed)
    states = np.zeros((n, 5))
    states[:, 0] = g.uniform(cx - spread, cx + spread, n)
    states[:, 1] = g.uniform(cy - spread, cy + spread, n)
    states[:, 2] = g.uniform(-vel_spread, vel_spread, n)
    states[:, 3] = g.uniform(-vel_spread, vel_spread, n)
    states[:, 4] = 10.0
    w = np.full(n, 1.0 / n if weight is None else weight)
    tags = np.arange(tag0, tag0 + n, dtype=np.int32)
    return ParticleStore(states, w, tags)


class TestRingTopology:
    def test_identity_neighbors(self):
        ring = RingTopology.identity(4)
        assert ring.neighbors(0) == (1, 3)
        assert ring.neighbors(3) == (0, 2)

    def test_two_ranks(self):
        ring = RingTopology.identity(2)
        assert ring.neighbors(0) == (1, 1)

    def test_rejects_non_permutation(self):
        with pytest.raises(ValueError):
            RingTopology(np.array([0, 0, 2]))

    def test_shuffle_is_permutation(self):
        ring = RingTopology.identity(6).shuffled(RngStream(1, STREAM_RING))
        assert sorted(ring.order.tolist()) == list(range(6))


class TestArnaRatio:
    def test_all_tracking_gives_min(self):
        assert arna_ratio(1.0, 0.1, 0.5) == 0.1

    def test_none_tracking_gives_max(self):
        assert arna_ratio(0.0, 0.1, 0.5) == 0.5

    def test_linear_interpolation(self):
        assert arna_ratio(0.5, 0.1, 0.5) == pytest.approx(0.3, rel=1e-12)

    def test_status_counts(self):
        s = TrackingStatus(np.array([True, False, True, True]))
        assert s.count == 3
        assert s.fraction == 0.75


class TestRpaAllocate:
    def test_equal_masses_divisible(self):
        def fn(rank, ep):
            return rpa_allocate(2.5, 400, ep)

        for alloc in run_ranks(4, fn):
            assert np.array_equal(alloc, [100, 100, 100, 100])

    def test_proportional(self):
        masses = [3.0, 1.0]

        def fn(rank, ep):
            return rpa_allocate(masses[rank], 8, ep)

        for alloc in run_ranks(2, fn):
            assert np.array_equal(alloc, [6, 2])

    def test_largest_remainder_ties_to_low_ranks(self):
        def fn(rank, ep):
            return rpa_allocate(1.0, 10, ep)

        for alloc in run_ranks(3, fn):
            assert np.array_equal(alloc, [4, 3, 3])

    def test_sum_preserved_random(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            p = int(rng.integers(2, 9))
            masses = rng.uniform(0, 1, p)
            masses[rng.integers(0, p)] = 0.0
            n = int(rng.integers(p, 100_000))

            def fn(rank, ep):
                return rpa_allocate(masses[rank], n, ep)

            allocs = run_ranks(p, fn)
            assert int(allocs[0].sum()) == n
            for a in allocs[1:]:
                assert np.array_equal(a, allocs[0])

    def test_all_zero_mass_raises(self):
        def fn(rank, ep):
            return rpa_allocate(0.0, 8, ep)

        with pytest.raises(AssertionError, match="AllZeroWeights"):
            run_ranks(2, fn)


class TestGlobalEstimate:
    def test_single_rank_matches_mmse(self):
        store = cloud_store(100, 30, 30, seed=1)

        def fn(rank, ep):
            return global_estimate(store, ep)

        (est,) = run_ranks(1, fn)
        expect = mmse_estimate(store.copy())
        assert np.allclose(est.as_array(), expect.as_array(), rtol=1e-12)

    def test_concatenation_equivalence(self):
        stores = [cloud_store(80, 20 + 5 * r, 25, seed=r) for r in range(4)]
        for r, s in enumerate(stores):
            s.weights = np.random.default_rng(r).uniform(0.1, 1.0, 80)

        def fn(rank, ep):
            return global_estimate(stores[rank], ep)

        results = run_ranks(4, fn)
        merged = ParticleStore(
            np.concatenate([s.states for s in stores]),
            np.concatenate([s.weights for s in stores]),
        )
        merged.weights = merged.weights / merged.weights.sum()
        expect = mmse_estimate(merged)
        for est in results:
            assert np.allclose(est.as_array(), expect.as_array(), rtol=1e-12)

    def test_symmetric_clouds(self):
        def fn(rank, ep):
            store = cloud_store(200, 0.5 if rank == 0 else 1.5, 10, seed=9 + rank, spread=0.2)
            return global_estimate(store, ep)

        a, b = run_ranks(2, fn)
        assert a.x_hat == pytest.approx(1.0, abs=0.05)
        assert np.array_equal(a.as_array(), b.as_array())

    def test_zero_mass_raises(self):
        store = cloud_store(10, 5, 5, seed=2)
        store.weights = np.zeros(10)

        def fn(rank, ep):
            return global_estimate(store, ep)

        with pytest.raises(AssertionError, match="AllZeroWeights"):
            run_ranks(1, fn)


class TestRnaStep:
    def test_exchange_counts(self):
        frame = object_frame(32, 32)

        def fn(rank, ep):
            store = cloud_store(1000, 32, 32, seed=rank, tag0=rank * 1000)
            ctx = make_ctx(rank, ep, store, algo="rna", exchange_ratio=0.1)
            info = rna_step(ctx, frame)
            ctx.evaluator.close()
            return info, ctx.store

        results = run_ranks(4, fn)
        for info, store in results:
            assert store.count == 1000
            assert info.links == 4
            assert info.particles_moved == 400  # ceil(0.1 * 1000) per rank
            assert np.array_equal(info.counts, [1000] * 4)

    def test_exchange_moves_neighbor_tags(self):
        frame = object_frame(32, 32)

        def fn(rank, ep):
            store = cloud_store(100, 32, 32, seed=rank, tag0=rank * 100)
            ctx = make_ctx(rank, ep, store, algo="rna", exchange_ratio=0.2)
            rna_step(ctx, frame)
            ctx.evaluator.close()
            return set((ctx.store.tags // 100).tolist())

        owners = run_ranks(4, fn)
        for rank, got in enumerate(owners):
            prev = (rank - 1) % 4
            assert got == {rank, prev}

    def test_ratio_zero_no_communication(self):
        frame = object_frame(32, 32)

        def fn(rank, ep):
            store = cloud_store(100, 32, 32, seed=rank)
            ctx = make_ctx(rank, ep, store, algo="rna", exchange_ratio=0.0)
            info = rna_step(ctx, frame)
            ctx.evaluator.close()
            return info

        for info in run_ranks(2, fn):
            assert info.links == 0
            assert info.particles_moved == 0

    def test_invalid_ratio_rejected(self):
        frame = object_frame(32, 32)

        def fn(rank, ep):
            store = cloud_store(100, 32, 32, seed=rank)
            ctx = make_ctx(rank, ep, store, algo="rna", exchange_ratio=1.5)
            return rna_step(ctx, frame)

        with pytest.raises(AssertionError, match="ratio"):
            run_ranks(2, fn)

    def test_local_degeneracy_reinitializes(self):
        frame = object_frame(32, 32)

        def fn(rank, ep):
            if rank == 0:
                store = cloud_store(100, 32, 32, seed=0)
            else:
                store = cloud_store(100, 200, 200, seed=1)  # fully out of bounds
            ctx = make_ctx(rank, ep, store, algo="rna", exchange_ratio=0.0)
            info = rna_step(ctx, frame)
            ctx.evaluator.close()
            return info, ctx.store

        results = run_ranks(2, fn)
        assert not results[0][0].reinitialized
        assert results[1][0].reinitialized
        reinit = results[1][1]
        assert np.all(reinit.states[:, 0] >= 0) and np.all(reinit.states[:, 0] < 64)
        assert np.allclose(reinit.weights, 1.0 / 100)

    def test_global_degeneracy_raises(self):
        frame = object_frame(32, 32)

        def fn(rank, ep):
            store = cloud_store(50, 500, 500, seed=rank)  # everyone out of bounds
            ctx = make_ctx(rank, ep, store, algo="rna")
            return rna_step(ctx, frame)

        with pytest.raises(AssertionError, match="AllZeroWeights"):
            run_ranks(2, fn)


class TestArnaStep:
    def test_all_tracking_uses_min_ratio(self):
        frame = object_frame(32, 32)

        def fn(rank, ep):
            store = cloud_store(200, 32, 32, seed=rank)
            ctx = make_ctx(rank, ep, store, algo="arna", tau_track=-np.inf,
                           r_min=0.1, r_max=0.5)
            info = arna_step(ctx, frame)
            ctx.evaluator.close()
            return info, ctx.ring

        for info, ring in run_ranks(4, fn):
            assert info.exchange_ratio == pytest.approx(0.1)
            assert info.tracking_count == 4
            assert np.array_equal(ring.order, np.arange(4))  # no reshuffle

    def test_none_tracking_uses_max_ratio_and_reshuffles(self):
        frame = object_frame(32, 32)

        def fn(rank, ep):
            store = cloud_store(200, 32, 32, seed=rank)
            ctx = make_ctx(rank, ep, store, algo="arna", tau_track=np.inf,
                           r_min=0.1, r_max=0.5)
            info = arna_step(ctx, frame)
            ctx.evaluator.close()
            return info, ctx.ring.order

        results = run_ranks(4, fn)
        orders = [tuple(r[1].tolist()) for r in results]
        for info, _ in results:
            assert info.exchange_ratio == pytest.approx(0.5)
            assert info.tracking_count == 0
        assert len(set(orders)) == 1  # identical reshuffle on every rank


class TestRpaStep:
    def test_balanced_after_gs(self):
        frame = object_frame(32, 32)

        def fn(rank, ep):
            # rank 0 holds the whole posterior mass; others sit on background
            if rank == 0:
                store = cloud_store(1000, 32, 32, seed=0, spread=1.0, tag0=0)
            else:
                store = cloud_store(1000, 8 + 10 * rank, 50, seed=rank, spread=1.0,
                                    tag0=1000 * rank)
            ctx = make_ctx(rank, ep, store, algo="rpa", scheduler="gs",
                           n_global=4000, threshold_ratio=1.0)
            info = rpa_step(ctx, frame)
            ctx.evaluator.close()
            return info, ctx.store.count

        results = run_ranks(4, fn)
        info0 = results[0][0]
        assert info0.resampled
        assert np.array_equal(info0.counts, [1000] * 4)
        assert info0.links >= 1
        for _, count in results:
            assert count == 1000

    def test_lgs_links_bounded(self):
        frame = object_frame(32, 32)

        def fn(rank, ep):
            store = cloud_store(500, 30 + rank, 30, seed=rank, spread=0.5,
                                tag0=500 * rank)
            ctx = make_ctx(rank, ep, store, algo="rpa", scheduler="lgs",
                           n_global=2000, threshold_ratio=1.0)
            info = rpa_step(ctx, frame)
            ctx.evaluator.close()
            return info

        for info in run_ranks(4, fn):
            assert info.links <= 2  # min(|S|, |R|) <= P/2
            assert int(info.counts.sum()) == 2000

    def test_no_resample_no_traffic(self):
        frame = object_frame(32, 32)

        def fn(rank, ep):
            store = cloud_store(300, 32, 32, seed=rank, spread=0.5)
            ctx = make_ctx(rank, ep, store, algo="rpa", scheduler="gs",
                           n_global=600, threshold_ratio=0.0)
            info = rpa_step(ctx, frame)
            ctx.evaluator.close()
            return info

        for info in run_ranks(2, fn):
            assert not info.resampled
            assert info.links == 0 and info.particles_moved == 0


class TestRunFilter:
    def test_serial_loop_records_every_frame(self):
        frames = [object_frame(32 + k * 0.2, 32) for k in range(5)]
        store = cloud_store(500, 32, 32, seed=4)

        def fn(rank, ep):
            ctx = make_ctx(rank, ep, store, algo="serial")
            timings = []
            infos = run_filter(ctx, frames, timings=timings)
            ctx.evaluator.close()
            return infos, timings

        (result,) = run_ranks(1, fn)
        infos, timings = result
        assert [i.frame for i in infos] == list(range(5))
        assert len(timings) == 5
        assert all(i.counts.sum() == 500 for i in infos)

    def test_estimate_tracks_object(self):
        frames = [object_frame(30 + 0.3 * k, 40 - 0.1 * k) for k in range(10)]
        store = cloud_store(2000, 30, 40, seed=5, spread=1.5, vel_spread=0.5)

        def fn(rank, ep):
            ctx = make_ctx(rank, ep, store, algo="serial", threshold_ratio=0.95)
            infos = run_filter(ctx, frames)
            ctx.evaluator.close()
            return infos

        (infos,) = run_ranks(1, fn)
        err = abs(infos[-1].estimate[0] - (30 + 0.3 * 9))
        assert err < 0.5
