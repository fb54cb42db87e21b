import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import small_config
from fedssa.baselines import make_algorithm
from fedssa.errors import ConfigError, ProtocolError
from fedssa.models import ClassificationHeader, count_params
from fedssa.protocol import (ClientState, GlobalHeaderState, HeaderUpload, LocalTraining,
                             Simulation, StabilizationSchedule, aggregate, client_update,
                             fuse_header, mu_schedule, run_experiment,
                             sample_clients)
from fedssa.numerics import batch_loss


class TestSchedule:
    def test_start(self):
        assert mu_schedule(0, StabilizationSchedule(0.5, 10)) == 0.5

    def test_end_and_after(self):
        sched = StabilizationSchedule(0.5, 10)
        assert mu_schedule(10, sched) == 0.0
        assert mu_schedule(11, sched) == 0.0

    def test_quarter_turn(self):
        assert mu_schedule(25, StabilizationSchedule(1.0, 50)) == pytest.approx(0.7071067811865476, abs=1e-15)

    def test_disabled(self):
        sched = StabilizationSchedule(0.9, 0)
        assert all(mu_schedule(t, sched) == 0.0 for t in range(5))

    def test_negative_round(self):
        with pytest.raises(ValueError):
            mu_schedule(-1, StabilizationSchedule(0.5, 3))

    @pytest.mark.parametrize("mu0", [0.0, 1.5])
    def test_bad_mu0(self, mu0):
        with pytest.raises(ConfigError):
            StabilizationSchedule(mu0, 3)

    @settings(max_examples=100)
    @given(mu0=st.floats(1e-6, 1.0), T=st.integers(1, 200), t1=st.integers(0, 400), t2=st.integers(0, 400))
    def test_monotone_bounded(self, mu0, T, t1, t2):
        sched = StabilizationSchedule(mu0, T)
        lo, hi = sorted((t1, t2))
        a, b = mu_schedule(lo, sched), mu_schedule(hi, sched)
        assert 0.0 <= b <= a <= mu0
        if hi > T:
            assert b == 0.0


def header(rows, bias=None):
    rows = np.asarray(rows, dtype=float)
    return ClassificationHeader(rows, np.zeros(len(rows)) if bias is None else np.asarray(bias, float))


class TestFuse:
    def test_mu_zero_replaces(self):
        local = header([[2.0, 2.0], [5.0, 5.0]], [1.0, 1.0])
        out = fuse_header(local, {0: (np.array([1.0, 1.0]), 0.5)}, [0], 0.0)
        assert out.weight[0].tolist() == [1.0, 1.0] and out.bias[0] == 0.5

    def test_mu_one_sums(self):
        out = fuse_header(header([[2.0, 2.0]]), {0: (np.array([1.0, 1.0]), 0.0)}, [0], 1.0)
        assert out.weight[0].tolist() == [3.0, 3.0]

    def test_mu_half(self):
        out = fuse_header(header([[2.0, 2.0]], [4.0]), {0: (np.array([1.0, 1.0]), 1.0)}, [0], 0.5)
        assert out.weight[0].tolist() == [2.0, 2.0]
        assert out.bias[0] == 3.0

    def test_convex(self):
        out = fuse_header(header([[2.0, 2.0]]), {0: (np.array([1.0, 1.0]), 0.0)}, [0], 0.5, "convex")
        assert out.weight[0].tolist() == [1.5, 1.5]

    def test_unseen_untouched(self):
        rng = np.random.default_rng(0)
        local = header(rng.normal(size=(4, 3)), rng.normal(size=4))
        glob = {s: (rng.normal(size=3), 0.3) for s in (1, 3)}
        out = fuse_header(local, glob, [1, 3], 0.4)
        for s in (0, 2):
            assert np.array_equal(out.weight[s], local.weight[s]) and out.bias[s] == local.bias[s]

    def test_does_not_mutate_input(self):
        local = header([[2.0, 2.0]])
        fuse_header(local, {0: (np.array([1.0, 1.0]), 0.0)}, [0], 0.5)
        assert local.weight[0].tolist() == [2.0, 2.0]

    def test_missing_row(self):
        with pytest.raises(ProtocolError):
            fuse_header(header([[1.0], [2.0]]), {0: (np.array([1.0]), 0.0)}, [0, 1], 0.3)


def scalar_mean_oracle(uploads, prev_w, prev_b):
    """Per-class mean with plain Python loops; carries untouched rows."""
    S, d = len(prev_w), len(prev_w[0])
    out_w = [list(r) for r in prev_w]
    out_b = list(prev_b)
    for s in range(S):
        holders = [u.rows[s] for u in uploads if s in u.rows]
        if not holders:
            continue
        for j in range(d):
            out_w[s][j] = sum(float(w[j]) for w, _ in holders) / len(holders)
        out_b[s] = sum(float(b) for _, b in holders) / len(holders)
    return out_w, out_b


def random_uploads(rng, n_clients, S, d, integer=True):
    ups = []
    for k in range(n_clients):
        classes = sorted(rng.choice(S, size=rng.integers(1, S + 1), replace=False).tolist())
        draw = (lambda size: rng.integers(-9, 10, size=size).astype(float)) if integer \
            else (lambda size: rng.normal(size=size))
        ups.append(HeaderUpload(k, {s: (draw(d), float(draw(1)[0])) for s in classes}))
    return ups


class TestAggregate:
    def prev(self, S=3, d=2):
        return GlobalHeaderState.initial(header(np.arange(S * d, dtype=float).reshape(S, d) + 100))

    def test_single_uploader_copies(self):
        out = aggregate([HeaderUpload(0, {1: (np.array([7.0, 8.0]), 9.0)})], self.prev(), 4)
        assert out.header.weight[1].tolist() == [7.0, 8.0] and out.header.bias[1] == 9.0
        assert out.last_update == [-1, 4, -1]

    def test_mean_of_two(self):
        ups = [HeaderUpload(0, {0: (np.array([1.0, 3.0]), 0.0)}),
               HeaderUpload(1, {0: (np.array([3.0, 5.0]), 0.0)})]
        assert aggregate(ups, self.prev(), 0).header.weight[0].tolist() == [2.0, 4.0]

    def test_carry_over_bit_exact(self):
        prev = GlobalHeaderState.initial(header(np.random.default_rng(0).normal(size=(3, 2))))
        out = aggregate([HeaderUpload(0, {1: (np.zeros(2), 0.0)})], prev, 0)
        for s in (0, 2):
            assert np.array_equal(out.header.weight[s], prev.header.weight[s])

    def test_seven_random_vs_oracle(self):
        rng = np.random.default_rng(42)
        S, d = 10, 5
        prev = GlobalHeaderState.initial(header(rng.normal(size=(S, d))))
        ups = random_uploads(rng, 7, S, d, integer=False)
        got = aggregate(ups, prev, 1)
        w, b = scalar_mean_oracle(ups, prev.header.weight.tolist(), prev.header.bias.tolist())
        np.testing.assert_allclose(got.header.weight, w, rtol=0, atol=1e-12)
        np.testing.assert_allclose(got.header.bias, b, rtol=0, atol=1e-12)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(1)
        prev = GlobalHeaderState.initial(header(rng.normal(size=(6, 4))))
        ups = random_uploads(rng, 6, 6, 4, integer=False)
        a = aggregate(ups, prev, 0)
        b = aggregate(ups[::-1], prev, 0)
        # fixed client-id summation order makes shuffling irrelevant, bit for bit
        assert a.header.equals(b.header)

    def test_width_mismatch(self):
        with pytest.raises(ProtocolError):
            aggregate([HeaderUpload(0, {0: (np.zeros(3), 0.0)})], self.prev(), 0)

    def test_duplicate_clients(self):
        up = HeaderUpload(0, {0: (np.zeros(2), 0.0)})
        with pytest.raises(ProtocolError):
            aggregate([up, up], self.prev(), 0)

    def test_does_not_mutate_prev(self):
        prev = self.prev()
        before = prev.header.copy()
        aggregate([HeaderUpload(0, {0: (np.zeros(2), 0.0)})], prev, 0)
        assert prev.header.equals(before)


class TestSampling:
    def test_full_participation(self):
        assert sample_clients(10, 1.0, 3, seed=0).sampled == tuple(range(10))

    def test_ten_percent(self):
        ctx = sample_clients(100, 0.1, 0, seed=0)
        assert len(ctx.sampled) == len(set(ctx.sampled)) == 10
        assert all(0 <= k < 100 for k in ctx.sampled)

    def test_deterministic(self):
        assert sample_clients(50, 0.2, 7, 3).sampled == sample_clients(50, 0.2, 7, 3).sampled
        assert sample_clients(50, 0.2, 7, 3).sampled != sample_clients(50, 0.2, 8, 3).sampled

    def test_non_integral_floors(self, caplog):
        assert len(sample_clients(7, 0.5, 0, 0).sampled) == 3
        assert "not integral" in caplog.text


@pytest.fixture
def sim():
    cfg = small_config(algorithm="fedssa")
    return Simulation(cfg, make_algorithm(cfg))


class TestClientUpdate:
    def rows_for(self, sim, state):
        return sim.algorithm.global_state.header.rows(state.seen_classes)

    def test_no_training_uploads_fused_rows(self, sim):
        state = sim.clients[0]
        rows = self.rows_for(sim, state)
        sched = StabilizationSchedule(0.5, 10)
        expected = fuse_header(state.model.header, rows, state.seen_classes, 0.5, "additive")
        result = client_update(state, sim.dataset, rows, 0, sched, LocalTraining(0.1, 0, 8), 1)
        for s, (w, b) in result.upload.rows.items():
            assert np.array_equal(w, expected.weight[s]) and b == expected.bias[s]

    def test_upload_keys_are_seen_classes(self, sim):
        for state in sim.clients:
            rows = self.rows_for(sim, state)
            res = client_update(state, sim.dataset, rows, 3, StabilizationSchedule(0.5, 10),
                                sim.training, 2)
            assert set(res.upload.rows) == set(state.seen_classes)
            assert all(len(w) == sim.d_rep for w, _ in res.upload.rows.values())

    def test_training_lowers_loss_on_replayed_batches(self):
        cfg = small_config(N=1, classes_per_client=6)
        sim = Simulation(cfg, make_algorithm(cfg))
        state = sim.clients[0]
        rows = self.rows_for(sim, state)
        sched = StabilizationSchedule(0.5, 10)
        training = LocalTraining(0.05, 1, 8)
        fused = fuse_header(state.model.header, rows, state.seen_classes, mu_schedule(0, sched), "additive")
        before_model = state.model.copy()
        before_model.header = fused
        train_batch = sim.dataset.batch(state.partition.train)
        before = batch_loss(before_model.layers, train_batch)
        client_update(state, sim.dataset, rows, 0, sched, training, seed=5)
        assert batch_loss(state.model.layers, train_batch) <= before

    def test_missing_global_row(self, sim):
        state = sim.clients[0]
        with pytest.raises(ProtocolError):
            client_update(state, sim.dataset, {}, 0, StabilizationSchedule(0.5, 10), sim.training, 0)

    def test_empty_train_split_skipped(self, sim, caplog):
        state = sim.clients[0]
        empty = ClientState(state.client_id, state.model,
                            type(state.partition)(0, np.array([], dtype=np.int64), state.partition.eval,
                                                  state.partition.test, state.seen_classes))
        res = client_update(empty, sim.dataset, self.rows_for(sim, state), 0,
                            StabilizationSchedule(0.5, 10), sim.training, 0)
        assert res.skipped and res.upload is None
        assert "empty train split" in caplog.text


class TestRounds:
    def test_single_client_self_aggregation(self):
        cfg = small_config(N=1, classes_per_client=2)
        sim = Simulation(cfg, make_algorithm(cfg))
        sim.run_round(0)
        client = sim.clients[0]
        g = sim.algorithm.global_state.header
        for s in client.seen_classes:
            assert np.array_equal(g.weight[s], client.model.header.weight[s])
            assert g.bias[s] == client.model.header.bias[s]

    def test_determinism(self):
        def records():
            cfg = small_config()
            sim = Simulation(cfg, make_algorithm(cfg))
            return [sim.run_round(t) for t in range(2)]
        assert records() == records()

    def test_transmission_count(self, sim):
        rec = sim.run_round(0)
        expected = sum(2 * len(c.seen_classes) * (sim.d_rep + 1) for c in sim.clients)
        counted = sum(u.n_params for u in sim.algorithm.uploads) + \
            sum(b.n_params for b in sim.algorithm.broadcasts)
        assert rec.uplink_params + rec.downlink_params == expected == counted
        assert rec.uplink_params == rec.downlink_params

    def test_messages_carry_only_seen_rows(self, sim):
        sim.run_round(0)
        for up in sim.algorithm.uploads:
            state = sim.clients[up.client_id]
            assert set(up.rows) == set(state.seen_classes)
            assert all(isinstance(b, float) and w.shape == (sim.d_rep,) for w, b in up.rows.values())
        for msg in sim.algorithm.broadcasts:
            assert set(msg.rows) == set(sim.clients[msg.client_id].seen_classes)
        full_model = min(count_params(c.model) for c in sim.clients)
        assert max(u.n_params for u in sim.algorithm.uploads) < full_model

    def test_unsampled_clients_untouched(self):
        cfg = small_config(N=4, C=0.5)
        sim = Simulation(cfg, make_algorithm(cfg))
        before = [c.model.copy() for c in sim.clients]
        rec = sim.run_round(0)
        assert len(rec.sampled) == 2
        for k, c in enumerate(sim.clients):
            same = all(np.array_equal(a[0], b[0]) for a, b in zip(before[k].layers, c.model.layers))
            assert same == (k not in rec.sampled)

    def test_client_order_does_not_matter(self):
        """Client updates are independent given the broadcast snapshot."""
        cfg = small_config()

        def run(order):
            sim = Simulation(cfg, make_algorithm(cfg))
            algo = sim.algorithm
            snap = algo.global_state
            uploads = []
            for k in order:
                st = sim.clients[k]
                res = client_update(st, sim.dataset, snap.header.rows(st.seen_classes), 0,
                                    algo.schedule, sim.training,
                                    sample_clients(cfg.N, cfg.C, 0, cfg.seed).client_seed(k),
                                    algo.fusion)
                uploads.append(res.upload)
            return aggregate(uploads, snap, 0).header

        assert run([0, 1, 2, 3]).equals(run([3, 1, 0, 2]))

    def test_engine_matches_client_update(self):
        cfg = small_config()
        sim = Simulation(cfg, make_algorithm(cfg))
        ref = Simulation(cfg, make_algorithm(cfg))
        sim.run_round(0)
        ctx = sample_clients(cfg.N, cfg.C, 0, cfg.seed)
        ups = [client_update(c, ref.dataset, ref.algorithm.global_state.header.rows(c.seen_classes),
                             0, ref.algorithm.schedule, ref.training, ctx.client_seed(c.client_id),
                             ref.algorithm.fusion).upload for c in ref.clients]
        assert aggregate(ups, ref.algorithm.global_state, 0).header.equals(
            sim.algorithm.global_state.header)

    def test_cumulative_counters(self):
        cfg = small_config(T=4)
        res = run_experiment(cfg)
        assert res.records[-1].cum_params == sum(r.params for r in res.records)
        assert res.records[-1].cum_flops == sum(r.flops for r in res.records)


class TestExperiment:
    def test_zero_rounds(self):
        res = run_experiment(small_config(T=0))
        assert res.records == []
        assert res.final_accuracies == res.initial_accuracies

    def test_learning_progress(self):
        res = run_experiment(small_config(T=25, N=6))
        last10 = np.mean([r.mean_accuracy for r in res.records[-10:]])
        assert last10 > res.records[0].mean_accuracy

    def test_additive_fusion_header_growth(self):
        """Without training, literal fusion scales a lone client's rows by (1 + mu_t) per round."""
        cfg = small_config(N=1, E=0, T=6, classes_per_client=2,
                           algo_params={"mu0": 0.5, "T_stable": 4, "fusion": "additive"})
        sim = Simulation(cfg, make_algorithm(cfg))
        sim.run_round(0)
        s = sim.clients[0].seen_classes[0]
        row0 = sim.clients[0].model.header.weight[s].copy()
        for t in range(1, 6):
            sim.run_round(t)
        factor = math.prod(1 + mu_schedule(t, StabilizationSchedule(0.5, 4)) for t in range(1, 6))
        np.testing.assert_allclose(sim.clients[0].model.header.weight[s], factor * row0, rtol=1e-12)

    def test_checkpoint(self, tmp_path):
        cfg = small_config()
        sim = Simulation(cfg, make_algorithm(cfg))
        sim.run_round(0)
        path = sim.save_checkpoint(tmp_path / "c.npz", 0)
        with np.load(path) as z:
            assert np.array_equal(z["global.header.weight"], sim.algorithm.global_state.header.weight)
            assert np.array_equal(z["client.2.header.weight"], sim.clients[2].model.header.weight)
            assert int(z["round"]) == 0
