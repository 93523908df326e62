import logging
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sfu.data import ForgetSpec, LabeledDataset, dirichlet_partition, gen_synthetic, split_forget_retain
from sfu.errors import ConfigError, InputError, ProtocolError
from sfu.federation import (
    ClientState,
    ClientUpdate,
    FLConfig,
    GlobalState,
    delete_forgotten,
    fedavg,
    local_train,
    make_clients,
    run_fl,
    sample_clients,
)
from sfu.metrics import Evaluator
from sfu.nn import Architecture, ParamVector, init_params, pack_layers, zeros

ARCH = Architecture((4, 3))


def const(v, arch=ARCH):
    return ParamVector(arch, np.full(arch.num_params, float(v)))


@pytest.fixture(scope="module")
def small_world():
    ds = gen_synthetic(4, 6, 30, 0.25, 1)
    part = dirichlet_partition(ds, 6, 0.5, 2)
    return ds, part, init_params(Architecture((6, 8, 4)), 3)


class TestConfig:
    def test_zero_participation(self):
        with pytest.raises(ConfigError, match="fl.participation_fraction"):
            FLConfig(participation_fraction=0)

    def test_clients_per_round(self):
        assert FLConfig().clients_per_round == 5
        assert FLConfig(num_clients=3, participation_fraction=0.01).clients_per_round == 1

    def test_single_client_rejected(self):
        with pytest.raises(ConfigError):
            FLConfig(num_clients=1)


class TestSampleClients:
    def test_full_participation(self):
        assert sample_clients(FLConfig(participation_fraction=1.0), 4) == list(range(20))

    def test_quarter_of_twenty(self):
        ids = sample_clients(FLConfig(), 1)
        assert len(ids) == 5 == len(set(ids)) and all(0 <= i < 20 for i in ids)
        assert ids == sorted(ids)

    def test_deterministic_per_round(self):
        cfg = FLConfig(seed=9)
        assert sample_clients(cfg, 3) == sample_clients(cfg, 3)
        assert len({tuple(sample_clients(cfg, r)) for r in range(1, 30)}) > 1


class TestLocalTrain:
    def client(self, n=5):
        return ClientState(0, gen_synthetic(3, 4, n, 0.3, 0))

    def test_zero_epochs(self):
        g = init_params(ARCH, 0)
        assert local_train(self.client(), g, FLConfig(local_epochs=0), np.random.default_rng(0)) == g

    def test_zero_lr(self):
        g = init_params(ARCH, 0)
        assert local_train(self.client(), g, FLConfig(lr=0.0), np.random.default_rng(0)) == g

    def test_single_sample_step(self):
        arch = Architecture((2, 3))
        shard = LabeledDataset([[1.0, 2.0]], [1], 3)
        out = local_train(ClientState(0, shard), zeros(arch),
                          FLConfig(local_epochs=1, batch_size=1, lr=0.5), np.random.default_rng(0))
        # uniform prediction (1/3 each) against one-hot class 1: dL/dz = p - y
        dz = np.array([1 / 3, -2 / 3, 1 / 3])
        expect = pack_layers(arch, [(-0.5 * np.outer([1.0, 2.0], dz), -0.5 * dz)])
        assert np.allclose(out.values, expect.values, atol=1e-15)

    def test_empty_shard(self):
        with pytest.raises(InputError):
            local_train(ClientState(0, gen_synthetic(2, 4, 1, 0.1, 0).subset([])), zeros(ARCH),
                        FLConfig(), np.random.default_rng(0))


class TestFedAvg:
    def test_identical(self):
        p = init_params(ARCH, 5)
        assert fedavg([(p, 3), (p.copy(), 8), (p.copy(), 1)]) == p

    def test_midpoint(self):
        assert np.array_equal(fedavg([(const(0), 5), (const(2), 5)]).values, const(1).values)

    def test_three_to_one(self):
        assert np.allclose(fedavg([(const(0), 3), (const(4), 1)]).values, 1.0, atol=1e-15)

    def test_arch_mismatch(self):
        with pytest.raises(ProtocolError):
            fedavg([(const(0), 1), (const(0, Architecture((4, 2))), 1)])

    def test_bad_counts(self):
        with pytest.raises(InputError):
            fedavg([(const(0), 0)])
        with pytest.raises(InputError):
            fedavg([])

    def test_order_fixed_by_client_id(self):
        rng = np.random.default_rng(0)
        ups = [ClientUpdate(i, ParamVector(ARCH, rng.normal(size=ARCH.num_params)), int(rng.integers(1, 50)))
               for i in range(7)]
        a = fedavg(ups)
        b = fedavg(list(reversed(ups)))
        assert a.values.tobytes() == b.values.tobytes()

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 2**31), n=st.integers(1, 8))
    def test_uniform_counts_give_mean(self, seed, n):
        rng = np.random.default_rng(seed)
        vals = rng.normal(size=(n, ARCH.num_params))
        out = fedavg([(ParamVector(ARCH, v), 4) for v in vals])
        assert np.allclose(out.values, vals.mean(axis=0), rtol=0, atol=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 2**31), n=st.integers(1, 8))
    def test_matches_independent_fold(self, seed, n):
        rng = np.random.default_rng(seed)
        vals = rng.normal(size=(n, ARCH.num_params))
        counts = rng.integers(1, 100, n)
        out = fedavg([(ParamVector(ARCH, v), int(c)) for v, c in zip(vals, counts)])
        total = int(counts.sum())
        ref = [math.fsum(float(c) * float(v[j]) for v, c in zip(vals, counts)) / total
               for j in range(ARCH.num_params)]
        assert np.allclose(out.values, ref, rtol=0, atol=1e-12)


class TestRunFL:
    def test_zero_rounds(self, small_world):
        ds, part, m0 = small_world
        state, recs = run_fl(m0, make_clients(ds, part.client_shards), FLConfig(num_clients=6, max_rounds=0))
        assert state.global_model == m0 and recs == [] and state.round == 0

    def test_deterministic_and_thread_safe(self, small_world):
        ds, part, m0 = small_world
        cfg = FLConfig(num_clients=6, participation_fraction=0.5, max_rounds=8, seed=4)
        ev = Evaluator(ds)
        a, ra = run_fl(m0, make_clients(ds, part.client_shards), cfg, evaluate=ev)
        b, rb = run_fl(m0, make_clients(ds, part.client_shards), cfg, evaluate=ev, max_workers=4)
        assert a.global_model.values.tobytes() == b.global_model.values.tobytes()
        assert [(r.round, r.acc_retained) for r in ra] == [(r.round, r.acc_retained) for r in rb]

    def test_counters(self, small_world):
        ds, part, m0 = small_world
        _, recs = run_fl(m0, make_clients(ds, part.client_shards), FLConfig(num_clients=6, max_rounds=5))
        assert [r.round for r in recs] == [1, 2, 3, 4, 5] == [r.comm_rounds_cum for r in recs]
        assert all(r.phase == "train" for r in recs)

    def test_resume_continues_numbering(self, small_world):
        ds, part, m0 = small_world
        cfg = FLConfig(num_clients=6, max_rounds=3)
        clients = make_clients(ds, part.client_shards)
        s1, _ = run_fl(m0, clients, cfg)
        s2, recs = run_fl(s1, clients, cfg, phase="resume")
        assert [r.round for r in recs] == [4, 5, 6] and s2.comm_rounds == 6

    def test_stop_rule(self, small_world):
        ds, part, m0 = small_world
        cfg = FLConfig(num_clients=6, participation_fraction=0.5, max_rounds=500, lr=0.05)
        state, recs = run_fl(m0, make_clients(ds, part.client_shards), cfg, evaluate=Evaluator(ds),
                             stop=lambda _r, rec: rec.acc_retained >= 0.95)
        assert recs[-1].acc_retained >= 0.95 and len(recs) < 500
        assert all(r.acc_retained < 0.95 for r in recs[:-1])

    def test_empty_client_is_skipped(self, small_world, caplog):
        ds, part, m0 = small_world
        clients = make_clients(ds, part.client_shards)
        clients[0] = replace(clients[0], train_shard=ds.subset([]))
        cfg = FLConfig(num_clients=6, participation_fraction=1.0, max_rounds=1)
        with caplog.at_level(logging.WARNING, logger="sfu"):
            run_fl(m0, clients, cfg)
        assert "client 0 has no data" in caplog.text

    def test_missing_clients(self, small_world):
        ds, part, m0 = small_world
        with pytest.raises(ConfigError):
            run_fl(m0, make_clients(ds, part.client_shards)[:3], FLConfig(num_clients=6, max_rounds=1))


class TestDeleteForgotten:
    def test_removes_class_everywhere(self, small_world):
        ds, part, _ = small_world
        spec = ForgetSpec({2}, 4)
        clients = make_clients(ds, part.client_shards)
        after = delete_forgotten(clients, spec)
        assert all(not np.any(c.train_shard.labels == 2) for c in after)
        assert sum(len(c.train_shard) for c in after) == sum(
            len(split_forget_retain(c.train_shard, spec)[1]) for c in clients)

    def test_client_without_target_unchanged(self):
        c = ClientState(3, LabeledDataset(np.zeros((3, 2)), [0, 1, 1], 4))
        (after,) = delete_forgotten([c], ForgetSpec({2}, 4))
        assert after.train_shard.same_as(c.train_shard) and after.id == 3

    def test_initial_state_accepted(self, small_world):
        ds, part, m0 = small_world
        start = GlobalState(10, m0, 10)
        s, recs = run_fl(start, make_clients(ds, part.client_shards), FLConfig(num_clients=6, max_rounds=1))
        assert recs[0].round == 11 and s.comm_rounds == 11
