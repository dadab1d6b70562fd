"""Aggregation, buffers, message accounting, and the round contract."""

import numpy as np
import pytest

from fedcpr.algorithms import FedX1Program, HyperParams, RunSettings
from fedcpr.data import DataConfig, build_dataset
from fedcpr.federation import (
    SIDE_NEG,
    SIDE_POS,
    Buffer,
    HistorySet,
    InProcessTransport,
    ProtocolError,
    RoundDownload,
    RoundUpload,
    ScoreRecord,
    URecord,
    comm_cost,
    comm_cost_ints,
    run_round,
    server_aggregate,
    tree_mean,
)
from fedcpr.losses import IDENTITY_OUTER, PairwiseLossSpec
from fedcpr.model import ScorerSpec
from fedcpr.rng import substream


def _records(side, client, count, iteration=0):
    return HistorySet(
        tuple(
            ScoreRecord(float(client * 100 + j), client, iteration, j)
            for j in range(count)
        ),
        side,
    )


def _upload(client, model, k=2, momentum=None, u=None):
    return RoundUpload(
        client=client,
        model=np.asarray(model, dtype=float),
        h1=_records(SIDE_POS, client, k),
        h2=_records(SIDE_NEG, client, k),
        momentum=momentum,
        u=u,
    )


class TestServerAggregate:
    def test_single_client_passthrough(self):
        down = server_aggregate([_upload(0, [1.0, 2.0])])
        np.testing.assert_array_equal(down.model, [1.0, 2.0])

    def test_two_client_mean(self):
        down = server_aggregate([_upload(0, [0.0, 0.0]), _upload(1, [2.0, 4.0])])
        np.testing.assert_array_equal(down.model, [1.0, 2.0])

    def test_history_union_size(self):
        k = 5
        down = server_aggregate([_upload(i, [0.0], k=k) for i in range(3)])
        assert len(down.r1) == 3 * k
        assert len(down.r2) == 3 * k

    def test_concatenation_in_client_index_order(self):
        down = server_aggregate([_upload(1, [0.0]), _upload(0, [0.0])])
        assert [r.client for r in down.r1.records] == [0, 0, 1, 1]

    def test_arrival_order_invariance(self):
        uploads = [_upload(i, np.arange(4) * (i + 1)) for i in range(4)]
        a = server_aggregate(uploads)
        b = server_aggregate(list(reversed(uploads)))
        np.testing.assert_array_equal(a.model, b.model)
        assert a.r1.records == b.r1.records

    def test_momentum_mean_when_present(self):
        ups = [
            _upload(0, [0.0], momentum=np.array([1.0])),
            _upload(1, [2.0], momentum=np.array([3.0])),
        ]
        down = server_aggregate(ups)
        np.testing.assert_array_equal(down.momentum, [2.0])

    def test_rejects_bad_client_indices(self):
        with pytest.raises(ProtocolError):
            server_aggregate([_upload(0, [0.0]), _upload(2, [0.0])])
        with pytest.raises(ProtocolError):
            server_aggregate([_upload(0, [0.0]), _upload(0, [0.0])])

    def test_rejects_mismatched_model_lengths(self):
        with pytest.raises(ProtocolError):
            server_aggregate([_upload(0, [0.0]), _upload(1, [0.0, 1.0])])

    def test_rejects_partial_momentum(self):
        with pytest.raises(ProtocolError):
            server_aggregate(
                [_upload(0, [0.0], momentum=np.array([1.0])), _upload(1, [0.0])]
            )

    def test_tree_mean_matches_plain_mean(self):
        rng = np.random.default_rng(0)
        vecs = [rng.standard_normal(5) for _ in range(7)]
        np.testing.assert_allclose(tree_mean(vecs), np.mean(vecs, axis=0), rtol=1e-12)


class TestBuffer:
    def test_single_entry(self):
        buf = Buffer()
        buf.refill(["a"], substream(0, "t"))
        assert buf.draw(1) == ["a"]
        assert buf.cursor == 1

    def test_same_stream_same_permutation(self):
        entries = list(range(52))
        a, b = Buffer(), Buffer()
        a.refill(entries, substream(3, "perm"))
        b.refill(entries, substream(3, "perm"))
        assert a.draw(52) == b.draw(52)

    def test_entries_are_a_permutation(self):
        entries = list(range(52))
        buf = Buffer()
        buf.refill(entries, substream(4, "perm"))
        assert sorted(buf.draw(52)) == entries
        assert buf.wraps == 0

    def test_sequential_draws_without_repeats(self):
        buf = Buffer()
        buf.refill(list(range(5)), substream(5, "seq"))
        first = buf.draw(2)
        second = buf.draw(2)
        assert len(set(first + second)) == 4

    def test_each_entry_exactly_once_over_k_draws(self):
        k = 9
        buf = Buffer()
        buf.refill(list(range(k)), substream(6, "k"))
        drawn = [buf.draw(1)[0] for _ in range(k)]
        assert sorted(drawn) == list(range(k))
        assert buf.wraps == 0

    def test_wraparound_reshuffles_and_continues(self):
        buf = Buffer()
        buf.refill([10, 11, 12], substream(7, "wrap"))
        out = buf.draw(5)
        assert sorted(out[:3]) == [10, 11, 12]
        assert set(out[3:]) <= {10, 11, 12}
        assert buf.wraps == 1

    def test_never_refilled_rejected(self):
        with pytest.raises(ProtocolError):
            Buffer().draw(1)

    def test_empty_refill_rejected(self):
        with pytest.raises(ProtocolError):
            Buffer().refill([], substream(8, "e"))


class TestCommCost:
    def test_linear_algorithm_example(self):
        d, k = 10, 4
        up = _upload(0, np.zeros(d), k=k)
        down = server_aggregate([up, _upload(1, np.zeros(d), k=k)])
        assert comm_cost(up, down) == (d + 2 * k, d + 2 * (2 * k))  # (18, 26)

    def test_nonlinear_algorithm_example(self):
        d, k = 10, 4
        u = tuple(URecord(1.0, 0, j, j) for j in range(k))
        up = _upload(0, np.zeros(d), k=k, momentum=np.zeros(d), u=u)
        up2 = _upload(1, np.zeros(d), k=k, momentum=np.zeros(d), u=u)
        down = server_aggregate([up, up2])
        assert comm_cost(up, down)[0] == 2 * d + 3 * k  # 32
        assert comm_cost(up, down)[1] == 2 * d + 3 * (2 * k)

    def test_provenance_ints_counted_separately(self):
        d, k = 3, 2
        up = _upload(0, np.zeros(d), k=k)
        down = server_aggregate([up])
        assert comm_cost_ints(up, down) == (3 * 2 * k, 3 * 2 * k)


def _fedx1_fixture(n_clients=2, K=3, B=2, eta=0.05, seed=9):
    cfg = DataConfig(
        n_pos_per_client=5, n_neg_per_client=8, input_dim=3, n_clients=n_clients,
        hetero_var=0, hetero_base=0, hetero_step=0, seed=seed,
    )
    ds = build_dataset(cfg)
    hyper = HyperParams(eta=eta, K=K, R=2, B1=B, B2=B, seed=seed)
    settings = RunSettings(
        "fedx1", ScorerSpec("linear", 3), PairwiseLossSpec("square"),
        IDENTITY_OUTER, hyper,
    )
    program = FedX1Program(settings)
    return program, program.init_states(ds), hyper


def _one_round(program, states, hyper, download, round_idx, transport):
    def client_round(st, dl):
        program.begin_round(st, dl, round_idx)
        for k in range(hyper.K):
            program.local_step(st, round_idx, k, hyper.eta)
        return program.build_upload(st, round_idx)

    return run_round(states, client_round, download, transport, 0)


class TestRoundContract:
    def test_history_partition_of_provenance(self):
        program, states, hyper = _fedx1_fixture()
        transport = InProcessTransport(len(states))
        download, _ = run_round(
            states, lambda st, dl: program.bootstrap_upload(st), None, transport
        )
        download, uploads = _one_round(program, states, hyper, download, 1, transport)
        n, k, b = len(states), hyper.K, hyper.B1
        for hist in (download.r1, download.r2):
            assert len(hist) == n * k * b
            for client in range(n):
                recs = [r for r in hist.records if r.client == client]
                assert len(recs) == k * b
                assert {r.iteration for r in recs} == set(range(k))

    def test_lazy_records_are_exactly_one_round_stale(self):
        program, states, hyper = _fedx1_fixture()
        transport = InProcessTransport(len(states))
        download0, _ = run_round(
            states, lambda st, dl: program.bootstrap_upload(st), None, transport
        )
        # After the round-1 refill, each buffer holds exactly the round-0
        # aggregate (flush + replace), so every draw is one round stale.
        st = states[0]
        program.begin_round(st, download0, 1)
        drained = st.neg_buffer.draw(len(download0.r2))
        assert sorted(drained, key=lambda r: (r.client, r.iteration, r.sample_id)) == \
            sorted(download0.r2.records,
                   key=lambda r: (r.client, r.iteration, r.sample_id))
        assert st.neg_buffer.wraps == 0

    def test_zero_eta_keeps_models_at_global_model(self):
        program, states, hyper = _fedx1_fixture(eta=0.0)
        transport = InProcessTransport(len(states))
        download, _ = run_round(
            states, lambda st, dl: program.bootstrap_upload(st), None, transport
        )
        w0 = download.model.copy()
        download, uploads = _one_round(program, states, hyper, download, 1, transport)
        for up in uploads:
            np.testing.assert_array_equal(up.model, w0)
        np.testing.assert_array_equal(download.model, w0)

    def test_models_differ_before_aggregation_equal_after_download(self):
        program, states, hyper = _fedx1_fixture(eta=0.1)
        transport = InProcessTransport(len(states))
        download, _ = run_round(
            states, lambda st, dl: program.bootstrap_upload(st), None, transport
        )
        download, uploads = _one_round(program, states, hyper, download, 1, transport)
        assert not np.array_equal(uploads[0].model, uploads[1].model)
        np.testing.assert_array_equal(
            download.model, tree_mean([uploads[0].model, uploads[1].model])
        )
        for st in states:
            program.begin_round(st, download, 2)
        np.testing.assert_array_equal(states[0].model, states[1].model)

    def test_barrier_requires_all_uploads(self):
        transport = InProcessTransport(2)
        transport.upload(_upload(0, [0.0]))
        with pytest.raises(ProtocolError):
            transport.exchange()

    def test_thread_count_does_not_change_results(self):
        results = []
        for threads in (0, 3):
            program, states, hyper = _fedx1_fixture()
            transport = InProcessTransport(len(states))
            download, _ = run_round(
                states, lambda st, dl: program.bootstrap_upload(st),
                None, transport, threads,
            )

            def client_round(st, dl):
                program.begin_round(st, dl, 1)
                for k in range(hyper.K):
                    program.local_step(st, 1, k, hyper.eta)
                return program.build_upload(st, 1)

            download, _ = run_round(states, client_round, download, transport, threads)
            results.append(download.model)
        np.testing.assert_array_equal(results[0], results[1])
