import dataclasses
import itertools

import numpy as np
import pytest

from helpers import make_clients
from faun.errors import ConfigError
from faun.fl import (ClientRecord, HistoryStore, UpdateWindow, fedavg, local_train, local_update,
                     run_finetune, run_training, server_step)
from faun.metrics import accuracy
from faun.model import ModelSpec
from faun.seeding import PHASE_UNLEARN, rng


def test_window_keeps_last_entries():
    w = UpdateWindow(0, 3)
    for r in range(1, 6):
        w.append(r, np.full(2, float(r)))
    assert w.rounds == [3, 4, 5] and len(w) == 3
    with pytest.raises(ValueError):
        w.append(5, np.zeros(2))
    with pytest.raises(ConfigError):
        UpdateWindow(0, 0)


def test_fedavg_basic_cases(gen):
    g = gen.normal(size=5)
    np.testing.assert_allclose(fedavg([g, g, g]), g, rtol=1e-15, atol=0)
    np.testing.assert_array_equal(fedavg([g, -g]), np.zeros(5))
    with pytest.raises(ConfigError):
        fedavg([])
    with pytest.raises(ConfigError):
        fedavg([np.zeros(2), np.zeros(3)])


def test_fedavg_matches_scalar_summation(gen):
    vs = [gen.normal(size=6) for _ in range(3)]
    expected = [sum(float(v[i]) for v in vs) / 3 for i in range(6)]
    np.testing.assert_allclose(fedavg(vs), expected, rtol=0, atol=1e-15)


def test_fedavg_permutation_invariance(gen):
    vs = [gen.normal(size=50) * 10 for _ in range(5)]
    ref = fedavg(vs)
    for perm in itertools.permutations(range(5)):
        assert np.max(np.abs(fedavg([vs[i] for i in perm]) - ref)) <= 1e-12


def test_server_step_cases(gen):
    w = gen.normal(size=4)
    g = gen.normal(size=4)
    np.testing.assert_array_equal(server_step(w, [np.zeros(4)], 1.0), w)
    np.testing.assert_array_equal(server_step(w, [g], 0.0), w)
    np.testing.assert_array_equal(server_step(w, [g], 1.0), w - g)


@pytest.mark.parametrize("server_lr", [1.0, 0.5])
def test_single_client_round_reproduces_local_training(server_lr):
    spec, clients, _ = make_clients(2)
    c = clients[0]
    w0 = spec.init_params(np.random.default_rng(0))
    local = local_train(c.shard, w0, spec, 3, 8, 0.05, 0.9, 7)
    g = local_update(c, w0, spec, 3, 8, 0.05, 0.9, 7, server_lr=server_lr)
    if server_lr == 1.0:
        assert server_step(w0, [g], 1.0).tobytes() == local.tobytes()
    else:
        np.testing.assert_allclose(server_step(w0, [g], server_lr), local, rtol=0, atol=1e-15)


def test_local_update_edge_cases():
    spec, clients, _ = make_clients(2)
    w0 = spec.init_params(np.random.default_rng(0))
    assert not np.any(local_update(clients[0], w0, spec, 0, 8, 0.05, 0.9, 1))
    a = local_update(clients[0], w0, spec, 2, 8, 0.05, 0.9, 5)
    b = local_update(clients[0], w0, spec, 2, 8, 0.05, 0.9, 5)
    assert a.tobytes() == b.tobytes()
    empty = ClientRecord(9, clients[0].shard.subset([]))
    with pytest.raises(ConfigError):
        local_update(empty, w0, spec, 1, 8, 0.05, 0.9, 1)


def test_training_is_deterministic(tiny_fl):
    spec, clients, _ = make_clients(6, malicious=(1, 4))
    a = run_training(clients, spec, tiny_fl, 3)
    b = run_training(clients, spec, tiny_fl, 3)
    assert a.model.tobytes() == b.model.tobytes()


def test_windows_hold_last_rounds_of_malicious_clients(tiny_fl):
    spec, clients, _ = make_clients(6, malicious=(1, 4))
    fl = dataclasses.replace(tiny_fl, rounds=7)
    log = {}
    result = run_training(clients, spec, fl, 0, window=3,
                          on_round=lambda r, m, u: log.update({r: {k: v.copy() for k, v in u.items()}}))
    assert sorted(result.windows) == [1, 4]
    for cid, window in result.windows.items():
        assert window.rounds == [5, 6, 7]
        for r, g in window.entries:
            assert g.tobytes() == log[r][cid].tobytes()
    assert result.history.stored_vectors() == 2 * 3


def test_short_training_fills_partial_window(tiny_fl):
    spec, clients, _ = make_clients(6, malicious=(0,))
    result = run_training(clients, spec, dataclasses.replace(tiny_fl, rounds=2), 0, window=10)
    assert result.windows[0].rounds == [1, 2]


def test_benign_only_training_stores_nothing(tiny_fl):
    spec, clients, _ = make_clients(6)
    result = run_training(clients, spec, tiny_fl, 0)
    assert result.windows == {} and result.history.stored_vectors() == 0


def test_run_finetune_zero_rounds_and_errors(tiny_fl):
    spec, clients, _ = make_clients(6)
    w = spec.init_params(np.random.default_rng(0))
    assert run_finetune(w, clients, 0, spec, tiny_fl, 0) is w
    with pytest.raises(ConfigError):
        run_finetune(w, [], 3, spec, tiny_fl, 0)


def test_finetune_equals_training_from_injected_model(tiny_fl):
    spec, clients, _ = make_clients(6)
    w = spec.init_params(np.random.default_rng(9))
    ft = run_finetune(w, clients[2:], 3, spec, tiny_fl, 5)
    tr = run_training(clients[2:], spec, tiny_fl, 5, rounds=3, initial_model=w, stream=PHASE_UNLEARN)
    assert ft.tobytes() == tr.model.tobytes()


def test_finetune_accuracy_non_decreasing_on_separable_data(tiny_fl):
    _, clients, data = make_clients(6, separation=12.0)
    spec = ModelSpec(16, (), 4)
    fl = dataclasses.replace(tiny_fl, lr=0.01)
    for seed in range(3):
        model = spec.init_params(rng(seed, "init"))
        accs = [accuracy(model, spec, data)]
        run_finetune(model, clients, 5, spec, fl, seed, on_round=lambda t, m: accs.append(accuracy(m, spec, data)))
        assert len(accs) == 6
        assert all(b >= a for a, b in zip(accs, accs[1:]))
        assert accs[-1] > accs[0]


def test_duplicate_client_ids_rejected(tiny_fl):
    spec, clients, _ = make_clients(3)
    with pytest.raises(ConfigError):
        run_training(clients + [clients[0]], spec, tiny_fl, 0)


def test_history_store_calibration_rounds():
    store = HistoryStore(2, calibration_period=2, retained=[0])
    for r in range(1, 6):
        store.record(r, np.full(1, r), {0: np.full(1, 10.0 * r), 1: np.zeros(1)})
    assert sorted(store.checkpoints) == [1, 3, 5]
    assert sorted(store.calibration[3]) == [0]
    store.detect([1])
    assert sorted(store.windows) == [1]
