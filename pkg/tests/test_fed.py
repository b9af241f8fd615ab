import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import SMALL_MODEL, small_federation
from fedalign.datagen import ClientDataset
from fedalign.energy import ConfigError
from fedalign.fed import (
    ClientState,
    FedConfig,
    aggregate,
    aggregation_weights,
    evaluate,
    local_train,
    run_fdg,
    write_history_csv,
)
from fedalign.model import LossLambdas, ModelConfig, client_loss, flatten, forward, init_params, unflatten
from fedalign.numcore import OptimizerState, make_rng
from fedalign.protocol import ALLOWED_SERVER_BOUND, Direction, Ledger, MessageKind, PrivacyViolation

ALLOWED_NAMES = {"ParamVector", "GradVector", "EnergyScalars", "LatentVectors",
                 "ClassPredictions", "SampleIndices", "DatasetSize"}


def _client(ds, theta, seed=0):
    return ClientState(0, ds, theta, OptimizerState.fresh(theta.size), make_rng(seed))


def test_aggregate_examples():
    np.testing.assert_array_equal(aggregate([[1.0, 3.0], [5.0, 7.0]], [1, 3]), [4.0, 6.0])
    np.testing.assert_array_equal(aggregate([[1.5, -2.0]], [7]), [1.5, -2.0])
    rng = make_rng(0)
    P = rng.normal(size=(4, 9))
    np.testing.assert_allclose(aggregate(P, [5, 5, 5, 5]), P.sum(0) / 4, rtol=0, atol=1e-15)


def test_aggregate_errors():
    with pytest.raises(ValueError):
        aggregate([], [])
    with pytest.raises(ValueError):
        aggregate([[1.0]], [1, 2])
    with pytest.raises(ValueError):
        aggregate([[1.0], [2.0]], [1, 0])
    with pytest.raises(ValueError):
        aggregate([[1.0], [2.0, 3.0]], [1, 1])


@settings(max_examples=60)
@given(
    arrays(np.float64, (3, 5), elements=st.floats(-100, 100)),
    st.lists(st.integers(1, 1000), min_size=3, max_size=3),
    st.floats(-10, 10), st.floats(-10, 10),
)
def test_aggregate_affine_equivariant_and_weights(P, sizes, a, b):
    w = aggregation_weights(sizes)
    assert abs(w.sum() - 1.0) < 1e-12
    lhs = aggregate(a * P + b, sizes)
    rhs = a * aggregate(P, sizes) + b
    np.testing.assert_allclose(lhs, rhs, rtol=1e-9, atol=1e-9)
    # independent weighted-mean oracle
    oracle = [sum(sizes[k] * P[k, j] for k in range(3)) / sum(sizes) for j in range(5)]
    np.testing.assert_allclose(aggregate(P, sizes), oracle, rtol=0, atol=1e-12)


def test_local_train_zero_epochs_is_identity(federation, fast_config):
    theta = flatten(init_params(SMALL_MODEL, make_rng(1)))
    out = local_train(_client(federation.sources[0], theta), theta, 0, fast_config, SMALL_MODEL)
    np.testing.assert_array_equal(out.params, theta)


def test_local_train_requires_labels(federation, fast_config):
    ds = federation.sources[0].copy()
    ds.labeled_mask[:] = False
    theta = flatten(init_params(SMALL_MODEL, make_rng(1)))
    with pytest.raises(ConfigError):
        local_train(_client(ds, theta), theta, 1, fast_config, SMALL_MODEL)


def test_local_train_deterministic(federation, fast_config):
    theta = flatten(init_params(SMALL_MODEL, make_rng(1)))
    a = local_train(_client(federation.sources[0], theta, 4), theta, 2, fast_config, SMALL_MODEL)
    b = local_train(_client(federation.sources[0], theta, 4), theta, 2, fast_config, SMALL_MODEL)
    np.testing.assert_array_equal(a.params, b.params)


def test_full_batch_step_decreases_loss():
    x = np.array([[-2.0, 0.1], [-1.5, -0.2], [1.7, 0.3], [2.2, -0.1]])
    y = np.array([0, 0, 1, 1])
    ds = ClientDataset(x, y, np.ones(4, bool))
    mcfg = ModelConfig(2, (4,), 2, 2)
    theta = flatten(init_params(mcfg, make_rng(3)))
    cfg = FedConfig(local_batch=4, lambdas=LossLambdas(0.0, 0.0), learning_rate=0.01, seed=0)

    def loss(vec):
        p = unflatten(mcfg, vec)
        return client_loss(p, forward(p, x, mode="eval"), y, cfg.lambdas)[0]

    out = local_train(_client(ds, theta), theta, 1, cfg, mcfg)
    assert loss(out.params) < loss(theta)


def test_evaluate_examples():
    mcfg = ModelConfig(2, (), 2, 2)
    p = init_params(mcfg, make_rng(0))
    p.weights[-1][:] = 0.0
    p.biases[-1][:] = [0.0, 5.0]  # always predicts class 1
    ds = ClientDataset(make_rng(1).normal(size=(50, 2)), np.ones(50, int), np.ones(50, bool))
    assert evaluate(p, ds) == 1.0
    with pytest.raises(ValueError):
        evaluate(p, ClientDataset(np.zeros((0, 2)), np.zeros(0, int), np.zeros(0, bool)))


def test_evaluate_random_labels_binomial_bound():
    n = 4000
    rng = make_rng(2)
    ds = ClientDataset(rng.normal(size=(n, 2)), rng.integers(0, 2, n), np.ones(n, bool))
    acc = evaluate(init_params(ModelConfig(2, (8,), 2, 2), make_rng(0)), ds)
    assert abs(acc - 0.5) <= 3 / math.sqrt(n)


def test_evaluate_invariant_to_logit_shift():
    mcfg = ModelConfig(2, (4,), 2, 3)
    p = init_params(mcfg, make_rng(0))
    ds = ClientDataset(make_rng(1).normal(size=(40, 2)), make_rng(2).integers(0, 3, 40), np.ones(40, bool))
    before = evaluate(p, ds)
    p.biases[-1] += 17.0
    assert evaluate(p, ds) == before


def test_fedavg_reduction(federation, fast_config):
    zero = FedConfig(rounds=6, comm_every=3, local_batch=32, target_batch=64,
                     lambdas=LossLambdas(0.0, 0.0), lambda_fea=0.0, seed=0)
    a = run_fdg(zero, federation, SMALL_MODEL)
    b = run_fdg(fast_config.as_fedavg(), federation, SMALL_MODEL)
    np.testing.assert_array_equal(a.server.global_params, b.server.global_params)
    assert not any(r.stepped for r in a.server.energy_log)
    assert b.server.energy_log == []


@pytest.mark.parametrize("rounds,every,expected", [(5, 5, 1), (10, 5, 2), (11, 5, 3), (3, 5, 1)])
def test_schedule_arithmetic(federation, rounds, every, expected):
    cfg = FedConfig(rounds=rounds, comm_every=every, local_batch=64, target_batch=32, seed=0)
    res = run_fdg(cfg, federation, SMALL_MODEL)
    assert res.aggregations == expected
    assert len({r.round for r in res.history}) == expected
    assert res.history[-1].round == rounds


def test_privacy_ledger_of_run(federation, fast_config):
    res = run_fdg(fast_config, federation, SMALL_MODEL)
    assert res.ledger.server_bound_kinds() <= ALLOWED_NAMES
    assert res.ledger.violations() == []
    assert {"ParamVector", "DatasetSize", "GradVector", "EnergyScalars"} <= res.ledger.server_bound_kinds()


def test_privacy_rejects_raw_features():
    ledger = Ledger()
    with pytest.raises(PrivacyViolation):
        ledger.to_server("RawFeatures", "client_0", np.zeros((4, 2)))
    with pytest.raises(PrivacyViolation):
        ledger.to_server("Labels", "client_0", np.zeros(4))
    with pytest.raises(PrivacyViolation):
        ledger.send("sideways", MessageKind.PARAM_VECTOR, "client_0", [1.0])
    assert ledger.records == []
    assert {k.value for k in ALLOWED_SERVER_BOUND} == ALLOWED_NAMES


def test_ledger_payload_is_a_copy():
    ledger = Ledger()
    src = np.array([1.0, 2.0])
    got = ledger.to_server(MessageKind.PARAM_VECTOR, "client_0", src, 3)
    got[0] = 99.0
    assert src[0] == 1.0
    m = ledger.records[0]
    assert (m.direction, m.kind, m.round, m.payload_size) == (Direction.TO_SERVER, MessageKind.PARAM_VECTOR, 3, 2)


def test_threads_bitwise_identical(federation, fast_config):
    a = run_fdg(fast_config, federation, SMALL_MODEL, threads=1)
    b = run_fdg(fast_config, federation, SMALL_MODEL, threads=4)
    np.testing.assert_array_equal(a.server.global_params, b.server.global_params)
    assert a.history == b.history


def test_history_csv_schema(tmp_path, federation, fast_config):
    res = run_fdg(fast_config, federation, SMALL_MODEL)
    path = tmp_path / "h.csv"
    write_history_csv(res.history, path)
    raw = path.read_bytes()
    assert b"\r" not in raw
    lines = raw.decode().splitlines()
    assert lines[0] == "round,client_or_target,split,accuracy"
    assert lines[-1].startswith("6,target,test,")
    assert len(lines) == 1 + len(res.history)


def test_fed_config_validation():
    with pytest.raises(ValueError):
        FedConfig(rounds=0)
    with pytest.raises(ValueError):
        FedConfig(lambda_fea=-0.1)
    with pytest.raises(ValueError):
        FedConfig(baseline="fedprox")
