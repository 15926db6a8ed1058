import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from admm_pb import autodiff as ad
from admm_pb.stable_ops import (
    ContractiveOperator,
    OperatorDims,
    flatten,
    gain_bound,
    init_params,
    load_checkpoint,
    save_checkpoint,
    simulate,
    step,
    unflatten,
)

DIMS = OperatorDims(n_in=4, n_state=4, n_out=2)


def make_op(theta, kappa=0.95):
    return ContractiveOperator(DIMS, theta, kappa)


def test_param_count_and_roundtrip():
    ni, ns, no = 4, 4, 2
    assert DIMS.n_params == ns * ns + ns * ni + no * ns + no * ni + ns
    theta = np.arange(DIMS.n_params, dtype=float)
    assert np.array_equal(flatten(unflatten(theta, DIMS), DIMS), theta)


def test_init_params():
    assert np.array_equal(init_params(DIMS, 0.0, 3), np.zeros(DIMS.n_params))
    assert np.array_equal(init_params(DIMS, 0.1, 1), init_params(DIMS, 0.1, 1))
    big = OperatorDims(n_in=50, n_state=90, n_out=10)
    assert big.n_params >= 10_000
    assert 0.095 <= np.std(init_params(big, 0.1, 5)) <= 0.105
    with pytest.raises(ValueError):
        init_params(DIMS, -1.0)


def test_zero_input_gives_zero_output():
    op = make_op(init_params(DIMS, 1.0, 0))
    eff = op.effective()
    s, u = step(eff, np.zeros(4), np.zeros(4))
    assert not s.any() and not u.any()
    assert not simulate(op, np.zeros((30, 4))).any()


def test_feedthrough_identity():
    mats = unflatten(np.zeros(DIMS.n_params), DIMS)
    D = np.zeros((2, 4))
    D[0, 0] = D[1, 1] = 1.0
    mats["D"] = D
    op = make_op(flatten(mats, DIMS))
    w = np.random.default_rng(0).standard_normal((5, 4))
    assert np.array_equal(simulate(op, w), w[:, :2])
    assert gain_bound(op) == 1.0


def test_zero_params_zero_gain():
    assert gain_bound(make_op(np.zeros(DIMS.n_params), 0.9)) == 0.0


def _effective_A(theta, kappa=0.95):
    return make_op(theta, kappa).effective().A


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), scale=st.floats(1e-3, 1e3))
def test_contraction_for_any_theta(seed, scale):
    theta = scale * np.random.default_rng(seed).standard_normal(DIMS.n_params)
    A = _effective_A(theta)
    assert np.linalg.norm(A, 2) <= 0.95


def test_decay_after_input_difference():
    rng = np.random.default_rng(3)
    op = make_op(rng.standard_normal(DIMS.n_params))
    w1 = rng.standard_normal((60, 4))
    w2 = w1.copy()
    w2[0] += rng.standard_normal(4)
    eff = op.effective()
    s1 = s2 = np.zeros(4)
    gaps = []
    for a, b in zip(w1, w2):
        s1, _ = step(eff, s1, a)
        s2, _ = step(eff, s2, b)
        gaps.append(np.linalg.norm(s1 - s2))
    gaps = np.array(gaps)
    # state gap contracts by at least kappa per step once the inputs agree
    assert np.all(gaps[1:] <= 0.95 * gaps[:-1] + 1e-15)
    du = np.linalg.norm(simulate(op, w1) - simulate(op, w2), axis=1)
    C = op.effective().C
    assert np.all(du[2:] <= np.linalg.norm(C, 2) * gaps[0] * 0.95 ** np.arange(1, 59) + 1e-12)


def test_gain_bound_monte_carlo():
    rng = np.random.default_rng(4)
    for _ in range(10):
        op = make_op(rng.standard_normal(DIMS.n_params) * rng.uniform(0.1, 3))
        gamma = gain_bound(op)
        for _ in range(10):
            w = rng.standard_normal((40, 4)) * rng.uniform(0.01, 10)
            u = simulate(op, w)
            assert np.linalg.norm(u) <= gamma * np.linalg.norm(w) * (1 + 1e-12)


def test_incremental_gain():
    rng = np.random.default_rng(5)
    for _ in range(20):
        op = make_op(rng.standard_normal(DIMS.n_params))
        gamma = gain_bound(op)
        for _ in range(5):
            w1, w2 = rng.standard_normal((2, 40, 4))
            assert np.linalg.norm(simulate(op, w1) - simulate(op, w2)) <= gamma * np.linalg.norm(w1 - w2) * (1 + 1e-12)


def test_causality_bit_exact():
    rng = np.random.default_rng(6)
    op = make_op(rng.standard_normal(DIMS.n_params))
    w = rng.standard_normal((30, 4))
    full = simulate(op, w)
    for t in (0, 5, 17):
        assert np.array_equal(simulate(op, w[: t + 1]), full[: t + 1])


def test_batched_step_matches_per_scenario():
    rng = np.random.default_rng(7)
    op = make_op(rng.standard_normal(DIMS.n_params))
    w = rng.standard_normal((20, 4, 3))
    batch = simulate(op, w)
    for s in range(3):
        np.testing.assert_allclose(batch[:, :, s], simulate(op, w[:, :, s]), rtol=0, atol=1e-14)


def test_operator_gradient_matches_fd():
    rng = np.random.default_rng(8)
    theta = 0.5 * rng.standard_normal(DIMS.n_params)
    w = rng.standard_normal((12, 4, 2))

    def loss_value(th):
        return float(np.sum(simulate(make_op(th), w) ** 2))

    tape = ad.Tape()
    eff = make_op(theta).effective(tape)
    state = np.zeros((4, 2))
    outs = []
    for wt in w:
        state, u = step(eff, state, wt)
        outs.append(u)
    grad = tape.backward(ad.norm_sq(ad.stack(outs)))
    h = 1e-6
    fd = np.array([(loss_value(theta + h * e) - loss_value(theta - h * e)) / (2 * h) for e in np.eye(theta.size)])
    np.testing.assert_allclose(grad, fd, rtol=1e-5, atol=1e-7)


def test_invalid_kappa():
    with pytest.raises(ValueError):
        make_op(np.zeros(DIMS.n_params), kappa=1.0)


def test_checkpoint_roundtrip(tmp_path):
    op = ContractiveOperator(DIMS, init_params(DIMS, 0.1, 9), 0.97, 1.5)
    path = tmp_path / "ck.bin"
    save_checkpoint(path, op, seed=9)
    loaded, header = load_checkpoint(path)
    assert np.array_equal(loaded.theta, op.theta)
    assert loaded.kappa == 0.97 and loaded.prescale == 1.5 and header["seed"] == 9
    raw = path.read_bytes()
    payload = raw[raw.index(b"\n") + 1 :]
    assert np.array_equal(np.frombuffer(payload, dtype="<f8"), op.theta)
