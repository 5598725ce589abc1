import numpy as np
import pytest

from helpers import single_quadratic
from bicomp import algorithms as alg
from bicomp import problems
from bicomp.compressors import CompressorClassError, CompressorSpec, compress
from bicomp.problems import make_quadratic_ensemble


def run_trajectory(step, state, rounds):
    xs = [state.x.copy()]
    for _ in range(rounds):
        out = step(state)
        state = out[0]
        xs.append(state.x.copy())
    return state, np.stack(xs)


def test_gd_single_step_and_fixed_point():
    p = single_quadratic()
    st = alg.make_state(p, np.array([2.0]), gamma=0.5)
    st, _ = alg.gd_round(st, p)
    assert st.x[0] == 1.0
    ref = problems.compute_opt_reference(p)
    st_opt = alg.make_state(p, ref.x_star, gamma=0.5)
    st_opt, _ = alg.gd_round(st_opt, p)
    np.testing.assert_array_equal(st_opt.x, ref.x_star)


def test_gd_monotone_at_inverse_L():
    p = make_quadratic_ensemble(6, 3, seed=0, mu=0.2, L=2.0, hetero=1.5)
    st = alg.make_state(p, np.ones(6), gamma=1.0 / p.constants.L)
    values = [p.value(st.x)]
    for _ in range(100):
        st, _ = alg.gd_round(st, p)
        values.append(p.value(st.x))
    assert all(b <= a + 1e-15 for a, b in zip(values, values[1:]))


def test_ef21p_hand_iteration_with_halving_compressor():
    p = single_quadratic()
    spec = CompressorSpec("scale", d=1, c=0.5)
    stream = alg.make_primal_stream(spec, seed=0)
    st = alg.make_state(p, np.array([4.0]), gamma=0.25)
    st, _ = alg.ef21p_round(st, p, stream)
    assert st.x[0] == 3.0
    assert st.w_server[0] == 3.5
    st, _ = alg.ef21p_round(st, p, stream)
    assert st.x[0] == 2.125
    assert st.w_server[0] == 2.8125


def test_ef21p_perturbation_bound_deterministic_compressor():
    p = make_quadratic_ensemble(5, 2, seed=1, hetero=1.0)
    spec = CompressorSpec("scale", d=5, c=0.5)
    alpha = 0.75
    stream = alg.make_primal_stream(spec, seed=0)
    st = alg.make_state(p, np.ones(5), gamma=0.02)
    for _ in range(50):
        st, metrics = alg.ef21p_round(st, p, stream)
        # the post-broadcast gap is the perturbation felt by the next round
        assert metrics["zeta_sq"] <= (1 - alpha) * metrics["pre_gap_sq"] + 1e-15
        assert metrics["zeta_sq"] == pytest.approx(
            (1 - alpha) * metrics["pre_gap_sq"], rel=1e-12, abs=1e-300
        )


def test_ef21p_identity_is_gd_bitwise():
    p = make_quadratic_ensemble(7, 3, seed=2, hetero=2.0)
    stream = alg.make_primal_stream(alg.identity_spec(7), seed=0)
    st_a = alg.make_state(p, np.ones(7), gamma=0.05)
    st_b = alg.make_state(p, np.ones(7), gamma=0.05)
    _, xs_a = run_trajectory(lambda s: alg.ef21p_round(s, p, stream), st_a, 60)
    _, xs_b = run_trajectory(lambda s: alg.gd_round(s, p), st_b, 60)
    np.testing.assert_array_equal(xs_a, xs_b)


def test_diana_identity_dual_beta_one_is_gd_bitwise():
    p = make_quadratic_ensemble(6, 4, seed=3, hetero=2.0)
    duals = alg.make_dual_streams(alg.identity_spec(6), seed=0, n=4)
    st_a = alg.make_state(p, np.ones(6), gamma=0.05, beta=1.0)
    st_b = alg.make_state(p, np.ones(6), gamma=0.05)
    _, xs_a = run_trajectory(lambda s: alg.diana_round(s, p, duals)[0:2], st_a, 80)
    _, xs_b = run_trajectory(lambda s: alg.gd_round(s, p), st_b, 80)
    np.testing.assert_array_equal(xs_a, xs_b)


def test_ef21p_diana_identity_primal_is_diana_bitwise():
    p = make_quadratic_ensemble(6, 3, seed=4, hetero=2.0)
    duals = alg.make_dual_streams(CompressorSpec("randk", d=6, k=2), seed=9, n=3)
    prim = alg.make_primal_stream(alg.identity_spec(6), seed=9)
    st_a = alg.make_state(p, np.ones(6), gamma=0.03, beta=1.0 / 3.0)
    st_b = alg.make_state(p, np.ones(6), gamma=0.03, beta=1.0 / 3.0)
    _, xs_a = run_trajectory(lambda s: alg.ef21p_diana_round(s, p, duals, prim), st_a, 80)
    _, xs_b = run_trajectory(lambda s: alg.diana_round(s, p, duals), st_b, 80)
    np.testing.assert_array_equal(xs_a, xs_b)


def test_ef21p_diana_zero_shifts_is_ef21p_dcgd_bitwise():
    p = make_quadratic_ensemble(6, 3, seed=5, hetero=2.0)
    duals = alg.make_dual_streams(CompressorSpec("randk", d=6, k=1), seed=4, n=3)
    prim = alg.make_primal_stream(CompressorSpec("topk", d=6, k=2), seed=4)
    st_a = alg.make_state(p, np.ones(6), gamma=0.02, beta=0.0, h_init="zero")
    st_b = alg.make_state(p, np.ones(6), gamma=0.02)
    _, xs_a = run_trajectory(lambda s: alg.ef21p_diana_round(s, p, duals, prim), st_a, 80)
    _, xs_b = run_trajectory(lambda s: alg.ef21p_dcgd_round(s, p, duals, prim), st_b, 80)
    np.testing.assert_array_equal(xs_a, xs_b)


def test_ef21p_dcgd_identity_dual_is_ef21p_bitwise():
    p = make_quadratic_ensemble(6, 3, seed=6, hetero=2.0)
    duals = alg.make_dual_streams(alg.identity_spec(6), seed=2, n=3)
    prim = alg.make_primal_stream(CompressorSpec("topk", d=6, k=2), seed=2)
    st_a = alg.make_state(p, np.ones(6), gamma=0.02)
    st_b = alg.make_state(p, np.ones(6), gamma=0.02)
    _, xs_a = run_trajectory(lambda s: alg.ef21p_dcgd_round(s, p, duals, prim), st_a, 80)
    _, xs_b = run_trajectory(lambda s: alg.ef21p_round(s, p, prim), st_b, 80)
    np.testing.assert_array_equal(xs_a, xs_b)


def test_single_worker_dual_identity_primal_scale_matches_ef21p():
    p = single_quadratic(1.0, 0.5)
    duals = alg.make_dual_streams(alg.identity_spec(1), seed=0, n=1)
    prim = alg.make_primal_stream(CompressorSpec("scale", d=1, c=0.5), seed=0)
    st_a = alg.make_state(p, np.array([4.0]), gamma=0.25, beta=1.0)
    st_b = alg.make_state(p, np.array([4.0]), gamma=0.25)
    _, xs_a = run_trajectory(lambda s: alg.ef21p_diana_round(s, p, duals, prim), st_a, 40)
    _, xs_b = run_trajectory(lambda s: alg.ef21p_round(s, p, prim), st_b, 40)
    assert np.max(np.abs(xs_a - xs_b)) <= 1e-15


def test_diana_shift_average_invariant():
    p = make_quadratic_ensemble(5, 4, seed=7, hetero=2.0)
    duals = alg.make_dual_streams(CompressorSpec("randk", d=5, k=1), seed=3, n=4)
    st = alg.make_state(p, np.ones(5), gamma=0.01, beta=0.2, h_init="grad")
    for _ in range(2000):
        st, _, _ = alg.diana_round(st, p, duals)
        st.check_replicas()
    assert st.shift_drift() <= 1e-12


def test_diana_messages_replay_from_streams():
    # every uplink message equals a direct replayed compression of the
    # shifted gradient for that (seed, worker, round)
    p = make_quadratic_ensemble(6, 2, seed=8, hetero=1.0)
    spec = CompressorSpec("randk", d=6, k=2)
    duals = alg.make_dual_streams(spec, seed=13, n=2)
    st = alg.make_state(p, np.ones(6), gamma=0.02, beta=0.25, h_init="grad")
    for _ in range(10):
        t = st.t
        shifted = [p.grad_i(i, st.w_server) - st.h_workers[i] for i in range(2)]
        st, messages, _ = alg.diana_round(st, p, duals)
        for i in range(2):
            replayed = compress(duals[i].at_round(t), shifted[i])
            assert replayed.tobytes() == messages.uplink[i].tobytes()


def _hand_g_from_messages(state, messages, n):
    msum = np.zeros(state.x.shape[0])
    for i in range(n):
        msum += messages.uplink[i].to_dense()
    return state.h_server + msum / n


def test_diana_estimator_enumeration_unbiased():
    # d=2, k=1, n=2: four equally likely joint index draws; the update must
    # match the hand algebra for each, and their average is the exact mean
    # shifted gradient
    p = quad_2d_2workers()
    duals = alg.make_dual_streams(CompressorSpec("randk", d=2, k=1), seed=0, n=2)
    st0 = alg.make_state(p, np.array([0.7, -1.3]), gamma=0.05, beta=0.5, h_init="grad")
    grad_mean = np.mean([p.grad_i(i, st0.w_server) for i in range(2)], axis=0)
    patterns = {}
    for t in range(64):
        st = alg.AlgoState(
            x=st0.x.copy(), w_server=st0.w_server.copy(), w_workers=st0.w_workers.copy(),
            h_workers=st0.h_workers.copy(), h_server=st0.h_server.copy(),
            t=t, gamma=st0.gamma, beta=st0.beta,
        )
        new, messages, _ = alg.diana_round(st, p, duals)
        g = _hand_g_from_messages(st0, messages, 2)
        np.testing.assert_array_equal(st0.x - st0.gamma * g, new.x)
        key = (int(messages.uplink[0].indices[0]), int(messages.uplink[1].indices[0]))
        patterns.setdefault(key, g)
    assert set(patterns) == {(0, 0), (0, 1), (1, 0), (1, 1)}
    mean_g = np.mean(list(patterns.values()), axis=0)
    np.testing.assert_allclose(mean_g, grad_mean, rtol=1e-14, atol=1e-14)


def quad_2d_2workers():
    return problems.quadratic_problem(
        [np.diag([1.0, 2.0]), np.diag([3.0, 0.5])],
        [np.array([0.4, -0.2]), np.array([-1.0, 0.8])],
    )


def test_dcgd_estimator_enumeration_unbiased():
    p = quad_2d_2workers()
    duals = alg.make_dual_streams(CompressorSpec("randk", d=2, k=1), seed=0, n=2)
    prim = alg.make_primal_stream(alg.identity_spec(2), seed=0)
    st0 = alg.make_state(p, np.array([0.3, 0.9]), gamma=0.05)
    grad_mean = np.mean([p.grad_i(i, st0.w_server) for i in range(2)], axis=0)
    patterns = {}
    for t in range(64):
        st = alg.AlgoState(
            x=st0.x.copy(), w_server=st0.w_server.copy(), w_workers=st0.w_workers.copy(),
            h_workers=st0.h_workers.copy(), h_server=st0.h_server.copy(),
            t=t, gamma=st0.gamma, beta=0.0,
        )
        new, messages, _ = alg.ef21p_dcgd_round(st, p, duals, prim)
        msum = np.zeros(2)
        for i in range(2):
            msum += messages.uplink[i].to_dense()
        g = msum / 2
        np.testing.assert_array_equal(st0.x - st0.gamma * g, new.x)
        key = (int(messages.uplink[0].indices[0]), int(messages.uplink[1].indices[0]))
        patterns.setdefault(key, g)
    assert set(patterns) == {(0, 0), (0, 1), (1, 0), (1, 1)}
    np.testing.assert_allclose(
        np.mean(list(patterns.values()), axis=0), grad_mean, rtol=1e-14, atol=1e-14
    )


def test_interpolation_quadratic_reaches_machine_precision():
    p = make_quadratic_ensemble(10, 10, seed=9, style="identity", mu=1.0, interpolation=True)
    ref = problems.compute_opt_reference(p)
    from bicomp import theory
    from bicomp.compressors import alpha_of, omega_of

    dual = CompressorSpec("randk", d=10, k=5)
    prim = CompressorSpec("topk", d=10, k=5)
    ti = theory.TheoryInputs(
        n=10, omega=omega_of(dual), alpha=alpha_of(prim),
        L=p.constants.L, L_max=p.constants.L_max, L_hat=p.constants.L_hat,
        mu=p.constants.mu,
    )
    gamma = theory.stepsize_dcgd_strong(ti).value
    duals = alg.make_dual_streams(dual, seed=1, n=10)
    prim_stream = alg.make_primal_stream(prim, seed=1)
    st = alg.make_state(p, np.ones(10), gamma=gamma)
    for _ in range(20000):
        st, _, _ = alg.ef21p_dcgd_round(st, p, duals, prim_stream)
    assert float(np.sum((st.x - ref.x_star) ** 2)) < 1e-10


def test_class_misuse_rejected():
    p = make_quadratic_ensemble(4, 2, seed=10)
    bad_dual = alg.make_dual_streams(CompressorSpec("topk", d=4, k=1), seed=0, n=2)
    good_dual = alg.make_dual_streams(CompressorSpec("randk", d=4, k=1), seed=0, n=2)
    bad_primal = alg.make_primal_stream(CompressorSpec("randk", d=4, k=1), seed=0)
    st = alg.make_state(p, np.ones(4), gamma=0.01, beta=0.5)
    with pytest.raises(CompressorClassError):
        alg.diana_round(st, p, bad_dual)
    with pytest.raises(CompressorClassError):
        alg.ef21p_dcgd_round(st, p, good_dual, bad_primal)


def test_stream_wiring_validation():
    p = make_quadratic_ensemble(4, 2, seed=11)
    st = alg.make_state(p, np.ones(4), gamma=0.01)
    duals = alg.make_dual_streams(CompressorSpec("randk", d=4, k=1), seed=0, n=2)
    with pytest.raises(ValueError, match="dual streams"):
        alg.dcgd_round(st, p, list(reversed(duals)))
    mixed = alg.make_dual_streams(CompressorSpec("randk", d=4, k=1), seed=1, n=2)
    with pytest.raises(ValueError, match="share the run seed"):
        alg.ef21p_dcgd_round(
            st, p, duals, alg.make_primal_stream(CompressorSpec("topk", d=4, k=1), seed=2)
        )
    del mixed


def test_attach_stochastic_full_sweep_identical():
    p = make_quadratic_ensemble(5, 3, seed=12, noise_sigma=0.4, hetero=1.0)
    op = alg.attach_stochastic(alg.gd_round, "full")
    st_a = alg.make_state(p, np.ones(5), gamma=0.05)
    st_b = alg.make_state(p, np.ones(5), gamma=0.05)
    for _ in range(20):
        st_a, _ = op(st_a, p)
        st_b, _ = alg.gd_round(st_b, p)
    np.testing.assert_array_equal(st_a.x, st_b.x)


def test_attach_stochastic_noise_changes_trajectory_but_stays_keyed():
    p = make_quadratic_ensemble(5, 3, seed=13, noise_sigma=0.4, hetero=1.0)
    op = alg.attach_stochastic(alg.gd_round, 1)
    st_a = alg.make_state(p, np.ones(5), gamma=0.05)
    st_b = alg.make_state(p, np.ones(5), gamma=0.05)
    st_c = alg.make_state(p, np.ones(5), gamma=0.05)
    for _ in range(10):
        st_a, _ = op(st_a, p, seed=1)
        st_b, _ = op(st_b, p, seed=1)
        st_c, _ = op(st_c, p, seed=2)
    np.testing.assert_array_equal(st_a.x, st_b.x)
    assert not np.array_equal(st_a.x, st_c.x)
    with pytest.raises(ValueError):
        alg.attach_stochastic(alg.gd_round, 2**33)


def test_shared_partition_gives_homogeneous_workers():
    from bicomp.dataio import partition, synthetic_logreg_dataset
    from bicomp.problems import logreg_problem

    ds = synthetic_logreg_dataset(12, 3, 2, seed=14)
    part = partition(ds, 4, "shared")
    p = logreg_problem(ds, part, n_classes=2)
    x = np.random.default_rng(15).standard_normal(p.dim)
    grads = [p.grad_i(i, x) for i in range(4)]
    for g in grads[1:]:
        np.testing.assert_array_equal(g, grads[0])


def test_divergence_guard_raises():
    p = single_quadratic()
    st = alg.make_state(p, np.array([1.0]), gamma=1e160)
    with pytest.raises(alg.DivergenceError):
        for _ in range(10):
            st, _ = alg.gd_round(st, p)
