import numpy as np
import pytest

from spinet.errors import ConfigError, DimensionMismatch, NotPositiveDefinite
from spinet.funcnet import Mlp, MlpSpec, TabularNet, constant_first_eigenfunction_wrapper
from spinet.linalg import NO_JITTER, cholesky, lower_inverse, sym_eig
from spinet.operators import LocalHamiltonian, SlownessPairs, TabularMatrix, tabular_exact_pi, tabular_exact_sigma
from spinet.spin import (
    AveragedState,
    BatchStatistics,
    RmsState,
    TrainConfig,
    assemble_param_gradient,
    eigenvalue_matrix,
    jacobian_of_sigma,
    masked_gradient_matrices,
    moving_average_update,
    ordered_eigenfunctions,
    rmsprop_step,
    sigma_hat,
    train_loop,
)


def random_spd(rng, k):
    a = rng.standard_normal((k, k))
    return a @ a.T + k * np.eye(k)


def random_sym(rng, k):
    a = rng.standard_normal((k, k))
    return a + a.T


def fd_masked(pi, sigma, h=1e-6):
    """Finite differences of each Lambda_kk, keeping only column k (the per-k mask)."""
    k = pi.shape[0]
    d_pi = np.zeros((k, k))
    d_sigma = np.zeros((k, k))
    for i in range(k):
        for j in range(k):
            e = np.zeros((k, k))
            e[i, j] = h
            d_pi[i, j] = (eigenvalue_matrix(pi + e, sigma)[j, j] - eigenvalue_matrix(pi - e, sigma)[j, j]) / (2 * h)
            es = 0.5 * (e + e.T) if i != j else e
            d_sigma[i, j] = (
                eigenvalue_matrix(pi, sigma + es)[j, j] - eigenvalue_matrix(pi, sigma - es)[j, j]
            ) / (2 * h)
    return d_pi, d_sigma


# -- estimators ------------------------------------------------------------------


def test_sigma_hat_examples():
    c = np.array([1.0, -2.0])
    np.testing.assert_allclose(sigma_hat(np.tile(c, (5, 1))), np.outer(c, c))
    u = np.random.default_rng(0).standard_normal((7, 3))
    np.testing.assert_allclose(sigma_hat(u, u), u.T @ u / 7)
    np.testing.assert_allclose(sigma_hat(np.eye(2), np.eye(2)), 0.5 * np.eye(2))
    with pytest.raises(DimensionMismatch):
        sigma_hat(np.ones((2, 2)), np.ones((2, 3)))


# -- masked gradient matrices --------------------------------------------------------


def test_masked_identity_sigma():
    rng = np.random.default_rng(1)
    pi = random_sym(rng, 4)
    d_pi, d_sigma, report = masked_gradient_matrices(pi, np.eye(4))
    np.testing.assert_allclose(d_pi, np.eye(4))
    np.testing.assert_allclose(d_sigma, -np.triu(pi))
    np.testing.assert_array_equal(report.lambdas, np.diag(report.lam))


def test_masked_scalar_case():
    d_pi, d_sigma, _ = masked_gradient_matrices(np.array([[3.0]]), np.array([[2.0]]))
    assert d_pi[0, 0] == pytest.approx(0.5)
    assert d_sigma[0, 0] == pytest.approx(-3.0 / 4.0)


@pytest.mark.parametrize("seed", range(5))
def test_masked_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    sigma, pi = random_spd(rng, 4), random_sym(rng, 4)
    d_pi, d_sigma, _ = masked_gradient_matrices(pi, sigma)
    f_pi, f_sigma = fd_masked(pi, sigma)
    assert np.max(np.abs(d_pi - f_pi)) / np.max(np.abs(f_pi)) < 1e-6
    assert np.max(np.abs(d_sigma - f_sigma)) / np.max(np.abs(f_sigma)) < 1e-6


def test_masked_propagates_not_pd():
    with pytest.raises(NotPositiveDefinite):
        masked_gradient_matrices(np.eye(2), -np.eye(2), NO_JITTER)


def test_block_independence():
    rng = np.random.default_rng(7)
    k = 5
    sigma, pi = random_spd(rng, k), random_sym(rng, k)
    lam = eigenvalue_matrix(pi, sigma)
    for n in range(1, k):
        p2, s2 = pi.copy(), sigma.copy()
        d = rng.standard_normal((k, k - n))
        p2[:, n:] += d
        p2[n:, :] += d.T
        s2[n:, n:] += np.eye(k - n)
        lam2 = eigenvalue_matrix(p2, s2)
        assert np.max(np.abs(lam2[:n, :n] - lam[:n, :n])) <= 1e-12


# -- batch statistics and gradients ----------------------------------------------------


def small_net(seed, k=3, envelope=None):
    rng = np.random.default_rng(seed)
    net = Mlp(MlpSpec(2, (6, 5), k, envelope_halfwidth=envelope))
    return net, net.init_params(rng), rng


def fd_tensor(f, p, h=1e-6):
    cols = []
    for i in range(p.size):
        e = np.zeros_like(p)
        e[i] = h
        cols.append((f(p + e) - f(p - e)) / (2 * h))
    return np.stack(cols, axis=-1)


def test_jacobian_of_sigma_exact_and_symmetric():
    net, p, rng = small_net(0)
    xa, xb = rng.standard_normal((6, 2)), rng.standard_normal((6, 2))
    jac = jacobian_of_sigma(net, p, (xa, xb), SlownessPairs())
    assert np.array_equal(jac, jac.transpose(1, 0, 2))
    fd = fd_tensor(lambda q: sigma_hat(net(q, xa), net(q, xb)), p)
    assert np.max(np.abs(jac - fd)) / np.max(np.abs(fd)) < 1e-5


def test_routed_jacobian_symmetric_part_is_exact():
    net, p, rng = small_net(1)
    x = rng.uniform(-2, 2, (8, 2))
    st = BatchStatistics(net, p, LocalHamiltonian(0.1), x)
    routed = st.sigma_jacobian(routed=True)
    np.testing.assert_allclose(0.5 * (routed + routed.transpose(1, 0, 2)), st.sigma_jacobian(False), atol=1e-14)


def test_jacobian_constant_features_zero():
    net = constant_first_eigenfunction_wrapper(Mlp(MlpSpec(2, (4,), 1)))
    p = net.init_params(np.random.default_rng(0))
    x = np.random.default_rng(1).standard_normal((5, 2))
    jac = jacobian_of_sigma(net, p, (x, x), SlownessPairs())
    assert np.all(jac[0, 0] == 0)


def test_jacobian_tabular_indicator():
    net = TabularNet(4, 2)
    p = net.init_params(np.random.default_rng(0))
    s, t = np.array([0, 1, 1]), np.array([3, 1, 0])
    jac = jacobian_of_sigma(net, p, (s, t), TabularMatrix(np.eye(4)))
    fd = fd_tensor(lambda q: sigma_hat(net(q, s), net(q, t)), p)
    np.testing.assert_allclose(jac, fd, atol=1e-9)
    assert np.all(jac.reshape(2, 2, 4, 2)[:, :, 2, :] == 0)


@pytest.mark.parametrize("kernel", ["slowness", "local", "tabular"])
def test_pi_vjp_symmetric_cotangent_matches_fd(kernel):
    net, p, rng = small_net(2, envelope=4.0)
    if kernel == "slowness":
        kern, batch = SlownessPairs(), (rng.uniform(-3, 3, (5, 2)), rng.uniform(-3, 3, (5, 2)))
    elif kernel == "local":
        kern, batch = LocalHamiltonian(0.1), rng.uniform(-3, 3, (5, 2))
    else:
        net = TabularNet(5, 3)
        p = net.init_params(rng)
        kern, batch = TabularMatrix(random_sym(rng, 5)), (rng.integers(0, 5, 6), rng.integers(0, 5, 6))
    d = random_sym(rng, 3)
    g = BatchStatistics(net, p, kern, batch).pi_vjp(d)
    fd = fd_tensor(lambda q: np.sum(BatchStatistics(net, q, kern, batch).pi * d), p)
    assert np.max(np.abs(g - fd)) / np.max(np.abs(fd)) < 1e-5


def test_assemble_gradient_scalar_tabular_fd():
    rng = np.random.default_rng(3)
    m = np.array([[1.0, 2.0, 0.0], [2.0, -1.0, 0.5], [0.0, 0.5, 0.3]])
    kern = TabularMatrix(m)
    net = TabularNet(3, 1)
    p = net.init_params(rng)
    s, t = np.array([0, 1, 2, 2]), np.array([1, 1, 0, 2])
    sigma_bar = np.array([[1.7]])
    jac_bar = rng.standard_normal((1, 1, 3))
    st = BatchStatistics(net, p, kern, (s, t))
    d_pi, d_sigma, _ = masked_gradient_matrices(st.pi, sigma_bar)
    g = assemble_param_gradient(net, p, (s, t), kern, d_pi, d_sigma, jac_bar)
    fd = fd_tensor(lambda q: BatchStatistics(net, q, kern, (s, t)).pi[0, 0] / sigma_bar[0, 0], p)
    expect = fd + d_sigma[0, 0] * jac_bar[0, 0]
    assert np.max(np.abs(g - expect)) / np.max(np.abs(expect)) < 1e-5


def test_assemble_gradient_linear_cases():
    net, p, rng = small_net(4)
    batch = (rng.standard_normal((5, 2)), rng.standard_normal((5, 2)))
    kern = SlownessPairs()
    jac = rng.standard_normal((3, 3, net.n_params))
    d_pi = random_sym(rng, 3)
    zero = np.zeros((3, 3))
    vjp = BatchStatistics(net, p, kern, batch).pi_vjp(d_pi)
    np.testing.assert_array_equal(assemble_param_gradient(net, p, batch, kern, d_pi, zero, jac), vjp)
    assert np.all(assemble_param_gradient(net, p, batch, kern, zero, zero, jac) == 0)


# -- averages and optimizer ------------------------------------------------------------------


def test_moving_average_examples():
    st = AveragedState(np.eye(2), np.zeros((2, 2, 3)), 0.01)
    new = moving_average_update(st, 2 * np.eye(2), np.ones((2, 2, 3)), 0.01)
    np.testing.assert_allclose(new.sigma_bar, 1.01 * np.eye(2))
    np.testing.assert_allclose(new.jac_sigma_bar, 0.01)
    full = moving_average_update(st, 3 * np.eye(2), np.ones((2, 2, 3)), 1.0)
    np.testing.assert_array_equal(full.sigma_bar, 3 * np.eye(2))
    tiny = moving_average_update(st, 3 * np.eye(2), np.ones((2, 2, 3)), 1e-300)
    np.testing.assert_array_equal(tiny.sigma_bar, np.eye(2))
    with pytest.raises(ValueError):
        moving_average_update(st, np.eye(2), np.zeros((2, 2, 3)), 0.0)


def test_rmsprop_examples():
    opt = RmsState(np.array([0.5]), decay=0.9, learning_rate=0.1)
    p, o = rmsprop_step(opt, np.array([1.0]), np.array([0.0]))
    assert p[0] == 1.0 and o.mean_square[0] == pytest.approx(0.45)
    opt = RmsState(np.zeros(1), decay=0.9, learning_rate=0.1)
    p, o = rmsprop_step(opt, np.zeros(1), np.ones(1))
    assert o.mean_square[0] == pytest.approx(0.1)
    assert p[0] == pytest.approx(-0.1 / np.sqrt(0.1))
    for _ in range(500):
        p2, o = rmsprop_step(o, p, np.array([3.0]))
        step, p = p2 - p, p2
    assert step[0] == pytest.approx(-0.1, rel=1e-6)


# -- training ----------------------------------------------------------------------------------


def test_config_timescale_rule():
    with pytest.raises(ConfigError, match="timescale"):
        TrainConfig(beta=0.001, rmsprop_decay=0.999).validate()
    TrainConfig(beta=0.002, rmsprop_decay=0.999).validate()


def full_pairs(m):
    s, t = np.meshgrid(np.arange(m), np.arange(m), indexing="ij")
    return s.ravel(), t.ravel()


def test_train_swap_matrix():
    kern = TabularMatrix(np.array([[0.0, 1.0], [1.0, 0.0]]))
    net = TabularNet(2, 1)
    pairs = full_pairs(2)
    cfg = TrainConfig(n_iters=2000, learning_rate=1e-2, beta=0.1, seed=0)
    state, _ = train_loop(cfg, kern, net, lambda rng: pairs)
    table = net.table(state.params)
    lam = tabular_exact_pi(kern, table)[0, 0] / tabular_exact_sigma(table)[0, 0]
    assert 2 * lam == pytest.approx(-1.0, abs=1e-2)
    u = table[:, 0] / np.linalg.norm(table[:, 0])
    assert abs(u @ np.array([1.0, -1.0]) / np.sqrt(2)) > 0.999


def test_beta_one_full_batch_is_deterministic_descent():
    rng = np.random.default_rng(0)
    a = random_sym(rng, 6)
    kern = TabularMatrix(a)
    net = TabularNet(6, 2)
    pairs = full_pairs(6)
    cfg = TrainConfig(n_iters=30, learning_rate=1e-2, beta=1.0, seed=1)
    state, records = train_loop(cfg, kern, net, lambda rng: pairs)
    # replay by hand with exact statistics
    p = np.random.default_rng([1, 0]).normal(0.0, 1.0, size=net.n_params)
    opt = RmsState(np.zeros(net.n_params), 0.999, 1e-10, 1e-2)
    for _ in range(30):
        st = BatchStatistics(net, p, kern, pairs)
        np.testing.assert_allclose(st.sigma, tabular_exact_sigma(net.table(p)), atol=1e-14)
        d_pi, d_sigma, _ = masked_gradient_matrices(st.pi, st.sigma)
        g = st.pi_vjp(d_pi) + np.tensordot(d_sigma, st.sigma_jacobian(), axes=([0, 1], [0, 1]))
        p, opt = rmsprop_step(opt, p, g)
    np.testing.assert_allclose(state.params, p, rtol=1e-12, atol=1e-14)


def test_exact_statistics_fixed_point():
    rng = np.random.default_rng(5)
    m = 8
    a = random_sym(rng, m)
    kern = TabularMatrix(a)
    net = TabularNet(m, 3)
    pairs = full_pairs(m)
    cfg = TrainConfig(n_iters=4000, learning_rate=0.5, beta=1.0, seed=2, optimizer="sgd")
    state, _ = train_loop(cfg, kern, net, lambda rng: pairs, keep_records=False)
    table = net.table(state.params)
    sigma = tabular_exact_sigma(table)
    pi = tabular_exact_pi(kern, table)
    ef = ordered_eigenfunctions(net, state.params, sigma, pi)
    np.testing.assert_allclose(ef.eigenvalues * m, np.sort(np.linalg.eigvalsh(a))[:3], atol=1e-6)
    v = ef(np.arange(m))
    assert np.max(np.abs(v.T @ v / m - np.eye(3))) < 1e-8


def test_determinism_of_log_stream():
    rng = np.random.default_rng(0)
    kern = TabularMatrix(random_sym(rng, 10))
    net = TabularNet(10, 3)
    data = lambda r: (r.integers(0, 10, 16), r.integers(0, 10, 16))
    cfg = TrainConfig(n_iters=200, learning_rate=1e-2, beta=0.1, seed=3)
    _, a = train_loop(cfg, kern, net, data)
    _, b = train_loop(cfg, kern, net, data)
    assert [r.csv_line() for r in a] == [r.csv_line() for r in b]


def test_resume_matches_uninterrupted():
    rng = np.random.default_rng(0)
    kern = TabularMatrix(random_sym(rng, 10))
    net = TabularNet(10, 3)
    data = lambda r: (r.integers(0, 10, 16), r.integers(0, 10, 16))
    cfg = TrainConfig(n_iters=100, learning_rate=1e-2, beta=0.1, seed=3)
    full, recs = train_loop(cfg, kern, net, data)
    half, first = train_loop(cfg, kern, net, data, n_iters=40)
    rest, second = train_loop(cfg, kern, net, data, state=half)
    assert [r.csv_line() for r in first + second] == [r.csv_line() for r in recs]
    np.testing.assert_array_equal(full.params, rest.params)


def test_not_positive_definite_reports_step():
    net = TabularNet(3, 2)
    kern = TabularMatrix(np.eye(3))
    # identical columns make Sigma-hat singular; no jitter allowed
    from spinet.linalg import JitterPolicy

    cfg = TrainConfig(n_iters=5, beta=1.0, jitter=JitterPolicy(scales=(), enabled=False))

    class Degenerate(TabularNet):
        def init_params(self, rng):
            return np.ones(self.n_params)

    with pytest.raises(NotPositiveDefinite) as info:
        train_loop(cfg, kern, Degenerate(3, 2), lambda r: full_pairs(3))
    assert info.value.step == 0
    assert info.value.condition is not None


# -- extraction -------------------------------------------------------------------------------------


def test_ordered_eigenfunctions_identity_case():
    net = TabularNet(3, 3)
    p = np.eye(3).ravel()
    ef = ordered_eigenfunctions(net, p, np.eye(3), np.diag([1.0, 2.0, 3.0]))
    np.testing.assert_array_equal(ef.eigenvalues, [1.0, 2.0, 3.0])
    np.testing.assert_array_equal(ef(np.arange(3)), np.eye(3))


def test_full_diagonalize_recovers_axes():
    rng = np.random.default_rng(9)
    m = 6
    a = random_sym(rng, m)
    vals, vecs = np.linalg.eigh(a)
    q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    table = np.sqrt(m) * vecs[:, :3] @ q  # span-only solution
    net = TabularNet(m, 3)
    kern = TabularMatrix(a)
    sigma = tabular_exact_sigma(table)
    pi = tabular_exact_pi(kern, table)
    ef = ordered_eigenfunctions(net, table.ravel(), sigma, pi, mode="full_diagonalize")
    np.testing.assert_allclose(ef.eigenvalues * m, vals[:3], atol=1e-10)
    w = ef(np.arange(m)) / np.sqrt(m)
    np.testing.assert_allclose(np.abs(np.sum(w * vecs[:, :3], axis=0)), 1.0, atol=1e-10)
    d, _ = sym_eig(ef.report.lam)
    np.testing.assert_allclose(np.sort(d), ef.eigenvalues, atol=1e-12)


def test_constant_feature_sigma_entry():
    net = constant_first_eigenfunction_wrapper(Mlp(MlpSpec(2, (3,), 2)))
    p = net.init_params(np.random.default_rng(0))
    x = np.random.default_rng(1).standard_normal((4, 2))
    st = BatchStatistics(net, p, SlownessPairs(), (x, x[::-1]))
    assert st.sigma[0, 0] == 1.0
