import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from htgp.gpcore import (
    CholeskyError, PredictiveDistribution, TransferParams, assemble_cov, blocked_loglik,
    decoder_loglik_grad, joint_loglik, jitter_to_psd, mc_predict, predictive_posterior,
    robust_cholesky, source_factors, stack_alignments, target_factor,
)
from htgp.kernels import KernelParams
from oracles import (
    central_fd, condition_joint, dense_joint_with_test, gaussian_logpdf_dense,
)


def random_instance(rng, N=None, d_T=None, n_max=6, rho_range=3.0):
    N = int(rng.integers(1, 4)) if N is None else N
    d_T = int(rng.integers(1, 4)) if d_T is None else d_T
    dims = [int(rng.integers(1, 4)) for _ in range(N)]
    n_T = int(rng.integers(1, n_max + 1))
    kernels = [KernelParams(rng.uniform(-1, 0.5), rng.uniform(-1.5, 0.5, d)) for d in dims]
    tp = TransferParams(rng.uniform(-rho_range, rho_range, N), np.log(rng.uniform(0.01, 1, N + 1)),
                        np.log(rng.uniform(0.05, 1)), kernels,
                        KernelParams(0.0, rng.uniform(-1, 0.5, d_T)))
    Xs = [rng.random((int(rng.integers(1, n_max + 1)), d)) for d in dims]
    X_T = rng.random((n_T, d_T))
    Z = [rng.random((n_T, d)) for d in dims]
    return tp, Xs, X_T, Z


def test_assembled_blocks_match_elementwise_construction():
    rng = np.random.default_rng(0)
    for _ in range(5):
        tp, Xs, X_T, Z = random_instance(rng)
        C = assemble_cov(tp, Xs, X_T, Z)
        n = C.matrix.shape[0]
        J = dense_joint_with_test(tp, Xs, X_T, Z, np.zeros((0, X_T.shape[1])),
                                  [np.zeros((0, z.shape[1])) for z in Z])
        np.testing.assert_allclose(C.matrix, J[:n, :n], rtol=1e-12, atol=1e-14)
        assert C.block("S1", "T").shape == (len(Xs[0]), len(X_T))
        if len(Xs) > 1:
            np.testing.assert_array_equal(C.block("S1", "S2"), 0.0)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_joint_covariance_positive_definite(seed):
    rng = np.random.default_rng(seed)
    tp, Xs, X_T, Z = random_instance(rng, n_max=10)
    C = assemble_cov(tp, Xs, X_T, Z).matrix
    np.testing.assert_array_equal(C, C.T)
    assert np.linalg.eigvalsh(C).min() > 0
    _, jit = robust_cholesky(C)
    assert jit <= 1e-8 * np.mean(np.diag(C))


def test_shape_validation():
    rng = np.random.default_rng(1)
    tp, Xs, X_T, Z = random_instance(rng, N=2)
    with pytest.raises(ValueError):
        assemble_cov(tp, Xs[:1], X_T, Z)
    with pytest.raises(ValueError):
        assemble_cov(tp, Xs, X_T, [Z[0], Z[1][:, :0]])
    with pytest.raises(ValueError):
        TransferParams([1.0], [0.0], 0.0, [KernelParams.default(1)], KernelParams.default(1))
    with pytest.raises(ValueError):
        TransferParams([1.0], [0.0, 0.0], 0.0, [KernelParams.default(1)], KernelParams(0.5, [0.0]))


def test_loglik_against_dense_density():
    rng = np.random.default_rng(2)
    for _ in range(10):
        tp, Xs, X_T, Z = random_instance(rng)
        C = assemble_cov(tp, Xs, X_T, Z)
        y = rng.standard_normal(C.matrix.shape[0])
        assert joint_loglik(C, y) == pytest.approx(gaussian_logpdf_dense(C.matrix, y), rel=1e-10)


def test_blocked_loglik_equals_dense_loglik():
    rng = np.random.default_rng(3)
    for _ in range(10):
        tp, Xs, X_T, Z = random_instance(rng)
        ys = [rng.standard_normal(len(X)) for X in Xs]
        y_T = rng.standard_normal(len(X_T))
        Z2 = [[rng.random(z.shape) for z in Z] for _ in range(3)]
        sf = source_factors(tp, Xs, ys)
        tf = target_factor(tp, Xs, sf, X_T, y_T, stack_alignments(Z2, len(Xs)))
        n = sum(len(X) for X in Xs) + len(X_T)
        got = blocked_loglik(sf, tf, n)
        y = np.concatenate(ys + [y_T])
        for s, Zs in enumerate(Z2):
            assert got[s] == pytest.approx(joint_loglik(assemble_cov(tp, Xs, X_T, Zs), y),
                                           rel=1e-10, abs=1e-10)


def _tp_vector(tp):
    parts = [tp.rho, tp.log_noise, [tp.log_disc_scale], tp.disc_kernel.log_lengthscales]
    for k in tp.source_kernels:
        parts += [[k.log_amplitude], k.log_lengthscales]
    return np.concatenate(parts)


def _tp_from_vector(v, tp):
    N = tp.n_sources
    i = 0
    rho = v[i:i + N]
    i += N
    ln = v[i:i + N + 1]
    i += N + 1
    lds = v[i]
    i += 1
    d_T = tp.disc_kernel.dim
    dls = v[i:i + d_T]
    i += d_T
    ks = []
    for k in tp.source_kernels:
        ks.append(KernelParams(v[i], v[i + 1:i + 1 + k.dim]))
        i += 1 + k.dim
    return TransferParams(rho, ln, lds, ks, KernelParams(0.0, dls))


def test_decoder_gradient_matches_dense_finite_differences():
    rng = np.random.default_rng(4)
    tp, Xs, X_T, Z = random_instance(rng, N=2, d_T=2, n_max=4, rho_range=1.5)
    ys = [rng.standard_normal(len(X)) for X in Xs]
    y_T = rng.standard_normal(len(X_T))
    y = np.concatenate(ys + [y_T])
    Zs = [Z, [rng.random(z.shape) for z in Z]]
    w = [0.3, 0.7]
    lls, grads, gZ = decoder_loglik_grad(tp, Xs, ys, X_T, y_T, Zs, w)

    def dense(v):
        t = _tp_from_vector(v, tp)
        return sum(wi * joint_loglik(assemble_cov(t, Xs, X_T, Zi), y) for wi, Zi in zip(w, Zs))

    v = _tp_vector(tp)
    fd = central_fd(dense, v, 1e-6)
    N = tp.n_sources
    exact = [grads["rho"], grads["log_noise"], [grads["log_disc_scale"]], grads["disc_log_ls"]]
    for j in range(N):
        exact += [[grads[f"src{j}_log_amp"]], grads[f"src{j}_log_ls"]]
    np.testing.assert_allclose(np.concatenate([np.ravel(e) for e in exact]), fd,
                               rtol=1e-5, atol=1e-7)
    for s in range(2):
        for j in range(N):
            def fz(flat, s=s, j=j):
                Zc = [list(z) for z in Zs]
                Zc[s][j] = flat.reshape(Zs[s][j].shape)
                return sum(wi * joint_loglik(assemble_cov(tp, Xs, X_T, Zi), y)
                           for wi, Zi in zip(w, Zc))
            np.testing.assert_allclose(gZ[s][j].ravel(), central_fd(fz, Zs[s][j].ravel(), 1e-6),
                                       rtol=1e-5, atol=1e-7)
    for s in range(2):
        assert lls[s] == pytest.approx(joint_loglik(assemble_cov(tp, Xs, X_T, Zs[s]), y),
                                       rel=1e-10)


def test_predictive_posterior_equals_brute_force_conditioning():
    rng = np.random.default_rng(5)
    for _ in range(20):
        tp, Xs, X_T, Z = random_instance(rng)
        ys = [rng.standard_normal(len(X)) for X in Xs]
        y_T = rng.standard_normal(len(X_T))
        n_s = int(rng.integers(1, 5))
        X_star = rng.random((n_s, X_T.shape[1]))
        Z_star = [rng.random((n_s, z.shape[1])) for z in Z]
        pd = predictive_posterior(tp, Xs, ys, X_T, y_T, Z, X_star, Z_star, psd=False)
        J = dense_joint_with_test(tp, Xs, X_T, Z, X_star, Z_star)
        n = J.shape[0] - n_s
        mu, V = condition_joint(J, np.concatenate(ys + [y_T]), n)
        np.testing.assert_allclose(pd.mean, mu, rtol=1e-8, atol=1e-8)
        np.testing.assert_allclose(pd.cov, V, rtol=1e-8, atol=1e-8)
        assert np.diag(pd.cov).min() >= -1e-8


def test_robust_cholesky_escalates_and_fails():
    A = np.ones((3, 3))
    L, jit = robust_cholesky(A)
    assert 0 < jit <= 1e-6
    np.testing.assert_allclose(L @ L.T, A + jit * np.eye(3), atol=1e-12)
    with pytest.raises(CholeskyError) as exc:
        robust_cholesky(-np.eye(2))
    assert exc.value.jitters == (0.0, 1e-10, 1e-8, 1e-6)
    L, jit = robust_cholesky(np.eye(2))
    assert jit == 0.0


def test_jitter_to_psd_symmetrizes():
    V = np.array([[1.0, 0.5 + 1e-12], [0.5, 1.0]])
    out = jitter_to_psd(V)
    np.testing.assert_array_equal(out, out.T)


class _FakeModel:
    """Minimal model exposing the views mc_predict reads."""

    def __init__(self, tp, Xs, ys, X_T, y_T, q, p_fn):
        self.tp, self.data, self.q, self.p_fn = tp, (Xs, ys, X_T, y_T), q, p_fn

    def transfer_params(self):
        return self.tp

    def training_data(self):
        return self.data

    def recog_batches(self):
        return self.q

    def prior_batches(self, X):
        return self.p_fn(X)


def _fake(rng, stds):
    from htgp.alignnet import GaussianBatch

    tp, Xs, X_T, Z = random_instance(rng, N=2, d_T=2, n_max=5)
    ys = [rng.standard_normal(len(X)) for X in Xs]
    y_T = rng.standard_normal(len(X_T))
    q = [GaussianBatch(z, np.full(z.shape, stds)) for z in Z]
    A = [rng.standard_normal((z.shape[1], 2)) for z in Z]
    p_fn = lambda X: [GaussianBatch(X @ a.T, np.full((len(X), a.shape[0]), stds)) for a in A]
    return _FakeModel(tp, Xs, ys, X_T, y_T, q, p_fn), Z, A


def test_mc_predict_degenerate_alignment_reduces_to_single_posterior():
    rng = np.random.default_rng(6)
    model, Z, A = _fake(rng, 1e-300)
    X_star = rng.random((4, 2))
    pd = mc_predict(model, X_star, K=3, W=2, rng=np.random.default_rng(0))
    Xs, ys, X_T, y_T = model.data
    ref = predictive_posterior(model.tp, Xs, ys, X_T, y_T, Z, X_star, [X_star @ a.T for a in A])
    np.testing.assert_allclose(pd.mean, ref.mean, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(pd.cov, ref.cov, rtol=1e-8, atol=1e-10)


def test_mc_predict_is_moment_matched_mixture():
    rng = np.random.default_rng(7)
    model, _, _ = _fake(rng, 0.2)
    X_star = rng.random((3, 2))
    K, W = 3, 4
    pd = mc_predict(model, X_star, K=K, W=W, rng=np.random.default_rng(11))
    # replay the same draws: W posterior alignments first, then one prior draw per k
    r = np.random.default_rng(11)
    Xs, ys, X_T, y_T = model.data
    Zq = [[g.means + g.stds * r.standard_normal(g.means.shape) for g in model.q] for _ in range(W)]
    comps = []
    for _ in range(K):
        Zp = [g.means + g.stds * r.standard_normal(g.means.shape) for g in model.p_fn(X_star)]
        for w in range(W):
            comps.append(predictive_posterior(model.tp, Xs, ys, X_T, y_T, Zq[w], X_star, Zp,
                                              psd=False))
    M = np.array([c.mean for c in comps])
    mean = M.mean(0)
    cov = np.mean([c.cov for c in comps], 0) + np.cov(M.T, bias=True)
    np.testing.assert_allclose(pd.mean, mean, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(pd.cov, cov, rtol=1e-8, atol=1e-10)
    mean_only = mc_predict(model, X_star, K=K, W=W, rng=np.random.default_rng(11), with_cov=False)
    np.testing.assert_allclose(mean_only.mean, pd.mean, rtol=1e-12)


def test_mc_predict_rejects_zero_draws():
    rng = np.random.default_rng(8)
    model, _, _ = _fake(rng, 0.1)
    with pytest.raises(ValueError):
        mc_predict(model, np.zeros((1, 2)), K=0, W=1)


def test_predictive_distribution_helpers():
    pd = PredictiveDistribution(np.zeros(2), np.array([[4.0, 0.0], [0.0, -1e-12]]))
    np.testing.assert_array_equal(pd.std, [2.0, 0.0])
