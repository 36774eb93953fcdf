"""Independent reference computations used by the test-suite."""

import numpy as np


def central_fd(f, x, h=1e-5):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def se_kernel_loop(amp, ls, A, B):
    """Double loop straight from the kernel definition."""
    K = np.empty((len(A), len(B)))
    for i, a in enumerate(A):
        for j, b in enumerate(B):
            K[i, j] = amp**2 * np.exp(-0.5 * np.sum(((a - b) / ls) ** 2))
    return K


def gaussian_logpdf_dense(C, y):
    n = len(y)
    _, logdet = np.linalg.slogdet(C)
    return -0.5 * (y @ np.linalg.inv(C) @ y + logdet + n * np.log(2 * np.pi))


def condition_joint(J, y, n_train):
    """Brute-force Gaussian conditioning of the last block on the first n_train entries."""
    A = J[:n_train, :n_train]
    Bm = J[:n_train, n_train:]
    Cm = J[n_train:, n_train:]
    Ainv = np.linalg.inv(A)
    return Bm.T @ Ainv @ y, Cm - Bm.T @ Ainv @ Bm


def dense_joint_with_test(tp, Xs, X_T, Z, X_star, Z_star):
    """Explicit joint covariance of (y_1..y_N, y_T, f_T*) built element by element."""
    N = len(Xs)
    rho, s2 = tp.rho, np.exp(tp.log_noise)
    sd2 = np.exp(tp.log_disc_scale)
    kd = tp.disc_kernel

    def k(j, a, b):
        kp = tp.source_kernels[j]
        return kp.amplitude**2 * np.exp(-0.5 * np.sum(((a - b) / kp.lengthscales) ** 2))

    def kdisc(a, b):
        return np.exp(-0.5 * np.sum(((a - b) / kd.lengthscales) ** 2))

    # one entry per observation: (kind, source, row)
    items = [("S", j, i) for j in range(N) for i in range(len(Xs[j]))]
    items += [("T", None, i) for i in range(len(X_T))]
    items += [("*", None, i) for i in range(len(X_star))]

    def cov(u, v):
        ku, ju, iu = u
        kv, jv, iv = v
        if ku == "S" and kv == "S":
            if ju != jv:
                return 0.0
            c = k(ju, Xs[ju][iu], Xs[ju][iv])
            return c + (s2[ju] if iu == iv else 0.0)
        if ku == "S":
            zs = Z[ju][iv] if kv == "T" else Z_star[ju][iv]
            return rho[ju] * k(ju, Xs[ju][iu], zs)
        if kv == "S":
            return cov(v, u)
        za = Z if ku == "T" else Z_star
        zb = Z if kv == "T" else Z_star
        xa = X_T[iu] if ku == "T" else X_star[iu]
        xb = X_T[iv] if kv == "T" else X_star[iv]
        c = sum(rho[j] ** 2 * k(j, za[j][iu], zb[j][iv]) for j in range(N)) + sd2 * kdisc(xa, xb)
        if ku == "T" and kv == "T" and iu == iv:
            c += s2[N]
        return c

    n = len(items)
    J = np.empty((n, n))
    for a in range(n):
        for b in range(a, n):
            J[a, b] = J[b, a] = cov(items[a], items[b])
    return J


PLANTED_A = np.array([[0.8, 0.3], [-0.2, 1.1]])
PLANTED_B = np.array([0.1, -0.2])


def planted_source(U):
    return np.sin(2.0 * U[:, 0]) + 0.5 * U[:, 1] ** 3 + 0.3 * U[:, 0] * U[:, 1]


def planted_source_grad(U):
    g0 = 2.0 * np.cos(2.0 * U[:, 0]) + 0.3 * U[:, 1]
    g1 = 1.5 * U[:, 1] ** 2 + 0.3 * U[:, 0]
    return np.column_stack([g0, g1])


def planted_map_instance(n=20, seed=0):
    """Noiseless target y = f_S(A0 x + b0) with an exact analytic surrogate."""
    from htgp.alignnet import FunctionSurrogate
    from htgp.dataio import Dataset, lhs_sample

    X = lhs_sample(n, [(0.0, 1.0), (0.0, 1.0)], seed)
    U = X @ PLANTED_A.T + PLANTED_B
    target = Dataset(X, planted_source(U), "target")
    src_X = lhs_sample(30, [(-1.0, 2.0), (-1.0, 2.0)], seed + 1)
    source = Dataset(src_X, planted_source(src_X), "S1")
    return target, source, FunctionSurrogate(planted_source, planted_source_grad), U


def miniature_model(seed=1, lam=0.3, gamma=0.2, perturb=0.3):
    """N=2 sources with 5 samples each, 3 target samples, fixed noise draws."""
    from htgp.alignnet import ReferenceMapping
    from htgp.dataio import Dataset
    from htgp.model import ModelConfig, TransferData, TransferModel
    from htgp.objective import ObjectiveConfig, draw_eps

    rng = np.random.default_rng(seed)
    srcs = [Dataset(rng.random((5, 1)), rng.standard_normal(5)),
            Dataset(rng.random((5, 2)), rng.standard_normal(5))]
    tgt = Dataset(rng.random((3, 2)), rng.standard_normal(3))
    refs = [ReferenceMapping.subset([0], 2), ReferenceMapping.subset([0, 1], 2)]
    model = TransferModel(TransferData(srcs, tgt, refs), ModelConfig(hidden=4, activation="tanh"))
    cfg = ObjectiveConfig(lam=lam, gamma=gamma)
    p = model.init_params(rng) + perturb * rng.standard_normal(model.layout.size)
    return model, cfg, p, draw_eps(model, cfg, rng)
