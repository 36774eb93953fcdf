"""Joint cross-domain covariance, GP decoder likelihood and predictive posterior.

Output ordering is always (y_1, ..., y_N, y_T). Source-source blocks of the joint
covariance are zero, so most computations go through the Schur complement of
the block-diagonal source part:

    C = [[D, B], [B^T, E]],  S = E - B^T D^{-1} B.

The dense ``assemble_cov``/``joint_loglik`` pair is kept as the reference path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .kernels import KernelParams, kernel_matrix, kernel_vjp

LOG_2PI = float(np.log(2.0 * np.pi))
JITTER_SCHEDULE = (0.0, 1e-10, 1e-8, 1e-6)


class CholeskyError(np.linalg.LinAlgError):
    def __init__(self, msg: str, jitters):
        self.jitters = tuple(jitters)
        super().__init__(f"{msg}; attempted relative jitters {self.jitters}")


def robust_cholesky(C: np.ndarray, schedule=JITTER_SCHEDULE):
    """Lower Cholesky factor, escalating a diagonal jitter (relative to the mean
    diagonal) on failure. Returns ``(L, absolute_jitter)``."""
    n = C.shape[0]
    if n == 0:
        return np.zeros((0, 0)), 0.0
    scale = float(np.mean(np.diag(C)))
    if not np.isfinite(scale) or scale <= 0:
        scale = 1.0
    tried = []
    for rel in schedule:
        tried.append(rel)
        jit = rel * scale
        try:
            L = np.linalg.cholesky(C + jit * np.eye(n) if jit else C)
        except np.linalg.LinAlgError:
            continue
        if np.all(np.isfinite(L)):
            return L, jit
    raise CholeskyError("Cholesky factorization failed", tried)


def jitter_to_psd(V: np.ndarray) -> np.ndarray:
    V = 0.5 * (V + V.T)
    _, jit = robust_cholesky(V)
    return V + jit * np.eye(V.shape[0]) if jit else V


@dataclass
class TransferParams:
    rho: np.ndarray
    log_noise: np.ndarray  # (N + 1,): sources then target
    log_disc_scale: float
    source_kernels: list
    disc_kernel: KernelParams

    def __post_init__(self):
        self.rho = np.atleast_1d(np.asarray(self.rho, dtype=float))
        self.log_noise = np.atleast_1d(np.asarray(self.log_noise, dtype=float))
        if self.log_noise.shape[0] != len(self.source_kernels) + 1:
            raise ValueError("log_noise needs one entry per source plus the target")
        if self.rho.shape[0] != len(self.source_kernels):
            raise ValueError("rho needs one entry per source")
        if self.disc_kernel.log_amplitude != 0.0:
            raise ValueError("discrepancy kernel amplitude is fixed to 1; use log_disc_scale")

    @property
    def n_sources(self) -> int:
        return len(self.source_kernels)

    @property
    def noise_var(self) -> np.ndarray:
        return np.exp(self.log_noise)

    @property
    def disc_var(self) -> float:
        return float(np.exp(self.log_disc_scale))

    @classmethod
    def from_blocks(cls, blocks: dict, n_sources: int) -> "TransferParams":
        kernels = [KernelParams(float(blocks[f"src{j}_log_amp"]), blocks[f"src{j}_log_ls"])
                   for j in range(n_sources)]
        return cls(blocks["rho"], blocks["log_noise"], float(blocks["log_disc_scale"]),
                   kernels, KernelParams(0.0, blocks["disc_log_ls"]))


@dataclass
class JointCovariance:
    matrix: np.ndarray
    blocks: list  # (domain label, start, stop)

    def block(self, a: str, b: str) -> np.ndarray:
        rows = {name: (s, e) for name, s, e in self.blocks}
        (r0, r1), (c0, c1) = rows[a], rows[b]
        return self.matrix[r0:r1, c0:c1]


@dataclass
class PredictiveDistribution:
    mean: np.ndarray
    cov: np.ndarray

    @property
    def var(self) -> np.ndarray:
        return np.diag(self.cov).copy()

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(np.maximum(self.var, 0.0))


def _check_inputs(tp: TransferParams, Xs, X_T, Z):
    if len(Xs) != tp.n_sources or len(Z) != tp.n_sources:
        raise ValueError(f"expected {tp.n_sources} source datasets and alignments")
    n_T = X_T.shape[0]
    for j, (X, Zj, k) in enumerate(zip(Xs, Z, tp.source_kernels)):
        if X.shape[1] != k.dim or Zj.shape != (n_T, k.dim):
            raise ValueError(f"source {j}: inputs {X.shape}, alignment {Zj.shape}, kernel d={k.dim}")
    if X_T.shape[1] != tp.disc_kernel.dim:
        raise ValueError("target input dimension does not match the discrepancy kernel")


def assemble_cov(tp: TransferParams, Xs, X_T, Z) -> JointCovariance:
    Xs = [np.atleast_2d(np.asarray(X, dtype=float)) for X in Xs]
    X_T = np.atleast_2d(np.asarray(X_T, dtype=float))
    Z = [np.atleast_2d(np.asarray(z, dtype=float)) for z in Z]
    _check_inputs(tp, Xs, X_T, Z)
    sizes = [X.shape[0] for X in Xs] + [X_T.shape[0]]
    n = sum(sizes)
    C = np.zeros((n, n))
    starts = np.concatenate([[0], np.cumsum(sizes)])
    t0, t1 = starts[-2], starts[-1]
    s2 = tp.noise_var
    CTT = tp.disc_var * kernel_matrix(tp.disc_kernel, X_T, X_T) + s2[-1] * np.eye(sizes[-1])
    for j, (X, Zj, k) in enumerate(zip(Xs, Z, tp.source_kernels)):
        a, b = starts[j], starts[j + 1]
        C[a:b, a:b] = kernel_matrix(k, X, X) + s2[j] * np.eye(b - a)
        CiT = tp.rho[j] * kernel_matrix(k, X, Zj)
        C[a:b, t0:t1] = CiT
        C[t0:t1, a:b] = CiT.T
        CTT = CTT + tp.rho[j] ** 2 * kernel_matrix(k, Zj, Zj)
    C[t0:t1, t0:t1] = 0.5 * (CTT + CTT.T)
    labels = [f"S{j + 1}" for j in range(len(Xs))] + ["T"]
    blocks = [(lab, int(starts[i]), int(starts[i + 1])) for i, lab in enumerate(labels)]
    return JointCovariance(C, blocks)


def joint_loglik(C, y) -> float:
    """Zero-mean Gaussian log density of ``y`` under covariance ``C``."""
    M = C.matrix if isinstance(C, JointCovariance) else np.asarray(C, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    L, _ = robust_cholesky(M)
    a = solve_triangular(L, y, lower=True)
    return float(-0.5 * (a @ a) - np.log(np.diag(L)).sum() - 0.5 * len(y) * LOG_2PI)


# --------------------------------------------------------------------------
# blocked factorization
# --------------------------------------------------------------------------

@dataclass
class SourceFactor:
    """Per-source quantities that do not depend on the alignment Z."""

    L: np.ndarray
    Dinv: np.ndarray
    a: np.ndarray       # D^{-1} y_i
    yDy: float
    logdet: float
    K: np.ndarray       # K_i(X_i, X_i) without noise


def source_factors(tp: TransferParams, Xs, ys, need_inverse: bool = True):
    out = []
    for j, (X, y, k) in enumerate(zip(Xs, ys, tp.source_kernels)):
        K = kernel_matrix(k, X, X)
        L, jit = robust_cholesky(K + tp.noise_var[j] * np.eye(X.shape[0]))
        a = cho_solve((L, True), y, check_finite=False)
        Dinv = cho_solve((L, True), np.eye(X.shape[0]), check_finite=False) if need_inverse else None
        out.append(SourceFactor(L, Dinv, a, float(y @ a), 2.0 * float(np.log(np.diag(L)).sum()), K))
    return out


def batched_cholesky(C: np.ndarray) -> np.ndarray:
    """Cholesky of a stack of matrices, with per-matrix jitter escalation on failure."""
    if C.shape[-1] == 0:
        return np.zeros(C.shape)
    try:
        L = np.linalg.cholesky(C)
        if np.all(np.isfinite(L)):
            return L
    except np.linalg.LinAlgError:
        pass
    return np.stack([robust_cholesky(c)[0] for c in C])


@dataclass
class TargetFactor:
    """Schur-complement factorization for a stack of S alignment samples.

    Arrays carry a leading sample axis; ``Z[j]`` is S x n_T x d_j.
    """

    Z: list
    P: list          # D_j^{-1} B_j,           S x n_j x n_T
    Kx: list         # K_j(X_j, Z_j),          S x n_j x n_T
    Kz: list         # K_j(Z_j, Z_j),          S x n_T x n_T
    LS: np.ndarray   # chol of the Schur complement, S x n_T x n_T
    r: np.ndarray    # S x n_T
    beta: np.ndarray # S^{-1} r,               S x n_T
    logdet: np.ndarray


def target_factor(tp: TransferParams, Xs, sf, X_T, y_T, Z_stack, Kd=None) -> TargetFactor:
    """``Z_stack[j]`` holds all samples for source j (S x n_T x d_j)."""
    n_T = X_T.shape[0]
    S = Z_stack[0].shape[0] if Z_stack else 1
    if Kd is None:
        Kd = kernel_matrix(tp.disc_kernel, X_T, X_T)
    E = np.broadcast_to(tp.disc_var * Kd + tp.noise_var[-1] * np.eye(n_T), (S, n_T, n_T)).copy()
    r = np.broadcast_to(np.asarray(y_T, dtype=float), (S, n_T)).copy()
    P, Kx, Kz = [], [], []
    for j, (X, f, k) in enumerate(zip(Xs, sf, tp.source_kernels)):
        Zj = Z_stack[j]
        kx = kernel_matrix(k, X, Zj)
        kz = kernel_matrix(k, Zj, Zj)
        p = cho_solve((f.L, True), np.moveaxis(kx, 0, 1).reshape(X.shape[0], -1), check_finite=False)
        p = tp.rho[j] * np.moveaxis(p.reshape(X.shape[0], S, n_T), 1, 0)
        E += tp.rho[j] ** 2 * kz - tp.rho[j] * (np.swapaxes(kx, 1, 2) @ p)
        r -= tp.rho[j] * (np.swapaxes(kx, 1, 2) @ f.a)
        P.append(p)
        Kx.append(kx)
        Kz.append(kz)
    E = 0.5 * (E + np.swapaxes(E, 1, 2))
    LS = batched_cholesky(E)
    if n_T:
        beta = np.linalg.solve(np.swapaxes(LS, 1, 2),
                               np.linalg.solve(LS, r[..., None]))[..., 0]
    else:
        beta = np.zeros((S, 0))
    logdet = 2.0 * np.log(np.diagonal(LS, axis1=1, axis2=2)).sum(1)
    return TargetFactor(list(Z_stack), P, Kx, Kz, LS, r, beta, logdet)


def stack_alignments(Z_samples, n_sources: int) -> list:
    """[sample][source] -> [source] arrays with a leading sample axis."""
    return [np.stack([Z[j] for Z in Z_samples]) for j in range(n_sources)]


def blocked_loglik(sf, tf: TargetFactor, n_total: int) -> np.ndarray:
    """Log-likelihood of every sample in the stack."""
    quad = sum(f.yDy for f in sf) + np.einsum("si,si->s", tf.r, tf.beta)
    logdet = sum(f.logdet for f in sf) + tf.logdet
    return -0.5 * (quad + logdet + n_total * LOG_2PI)


def decoder_loglik_grad(tp: TransferParams, Xs, ys, X_T, y_T, Z_samples, weights):
    """Log-likelihoods for several alignment samples and the gradient of
    ``sum_s weights[s] * loglik_s``.

    Returns ``(lls, grads, gZ)``: ``grads`` is keyed like the flat layout
    (rho, log_noise, log_disc_scale, disc_log_ls, src{j}_log_amp, src{j}_log_ls)
    and ``gZ[s][j]`` is the gradient w.r.t. alignment Z_samples[s][j].
    """
    N = tp.n_sources
    n_T = X_T.shape[0]
    n_total = sum(X.shape[0] for X in Xs) + n_T
    w = np.asarray(weights, dtype=float)
    S = w.shape[0]
    sf = source_factors(tp, Xs, ys)
    Kd = kernel_matrix(tp.disc_kernel, X_T, X_T)
    s2 = tp.noise_var
    tf = target_factor(tp, Xs, sf, X_T, y_T, stack_alignments(Z_samples, N), Kd)
    lls = blocked_loglik(sf, tf, n_total)

    Linv = np.linalg.inv(tf.LS)
    Sinv = np.swapaxes(Linv, 1, 2) @ Linv
    beta = tf.beta
    W_TT = 0.5 * (beta[:, :, None] * beta[:, None, :] - Sinv)
    WTT = np.tensordot(w, W_TT, axes=1)
    wW_TT = w[:, None, None] * W_TT

    grads = {"rho": np.zeros(N), "log_noise": np.zeros(N + 1)}
    gZ_stack = []
    for j, (X, f, k) in enumerate(zip(Xs, sf, tp.source_kernels)):
        n_j = X.shape[0]
        rho = tp.rho[j]
        P = tf.P[j]
        alpha = f.a[None, :] - np.einsum("sij,sj->si", P, beta)
        PS = P @ Sinv
        W_iT = 0.5 * (alpha[:, :, None] * beta[:, None, :] + PS)
        wPS = (w[:, None, None] * PS).transpose(1, 0, 2).reshape(n_j, -1)
        Wii = 0.5 * ((w[:, None] * alpha).T @ alpha - wPS @ P.transpose(1, 0, 2).reshape(n_j, -1).T
                     - w.sum() * f.Dinv)
        G = 2.0 * w[:, None, None] * W_iT
        grads["rho"][j] = float(np.sum(G * tf.Kx[j])) + 2.0 * rho * float(np.sum(wW_TT * tf.Kz[j]))
        a1, l1, _, zb = kernel_vjp(k, X, tf.Z[j], rho * G, tf.Kx[j])
        a2, l2, za, zb2 = kernel_vjp(k, tf.Z[j], tf.Z[j], rho**2 * wW_TT, tf.Kz[j])
        a3, l3, _, _ = kernel_vjp(k, X, X, Wii, f.K)
        grads[f"src{j}_log_amp"] = np.array(a1 + a2 + a3)
        grads[f"src{j}_log_ls"] = l1 + l2 + l3
        grads["log_noise"][j] = s2[j] * np.trace(Wii)
        gZ_stack.append(zb + za + zb2)
    grads["log_noise"][N] = s2[N] * np.trace(WTT)
    grads["log_disc_scale"] = np.array(tp.disc_var * float(np.sum(WTT * Kd)))
    _, ld, _, _ = kernel_vjp(tp.disc_kernel, X_T, X_T, tp.disc_var * WTT, Kd)
    grads["disc_log_ls"] = ld
    gZ = [[gZ_stack[j][s] for j in range(N)] for s in range(S)]
    return lls, grads, gZ


# --------------------------------------------------------------------------
# prediction
# --------------------------------------------------------------------------

@dataclass
class _PriorSide:
    """Quantities that depend only on the test alignment Z*."""

    cross: list = field(default_factory=list)    # rho_i K_i(X_i, Z*_i)
    srcquad: np.ndarray | None = None           # sum_i c_i^T D_i^{-1} c_i
    prior_cov: np.ndarray | None = None


def _prior_side(tp, Xs, sf, X_star, Z_star, Kd_ss, with_cov=True) -> _PriorSide:
    ps = _PriorSide()
    n_s = X_star.shape[0]
    quad = np.zeros((n_s, n_s)) if with_cov else None
    cov = tp.disc_var * Kd_ss if with_cov else None
    for j, (X, f, k) in enumerate(zip(Xs, sf, tp.source_kernels)):
        c = tp.rho[j] * kernel_matrix(k, X, Z_star[j])
        ps.cross.append(c)
        if with_cov:
            v = solve_triangular(f.L, c, lower=True)
            quad += v.T @ v
            cov = cov + tp.rho[j] ** 2 * kernel_matrix(k, Z_star[j], Z_star[j])
    ps.srcquad, ps.prior_cov = quad, cov
    return ps


def _condition(tp, X_T, sf, tf: TargetFactor, s: int, X_star, Z_star, ps: _PriorSide,
               with_cov=True):
    """Mean and covariance for training-alignment sample ``s`` of ``tf``."""
    cT = tp.disc_var * kernel_matrix(tp.disc_kernel, X_T, X_star)
    for j, k in enumerate(tp.source_kernels):
        cT = cT + tp.rho[j] ** 2 * kernel_matrix(k, tf.Z[j][s], Z_star[j])
    beta = tf.beta[s]
    mean = cT.T @ beta
    t = cT.copy()
    for j, f in enumerate(sf):
        c = ps.cross[j]
        P = tf.P[j][s]
        mean += c.T @ (f.a - P @ beta)
        t -= P.T @ c
    if not with_cov:
        return mean, None
    V = ps.prior_cov - ps.srcquad
    if X_T.shape[0]:
        v = solve_triangular(tf.LS[s], t, lower=True)
        V = V - v.T @ v
    return mean, 0.5 * (V + V.T)


def predictive_posterior(tp: TransferParams, Xs, ys, X_T, y_T, Z, X_star, Z_star,
                         psd: bool = True) -> PredictiveDistribution:
    """Posterior of the latent target function at ``X_star`` given all outputs
    and fixed alignments ``Z`` (training) and ``Z_star`` (test)."""
    Xs = [np.atleast_2d(np.asarray(X, dtype=float)) for X in Xs]
    X_T = np.asarray(X_T, dtype=float).reshape(-1, tp.disc_kernel.dim)
    X_star = np.atleast_2d(np.asarray(X_star, dtype=float))
    y_T = np.asarray(y_T, dtype=float).reshape(-1)
    _check_inputs(tp, Xs, X_T, Z)
    sf = source_factors(tp, Xs, ys, need_inverse=False)
    tf = target_factor(tp, Xs, sf, X_T, y_T, [np.asarray(z, dtype=float)[None] for z in Z])
    Kd_ss = kernel_matrix(tp.disc_kernel, X_star, X_star)
    ps = _prior_side(tp, Xs, sf, X_star, Z_star, Kd_ss)
    mean, V = _condition(tp, X_T, sf, tf, 0, X_star, Z_star, ps)
    return PredictiveDistribution(mean, jitter_to_psd(V) if psd else V)


def mc_predict(model, X_star, K: int = 20, W: int = 20, rng=None,
               with_cov: bool = True) -> PredictiveDistribution:
    """Moment-matched Gaussian of the K*W-component predictive mixture.

    ``model`` provides ``transfer_params()``, ``training_data()`` returning
    ``(Xs, ys, X_T, y_T)`` in model space, ``prior_batches(X)`` and
    ``recog_batches()`` (lists of GaussianBatch, one per source).
    """
    if K < 1 or W < 1:
        raise ValueError("K and W must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    tp = model.transfer_params()
    Xs, ys, X_T, y_T = model.training_data()
    X_star = np.atleast_2d(np.asarray(X_star, dtype=float))
    sf = source_factors(tp, Xs, ys, need_inverse=False)
    q = model.recog_batches()
    p_star = model.prior_batches(X_star)
    Kd_T = kernel_matrix(tp.disc_kernel, X_T, X_T)
    Kd_ss = kernel_matrix(tp.disc_kernel, X_star, X_star) if with_cov else None

    Zs = [[g.means + g.stds * rng.standard_normal(g.means.shape) for g in q] for _ in range(W)]
    tf = target_factor(tp, Xs, sf, X_T, y_T, stack_alignments(Zs, tp.n_sources), Kd_T)
    n_s = X_star.shape[0]
    means = []
    cov_acc = np.zeros((n_s, n_s)) if with_cov else None
    for _ in range(K):
        Z_star = [g.means + g.stds * rng.standard_normal(g.means.shape) for g in p_star]
        ps = _prior_side(tp, Xs, sf, X_star, Z_star, Kd_ss, with_cov)
        for w in range(W):
            m, V = _condition(tp, X_T, sf, tf, w, X_star, Z_star, ps, with_cov)
            means.append(m)
            if with_cov:
                cov_acc += V
    M = np.array(means)
    mean = M.mean(0)
    if not with_cov:
        return PredictiveDistribution(mean, np.diag(np.zeros(n_s)))
    D = M - mean
    cov = cov_acc / len(means) + D.T @ D / len(means)
    return PredictiveDistribution(mean, jitter_to_psd(cov))
