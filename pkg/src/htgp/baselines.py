"""Baselines: a target-only GP and input mapping calibration (IMC) with an
optional GP bias correction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .alignnet import ReferenceMapping, imc_reference
from .dataio import Dataset, StandardizationState, rng_stream, standardize
from .gpcore import LOG_2PI, PredictiveDistribution, jitter_to_psd, robust_cholesky
from .kernels import KernelParams, kernel_matrix, kernel_vjp
from .optim import AdamState, adam_step


@dataclass
class SingleGP:
    """Zero-mean GP on standardized data; public methods take raw inputs."""

    kernel: KernelParams
    log_noise: float
    data: Dataset                   # standardized
    state: StandardizationState
    L: np.ndarray | None = None
    alpha: np.ndarray | None = None

    def __post_init__(self):
        self.refactor()

    def refactor(self):
        X = self.data.inputs
        C = kernel_matrix(self.kernel, X, X) + np.exp(self.log_noise) * np.eye(X.shape[0])
        self.L, _ = robust_cholesky(C)
        self.alpha = cho_solve((self.L, True), self.data.outputs)

    @property
    def noise_var(self) -> float:
        return float(np.exp(self.log_noise))

    def predict_std(self, U_unit, with_cov: bool = True) -> PredictiveDistribution:
        """Latent posterior in standardized coordinates."""
        Ks = kernel_matrix(self.kernel, self.data.inputs, U_unit)
        mean = Ks.T @ self.alpha
        if not with_cov:
            return PredictiveDistribution(mean, np.zeros((0, 0)))
        v = solve_triangular(self.L, Ks, lower=True)
        V = kernel_matrix(self.kernel, U_unit, U_unit) - v.T @ v
        return PredictiveDistribution(mean, 0.5 * (V + V.T))

    def mean_and_grad(self, U):
        """Raw-scale posterior mean and its gradient with respect to raw inputs."""
        lo, sc = self.state._affine()
        Uu = (np.atleast_2d(np.asarray(U, dtype=float)) - lo) / sc
        X = self.data.inputs
        Ka = kernel_matrix(self.kernel, Uu, X) * self.alpha[None, :]
        m = Ka.sum(1)
        g = -(Uu * m[:, None] - Ka @ X) / self.kernel.lengthscales**2
        return self.state.outputs_from_std(m), g * self.state.output_std / sc


def _gp_loss_grad(theta: np.ndarray, X, y):
    """Negative log marginal likelihood and gradient; theta = (log amp, log ls..., log noise)."""
    kp = KernelParams(theta[0], theta[1:-1])
    n = X.shape[0]
    K = kernel_matrix(kp, X, X)
    s2 = np.exp(theta[-1])
    L, _ = robust_cholesky(K + s2 * np.eye(n))
    a = cho_solve((L, True), y)
    nll = 0.5 * y @ a + np.log(np.diag(L)).sum() + 0.5 * n * LOG_2PI
    Wm = 0.5 * (np.outer(a, a) - cho_solve((L, True), np.eye(n)))
    g_amp, g_ls, _, _ = kernel_vjp(kp, X, X, Wm, K)
    grad = -np.concatenate([[g_amp], g_ls, [s2 * np.trace(Wm)]])
    return float(nll), grad


def tgp_fit(ds: Dataset, seed: int, restarts: int = 3, steps: int = 3000, lr: float = 2e-3,
            noise_floor: float = 0.05, rep: int = 0) -> SingleGP:
    """Maximum marginal likelihood by Adam from unit amplitude/length-scales and a
    random noise level, keeping the best of ``restarts`` runs."""
    if ds.n < 2:
        raise ValueError("the target-only GP needs at least two samples")
    std, state = standardize(ds)
    X, y = std.inputs, std.outputs
    rng = rng_stream(seed, "tgp-init", rep)
    best = None
    for _ in range(restarts):
        sigma = rng.uniform(noise_floor, 1.0)
        theta = np.concatenate([[0.0], np.zeros(ds.d), [2.0 * np.log(sigma)]])
        st = AdamState.zeros(theta.size, lr)
        run = (np.inf, theta.copy())
        for _ in range(steps):
            try:
                nll, g = _gp_loss_grad(theta, X, y)
            except np.linalg.LinAlgError:
                break
            if not (np.isfinite(nll) and np.all(np.isfinite(g))):
                break
            if nll < run[0]:
                run = (nll, theta.copy())
            theta = adam_step(st, theta, g)
        if np.isfinite(run[0]) and (best is None or run[0] < best[0]):
            best = run
    if best is None:
        raise FloatingPointError("every target-only GP restart failed")
    th = best[1]
    return SingleGP(KernelParams(th[0], th[1:-1]), float(th[-1]), std, state)


def tgp_predict(gp: SingleGP, X_star, with_cov: bool = True) -> PredictiveDistribution:
    """Latent posterior at raw inputs on the raw output scale."""
    U = gp.state.inputs_to_unit(np.atleast_2d(np.asarray(X_star, dtype=float)))
    pd = gp.predict_std(U, with_cov)
    mean = gp.state.mean_from_std(pd.mean)
    if not with_cov:
        return PredictiveDistribution(mean, np.zeros((0, 0)))
    return PredictiveDistribution(mean, jitter_to_psd(gp.state.cov_from_std(pd.cov)))


@dataclass
class IMCModel:
    surrogate: SingleGP
    mapping: ReferenceMapping
    residual: SingleGP | None
    fit_loss: float


def imc_fit(target_ds: Dataset, source_ds: Dataset, seed: int, bias_correction: bool = True,
            restarts: int = 8, steps: int = 2000, lr: float = 1e-2, rep: int = 0,
            surrogate: SingleGP | None = None) -> IMCModel:
    """Fit the source surrogate, calibrate the affine input map by output
    matching, then (optionally) a target-only GP on the residuals."""
    if surrogate is None:
        surrogate = tgp_fit(source_ds, seed, rep=rep)
    mapping, loss = imc_reference(target_ds, source_ds, surrogate,
                                  rng_stream(seed, "imc-restarts", rep),
                                  restarts=restarts, steps=steps, lr=lr)
    residual = None
    if bias_correction:
        m, _ = surrogate.mean_and_grad(mapping.values(target_ds.inputs))
        res = Dataset(target_ds.inputs, target_ds.outputs - m, target_ds.domain_id)
        residual = tgp_fit(res, seed, rep=rep) if res.n >= 2 else None
    return IMCModel(surrogate, mapping, residual, loss)


def imc_predict(model: IMCModel, X_star, with_cov: bool = True) -> PredictiveDistribution:
    X_star = np.atleast_2d(np.asarray(X_star, dtype=float))
    U = model.mapping.values(X_star)
    sur = model.surrogate
    pd = sur.predict_std(sur.state.inputs_to_unit(U), with_cov)
    mean = sur.state.mean_from_std(pd.mean)
    cov = sur.state.cov_from_std(pd.cov) if with_cov else None
    if model.residual is not None:
        r = tgp_predict(model.residual, X_star, with_cov)
        mean = mean + r.mean
        if with_cov:
            cov = cov + r.cov
    if not with_cov:
        return PredictiveDistribution(mean, np.zeros((0, 0)))
    return PredictiveDistribution(mean, jitter_to_psd(cov))
