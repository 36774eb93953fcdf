"""Squared-exponential (ARD) kernel with analytic derivatives.

Hyperparameters live in log space: ``log_amplitude = log(alpha)`` and
``log_lengthscales = log(l_k)`` with ``Lambda = diag(l_k**2)``, so

    k(x, x') = alpha**2 * exp(-0.5 * sum_k (x_k - x'_k)**2 / l_k**2).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class KernelParams:
    log_amplitude: float
    log_lengthscales: np.ndarray

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.log_lengthscales, dtype=float))
        if ls.ndim != 1:
            raise ValueError("log_lengthscales must be a vector (ARD diagonal only)")
        object.__setattr__(self, "log_lengthscales", ls)
        object.__setattr__(self, "log_amplitude", float(self.log_amplitude))

    @property
    def dim(self) -> int:
        return self.log_lengthscales.shape[0]

    @property
    def amplitude(self) -> float:
        return float(np.exp(self.log_amplitude))

    @property
    def lengthscales(self) -> np.ndarray:
        return np.exp(self.log_lengthscales)

    @classmethod
    def from_values(cls, amplitude, lengthscales) -> "KernelParams":
        return cls(np.log(amplitude), np.log(np.atleast_1d(lengthscales)))

    @classmethod
    def default(cls, dim: int) -> "KernelParams":
        """Unit amplitude and unit length-scales."""
        return cls(0.0, np.zeros(dim))


@dataclass
class KernelGrads:
    """Elementwise partial derivatives of K = kernel_matrix(p, A, B).

    d_log_amplitude[i, j]      = dK_ij / dlog(alpha)
    d_log_lengthscales[k, i, j] = dK_ij / dlog(l_k)
    d_A[i, j, k]               = dK_ij / dA_ik   (K_ij depends on row i of A only)
    d_B[i, j, k]               = dK_ij / dB_jk
    """

    d_log_amplitude: np.ndarray
    d_log_lengthscales: np.ndarray
    d_A: np.ndarray
    d_B: np.ndarray


def _check(p: KernelParams, A: np.ndarray, B: np.ndarray):
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    A = A if A.ndim >= 2 else np.atleast_2d(A)
    B = B if B.ndim >= 2 else np.atleast_2d(B)
    if A.shape[-1] != p.dim or B.shape[-1] != p.dim:
        raise ValueError(
            f"input dimension mismatch: kernel has d={p.dim}, got {A.shape[-1]} and {B.shape[-1]}"
        )
    return A, B


def kernel_eval(p: KernelParams, x, x_prime) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    x_prime = np.atleast_1d(np.asarray(x_prime, dtype=float))
    if x.shape != (p.dim,) or x_prime.shape != (p.dim,):
        raise ValueError(f"expected vectors of length {p.dim}, got {x.shape} and {x_prime.shape}")
    r = (x - x_prime) / p.lengthscales
    return float(np.exp(2.0 * p.log_amplitude - 0.5 * np.dot(r, r)))


def sq_dist(A: np.ndarray, B: np.ndarray, lengthscales: np.ndarray) -> np.ndarray:
    """Scaled squared distances; leading batch dimensions broadcast."""
    a = A / lengthscales
    b = B / lengthscales
    d2 = (a * a).sum(-1)[..., :, None] + (b * b).sum(-1)[..., None, :] - 2.0 * a @ np.swapaxes(b, -1, -2)
    return np.maximum(d2, 0.0)


def kernel_matrix(p: KernelParams, A, B) -> np.ndarray:
    """Gram matrix k(A_i, B_j); stacks of inputs (leading dimensions) broadcast."""
    same = A is B
    A, B = _check(p, A, B)
    K = np.exp(2.0 * p.log_amplitude - 0.5 * sq_dist(A, B, p.lengthscales))
    if same:
        # exact symmetry for the Gram case
        K = 0.5 * (K + np.swapaxes(K, -1, -2))
    return K


def kernel_grads(p: KernelParams, A, B) -> KernelGrads:
    A, B = _check(p, A, B)
    K = kernel_matrix(p, A, B)
    inv_l2 = np.exp(-2.0 * p.log_lengthscales)
    diff = A[:, None, :] - B[None, :, :]  # (n, m, d)
    d_ls = np.moveaxis(K[:, :, None] * diff**2 * inv_l2, 2, 0)
    d_A = -K[:, :, None] * diff * inv_l2
    return KernelGrads(2.0 * K, d_ls, d_A, -d_A)


def kernel_vjp(p: KernelParams, A, B, G, K=None):
    """Contract kernel derivatives with an upstream matrix ``G`` (same shape as K).

    Returns ``(g_log_amplitude, g_log_lengthscales, g_A, g_B)`` where e.g.
    ``g_A[i, k] = sum_j G_ij dK_ij/dA_ik``. Avoids forming the (n, m, d) tensors,
    which is what the training loop uses. With stacked inputs the hyperparameter
    gradients are summed over the stack and ``g_A``/``g_B`` keep its shape.
    """
    if K is None:
        K = kernel_matrix(p, A, B)
    d = p.dim
    inv_l2 = np.exp(-2.0 * p.log_lengthscales)
    M = G * K
    row = M.sum(-1)
    col = M.sum(-2)
    MB = M @ B
    MtA = np.swapaxes(M, -1, -2) @ A
    g_amp = 2.0 * float(M.sum())
    Arow = A * row[..., None]
    Bcol = B * col[..., None]
    g_ls = ((A * Arow).reshape(-1, d).sum(0) - 2.0 * (A * MB).reshape(-1, d).sum(0)
            + (B * Bcol).reshape(-1, d).sum(0)) * inv_l2
    g_A = -(Arow - MB) * inv_l2
    g_B = (MtA - Bcol) * inv_l2
    return g_amp, g_ls, g_A, g_B
