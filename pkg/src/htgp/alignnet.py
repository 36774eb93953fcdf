"""Latent input alignment: conditional prior P(Z|X), recognition model Q(Z|X,y),
reparameterized sampling, factorized Gaussian KL, physical-insight penalty and
reference mappings (explicit or fitted by input-mapping calibration)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .optim import AdamState, adam_step

LOGVAR_CLAMP = 10.0

ACTIVATIONS = {
    "identity": (lambda a: a, lambda a, out: np.ones_like(a)),
    "tanh": (np.tanh, lambda a, out: 1.0 - out**2),
}


@dataclass
class GaussianBatch:
    """Diagonal Gaussians, one row per target sample: ``means``/``stds`` are n_T x d_S."""

    means: np.ndarray
    stds: np.ndarray

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=float)
        self.stds = np.asarray(self.stds, dtype=float)
        if self.means.shape != self.stds.shape:
            raise ValueError(f"means {self.means.shape} vs stds {self.stds.shape}")


# --------------------------------------------------------------------------
# prior network  g_mu(x) = psi(A1 x + b1),  log var = A2 x + b2
# --------------------------------------------------------------------------

def prior_forward(theta: dict, X_T: np.ndarray, activation: str = "identity",
                  return_cache: bool = False):
    psi = ACTIVATIONS[activation][0]
    A1, b1, A2, b2 = theta["A1"], theta["b1"], theta["A2"], theta["b2"]
    if X_T.shape[1] != A1.shape[1] or A2.shape != A1.shape:
        raise ValueError(f"prior weights {A1.shape} incompatible with inputs {X_T.shape}")
    pre = X_T @ A1.T + b1
    means = psi(pre)
    logvar = X_T @ A2.T + b2
    g = GaussianBatch(means, np.exp(0.5 * logvar))
    if return_cache:
        return g, {"X": X_T, "pre": pre, "logvar": logvar, "activation": activation}
    return g


def prior_backward(theta: dict, cache: dict, g: GaussianBatch, g_means, g_stds,
                   g_logvar=None) -> dict:
    """Gradients of a scalar w.r.t. theta given its gradients w.r.t. the outputs."""
    dpsi = ACTIVATIONS[cache["activation"]][1]
    X = cache["X"]
    g_pre = g_means * dpsi(cache["pre"], g.means)
    g_lv = g_stds * 0.5 * g.stds
    if g_logvar is not None:
        g_lv = g_lv + g_logvar
    return {"A1": g_pre.T @ X, "b1": g_pre.sum(0), "A2": g_lv.T @ X, "b2": g_lv.sum(0)}


# --------------------------------------------------------------------------
# recognition network
# --------------------------------------------------------------------------

def recog_input(x_T, y_T, target_stats, source_stats, alpha_j: float) -> np.ndarray:
    """Composite encoder input (x_i, y_i, mean x_T, mean y_T, a*mean x_j, a*mean y_j).

    ``x_T``/``y_T`` may be a single sample or a batch (rows). ``*_stats`` are
    ``(mean_inputs, mean_output)`` pairs.
    """
    x_T = np.asarray(x_T, dtype=float)
    batch = x_T.ndim == 2
    X = np.atleast_2d(x_T)
    Y = np.atleast_1d(np.asarray(y_T, dtype=float)).reshape(-1, 1)
    n = X.shape[0]
    xbar_T, ybar_T = target_stats
    xbar_S, ybar_S = source_stats
    tail = np.concatenate([np.atleast_1d(xbar_T), [ybar_T],
                           alpha_j * np.atleast_1d(xbar_S), [alpha_j * ybar_S]])
    U = np.hstack([X, Y, np.tile(tail, (n, 1))])
    return U if batch else U[0]


def recog_forward(phi: dict, U: np.ndarray, return_cache: bool = False):
    W1, c1, W2, c2, W3, c3 = (phi[k] for k in ("W1", "c1", "W2", "c2", "W3", "c3"))
    if U.shape[1] != W1.shape[1]:
        raise ValueError(f"recognition input width {U.shape[1]} != {W1.shape[1]}")
    h = np.tanh(U @ W1.T + c1)
    means = h @ W2.T + c2
    raw = h @ W3.T + c3
    logvar = np.clip(raw, -LOGVAR_CLAMP, LOGVAR_CLAMP)
    g = GaussianBatch(means, np.exp(0.5 * logvar))
    if return_cache:
        return g, {"U": U, "h": h, "raw": raw}
    return g


def recog_backward(phi: dict, cache: dict, g: GaussianBatch, g_means, g_stds,
                   g_logvar=None) -> dict:
    U, h, raw = cache["U"], cache["h"], cache["raw"]
    g_lv = g_stds * 0.5 * g.stds
    if g_logvar is not None:
        g_lv = g_lv + g_logvar
    g_lv = g_lv * (np.abs(raw) < LOGVAR_CLAMP)
    g_h = g_means @ phi["W2"] + g_lv @ phi["W3"]
    g_a = g_h * (1.0 - h**2)
    return {
        "W1": g_a.T @ U, "c1": g_a.sum(0),
        "W2": g_means.T @ h, "c2": g_means.sum(0),
        "W3": g_lv.T @ h, "c3": g_lv.sum(0),
    }


# --------------------------------------------------------------------------
# sampling and divergence
# --------------------------------------------------------------------------

def reparam_sample(g: GaussianBatch, eps: np.ndarray) -> np.ndarray:
    eps = np.asarray(eps, dtype=float)
    if eps.shape != g.means.shape:
        raise ValueError(f"eps shape {eps.shape} != {g.means.shape}")
    return g.means + g.stds * eps


def _as_list(x):
    return list(x) if isinstance(x, (list, tuple)) else [x]


def kl_factorized(q, p) -> float:
    """Sum over sources, rows and dims of KL(N(mu_q, s_q^2) || N(mu_p, s_p^2))."""
    total = 0.0
    for qj, pj in zip(_as_list(q), _as_list(p), strict=True):
        if qj.means.shape != pj.means.shape:
            raise ValueError(f"shape mismatch {qj.means.shape} vs {pj.means.shape}")
        if np.any(qj.stds <= 0) or np.any(pj.stds <= 0):
            raise FloatingPointError("non-positive standard deviation in KL")
        vq, vp = qj.stds**2, pj.stds**2
        total += 0.5 * float(np.sum(np.log(vp / vq) - 1.0 + vq / vp
                                    + (qj.means - pj.means) ** 2 / vp))
    return total


def kl_grads(q: GaussianBatch, p: GaussianBatch):
    """d KL / d(mu_q, logvar_q, mu_p, logvar_p) for one source."""
    vq, vp = q.stds**2, p.stds**2
    dmu = (q.means - p.means) / vp
    ratio = vq / vp
    return dmu, 0.5 * (ratio - 1.0), -dmu, 0.5 * (1.0 - ratio) - 0.5 * dmu * (q.means - p.means)


# --------------------------------------------------------------------------
# reference mappings and the physical-insight penalty
# --------------------------------------------------------------------------

@dataclass
class ReferenceMapping:
    """Presumed target-to-source input correspondence for one source.

    ``kind`` is "affine" (``matrix`` d_S x d_T and ``offset``) or "table"
    (precomputed aligned values for the training target inputs).
    """

    kind: str
    matrix: np.ndarray | None = None
    offset: np.ndarray | None = None
    table: np.ndarray | None = None

    @classmethod
    def affine(cls, matrix, offset=None) -> "ReferenceMapping":
        R = np.atleast_2d(np.asarray(matrix, dtype=float))
        c = np.zeros(R.shape[0]) if offset is None else np.asarray(offset, dtype=float)
        return cls("affine", R, c)

    @classmethod
    def subset(cls, indices, d_T: int) -> "ReferenceMapping":
        R = np.zeros((len(indices), d_T))
        R[np.arange(len(indices)), list(indices)] = 1.0
        return cls.affine(R)

    @classmethod
    def from_table(cls, table) -> "ReferenceMapping":
        return cls("table", table=np.atleast_2d(np.asarray(table, dtype=float)))

    @property
    def out_dim(self) -> int:
        return self.matrix.shape[0] if self.kind == "affine" else self.table.shape[1]

    def values(self, X_T) -> np.ndarray:
        if self.kind == "affine":
            return np.asarray(X_T) @ self.matrix.T + self.offset
        if self.table.shape[0] != len(X_T):
            raise ValueError(f"reference table has {self.table.shape[0]} rows, need {len(X_T)}")
        return self.table

    def rows(self, idx) -> "ReferenceMapping":
        if self.kind == "affine":
            return self
        return ReferenceMapping.from_table(self.table[np.asarray(idx)])

    def to_unit(self, target_state, source_state) -> "ReferenceMapping":
        """Re-express the mapping between standardized (unit-box) input spaces."""
        lo_T, sc_T = target_state._affine()
        lo_S, sc_S = source_state._affine()
        if self.kind == "affine":
            R = self.matrix * sc_T[None, :] / sc_S[:, None]
            c = (self.matrix @ lo_T + self.offset - lo_S) / sc_S
            return ReferenceMapping.affine(R, c)
        return ReferenceMapping.from_table((self.table - lo_S) / sc_S)

    def to_dict(self) -> dict:
        if self.kind == "affine":
            return {"type": "affine", "matrix": self.matrix.tolist(), "offset": self.offset.tolist()}
        return {"type": "table", "values": self.table.tolist()}

    @classmethod
    def from_dict(cls, d: dict, d_T: int | None = None) -> "ReferenceMapping":
        kind = d["type"]
        if kind == "affine":
            return cls.affine(d["matrix"], d.get("offset"))
        if kind == "subset":
            if d_T is None:
                raise ValueError("subset reference needs the target dimension")
            return cls.subset(d["indices"], d_T)
        if kind == "table":
            return cls.from_table(d["values"])
        raise ValueError(f"reference type {kind!r} cannot be materialized directly")


def phyr_penalty(prior_means, ref_values, lam: float) -> float:
    """lam * sum_j ||r_j - r0_j||_F (positive magnitude)."""
    total = 0.0
    for r, r0 in zip(_as_list(prior_means), _as_list(ref_values), strict=True):
        r0 = np.asarray(r0, dtype=float)
        if np.shape(r) != r0.shape:
            raise ValueError(f"prior means {np.shape(r)} vs reference {r0.shape}")
        total += float(np.linalg.norm(r - r0))
    return lam * total


def phyr_grad(prior_mean, ref_value, lam: float) -> np.ndarray:
    diff = prior_mean - ref_value
    nrm = np.linalg.norm(diff)
    if nrm == 0.0:
        return np.zeros_like(diff)
    return lam * diff / nrm


# --------------------------------------------------------------------------
# input mapping calibration
# --------------------------------------------------------------------------

class FunctionSurrogate:
    """Wrap an analytic source response ``f(U) -> (n,)`` and its input gradient."""

    def __init__(self, f, grad):
        self.f = f
        self.grad = grad

    def mean_and_grad(self, U):
        return self.f(U), self.grad(U)


def imc_loss(A, b, X_T, y_T, surrogate) -> float:
    m, _ = surrogate.mean_and_grad(X_T @ A.T + b)
    return float(np.sum((y_T - m) ** 2))


def imc_reference(target_ds, source_ds, surrogate, rng=None, restarts: int = 8,
                  steps: int = 2000, lr: float = 1e-2, init_std: float = 0.1):
    """Affine map u = A x + b fitted by output matching through ``surrogate``.

    Adam with multi-start; one restart begins at the truncated identity when
    d_T >= d_S. The loss is divided by the target output variance so the
    learning rate is scale-free. Returns ``(ReferenceMapping, loss)`` where the
    loss is the unscaled sum of squared residuals.
    """
    X = np.asarray(target_ds.inputs, dtype=float)
    y = np.asarray(target_ds.outputs, dtype=float)
    if X.shape[0] < 1:
        raise ValueError("input mapping calibration needs at least one target sample")
    d_T, d_S = X.shape[1], source_ds.d
    rng = rng if rng is not None else np.random.default_rng(0)
    lo, hi = source_ds.inputs.min(0), source_ds.inputs.max(0)
    scale = max(float(np.var(y)), 1e-12) * len(y)

    inits = []
    if d_T >= d_S:
        inits.append((np.eye(d_S, d_T), np.zeros(d_S)))
    while len(inits) < restarts:
        inits.append((rng.normal(0.0, init_std, (d_S, d_T)), lo + rng.random(d_S) * (hi - lo)))

    best = None
    for A0, b0 in inits[:max(restarts, 1)]:
        theta = np.concatenate([A0.ravel(), b0])
        state = AdamState.zeros(theta.size, lr)
        run_best = (np.inf, theta.copy())
        for _ in range(steps):
            A = theta[: d_S * d_T].reshape(d_S, d_T)
            b = theta[d_S * d_T:]
            m, g = surrogate.mean_and_grad(X @ A.T + b)
            r = y - m
            loss = float(r @ r)
            if not np.isfinite(loss):
                break
            if loss < run_best[0]:
                run_best = (loss, theta.copy())
            gu = (-2.0 * r)[:, None] * g / scale  # d loss / d u
            grad = np.concatenate([(gu.T @ X).ravel(), gu.sum(0)])
            theta = adam_step(state, theta, grad)
        A = theta[: d_S * d_T].reshape(d_S, d_T)
        b = theta[d_S * d_T:]
        final = imc_loss(A, b, X, y, surrogate)
        if np.isfinite(final) and final < run_best[0]:
            run_best = (final, theta.copy())
        if np.isfinite(run_best[0]) and (best is None or run_best[0] < best[0]):
            best = run_best
    if best is None:
        raise FloatingPointError("input mapping calibration diverged on every restart")
    theta = best[1]
    ref = ReferenceMapping.affine(theta[: d_S * d_T].reshape(d_S, d_T), theta[d_S * d_T:])
    return ref, best[0]
