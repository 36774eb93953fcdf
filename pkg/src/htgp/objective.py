"""Training objective: hybrid reconstruction, weighted KL, reference-mapping
penalty and L1 source selection, with its gradient."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .alignnet import (
    kl_factorized, kl_grads, phyr_grad, prior_backward, prior_forward, recog_backward,
    recog_forward,
)
from .gpcore import assemble_cov, decoder_loglik_grad, joint_loglik

COMPONENTS = ("rec", "kl", "phyr", "ssr")


@dataclass(frozen=True)
class ObjectiveConfig:
    mu: float = 0.7
    beta: float = 0.8
    lam: float = 0.0
    gamma: float = 0.0
    L: int = 2
    M: int = 2
    ssr_kind: str = "l1"

    def __post_init__(self):
        if not 0.0 <= self.mu <= 1.0:
            raise ValueError("mu must lie in [0, 1]")
        if not 0.0 < self.beta <= 1.0:
            raise ValueError("beta must lie in (0, 1]")
        if self.lam < 0 or self.gamma < 0:
            raise ValueError("lam and gamma must be non-negative")
        if self.L < 1 or self.M < 1:
            raise ValueError("L and M must be >= 1")
        if self.ssr_kind != "l1":
            raise ValueError("only the L1 source-selection penalty is supported")


def loss_kl(cfg: ObjectiveConfig, q, p) -> float:
    return cfg.beta * cfg.mu * kl_factorized(q, p)


def loss_rec(cfg: ObjectiveConfig, tp, sources, target, Z_q, Z_p) -> float:
    """mu * mean loglik over posterior samples + (1 - mu) * mean over prior samples.

    ``sources`` are Datasets, ``Z_q``/``Z_p`` lists of alignments (one matrix per source).
    """
    Xs = [s.inputs for s in sources]
    y = np.concatenate([s.outputs for s in sources] + [target.outputs])

    def avg(Zs):
        return np.mean([joint_loglik(assemble_cov(tp, Xs, target.inputs, Z), y) for Z in Zs])

    return cfg.mu * avg(Z_q) + (1.0 - cfg.mu) * avg(Z_p)


def loss_ssr(cfg: ObjectiveConfig, rho) -> float:
    return cfg.gamma * float(np.sum(np.abs(rho)))


def draw_eps(model, cfg: ObjectiveConfig, rng: np.random.Generator) -> dict:
    n_T = model.target_std.n
    return {
        "q": [[rng.standard_normal((n_T, d)) for d in model.source_dims] for _ in range(cfg.L)],
        "p": [[rng.standard_normal((n_T, d)) for d in model.source_dims] for _ in range(cfg.M)],
    }


def total_objective(cfg: ObjectiveConfig, model, params: np.ndarray, eps: dict,
                    smooth_only: bool = False):
    """Loss to minimize and its gradient with respect to the flat parameters.

    ``eps`` holds the standard-normal draws (see :func:`draw_eps`). With
    ``smooth_only`` the L1 term is left out of the gradient (the optimizer
    applies it as a proximal step) but still reported in the loss.

    Returns ``(loss, diagnostics, grad)``.
    """
    layout = model.layout
    blocks = layout.unpack(params)
    tp = model.transfer_params(blocks=blocks)
    thetas = [model.prior_theta(j, blocks=blocks) for j in range(model.N)]
    phis = [model.recog_phi(j, blocks=blocks) for j in range(model.N)]
    Xs, ys, X_T, y_T = model.training_data()
    N = model.N

    p_batches, p_caches, q_batches, q_caches = [], [], [], []
    for j in range(N):
        pb, pc = prior_forward(thetas[j], X_T, model.config.activation,
                               return_cache=True)
        qb, qc = recog_forward(phis[j], model.recog_inputs[j],
                               return_cache=True)
        p_batches.append(pb)
        p_caches.append(pc)
        q_batches.append(qb)
        q_caches.append(qc)

    Z_q = [[q.means + q.stds * e for q, e in zip(q_batches, eq)] for eq in eps["q"]]
    Z_p = [[p.means + p.stds * e for p, e in zip(p_batches, ep)] for ep in eps["p"]]
    L, M = len(Z_q), len(Z_p)
    weights = [cfg.mu / L] * L + [(1.0 - cfg.mu) / M] * M
    lls, dec_grads, gZ = decoder_loglik_grad(tp, Xs, ys, X_T, y_T, Z_q + Z_p, weights)
    rec = float(np.dot(weights, lls))

    kl = loss_kl(cfg, q_batches, p_batches) if N else 0.0
    phyr = 0.0
    for pb, r0 in zip(p_batches, model.ref_values):
        if r0 is not None:
            phyr += float(np.linalg.norm(pb.means - r0))
    phyr *= cfg.lam
    ssr = loss_ssr(cfg, tp.rho)
    diag = {"rec": rec, "kl": kl, "phyr": phyr, "ssr": ssr}
    for name, val in diag.items():
        if not np.isfinite(val):
            raise FloatingPointError(f"non-finite objective component {name!r}: {val}")
    loss = -rec + kl + phyr + ssr
    diag["total"] = loss

    grad_blocks = {name: np.zeros(shape) for name, shape in layout.entries}
    for name, g in dec_grads.items():
        grad_blocks[name] = -np.asarray(g)
    if not smooth_only:
        grad_blocks["rho"] = grad_blocks["rho"] + cfg.gamma * np.sign(tp.rho)

    kl_w = cfg.beta * cfg.mu
    for j in range(N):
        qb, pb = q_batches[j], p_batches[j]
        gq_m = np.zeros_like(qb.means)
        gq_s = np.zeros_like(qb.stds)
        gp_m = np.zeros_like(pb.means)
        gp_s = np.zeros_like(pb.stds)
        for s in range(L):
            g = -gZ[s][j]
            gq_m += g
            gq_s += g * eps["q"][s][j]
        for s in range(M):
            g = -gZ[L + s][j]
            gp_m += g
            gp_s += g * eps["p"][s][j]
        dmq, dlq, dmp, dlp = kl_grads(qb, pb)
        gq_m += kl_w * dmq
        gp_m += kl_w * dmp
        r0 = model.ref_values[j]
        if r0 is not None and cfg.lam > 0:
            gp_m += phyr_grad(pb.means, r0, cfg.lam)
        gth = prior_backward(thetas[j], p_caches[j], pb, gp_m, gp_s,
                             kl_w * dlp)
        gph = recog_backward(phis[j], q_caches[j], qb, gq_m, gq_s,
                             kl_w * dlq)
        for k, v in gth.items():
            grad_blocks[f"prior{j}_{k}"] = v
        for k, v in gph.items():
            grad_blocks[f"recog{j}_{k}"] = v

    return loss, diag, layout.pack(grad_blocks)
