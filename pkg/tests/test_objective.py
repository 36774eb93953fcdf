import numpy as np
import pytest

from htgp.alignnet import kl_factorized
from htgp.objective import ObjectiveConfig, draw_eps, loss_kl, loss_rec, loss_ssr, total_objective
from oracles import miniature_model


def test_full_gradient_matches_finite_differences():
    model, cfg, p, eps = miniature_model()
    _, _, g = total_objective(cfg, model, p, eps)
    h = 1e-5
    bad = []
    for i in range(p.size):
        e = np.zeros(p.size)
        e[i] = h
        fd = (total_objective(cfg, model, p + e, eps)[0]
              - total_objective(cfg, model, p - e, eps)[0]) / (2 * h)
        if abs(fd - g[i]) > 1e-4 * max(abs(fd), abs(g[i])) + 1e-7:
            bad.append((model.layout.block_of(i), g[i], fd))
    assert not bad, bad


def _alignments(model, p, eps):
    q = [b for b in model.recog_batches(p)]
    pr = model.prior_batches(model.target_std.inputs, p)
    Zq = [[b.means + b.stds * e for b, e in zip(q, es)] for es in eps["q"]]
    Zp = [[b.means + b.stds * e for b, e in zip(pr, es)] for es in eps["p"]]
    return q, pr, Zq, Zp


def test_components_match_independent_routes():
    model, cfg, p, eps = miniature_model()
    _, diag, _ = total_objective(cfg, model, p, eps)
    q, pr, Zq, Zp = _alignments(model, p, eps)
    tp = model.transfer_params(p)
    rec = loss_rec(cfg, tp, model.sources_std, model.target_std, Zq, Zp)
    assert diag["rec"] == pytest.approx(rec, rel=1e-10)
    assert diag["kl"] == pytest.approx(cfg.beta * cfg.mu * kl_factorized(q, pr), rel=1e-12)
    assert diag["kl"] == pytest.approx(loss_kl(cfg, q, pr), rel=1e-12)
    phyr = cfg.lam * sum(np.linalg.norm(b.means - r) for b, r in zip(pr, model.ref_values))
    assert diag["phyr"] == pytest.approx(phyr, rel=1e-12)
    assert diag["ssr"] == pytest.approx(loss_ssr(cfg, tp.rho), rel=1e-12)
    assert diag["total"] == pytest.approx(-diag["rec"] + diag["kl"] + diag["phyr"] + diag["ssr"])


def test_mu_one_uses_posterior_samples_only():
    model, _, p, eps = miniature_model()
    cfg = ObjectiveConfig(mu=1.0)
    _, diag, _ = total_objective(cfg, model, p, eps)
    _, _, Zq, _ = _alignments(model, p, eps)
    tp = model.transfer_params(p)
    wrong = [[z + 10.0 for z in Z] for Z in Zq]
    assert diag["rec"] == pytest.approx(
        loss_rec(cfg, tp, model.sources_std, model.target_std, Zq, wrong), rel=1e-10)


def test_smooth_only_drops_exactly_the_l1_subgradient():
    model, cfg, p, eps = miniature_model()
    l1, d1, g1 = total_objective(cfg, model, p, eps)
    l2, d2, g2 = total_objective(cfg, model, p, eps, smooth_only=True)
    assert l1 == l2
    diff = g1 - g2
    sl = model.layout.slices["rho"][0]
    np.testing.assert_allclose(diff[sl], cfg.gamma * np.sign(model.transfer_params(p).rho))
    diff[sl] = 0.0
    np.testing.assert_array_equal(diff, 0.0)


def test_regularizers_switch_off():
    model, _, p, eps = miniature_model()
    _, diag, _ = total_objective(ObjectiveConfig(), model, p, eps)
    assert diag["phyr"] == 0.0 and diag["ssr"] == 0.0


def test_eps_shapes():
    model, cfg, _, _ = miniature_model()
    eps = draw_eps(model, ObjectiveConfig(L=3, M=1), np.random.default_rng(0))
    assert len(eps["q"]) == 3 and len(eps["p"]) == 1
    assert [e.shape for e in eps["q"][0]] == [(3, 1), (3, 2)]


@pytest.mark.parametrize("kw", [dict(mu=1.5), dict(beta=0.0), dict(lam=-1.0), dict(L=0),
                                dict(ssr_kind="l2")])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        ObjectiveConfig(**kw)
