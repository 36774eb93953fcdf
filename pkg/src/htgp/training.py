"""End-to-end training loop and cross-validated choice of (lam, gamma)."""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .dataio import rng_stream
from .gpcore import CholeskyError
from .model import ModelConfig, TransferData, TransferModel
from .objective import ObjectiveConfig, draw_eps, total_objective
from .optim import AdamState, adam_step

TRACE_COLUMNS = ("epoch", "total", "rec", "kl", "phyr", "ssr")


class TrainingError(FloatingPointError):
    def __init__(self, msg: str, diagnostics: dict):
        self.diagnostics = diagnostics
        super().__init__(f"{msg}: {diagnostics}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 3000
    lr: float = 2e-3
    smooth_window: int = 50
    max_bad_steps: int = 10

    def __post_init__(self):
        if self.epochs < 0 or self.smooth_window < 1 or self.lr <= 0:
            raise ValueError("invalid training configuration")


@dataclass
class TrainResult:
    params: np.ndarray
    trace: np.ndarray        # rows of TRACE_COLUMNS
    best_epoch: int


def write_trace(path, trace: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for row in trace:
            w.writerow([int(row[0])] + [repr(float(v)) for v in row[1:]])


def train(model: TransferModel, obj: ObjectiveConfig, cfg: TrainConfig, seed: int,
          init: np.ndarray | None = None, freeze=(), rep: int = 0,
          callback=None) -> TrainResult:
    """Adam on the full objective with a proximal L1 step on rho.

    Every epoch draws fresh reparameterization noise. Returns the parameters
    that were current when the trailing mean of the last ``smooth_window``
    losses was lowest. ``freeze`` lists layout blocks held at their initial
    values. ``callback(epoch, params, diagnostics)`` is called before every
    update. Sets ``model.params`` to the returned parameters.
    """
    if init is None:
        # the reference mapping only informs the start when PhyR is on
        params = model.init_params(rng_stream(seed, "init", rep), use_reference=obj.lam > 0)
    else:
        params = init.copy()
    layout = model.layout
    mask = np.ones(layout.size)
    for name in freeze:
        mask[layout.slices[name][0]] = 0.0
    rho_sl = layout.slices["rho"][0]
    prox_idx = np.arange(rho_sl.start, rho_sl.stop) if "rho" not in freeze else np.zeros(0, int)
    state = AdamState.zeros(layout.size, cfg.lr, prox_index=prox_idx, prox_weight=obj.gamma)
    rng = rng_stream(seed, "train-eps", rep)

    trace = []
    best = (np.inf, params.copy(), 0)
    window = []
    bad = 0
    for epoch in range(cfg.epochs):
        eps = draw_eps(model, obj, rng)
        try:
            loss, diag, grad = total_objective(obj, model, params, eps, smooth_only=True)
            if not np.all(np.isfinite(grad)):
                raise FloatingPointError(
                    f"non-finite gradient in block {layout.block_of(int(np.flatnonzero(~np.isfinite(grad))[0]))}")
        except (FloatingPointError, CholeskyError, np.linalg.LinAlgError) as exc:
            bad += 1
            if bad >= cfg.max_bad_steps:
                raise TrainingError(f"{bad} consecutive non-finite steps",
                                    {"epoch": epoch, "last_error": str(exc)}) from exc
            continue
        bad = 0
        trace.append([epoch, loss, diag["rec"], diag["kl"], diag["phyr"], diag["ssr"]])
        window.append(loss)
        if len(window) > cfg.smooth_window:
            window.pop(0)
        smoothed = float(np.mean(window))
        if smoothed < best[0]:
            best = (smoothed, params.copy(), epoch)
        if callback is not None:
            callback(epoch, params, diag)
        params = adam_step(state, params, grad * mask)

    model.params = best[1]
    return TrainResult(best[1], np.array(trace).reshape(-1, len(TRACE_COLUMNS)), best[2])


def kfold_indices(n: int, folds: int, rng: np.random.Generator):
    """Held-out index sets; ``folds == n`` (or ``None``) is leave-one-out."""
    if folds is None:
        folds = n
    if not 2 <= folds <= n:
        raise ValueError(f"folds must lie in [2, n_T={n}], got {folds}")
    perm = rng.permutation(n)
    return [np.sort(part) for part in np.array_split(perm, folds)]


def select_hyperparams(data: TransferData, lam_grid, gamma_grid, folds, seed: int,
                       model_cfg: ModelConfig | None = None,
                       obj: ObjectiveConfig | None = None,
                       train_cfg: TrainConfig | None = None, rep: int = 0):
    """Grid point with the lowest mean held-out RMSE; ties go to larger values."""
    lam_grid, gamma_grid = list(lam_grid), list(gamma_grid)
    if not lam_grid or not gamma_grid:
        raise ValueError("hyperparameter grids must be non-empty")
    if len(lam_grid) == 1 and len(gamma_grid) == 1:
        return float(lam_grid[0]), float(gamma_grid[0])
    obj = obj or ObjectiveConfig()
    train_cfg = train_cfg or TrainConfig()
    n = data.target.n
    held = kfold_indices(n, folds, rng_stream(seed, "cv-split", rep))
    best = None
    for lam in lam_grid:
        for gamma in gamma_grid:
            errs = []
            for k, test_idx in enumerate(held):
                train_idx = np.setdiff1d(np.arange(n), test_idx)
                model = TransferModel(data.subset_target(train_idx), model_cfg)
                cfg = replace(obj, lam=float(lam), gamma=float(gamma))
                try:
                    train(model, cfg, train_cfg, seed, rep=rep * 1000 + k)
                    pred = model.predict(data.target.inputs[test_idx],
                                         rng_stream(seed, "cv-predict", rep * 1000 + k),
                                         with_cov=False)
                    errs.append(float(np.sqrt(np.mean(
                        (pred.mean - data.target.outputs[test_idx]) ** 2))))
                except (FloatingPointError, np.linalg.LinAlgError):
                    errs.append(np.inf)
            key = (float(np.mean(errs)), -float(lam), -float(gamma))
            if best is None or key < best[0]:
                best = (key, float(lam), float(gamma))
    return best[1], best[2]
