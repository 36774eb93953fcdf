"""The transfer model: data bundle, parameter layout, initialization and the
views that the objective, training loop and predictor share."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .alignnet import GaussianBatch, ReferenceMapping, prior_forward, recog_forward, recog_input
from .dataio import Dataset, StandardizationState, standardize
from .gpcore import PredictiveDistribution, TransferParams, mc_predict
from .optim import Layout

MODEL_VERSION = 1

PRIOR_KEYS = ("A1", "b1", "A2", "b2")
RECOG_KEYS = ("W1", "c1", "W2", "c2", "W3", "c3")


@dataclass
class ModelConfig:
    hidden: int = 16
    activation: str = "identity"
    alpha: float = 1.0           # weight of the source summary in the encoder input
    init_weight_std: float = 0.1
    init_prior_logvar: float = -2.0
    init_recog_logvar: float = 0.0
    noise_init_floor: float = 0.05  # sigma ~ U[floor, 1] at initialization
    init_prior_at_reference: bool = False  # affine prior mean starts at the reference fit
    K: int = 20
    W: int = 20

    def __post_init__(self):
        if self.hidden < 1:
            raise ValueError("hidden width must be >= 1")
        if self.activation not in ("identity", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.K < 1 or self.W < 1:
            raise ValueError("K and W must be >= 1")
        if not 0.0 <= self.noise_init_floor <= 1.0:
            raise ValueError("noise_init_floor must lie in [0, 1]")


@dataclass
class TransferData:
    """Raw-scale training data: sources, target and per-source reference mappings
    (``None`` where no reference is available)."""

    sources: list
    target: Dataset
    references: list = field(default_factory=list)

    def __post_init__(self):
        if not self.references:
            self.references = [None] * len(self.sources)
        if len(self.references) != len(self.sources):
            raise ValueError("need one reference entry per source")
        for j, (ref, src) in enumerate(zip(self.references, self.sources)):
            if ref is not None and ref.out_dim != src.d:
                raise ValueError(f"reference {j} maps to d={ref.out_dim}, source has d={src.d}")

    @property
    def n_sources(self) -> int:
        return len(self.sources)

    def subset_target(self, idx) -> "TransferData":
        idx = np.asarray(idx)
        refs = [None if r is None else r.rows(idx) for r in self.references]
        return TransferData(self.sources, self.target.subset(idx), refs)


def build_layout(d_T: int, source_dims, hidden: int) -> Layout:
    N = len(source_dims)
    entries = [("rho", (N,)), ("log_noise", (N + 1,)), ("log_disc_scale", ()),
               ("disc_log_ls", (d_T,))]
    for j, d in enumerate(source_dims):
        u = 2 * d_T + d + 3
        entries += [
            (f"src{j}_log_amp", ()), (f"src{j}_log_ls", (d,)),
            (f"prior{j}_A1", (d, d_T)), (f"prior{j}_b1", (d,)),
            (f"prior{j}_A2", (d, d_T)), (f"prior{j}_b2", (d,)),
            (f"recog{j}_W1", (hidden, u)), (f"recog{j}_c1", (hidden,)),
            (f"recog{j}_W2", (d, hidden)), (f"recog{j}_c2", (d,)),
            (f"recog{j}_W3", (d, hidden)), (f"recog{j}_c3", (d,)),
        ]
    return Layout(entries)


class TransferModel:
    """Standardized view of a :class:`TransferData` bundle plus flat parameters."""

    def __init__(self, data: TransferData, config: ModelConfig | None = None):
        self.data = data
        self.config = config or ModelConfig()
        self.target_std, self.target_state = standardize(data.target)
        std = [standardize(s) for s in data.sources]
        self.sources_std = [s for s, _ in std]
        self.source_states = [st for _, st in std]
        self.N = data.n_sources
        self.d_T = data.target.d
        self.source_dims = [s.d for s in data.sources]
        self.layout = build_layout(self.d_T, self.source_dims, self.config.hidden)
        self.params: np.ndarray | None = None

        X_T = self.target_std.inputs
        self.ref_values = []
        for ref, st in zip(data.references, self.source_states):
            if ref is None:
                self.ref_values.append(None)
            else:
                self.ref_values.append(ref.to_unit(self.target_state, st).values(X_T))
        t_stats = (X_T.mean(0), float(self.target_std.outputs.mean()))
        alphas = np.broadcast_to(np.asarray(self.config.alpha, dtype=float), (self.N,))
        self.recog_inputs = [
            recog_input(X_T, self.target_std.outputs, t_stats,
                        (s.inputs.mean(0), float(s.outputs.mean())), float(a))
            for s, a in zip(self.sources_std, alphas)
        ]

    # -- parameters ---------------------------------------------------------

    def init_params(self, rng: np.random.Generator, use_reference: bool = True) -> np.ndarray:
        """Initial flat parameters. ``use_reference=False`` ignores
        ``init_prior_at_reference``, for objectives that do not use the references."""
        cfg = self.config
        b = {name: np.zeros(shape) for name, shape in self.layout.entries}
        b["rho"] = np.ones(self.N)
        sigma = rng.uniform(cfg.noise_init_floor, 1.0, self.N + 1)
        b["log_noise"] = 2.0 * np.log(sigma)
        at_ref = use_reference and cfg.init_prior_at_reference and cfg.activation == "identity"
        for j in range(self.N):
            for key in ("A1", "A2"):
                name = f"prior{j}_{key}"
                b[name] = rng.normal(0.0, cfg.init_weight_std, self.layout.slices[name][1])
            b[f"prior{j}_b2"] = np.full(self.source_dims[j], cfg.init_prior_logvar)
            r0 = self.ref_values[j]
            if at_ref and r0 is not None:
                X_T = self.target_std.inputs
                F = np.column_stack([X_T, np.ones(len(X_T))])
                coef = np.linalg.lstsq(F, r0, rcond=None)[0]
                b[f"prior{j}_A1"] = coef[:-1].T
                b[f"prior{j}_b1"] = coef[-1]
            for key in ("W1", "W2", "W3"):
                name = f"recog{j}_{key}"
                b[name] = rng.normal(0.0, cfg.init_weight_std, self.layout.slices[name][1])
            b[f"recog{j}_c3"] = np.full(self.source_dims[j], cfg.init_recog_logvar)
        return self.layout.pack(b)

    def blocks(self, params=None) -> dict:
        return self.layout.unpack(self.params if params is None else params)

    def transfer_params(self, params=None, blocks=None) -> TransferParams:
        return TransferParams.from_blocks(self.blocks(params) if blocks is None else blocks,
                                          self.N)

    def prior_theta(self, j: int, params=None, blocks=None) -> dict:
        b = self.blocks(params) if blocks is None else blocks
        return {k: b[f"prior{j}_{k}"] for k in PRIOR_KEYS}

    def recog_phi(self, j: int, params=None, blocks=None) -> dict:
        b = self.blocks(params) if blocks is None else blocks
        return {k: b[f"recog{j}_{k}"] for k in RECOG_KEYS}

    # -- views used by gpcore.mc_predict --------------------------------------

    def training_data(self):
        return ([s.inputs for s in self.sources_std], [s.outputs for s in self.sources_std],
                self.target_std.inputs, self.target_std.outputs)

    def prior_batches(self, X_unit, params=None) -> list[GaussianBatch]:
        return [prior_forward(self.prior_theta(j, params), X_unit, self.config.activation)
                for j in range(self.N)]

    def recog_batches(self, params=None) -> list[GaussianBatch]:
        return [recog_forward(self.recog_phi(j, params), self.recog_inputs[j])
                for j in range(self.N)]

    # -- prediction -----------------------------------------------------------

    def predict(self, X_star, rng=None, K=None, W=None, with_cov=True) -> PredictiveDistribution:
        """Predictive distribution of the latent target response at raw inputs,
        returned on the raw output scale."""
        if self.params is None:
            raise RuntimeError("model has no parameters; train or load it first")
        X_unit = self.target_state.inputs_to_unit(np.atleast_2d(np.asarray(X_star, dtype=float)))
        K = self.config.K if K is None else K
        W = self.config.W if W is None else W
        pd = mc_predict(self, X_unit, K, W, rng, with_cov=with_cov)
        st = self.target_state
        return PredictiveDistribution(st.mean_from_std(pd.mean), st.cov_from_std(pd.cov))

    # -- persistence ----------------------------------------------------------

    def to_dict(self) -> dict:
        if self.params is None:
            raise RuntimeError("cannot serialize a model without parameters")

        def ds(d: Dataset):
            return {"inputs": d.inputs.tolist(), "outputs": d.outputs.tolist(),
                    "domain_id": d.domain_id}

        return {
            "version": MODEL_VERSION,
            "layout": self.layout.to_list(),
            "params": self.params.tolist(),
            "config": asdict(self.config),
            "standardization": {"target": self.target_state.to_dict(),
                                "sources": [s.to_dict() for s in self.source_states]},
            "references": [None if r is None else r.to_dict() for r in self.data.references],
            "data": {"target": ds(self.data.target), "sources": [ds(s) for s in self.data.sources]},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TransferModel":
        if d.get("version") != MODEL_VERSION:
            raise ValueError(f"model version {d.get('version')!r}, expected {MODEL_VERSION}")

        def ds(e):
            return Dataset(np.array(e["inputs"], dtype=float), np.array(e["outputs"], dtype=float),
                           e["domain_id"])

        target = ds(d["data"]["target"])
        refs = [None if r is None else ReferenceMapping.from_dict(r, target.d)
                for r in d["references"]]
        data = TransferData([ds(s) for s in d["data"]["sources"]], target, refs)
        model = cls(data, ModelConfig(**d["config"]))
        if model.layout != Layout.from_list(d["layout"]):
            raise ValueError("stored parameter layout does not match the model structure")
        saved = d["standardization"]
        stored = [saved["target"]] + list(saved["sources"])
        current = [model.target_state] + model.source_states
        if len(stored) != len(current) or not all(
                _same_state(StandardizationState.from_dict(a), b) for a, b in zip(stored, current)):
            raise ValueError("stored standardization does not match the stored training data")
        params = np.array(d["params"], dtype=float)
        if params.shape != (model.layout.size,):
            raise ValueError("parameter vector length does not match the layout")
        model.params = params
        return model


def _same_state(a: StandardizationState, b: StandardizationState) -> bool:
    return (a.output_mean == b.output_mean and a.output_std == b.output_std
            and np.array_equal(a.input_lower, b.input_lower)
            and np.array_equal(a.input_upper, b.input_upper)
            and a.identity_dims == b.identity_dims)
