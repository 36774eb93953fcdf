"""Dataset containers, standardization, Latin hypercube sampling, CSV/JSON I/O
and seeded random streams."""

from __future__ import annotations

import csv
import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import qmc


class ParseError(ValueError):
    """Malformed CSV input; ``line`` is the 1-based file line number."""

    def __init__(self, msg: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {msg}" if line is not None else msg)


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    outputs: np.ndarray
    domain_id: str = "target"

    def __post_init__(self):
        X = np.asarray(self.inputs, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        y = np.asarray(self.outputs, dtype=float).reshape(-1)
        if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
            raise ValueError(f"inputs must be an n x d matrix with n, d >= 1, got {X.shape}")
        if X.shape[0] != y.shape[0]:
            raise ValueError(f"{X.shape[0]} input rows but {y.shape[0]} outputs")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "inputs", X)
        object.__setattr__(self, "outputs", y)

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def d(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.inputs[idx], self.outputs[idx], self.domain_id)


@dataclass(frozen=True)
class StandardizationState:
    output_mean: float
    output_std: float
    input_lower: np.ndarray
    input_upper: np.ndarray
    # dimensions with a constant column are passed through unchanged
    identity_dims: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "input_lower", np.asarray(self.input_lower, dtype=float))
        object.__setattr__(self, "input_upper", np.asarray(self.input_upper, dtype=float))
        object.__setattr__(self, "identity_dims", tuple(int(i) for i in self.identity_dims))
        if not self.output_std > 0:
            raise ValueError("output_std must be positive")
        if np.any(self.input_upper <= self.input_lower):
            raise ValueError("input_upper must exceed input_lower elementwise")

    @property
    def input_scale(self) -> np.ndarray:
        return self.input_upper - self.input_lower

    def _affine(self):
        lo = self.input_lower.copy()
        sc = self.input_scale.copy()
        for k in self.identity_dims:
            lo[k], sc[k] = 0.0, 1.0
        return lo, sc

    def inputs_to_unit(self, X) -> np.ndarray:
        lo, sc = self._affine()
        return (np.asarray(X, dtype=float) - lo) / sc

    def inputs_from_unit(self, U) -> np.ndarray:
        lo, sc = self._affine()
        return np.asarray(U, dtype=float) * sc + lo

    def outputs_to_std(self, y) -> np.ndarray:
        return (np.asarray(y, dtype=float) - self.output_mean) / self.output_std

    def outputs_from_std(self, v) -> np.ndarray:
        return np.asarray(v, dtype=float) * self.output_std + self.output_mean

    def mean_from_std(self, mu) -> np.ndarray:
        return self.outputs_from_std(mu)

    def cov_from_std(self, V) -> np.ndarray:
        return np.asarray(V, dtype=float) * self.output_std**2

    def to_dict(self) -> dict:
        return {
            "output_mean": self.output_mean,
            "output_std": self.output_std,
            "input_lower": self.input_lower.tolist(),
            "input_upper": self.input_upper.tolist(),
            "identity_dims": list(self.identity_dims),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StandardizationState":
        return cls(d["output_mean"], d["output_std"], d["input_lower"], d["input_upper"],
                   tuple(d.get("identity_dims", ())))


def standardize(ds: Dataset) -> tuple[Dataset, StandardizationState]:
    """Zero-mean/unit-variance outputs (population std) and inputs mapped to [0, 1].

    A constant input column cannot be scaled; it is left unchanged and its index
    is recorded in ``identity_dims``.
    """
    y = ds.outputs
    mean = float(y.mean())
    std = float(y.std())
    if ds.n < 2 or not std > 0:
        std = 1.0
    lo = ds.inputs.min(0)
    hi = ds.inputs.max(0)
    flat = np.flatnonzero(hi <= lo)
    hi = np.where(hi > lo, hi, lo + 1.0)
    state = StandardizationState(mean, std, lo, hi, tuple(flat))
    out = Dataset(state.inputs_to_unit(ds.inputs), state.outputs_to_std(y), ds.domain_id)
    return out, state


def destandardize(ds: Dataset, state: StandardizationState) -> Dataset:
    return Dataset(state.inputs_from_unit(ds.inputs), state.outputs_from_std(ds.outputs),
                   ds.domain_id)


# --------------------------------------------------------------------------
# random streams
# --------------------------------------------------------------------------

def rng_stream(seed: int, purpose: str, rep: int = 0) -> np.random.Generator:
    """Philox generator keyed by (global seed, purpose tag, repetition index)."""
    tag = zlib.crc32(purpose.encode("utf-8"))
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, tag, int(rep)])
    return np.random.Generator(np.random.Philox(ss))


def lhs_sample(n: int, bounds, seed) -> np.ndarray:
    """Latin hypercube design over ``bounds``: one point in each of ``n`` equal
    strata per dimension.

    ``seed`` is an int or a ``numpy.random.Generator``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    bounds = np.asarray(bounds, dtype=float).reshape(-1, 2)
    lo, hi = bounds[:, 0], bounds[:, 1]
    if np.any(~(hi > lo)):
        raise ValueError(f"degenerate bounds {bounds.tolist()}")
    rng = seed if isinstance(seed, np.random.Generator) else rng_stream(seed, "lhs")
    u = qmc.LatinHypercube(d=bounds.shape[0], seed=rng).random(n)
    return lo + u * (hi - lo)


# --------------------------------------------------------------------------
# CSV / JSON
# --------------------------------------------------------------------------

def _parse_rows(path, require_y: bool):
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file, expected a header row", 1) from None
        header = [h.strip() for h in header]
        has_y = bool(header) and header[-1] == "y"
        xs = header[:-1] if has_y else header
        if (require_y and not has_y) or not xs or xs != [f"x{k + 1}" for k in range(len(xs))]:
            raise ParseError(f"bad header {header!r}, expected x1,...,xd,y", 1)
        rows = []
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} columns, got {len(row)}", line)
            try:
                vals = [float(c) for c in row]
            except ValueError:
                raise ParseError(f"non-numeric cell in {row!r}", line) from None
            if not all(math.isfinite(v) for v in vals):
                raise ParseError(f"non-finite value in {row!r}", line)
            rows.append(vals)
    if not rows:
        raise ParseError("no data rows", 2)
    return np.array(rows), len(xs), has_y


def load_csv(path, domain_id: str = "target") -> Dataset:
    arr, d, _ = _parse_rows(path, require_y=True)
    return Dataset(arr[:, :d], arr[:, d], domain_id)


def load_inputs_csv(path) -> tuple[np.ndarray, np.ndarray | None]:
    """Inputs (and outputs when a ``y`` column is present) for prediction files."""
    arr, d, has_y = _parse_rows(path, require_y=False)
    return arr[:, :d], (arr[:, d] if has_y else None)


def write_csv(path, ds: Dataset) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{k + 1}" for k in range(ds.d)] + ["y"])
        for x, y in zip(ds.inputs, ds.outputs):
            w.writerow([repr(float(v)) for v in x] + [repr(float(y))])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def write_results_json(path, results: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(results), indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")


def read_results_json(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))
