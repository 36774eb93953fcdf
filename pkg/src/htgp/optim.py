"""Flat parameter layout, Adam with an L1 proximal step, and the gradient contract."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class Layout:
    """Ordered named blocks packed into one flat vector."""

    def __init__(self, entries):
        self.entries = [(name, tuple(shape)) for name, shape in entries]
        self.slices = {}
        off = 0
        for name, shape in self.entries:
            size = int(np.prod(shape)) if shape else 1
            self.slices[name] = (slice(off, off + size), shape)
            off += size
        self.size = off

    def __eq__(self, other):
        return isinstance(other, Layout) and self.entries == other.entries

    def pack(self, blocks: dict) -> np.ndarray:
        v = np.empty(self.size)
        for name, (sl, shape) in self.slices.items():
            v[sl] = np.asarray(blocks[name], dtype=float).reshape(-1)
        return v

    def unpack(self, v: np.ndarray) -> dict:
        """Views into ``v`` (no copies)."""
        if v.shape != (self.size,):
            raise ValueError(f"flat vector has shape {v.shape}, layout needs ({self.size},)")
        return {name: v[sl].reshape(shape) for name, (sl, shape) in self.slices.items()}

    def block_of(self, index: int) -> str:
        for name, (sl, _) in self.slices.items():
            if sl.start <= index < sl.stop:
                return name
        raise IndexError(index)

    def to_list(self) -> list:
        return [[name, list(shape)] for name, shape in self.entries]

    @classmethod
    def from_list(cls, items) -> "Layout":
        return cls([(name, tuple(shape)) for name, shape in items])


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    lr: float = 2e-3
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # indices shrunk by the L1 proximal map after every step, and its weight
    prox_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    prox_weight: float = 0.0

    @classmethod
    def zeros(cls, size: int, lr: float = 2e-3, **kw) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size), lr, **kw)


def soft_threshold(x, tau):
    return np.sign(x) * np.maximum(np.abs(x) - tau, 0.0)


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """One bias-corrected Adam update followed by the L1 proximal map on
    ``state.prox_index`` with threshold ``lr * prox_weight``. Mutates ``state``."""
    if grad.shape != params.shape or state.m.shape != params.shape:
        raise ValueError("parameter, gradient and moment shapes must match")
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1**state.t)
    v_hat = state.v / (1.0 - state.beta2**state.t)
    out = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    if state.prox_weight > 0.0 and state.prox_index.size:
        idx = state.prox_index
        out[idx] = soft_threshold(out[idx], state.lr * state.prox_weight)
    return out


def gradient(loss_fn, params: np.ndarray, rng=None, layout: Layout | None = None):
    """Evaluate ``loss_fn(params, rng) -> (loss, grad)`` and validate the result.

    Gradients come from the hand-derived adjoints inside the loss function; this
    wrapper enforces finiteness and names the offending block when it fails.
    """
    loss, grad = loss_fn(params, rng)
    grad = np.asarray(grad, dtype=float)
    if grad.shape != params.shape:
        raise ValueError(f"gradient shape {grad.shape} != parameter shape {params.shape}")
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {loss}")
    bad = np.flatnonzero(~np.isfinite(grad))
    if bad.size:
        where = layout.block_of(int(bad[0])) if layout is not None else f"index {bad[0]}"
        raise FloatingPointError(f"non-finite gradient in parameter block {where}")
    return float(loss), grad

