"""Numerical primitives: seeded RNG streams, initialisation, Adam, and a
central-difference gradient oracle.

Matrices are plain float64 numpy arrays in C (row-major) order.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """PCG64 generator for ``seed``; extra integers select an independent
    derived stream (e.g. ``make_rng(seed, STREAM_INIT)``)."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *stream])
    return np.random.Generator(np.random.PCG64(ss))


# derived-stream identifiers
STREAM_INIT = 1
STREAM_BATCHES = 2
STREAM_CLUSTERS = 3
STREAM_SUBSAMPLE = 4


def he_gaussian_init(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    if rows < 1 or cols < 1:
        raise ValueError(f"matrix shape must be positive, got ({rows}, {cols})")
    return rng.normal(0.0, np.sqrt(2.0 / cols), size=(rows, cols)).astype(DTYPE)


def uniform_fanin_init(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    """U(-1/sqrt(cols), 1/sqrt(cols)); pass ``rows=1`` and take ``[0]`` for a bias."""
    if rows < 1 or cols < 1:
        raise ValueError(f"matrix shape must be positive, got ({rows}, {cols})")
    bound = 1.0 / np.sqrt(cols)
    return rng.uniform(-bound, bound, size=(rows, cols)).astype(DTYPE)


def zero_init(n: int) -> np.ndarray:
    return np.zeros(n, dtype=DTYPE)


@dataclass
class AdamState:
    """Moment accumulators for one parameter array."""

    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def fresh(cls, like: np.ndarray, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, epsilon: float = 1e-8) -> "AdamState":
        return cls(np.zeros_like(like, dtype=DTYPE), np.zeros_like(like, dtype=DTYPE),
                   0, lr, beta1, beta2, epsilon)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState) -> np.ndarray:
    """One bias-corrected Adam update. Mutates ``param`` and ``state`` in place
    and returns ``param``."""
    if param.shape != grad.shape:
        raise ValueError(f"param shape {param.shape} != grad shape {grad.shape}")
    if state.first_moment.shape != param.shape or state.second_moment.shape != param.shape:
        raise ValueError("Adam state shape does not match parameter")
    state.step_count += 1
    t = state.step_count
    m, v = state.first_moment, state.second_moment
    m *= state.beta1
    m += (1.0 - state.beta1) * grad
    v *= state.beta2
    v += (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    param -= state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return param


@dataclass
class Adam:
    """Adam over a list of parameter arrays; ``None`` grads are skipped so
    frozen arrays are never touched."""

    params: Sequence[np.ndarray]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    states: list = field(default_factory=list)

    def __post_init__(self):
        self.states = [AdamState.fresh(p, self.lr, self.beta1, self.beta2, self.epsilon)
                       for p in self.params]

    def step(self, grads: Sequence[np.ndarray | None]) -> None:
        if len(grads) != len(self.params):
            raise ValueError("one gradient per parameter array expected")
        for p, g, s in zip(self.params, grads, self.states):
            if g is not None:
                adam_step(p, g, s)


def finite_diff_grad(loss_fn: Callable[[], float], params: Sequence[np.ndarray],
                     h: float = 1e-5) -> list[np.ndarray]:
    """Central-difference gradient of ``loss_fn`` w.r.t. every entry of
    every array in ``params``. The arrays are perturbed in place and restored."""
    if h <= 0:
        raise ValueError("step h must be positive")
    out = []
    for p in params:
        g = np.zeros_like(p, dtype=DTYPE)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = loss_fn()
            flat[i] = old - h
            fm = loss_fn()
            flat[i] = old
            gflat[i] = (fp - fm) / (2.0 * h)
        out.append(g)
    return out


def max_relative_error(analytic: Sequence[np.ndarray], numeric: Sequence[np.ndarray],
                       floor: float = 1e-6) -> float:
    """max_i |a_i - n_i| / max(|a_i|, |n_i|, floor) over all entries."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        if a.size == 0:
            continue
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst
