"""Layer gate kernels, the overlap kernel, the empirical NTK, and the summary
statistics computed from them."""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .core_math import DTYPE
from .models import Architecture, GateMode, ModelParams, backward_deltas, forward


class KernelKind(str, enum.Enum):
    LAYER = "layer"
    OVERLAP = "overlap"
    NTK = "ntk"


@dataclass
class KernelMatrix:
    entries: np.ndarray
    kind: KernelKind
    normalized: bool = False

    @property
    def n(self) -> int:
        return self.entries.shape[0]


def layer_kernel(gates: np.ndarray, layer: int) -> KernelMatrix:
    """Counts of neurons of ``layer`` active at both inputs; ``gates`` is a
    ``(L-1, n, m)`` 0/1 tensor."""
    g = gates[layer].astype(np.int64)
    return KernelMatrix(g @ g.T, KernelKind.LAYER)


def layer_kernels(gates: np.ndarray) -> list[KernelMatrix]:
    return [layer_kernel(gates, l) for l in range(gates.shape[0])]


def overlap_kernel(gates: np.ndarray) -> KernelMatrix:
    """Number of paths active at both inputs: the entrywise product of the
    layer kernels. Exact integers while ``m^(L-1)`` fits in int64."""
    n_layers, _, m = gates.shape
    exact = m ** n_layers < 2**62
    out = None
    for K in layer_kernels(gates):
        e = K.entries if exact else K.entries.astype(DTYPE)
        out = e.copy() if out is None else out * e
    return KernelMatrix(out, KernelKind.OVERLAP)


def active_path_counts(gates: np.ndarray) -> np.ndarray:
    """Diagonal of the overlap kernel without forming it: prod over layers of
    the number of active neurons."""
    counts = gates.sum(axis=2).astype(DTYPE)       # (L-1, n)
    return np.prod(counts, axis=0)


def empirical_ntk(arch: Architecture, params: ModelParams, X, gate_mode: GateMode) -> KernelMatrix:
    """Gram matrix of output gradients w.r.t. every unfrozen parameter.

    Multi-output heads average the per-output kernels. With HARD gates the
    gate-path gradient is zero, so only value-path parameters contribute.
    """
    trace = forward(arch, params, X, gate_mode)
    n = trace.output.shape[0]
    frozen = {(name, i): f for name, i, _, f in params.groups()}
    total = np.zeros((n, n), dtype=DTYPE)
    for k in range(arch.out_dim):
        dY = np.zeros((n, arch.out_dim), dtype=DTYPE)
        dY[:, k] = 1.0
        for key, (delta, inp) in backward_deltas(arch, params, trace, dY, gate_mode).items():
            if frozen[key]:
                continue
            dd = delta @ delta.T
            total += dd if inp is None else dd * (inp @ inp.T)
    return KernelMatrix(total / arch.out_dim, KernelKind.NTK)


def trace_normalize(K: KernelMatrix) -> KernelMatrix:
    """Rescale to ``K * n / trace(K)`` so the diagonal averages to one."""
    tr = float(np.trace(K.entries))
    if not tr > 0:
        raise ValueError(f"cannot trace-normalise a kernel with trace {tr}")
    return KernelMatrix(K.entries.astype(DTYPE) * (K.n / tr), K.kind, True)


def region_stats(K: KernelMatrix | np.ndarray, simple) -> dict[str, float]:
    """Diagonal means per region and block means of the three sub-matrices.

    ``simple`` is a boolean mask (True = simple / low-frequency region).
    """
    E = K.entries if isinstance(K, KernelMatrix) else np.asarray(K)
    s = np.asarray(simple, dtype=bool)
    c = ~s
    if not s.any() or not c.any():
        raise ValueError("both regions need at least one member")
    d = np.diag(E).astype(DTYPE)
    return {
        "mean_diag_simple": float(d[s].mean()),
        "mean_diag_complex": float(d[c].mean()),
        "mean_block_SS": float(E[np.ix_(s, s)].mean()),
        "mean_block_CC": float(E[np.ix_(c, c)].mean()),
        "mean_block_SC": float(E[np.ix_(s, c)].mean()),
    }


def class_averaged(K: KernelMatrix | np.ndarray, classes, n_classes: int) -> np.ndarray:
    """Average kernel entries over blocks of inputs grouped by class index
    0..n_classes-1; empty classes give NaN rows."""
    E = K.entries if isinstance(K, KernelMatrix) else np.asarray(K)
    classes = np.asarray(classes)
    out = np.full((n_classes, n_classes), np.nan)
    for a in range(n_classes):
        ia = classes == a
        for b in range(n_classes):
            ib = classes == b
            if ia.any() and ib.any():
                out[a, b] = E[np.ix_(ia, ib)].mean()
    return out


def is_symmetric(K: KernelMatrix | np.ndarray, rtol: float = 1e-9) -> bool:
    E = np.asarray(K.entries if isinstance(K, KernelMatrix) else K, dtype=DTYPE)
    return bool(np.all(np.abs(E - E.T) <= rtol * np.maximum(1.0, np.abs(E))))


def min_eig_ratio(K: KernelMatrix | np.ndarray) -> float:
    """Smallest eigenvalue divided by ``trace/n``; PSD within tolerance means
    this is >= -1e-6."""
    E = np.asarray(K.entries if isinstance(K, KernelMatrix) else K, dtype=DTYPE)
    E = 0.5 * (E + E.T)
    scale = np.trace(E) / E.shape[0]
    lam = np.linalg.eigvalsh(E)[0]
    return float(lam / scale) if scale > 0 else float(lam)


def is_psd(K: KernelMatrix | np.ndarray, tol: float = 1e-6) -> bool:
    return min_eig_ratio(K) >= -tol


def ntk_diagonal(arch: Architecture, params: ModelParams, X, gate_mode: GateMode) -> np.ndarray:
    """Diagonal of :func:`empirical_ntk` in O(n) memory."""
    trace = forward(arch, params, X, gate_mode)
    n = trace.output.shape[0]
    frozen = {(name, i): f for name, i, _, f in params.groups()}
    total = np.zeros(n, dtype=DTYPE)
    for k in range(arch.out_dim):
        dY = np.zeros((n, arch.out_dim), dtype=DTYPE)
        dY[:, k] = 1.0
        for key, (delta, inp) in backward_deltas(arch, params, trace, dY, gate_mode).items():
            if frozen[key]:
                continue
            dd = np.sum(delta * delta, axis=1)
            total += dd if inp is None else dd * np.sum(inp * inp, axis=1)
    return total / arch.out_dim
