"""Brute-force path enumeration.

Every quantity here is computed one path at a time from scalar gate bits
that are re-derived with explicit loops, never from :func:`models.forward`,
so the results can serve as ground truth for the fast matrix code.

Paths are 0-based tuples ``(i_1, ..., i_{L-1})`` in lexicographic order.
"""
from __future__ import annotations

import itertools

import numpy as np

from .models import Architecture, Kind, ModelParams, gate_tensor

DEFAULT_PATH_CAP = 10**6


class PathCapExceeded(ValueError):
    pass


def _check_cap(m: int, L: int, cap: int) -> int:
    count = m ** (L - 1)
    if count > cap:
        raise PathCapExceeded(f"{m}^{L - 1} = {count} paths exceeds the path cap of {cap}")
    return count


def enumerate_paths(m: int, L: int, cap: int = DEFAULT_PATH_CAP) -> list[tuple[int, ...]]:
    _check_cap(m, L, cap)
    return list(itertools.product(range(m), repeat=L - 1))


def hidden_gate_bits(arch: Architecture, params: ModelParams, x) -> list[list[int]]:
    """Per-layer 0/1 gate bits at a single input, using ``>= 0`` as active."""
    x = [float(v) for v in np.asarray(x, dtype=float).reshape(-1)]
    if len(x) != arch.d:
        raise ValueError(f"expected an input of dimension {arch.d}")
    bits = []
    h = x
    for l in range(arch.n_hidden):
        W = params.W[l]
        b = params.b[l] if params.b is not None else None
        z = []
        for i in range(arch.m):
            s = sum(W[i, j] * h[j] for j in range(len(h)))
            if b is not None:
                s += b[i]
            z.append(s)
        bits.append([1 if s >= 0 else 0 for s in z])
        if arch.kind is Kind.RELU:
            h = [s if s >= 0 else 0.0 for s in z]
        else:
            # DLGN: eta recursion is linear; DLN has no gates but the bits are unused
            h = z
    if arch.kind is Kind.DLN:
        bits = [[1] * arch.m for _ in range(arch.n_hidden)]
    return bits


def path_gate(arch: Architecture, params: ModelParams, x, path, bits=None) -> int:
    if arch.kind is Kind.DLN:
        return 1
    bits = bits if bits is not None else hidden_gate_bits(arch, params, x)
    return int(all(bits[l][i] for l, i in enumerate(path)))


def path_value(arch: Architecture, params: ModelParams, x, path) -> np.ndarray:
    """Expert output of ``path``: the product of edge weights along the path
    times the first-layer inner product with the value-path input. One value
    per output unit."""
    if params.b is not None:
        raise ValueError("path values are defined for bias-free networks")
    if len(path) != arch.n_hidden or not all(0 <= i < arch.m for i in path):
        raise ValueError(f"invalid path {path!r} for m={arch.m}, L={arch.L}")
    V = params.U if arch.kind.is_dlgn else params.W
    inp = np.ones(arch.d) if arch.kind is Kind.DLGN_PWC else np.asarray(x, dtype=float).reshape(-1)
    first = sum(V[0][path[0], j] * inp[j] for j in range(arch.d))
    prod = first
    for l in range(1, arch.n_hidden):
        prod *= V[l][path[l], path[l - 1]]
    return np.array([V[-1][k, path[-1]] * prod for k in range(arch.out_dim)])


def moe_output(arch: Architecture, params: ModelParams, x, cap: int = DEFAULT_PATH_CAP) -> np.ndarray:
    """Sum over all paths of gate times expert value."""
    bits = hidden_gate_bits(arch, params, x)
    total = np.zeros(arch.out_dim)
    for p in enumerate_paths(arch.m, arch.L, cap):
        if path_gate(arch, params, x, p, bits):
            total += path_value(arch, params, x, p)
    return total


def active_set(arch: Architecture, params: ModelParams, x, cap: int = DEFAULT_PATH_CAP) -> np.ndarray:
    """Boolean mask over :func:`enumerate_paths` marking the active paths."""
    bits = hidden_gate_bits(arch, params, x)
    return np.array([path_gate(arch, params, x, p, bits) == 1
                     for p in enumerate_paths(arch.m, arch.L, cap)], dtype=bool)


def overlap_bruteforce(arch: Architecture, params: ModelParams, x, x2, cap: int = DEFAULT_PATH_CAP) -> int:
    """Number of paths active at both inputs."""
    return int(np.count_nonzero(active_set(arch, params, x, cap) & active_set(arch, params, x2, cap)))


def activation_pattern(arch: Architecture, params: ModelParams, x) -> np.ndarray:
    """All hidden gate bits concatenated layer by layer, length ``(L-1)*m``."""
    return np.array([bit for layer in hidden_gate_bits(arch, params, x) for bit in layer], dtype=np.uint8)


def count_distinct_patterns(arch: Architecture, params: ModelParams, X) -> int:
    G = gate_tensor(arch, params, X)                     # (L-1, n, m)
    flat = np.transpose(G, (1, 0, 2)).reshape(G.shape[1], -1)
    return int(np.unique(flat, axis=0).shape[0])
