"""Feed-forward ReLU nets, DLGN, DLGN-PWC and deep linear nets with
hand-written backprop.

Conventions: a batch is an ``(n, d)`` array; layer ``l`` computes
``pre = h @ W_l.T + b_l``. Hidden layers are indexed 1..L-1 in prose and
0..L-2 in the lists below; the output layer is the last entry.

For the DLGN family the gating network is the linear chain
``eta_l = W_l eta_{l-1} + b_l`` (``eta_0 = x``) and the value network is
``h_l = gate(eta_l) * (U_l h_{l-1} + c_l)`` with ``h_0 = x`` (DLGN) or the
all-ones vector (DLGN-PWC). The output is ``U_L h_{L-1} + c_L``; ``W_L`` and
``b_L`` exist for shape symmetry but never reach the output.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.special import expit, log_softmax

from .core_math import (DTYPE, STREAM_BATCHES, STREAM_INIT, Adam, he_gaussian_init, make_rng,
                        uniform_fanin_init, zero_init)


class Kind(str, enum.Enum):
    RELU = "relu"
    DLGN = "dlgn"
    DLGN_PWC = "dlgn-pwc"
    DLN = "dln"

    @property
    def is_dlgn(self) -> bool:
        return self in (Kind.DLGN, Kind.DLGN_PWC)


class LossKind(str, enum.Enum):
    MSE = "mse"
    SOFTMAX_CE = "softmax-ce"


class HardGatesError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch
        self.loss = loss


@dataclass(frozen=True)
class Architecture:
    kind: Kind
    d: int
    m: int
    L: int
    out_dim: int = 1
    use_bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        if self.d < 1 or self.m < 1 or self.out_dim < 1:
            raise ValueError(f"d, m and out_dim must be >= 1: {self}")
        if self.L < 2:
            raise ValueError(f"L must be >= 2 (at least one hidden layer): {self}")

    @property
    def n_hidden(self) -> int:
        return self.L - 1

    def shapes(self) -> list[tuple[int, int]]:
        return [(self.m, self.d)] + [(self.m, self.m)] * (self.L - 2) + [(self.out_dim, self.m)]


@dataclass(frozen=True)
class GateMode:
    """HARD indicator gates (``beta is None``) or sigmoid(beta * eta)."""

    beta: float | None = None

    def __post_init__(self):
        if self.beta is not None and not self.beta > 0:
            raise ValueError("soft gate temperature beta must be positive")

    @property
    def hard(self) -> bool:
        return self.beta is None

    @classmethod
    def soft(cls, beta: float = 10.0) -> "GateMode":
        return cls(float(beta))

    def __str__(self):
        return "hard" if self.hard else f"soft(beta={self.beta:g})"


HARD = GateMode()


@dataclass
class ModelParams:
    """Weights ``W``/biases ``b`` (gating net, or the whole net for ReLU/DLN)
    and, for the DLGN family only, value weights ``U``/biases ``c``."""

    W: list[np.ndarray]
    b: list[np.ndarray] | None = None
    U: list[np.ndarray] | None = None
    c: list[np.ndarray] | None = None
    gates_frozen: bool = False
    values_frozen: bool = False

    def groups(self):
        """Yield ``(name, layer_index, array, frozen)`` in checkpoint order."""
        for name, arrs, frozen in (("W", self.W, self.gates_frozen), ("b", self.b, self.gates_frozen),
                                   ("U", self.U, self.values_frozen), ("c", self.c, self.values_frozen)):
            for i, a in enumerate(arrs or ()):
                yield name, i, a, frozen

    def arrays(self) -> list[np.ndarray]:
        return [a for _, _, a, _ in self.groups()]

    def trainable(self) -> list[np.ndarray]:
        return [a for _, _, a, frozen in self.groups() if not frozen]

    def copy(self) -> "ModelParams":
        cp = lambda xs: None if xs is None else [x.copy() for x in xs]  # noqa: E731
        return ModelParams(cp(self.W), cp(self.b), cp(self.U), cp(self.c),
                           self.gates_frozen, self.values_frozen)

    def with_freeze(self, gates: bool | None = None, values: bool | None = None) -> "ModelParams":
        out = self.copy()
        if gates is not None:
            out.gates_frozen = gates
        if values is not None:
            out.values_frozen = values
        return out


INIT_SCHEMES = ("uniform", "he")


def _mirror_rows(W: np.ndarray, b: np.ndarray | None) -> None:
    half = W.shape[0] // 2
    W[half:2 * half] = -W[:half]
    if b is not None:
        b[half:2 * half] = -b[:half]


def init_params(arch: Architecture, rng: np.random.Generator | int, scheme: str = "uniform",
                mirror_gates: bool = True) -> ModelParams:
    """Random parameters. An int ``rng`` is treated as a seed.

    ``uniform``: weights and biases U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    ``he``: weights N(0, 2/fan_in), biases zero.

    With ``mirror_gates`` the hidden gating layers of the DLGN family are
    built from sign-flipped row pairs ``(w, b), (-w, -b)``, so exactly one
    gate of each pair is on (ties aside) and every input starts with the
    same number of active paths, ``floor(m/2)^(L-1)`` for even m.
    """
    if scheme not in INIT_SCHEMES:
        raise ValueError(f"unknown init scheme {scheme!r}; expected one of {INIT_SCHEMES}")
    if not isinstance(rng, np.random.Generator):
        rng = make_rng(int(rng), STREAM_INIT)

    W, b, U, c = [], [], [], []
    for rows, cols in arch.shapes():
        W.append(_weight(scheme, rows, cols, rng))
        b.append(_bias(scheme, rows, cols, rng))
    if arch.kind.is_dlgn:
        for rows, cols in arch.shapes():
            U.append(_weight(scheme, rows, cols, rng))
            c.append(_bias(scheme, rows, cols, rng))
        if mirror_gates:
            for l in range(arch.n_hidden):
                _mirror_rows(W[l], b[l])
    if not arch.use_bias:
        b = c = None
    return ModelParams(W, b, U or None, c or None)


def _weight(scheme, rows, cols, rng):
    return he_gaussian_init(rows, cols, rng) if scheme == "he" else uniform_fanin_init(rows, cols, rng)


def _bias(scheme, rows, cols, rng):
    if scheme == "he":
        return zero_init(rows)
    bound = 1.0 / np.sqrt(cols)
    return rng.uniform(-bound, bound, size=rows).astype(DTYPE)


def check_params(arch: Architecture, params: ModelParams) -> None:
    shapes = arch.shapes()
    if [w.shape for w in params.W] != shapes:
        raise ValueError(f"W shapes {[w.shape for w in params.W]} do not match {shapes}")
    if arch.kind.is_dlgn:
        if params.U is None or [u.shape for u in params.U] != shapes:
            raise ValueError("DLGN variants need U matrices shaped like W")
    elif params.U is not None:
        raise ValueError(f"{arch.kind.value} has no value parameters U")
    if arch.use_bias != (params.b is not None):
        raise ValueError("bias presence does not match arch.use_bias")


@dataclass
class ForwardTrace:
    """Per-hidden-layer pre-activations, gates and activations of a batch.

    ``pre[l]`` is eta (DLGN) or the ReLU/linear pre-activation; ``values[l]``
    is the un-gated value ``U h + c`` (DLGN only); ``h[0]`` is the network
    input of the value path and ``h[l]`` the output of hidden layer l.
    """

    pre: list[np.ndarray]
    gates: list[np.ndarray]
    h: list[np.ndarray]
    values: list[np.ndarray] | None
    output: np.ndarray
    inputs: np.ndarray


def _as_batch(arch: Architecture, X) -> np.ndarray:
    X = np.asarray(X, dtype=DTYPE)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != arch.d:
        raise ValueError(f"expected inputs of dimension {arch.d}, got shape {X.shape}")
    return X


def _gate(pre: np.ndarray, mode: GateMode) -> np.ndarray:
    if mode.hard:
        return (pre >= 0).astype(DTYPE)
    return expit(mode.beta * pre)


def _affine(h, W, b):
    out = h @ W.T
    if b is not None:
        out += b
    return out


def forward(arch: Architecture, params: ModelParams, X, gate_mode: GateMode = HARD) -> ForwardTrace:
    X = _as_batch(arch, X)
    nh = arch.n_hidden
    bias = (lambda lst, i: None) if params.b is None else (lambda lst, i: lst[i])
    pre, gates, values = [], [], []
    if arch.kind.is_dlgn:
        eta = X
        h = np.ones_like(X) if arch.kind is Kind.DLGN_PWC else X
        hs = [h]
        for l in range(nh):
            eta = _affine(eta, params.W[l], bias(params.b, l))
            g = _gate(eta, gate_mode)
            v = _affine(h, params.U[l], bias(params.c, l))
            h = g * v
            pre.append(eta)
            gates.append(g)
            values.append(v)
            hs.append(h)
        y = _affine(h, params.U[nh], bias(params.c, nh))
        return ForwardTrace(pre, gates, hs, values, y, X)

    h = X
    hs = [h]
    for l in range(nh):
        z = _affine(h, params.W[l], bias(params.b, l))
        if arch.kind is Kind.RELU:
            g = (z >= 0).astype(DTYPE)
            h = g * z
        else:
            g = np.ones_like(z)
            h = z
        pre.append(z)
        gates.append(g)
        hs.append(h)
    y = _affine(h, params.W[nh], bias(params.b, nh))
    return ForwardTrace(pre, gates, hs, None, y, X)


def predict(arch: Architecture, params: ModelParams, X, gate_mode: GateMode = HARD) -> np.ndarray:
    return forward(arch, params, X, gate_mode).output


def backward_deltas(arch: Architecture, params: ModelParams, trace: ForwardTrace,
                    dY: np.ndarray, gate_mode: GateMode) -> dict:
    """Per-sample backprop signals.

    Returns ``{(name, layer): (delta, inp)}`` such that the gradient of
    sample ``a`` w.r.t. ``name[layer]`` is ``outer(delta[a], inp[a])`` for
    weights and ``delta[a]`` for biases (``inp is None``). Samples never mix,
    so summing over the batch gives the batch gradient. In HARD mode the
    gate derivative is taken to be zero.
    """
    nh = arch.n_hidden
    out: dict = {}
    if arch.kind.is_dlgn:
        out[("U", nh)] = (dY, trace.h[nh])
        out[("W", nh)] = (np.zeros_like(dY), trace.pre[nh - 1])
        dh = dY @ params.U[nh]
        d_eta = None
        for l in range(nh - 1, -1, -1):
            g, v = trace.gates[l], trace.values[l]
            dv = dh * g
            out[("U", l)] = (dv, trace.h[l])
            local = np.zeros_like(g) if gate_mode.hard else dh * v * (gate_mode.beta * g * (1.0 - g))
            d_eta = local if d_eta is None else local + d_eta @ params.W[l + 1]
            out[("W", l)] = (d_eta, trace.pre[l - 1] if l > 0 else trace.inputs)
            dh = dv @ params.U[l]
        if params.b is not None:
            for l in range(nh + 1):
                out[("b", l)] = (out[("W", l)][0], None)
                out[("c", l)] = (out[("U", l)][0], None)
        return out

    delta = dY
    out[("W", nh)] = (delta, trace.h[nh])
    for l in range(nh - 1, -1, -1):
        delta = (delta @ params.W[l + 1]) * trace.gates[l]
        out[("W", l)] = (delta, trace.h[l])
    if params.b is not None:
        for l in range(nh + 1):
            out[("b", l)] = (out[("W", l)][0], None)
    return out


def _reduce(params: ModelParams, deltas: dict) -> ModelParams:
    """Sum per-sample signals into a gradient shaped like ``params``; frozen
    groups come back as exact zeros."""
    def grad(name, i, a, frozen):
        if frozen:
            return np.zeros_like(a)
        delta, inp = deltas[(name, i)]
        return delta.sum(axis=0) if inp is None else delta.T @ inp

    out = params.copy()
    for name, i, a, frozen in params.groups():
        getattr(out, name)[i] = grad(name, i, a, frozen)
    return out


def loss_value(yhat: np.ndarray, y: np.ndarray, loss_kind: LossKind) -> tuple[float, np.ndarray]:
    """Batch-mean loss and its gradient w.r.t. ``yhat``.

    MSE is ``mean_a 0.5 * ||yhat_a - y_a||^2``; SOFTMAX_CE takes integer class
    indices 0..out_dim-1.
    """
    n = yhat.shape[0]
    if LossKind(loss_kind) is LossKind.MSE:
        r = yhat - np.asarray(y, dtype=DTYPE).reshape(yhat.shape)
        return 0.5 * float(np.sum(r * r)) / n, r / n
    labels = np.asarray(y, dtype=np.int64).reshape(-1)
    logp = log_softmax(yhat, axis=1)
    loss = -float(np.sum(logp[np.arange(n), labels])) / n
    d = np.exp(logp)
    d[np.arange(n), labels] -= 1.0
    return loss, d / n


def mse(yhat: np.ndarray, y: np.ndarray) -> float:
    """Plain mean squared error, no one-half factor."""
    r = yhat - np.asarray(y, dtype=DTYPE).reshape(yhat.shape)
    return float(np.mean(np.sum(r * r, axis=1)))


def loss_and_grads(arch: Architecture, params: ModelParams, X, y, gate_mode: GateMode,
                   loss_kind: LossKind = LossKind.MSE) -> tuple[float, ModelParams]:
    X = _as_batch(arch, X)
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    if arch.kind.is_dlgn and gate_mode.hard and not params.gates_frozen:
        raise HardGatesError("hard gates are non-differentiable; freeze gates or use SOFT")
    trace = forward(arch, params, X, gate_mode)
    loss, dY = loss_value(trace.output, y, loss_kind)
    return loss, _reduce(params, backward_deltas(arch, params, trace, dY, gate_mode))


@dataclass
class TrainConfig:
    epochs: int = 500
    lr: float = 3e-3
    batch_size: int | None = None  # None: full batch
    snapshot_epochs: tuple[int, ...] = (0,)
    seed: int = 0
    gate_mode: GateMode = field(default_factory=lambda: GateMode.soft(10.0))
    loss_kind: LossKind = LossKind.MSE


@dataclass
class History:
    loss: list[float] = field(default_factory=list)       # objective after each epoch (index 0 = init)
    mse: list[float] = field(default_factory=list)        # plain MSE (regression only)
    accuracy: list[float] = field(default_factory=list)   # classification only
    step_loss: list[tuple[int, int, float]] = field(default_factory=list)  # (step, epoch, batch loss)
    snapshots: dict[int, ModelParams] = field(default_factory=dict)


def evaluate(arch, params, X, y, gate_mode, loss_kind) -> dict:
    yhat = predict(arch, params, X, gate_mode)
    loss, _ = loss_value(yhat, y, loss_kind)
    out = {"loss": loss}
    if LossKind(loss_kind) is LossKind.MSE:
        out["mse"] = mse(yhat, y)
    else:
        out["accuracy"] = float(np.mean(np.argmax(yhat, axis=1) == np.asarray(y).reshape(-1)))
    return out


def train(arch: Architecture, params: ModelParams, X, y, config: TrainConfig,
          callback: Callable[[int, ModelParams], None] | None = None) -> tuple[ModelParams, History]:
    """Adam on mini-batches. ``params`` is copied, never mutated.

    Epoch 0 is the initial state; ``callback(epoch, params)`` runs at epoch 0
    and after every epoch.
    """
    check_params(arch, params)
    X = _as_batch(arch, X)
    y = np.asarray(y)
    n = X.shape[0]
    params = params.copy()
    trainable = [(name, i, a) for name, i, a, frozen in params.groups() if not frozen]
    opt = Adam([a for _, _, a in trainable], lr=config.lr)
    rng = make_rng(config.seed, STREAM_BATCHES)
    bs = n if not config.batch_size else min(int(config.batch_size), n)
    hist = History()

    def record(epoch):
        ev = evaluate(arch, params, X, y, config.gate_mode, config.loss_kind)
        if not math.isfinite(ev["loss"]):
            raise TrainingDiverged(epoch, ev["loss"])
        hist.loss.append(ev["loss"])
        if "mse" in ev:
            hist.mse.append(ev["mse"])
        if "accuracy" in ev:
            hist.accuracy.append(ev["accuracy"])
        if epoch in config.snapshot_epochs:
            hist.snapshots[epoch] = params.copy()
        if callback is not None:
            callback(epoch, params)

    record(0)
    step = 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n) if bs < n else np.arange(n)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            loss, g = loss_and_grads(arch, params, X[idx], y[idx], config.gate_mode, config.loss_kind)
            if not math.isfinite(loss):
                raise TrainingDiverged(epoch, loss)
            step += 1
            hist.step_loss.append((step, epoch, loss))
            opt.step([getattr(g, name)[i] for name, i, _ in trainable])
        record(epoch)
    return params, hist


def gate_tensor(arch: Architecture, params: ModelParams, X) -> np.ndarray:
    """Hard gate bits, shape ``(L-1, n, m)``, dtype uint8."""
    if arch.kind is Kind.DLN:
        raise ValueError("deep linear networks have no gates")
    trace = forward(arch, params, X, HARD)
    return np.stack([(p >= 0) for p in trace.pre]).astype(np.uint8)


def dlgn_hyperplanes(arch: Architecture, params: ModelParams) -> list[tuple[np.ndarray, np.ndarray]]:
    """For each hidden layer, ``(A, c)`` with ``eta_l(x) = A @ x + c``.

    Neuron i of that layer is active on the half-space ``A[i] @ x + c[i] >= 0``.
    """
    if not arch.kind.is_dlgn:
        raise ValueError(f"{arch.kind.value} gates are not affine in the input")
    A = np.eye(arch.d, dtype=DTYPE)
    c = np.zeros(arch.d, dtype=DTYPE)
    out = []
    for l in range(arch.n_hidden):
        W = params.W[l]
        A = W @ A
        c = W @ c + (params.b[l] if params.b is not None else 0.0)
        out.append((A.copy(), c.copy()))
    return out


# ---------------------------------------------------------------------------
# checkpoints
#
# Text format, one token stream per line:
#   halfspace-checkpoint 1
#   kind=<kind> d=<d> m=<m> L=<L> out=<out> use_bias=<0|1> gates_frozen=<0|1> values_frozen=<0|1>
#   then for each array in order W_1..W_L, b_1..b_L, U_1..U_L, c_1..c_L
#   (b/c only with biases, U/c only for DLGN variants):
#   <name><layer> <rows> <cols>
#   <rows> lines of <cols> space-separated floats (repr, round-trips exactly)
# Bias vectors are written as 1 x n.

CHECKPOINT_MAGIC = "halfspace-checkpoint 1"


def save_checkpoint(path, arch: Architecture, params: ModelParams) -> None:
    check_params(arch, params)
    lines = [CHECKPOINT_MAGIC,
             f"kind={arch.kind.value} d={arch.d} m={arch.m} L={arch.L} out={arch.out_dim} "
             f"use_bias={int(arch.use_bias)} gates_frozen={int(params.gates_frozen)} "
             f"values_frozen={int(params.values_frozen)}"]
    for name, i, a, _ in params.groups():
        mat = np.atleast_2d(a)
        lines.append(f"{name}{i + 1} {mat.shape[0]} {mat.shape[1]}")
        lines.extend(" ".join(repr(float(v)) for v in row) for row in mat)
    Path(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(path) -> tuple[Architecture, ModelParams]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a halfspace checkpoint")
    hdr = dict(tok.split("=", 1) for tok in lines[1].split())
    arch = Architecture(Kind(hdr["kind"]), int(hdr["d"]), int(hdr["m"]), int(hdr["L"]),
                        int(hdr["out"]), bool(int(hdr["use_bias"])))
    arrays: dict[str, list] = {"W": [], "b": [], "U": [], "c": []}
    pos = 2
    while pos < len(lines):
        tag, r, c = lines[pos].split()
        r, c = int(r), int(c)
        mat = np.array([[float(v) for v in lines[pos + 1 + k].split()] for k in range(r)], dtype=DTYPE)
        arrays[tag[0]].append(mat[0] if tag[0] in "bc" else mat)
        pos += 1 + r
    params = ModelParams(arrays["W"], arrays["b"] or None, arrays["U"] or None, arrays["c"] or None,
                         bool(int(hdr["gates_frozen"])), bool(int(hdr["values_frozen"])))
    check_params(arch, params)
    return arch, params
