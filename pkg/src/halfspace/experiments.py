"""Config-driven experiment runs that write the data behind every plot.

A run writes CSV tables, PGM heatmaps with JSON sidecars, and a
``manifest.json`` listing each artifact with its kind and epoch. Outputs
depend only on the resolved config, so reruns are byte-identical.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import kernels as kn
from . import paths
from .core_math import STREAM_CLUSTERS, STREAM_SUBSAMPLE, make_rng
from .data import find_fmnist, gen_circle, load_fmnist, modify_fmnist_labels, write_circle_csv
from .models import (HARD, Architecture, GateMode, Kind, LossKind, ModelParams, TrainConfig,
                     dlgn_hyperplanes, forward, gate_tensor, init_params, predict, train)

ENV_PREFIX = "HALFSPACE_"
EXPERIMENTS = ("circle", "fmnist", "oracle")
FREEZE_CHOICES = ("none", "gates", "values")


class ConfigError(ValueError):
    pass


class OracleViolation(RuntimeError):
    pass


# --- configuration ---------------------------------------------------------

@dataclass
class ExperimentConfig:
    """Flat run settings. ``None`` fields take the experiment preset."""

    experiment: str = "circle"
    arch: str | None = None
    m: int | None = None
    hidden_layers: int | None = None
    use_bias: bool = True
    gate: str = "auto"          # auto | soft | hard; auto = hard when gates are frozen
    beta: float = 10.0
    freeze: str = "none"
    epochs: int | None = None
    lr: float | None = None
    batch_size: int | None = None   # 0 means full batch
    seed: int = 0
    snapshots: tuple[int, ...] | None = None   # default {0, 3, final}
    init: str = "uniform"
    mirror_gates: bool = True
    out: str = "runs/out"
    # circle
    n_points: int = 500
    # fmnist
    data_dir: str | None = None
    train_size: int = 5000
    test_size: int = 1000
    kernel_per_class: int = 50
    # oracle
    oracle_seeds: int = 20
    oracle_inputs: int = 10

    def resolved(self) -> "ExperimentConfig":
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}")
        preset = PRESETS[self.experiment]
        cfg = ExperimentConfig(**{f.name: getattr(self, f.name) for f in fields(self)})
        for key, val in preset.items():
            if getattr(cfg, key) is None:
                setattr(cfg, key, val)
        if cfg.snapshots is None:
            cfg.snapshots = (0, 3, cfg.epochs) if cfg.epochs else (0,)
        cfg.snapshots = tuple(sorted({0, *cfg.snapshots}))
        if cfg.experiment != "oracle":
            try:
                Kind(cfg.arch)
            except ValueError:
                raise ConfigError(f"invalid architecture preset {cfg.arch!r}") from None
        if cfg.freeze not in FREEZE_CHOICES:
            raise ConfigError(f"freeze must be one of {FREEZE_CHOICES}")
        if cfg.gate not in ("auto", "soft", "hard"):
            raise ConfigError("gate must be auto, soft or hard")
        if not cfg.beta > 0:
            raise ConfigError("beta must be positive")
        if cfg.epochs is not None and cfg.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        bad = [e for e in cfg.snapshots if not 0 <= e <= (cfg.epochs or 0)]
        if bad:
            raise ConfigError(f"snapshot epochs {bad} outside [0, {cfg.epochs}]")
        return cfg

    def gate_mode(self) -> GateMode:
        if self.gate == "hard" or (self.gate == "auto" and self.freeze == "gates"):
            return HARD
        return GateMode.soft(self.beta)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["snapshots"] = list(self.snapshots) if self.snapshots is not None else None
        return d


PRESETS = {
    "circle": dict(arch="dlgn", m=16, hidden_layers=5, epochs=500, lr=3e-3, batch_size=64),
    "fmnist": dict(arch="dlgn-pwc", m=128, hidden_layers=5, epochs=20, lr=2e-4, batch_size=128),
    "oracle": dict(arch="dlgn", m=4, hidden_layers=3, epochs=0, lr=0.0, batch_size=0),
}

_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _coerce(key: str, text: str):
    if key not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    t = str(_FIELD_TYPES[key])
    text = text.strip()
    if text.lower() in ("none", "") and "None" in t:
        return None
    try:
        if t.startswith("tuple"):
            return tuple(int(v) for v in text.split(",") if v.strip())
        if t.startswith("bool"):
            if text.lower() not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(text)
            return text.lower() in ("1", "true", "yes")
        if t.startswith("int"):
            return int(text)
        if t.startswith("float"):
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None
    return text


def parse_config_text(text: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value")
        key, val = (s.strip() for s in line.split("=", 1))
        out[key] = _coerce(key, val)
    return out


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    out = {}
    for name, val in environ.items():
        if name.startswith(ENV_PREFIX):
            key = name[len(ENV_PREFIX):].lower()
            if key in _FIELD_TYPES:
                out[key] = _coerce(key, val)
    return out


def build_config(experiment: str, config_path=None, overrides: dict | None = None,
                 environ=None) -> ExperimentConfig:
    """Defaults < config file < environment < explicit overrides."""
    values = {"experiment": experiment}
    if config_path is not None:
        values.update(parse_config_text(Path(config_path).read_text()))
        values["experiment"] = experiment
    values.update(env_overrides(environ))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return ExperimentConfig(**values).resolved()


def write_config(cfg: ExperimentConfig, path) -> None:
    lines = []
    for key, val in cfg.to_dict().items():
        if isinstance(val, list):
            val = ",".join(str(v) for v in val)
        lines.append(f"{key} = {'none' if val is None else val}")
    Path(path).write_text("\n".join(lines) + "\n")


# --- export ----------------------------------------------------------------

def _fmt(x) -> str:
    return format(float(x), ".17g")


def export_csv(table, path, header: list[str] | None = None) -> Path:
    """Rows of numbers (or strings) as CSV; floats use 17 significant digits."""
    path = Path(path)
    lines = [",".join(header)] if header else []
    for row in table:
        lines.append(",".join(v if isinstance(v, str) else str(v) if isinstance(v, (int, np.integer))
                              else _fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n")
    return path


def read_csv_matrix(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)


def export_heatmap(K: kn.KernelMatrix | np.ndarray, path, epoch: int | None = None,
                   seed: int | None = None) -> tuple[Path, Path]:
    """8-bit P5 PGM with min-max scaling plus a ``.json`` sidecar."""
    E = np.asarray(K.entries if isinstance(K, kn.KernelMatrix) else K, dtype=float)
    if not np.all(np.isfinite(E)):
        raise ValueError("heatmap entries must be finite")
    lo, hi = float(E.min()), float(E.max())
    scaled = np.zeros_like(E) if hi == lo else (E - lo) / (hi - lo)
    pix = np.rint(scaled * 255).astype(np.uint8)
    path = Path(path)
    rows, cols = pix.shape
    path.write_bytes(f"P5\n{cols} {rows}\n255\n".encode() + pix.tobytes())
    meta = {"min": lo, "max": hi, "epoch": epoch, "seed": seed,
            "kind": K.kind.value if isinstance(K, kn.KernelMatrix) else None,
            "normalization": "trace" if isinstance(K, kn.KernelMatrix) and K.normalized else "none"}
    side = path.with_suffix(".json")
    side.write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return path, side


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    cols, rows = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=rows * cols).reshape(rows, cols)


# --- manifest --------------------------------------------------------------

@dataclass
class RunManifest:
    config: dict
    seed: int
    series: dict = field(default_factory=dict)
    artifacts: list = field(default_factory=list)
    out_dir: str = "."

    def add(self, path: Path, kind: str, epoch: int | None = None) -> None:
        self.artifacts.append({"file": str(Path(path).relative_to(self.out_dir)), "kind": kind,
                               "epoch": epoch})

    def epochs_with(self, kind: str) -> list[int]:
        return sorted({a["epoch"] for a in self.artifacts if a["kind"] == kind and a["epoch"] is not None})

    def write(self) -> Path:
        path = Path(self.out_dir) / "manifest.json"
        body = {"config": self.config, "seed": self.seed, "series": self.series,
                "artifacts": self.artifacts}
        path.write_text(json.dumps(body, indent=1) + "\n")
        missing = [a["file"] for a in self.artifacts if not (Path(self.out_dir) / a["file"]).exists()]
        if missing:
            raise RuntimeError(f"manifest references missing files: {missing}")
        return path


def _new_manifest(cfg: ExperimentConfig) -> RunManifest:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config(cfg, out / "config.txt")
    man = RunManifest(cfg.to_dict(), cfg.seed, out_dir=str(out))
    man.add(out / "config.txt", "config")
    return man


def _kernel_artifacts(man: RunManifest, K: kn.KernelMatrix, stem: str, kind: str, epoch: int,
                      seed: int) -> None:
    out = Path(man.out_dir)
    man.add(export_csv(K.entries, out / f"{stem}.csv"), kind, epoch)
    pgm, side = export_heatmap(K, out / f"{stem}.pgm", epoch, seed)
    man.add(pgm, kind + "-heatmap", epoch)
    man.add(side, kind + "-heatmap-meta", epoch)


def _architecture(cfg: ExperimentConfig, d: int, out_dim: int) -> Architecture:
    return Architecture(Kind(cfg.arch), d, cfg.m, cfg.hidden_layers + 1, out_dim, cfg.use_bias)


def _initial_params(cfg: ExperimentConfig, arch: Architecture) -> ModelParams:
    params = init_params(arch, cfg.seed, cfg.init, cfg.mirror_gates)
    return params.with_freeze(gates=cfg.freeze == "gates", values=cfg.freeze == "values")


REGION_HEADER = ["epoch", "kernel", "mean_diag_simple", "mean_diag_complex",
                 "mean_block_SS", "mean_block_CC", "mean_block_SC"]


# --- circle ----------------------------------------------------------------

def run_circle(cfg: ExperimentConfig) -> RunManifest:
    cfg = cfg.resolved()
    ds = gen_circle(cfg.n_points)
    arch = _architecture(cfg, 2, 1)
    params = _initial_params(cfg, arch)
    gm = cfg.gate_mode()
    man = _new_manifest(cfg)
    out = Path(man.out_dir)
    man.add(write_circle_csv(ds, out / "circle.csv"), "dataset")

    region_rows, path_rows = [], []
    has_gates = arch.kind is not Kind.DLN

    def snapshot(epoch: int, p: ModelParams) -> None:
        if has_gates:
            G = gate_tensor(arch, p, ds.X)
            counts = kn.active_path_counts(G)
            path_rows.append((epoch, counts[ds.low_freq].mean(), counts[~ds.low_freq].mean()))
        if epoch not in cfg.snapshots:
            return
        tag = f"e{epoch:05d}"
        if has_gates:
            lam = kn.overlap_kernel(G)
            region_rows.append((epoch, "overlap", *kn.region_stats(lam, ds.low_freq).values()))
            _kernel_artifacts(man, kn.trace_normalize(lam), f"overlap_{tag}", "overlap", epoch, cfg.seed)
            for l, K in enumerate(kn.layer_kernels(G), 1):
                _kernel_artifacts(man, K, f"layer{l}_{tag}", f"layer{l}", epoch, cfg.seed)
        ntk = kn.empirical_ntk(arch, p, ds.X, gm)
        region_rows.append((epoch, "ntk", *kn.region_stats(ntk, ds.low_freq).values()))
        if np.trace(ntk.entries) > 0:
            _kernel_artifacts(man, kn.trace_normalize(ntk), f"ntk_{tag}", "ntk", epoch, cfg.seed)
        yhat = predict(arch, p, ds.X, gm)[:, 0]
        man.add(export_csv(zip(ds.angles, ds.y, yhat, ds.region), out / f"predictions_{tag}.csv",
                           ["angle", "y", "yhat", "region"]), "predictions", epoch)
        if arch.kind.is_dlgn:
            rows = [(l, i, *A[i], c[i]) for l, (A, c) in enumerate(dlgn_hyperplanes(arch, p), 1)
                    for i in range(arch.m)]
            man.add(export_csv(rows, out / f"hyperplanes_{tag}.csv", ["layer", "neuron", "a1", "a2", "c"]),
                    "hyperplanes", epoch)

    tc = TrainConfig(epochs=cfg.epochs, lr=cfg.lr, batch_size=cfg.batch_size or None,
                     snapshot_epochs=tuple(cfg.snapshots), seed=cfg.seed, gate_mode=gm,
                     loss_kind=LossKind.MSE)
    _, hist = train(arch, params, ds.X, ds.y[:, None], tc, callback=snapshot)

    man.add(export_csv(((e, l, m) for e, (l, m) in enumerate(zip(hist.loss, hist.mse))),
                       out / "loss.csv", ["epoch", "loss", "mse"]), "loss")
    man.add(export_csv(hist.step_loss, out / "steps.csv", ["step", "epoch", "loss"]), "steps")
    man.add(export_csv(region_rows, out / "region_stats.csv", REGION_HEADER), "region-stats")
    if path_rows:
        man.add(export_csv(path_rows, out / "active_paths.csv",
                           ["epoch", "mean_paths_low", "mean_paths_high"]), "active-paths")
    man.series = {"loss": hist.loss, "mse": hist.mse}
    man.write()
    return man


# --- fmnist ----------------------------------------------------------------

def _fmnist_dir(cfg: ExperimentConfig) -> Path:
    d = cfg.data_dir or os.environ.get("FMNIST_DIR")
    if not d or find_fmnist(d) is None:
        raise FileNotFoundError(f"Fashion-MNIST IDX files not found (data_dir={d!r}); "
                                "set data_dir or FMNIST_DIR")
    return Path(d)


def _sample(rng, idx: np.ndarray, k: int | None) -> np.ndarray:
    if k is None or k <= 0 or k >= len(idx):
        return np.sort(idx)
    return np.sort(rng.choice(idx, size=k, replace=False))


def run_fmnist(cfg: ExperimentConfig) -> RunManifest:
    cfg = cfg.resolved()
    full = load_fmnist(_fmnist_dir(cfg))
    rng = make_rng(cfg.seed, STREAM_SUBSAMPLE)
    tr = _sample(rng, np.flatnonzero(full.is_train), cfg.train_size)
    te = _sample(rng, np.flatnonzero(~full.is_train), cfg.test_size)
    ds, mapping = modify_fmnist_labels(full.subset(np.concatenate([tr, te])),
                                       make_rng(cfg.seed, STREAM_CLUSTERS))
    train_ds, test_ds = ds.subset(ds.is_train), ds.subset(~ds.is_train)
    # kernel diagnostics: a fixed per-class sample of training points, ordered by class
    kidx = np.concatenate([_sample(rng, np.flatnonzero(train_ds.original == c), cfg.kernel_per_class)
                           for c in range(1, 11)])
    kds = train_ds.subset(kidx)

    arch = _architecture(cfg, ds.images.shape[1], 10)
    params = _initial_params(cfg, arch)
    gm = cfg.gate_mode()
    man = _new_manifest(cfg)
    out = Path(man.out_dir)
    man.add(export_csv(sorted((c, j, lab) for (c, j), lab in mapping.items()), out / "cluster_labels.csv",
                       ["class", "cluster", "label"]), "cluster-labels")

    rows = []
    has_gates = arch.kind is not Kind.DLN

    def region_acc(p, mask):
        yhat = predict(arch, p, test_ds.images[mask], gm)
        return float(np.mean(np.argmax(yhat, axis=1) + 1 == test_ds.labels[mask])) if mask.any() else float("nan")

    def snapshot(epoch: int, p: ModelParams) -> None:
        s = kds.simple
        paths_s = paths_c = float("nan")
        if has_gates:
            G = gate_tensor(arch, p, kds.images)
            counts = kn.active_path_counts(G)
            paths_s, paths_c = counts[s].mean(), counts[~s].mean()
        nd = kn.ntk_diagonal(arch, p, kds.images, gm)
        rows.append((epoch, paths_s, paths_c, nd[s].mean(), nd[~s].mean(),
                     region_acc(p, test_ds.simple), region_acc(p, ~test_ds.simple)))
        if epoch not in cfg.snapshots:
            return
        tag = f"e{epoch:05d}"
        classes = kds.original - 1
        mats = []
        if has_gates:
            mats.append(("overlap", kn.overlap_kernel(G)))
        mats.append(("ntk", kn.empirical_ntk(arch, p, kds.images, gm)))
        for name, K in mats:
            if np.trace(K.entries) <= 0:
                continue
            K = kn.trace_normalize(K)
            C = kn.class_averaged(K, classes, 10)
            man.add(export_csv(C, out / f"{name}_class_{tag}.csv"), f"{name}-class", epoch)
            export_heatmap(C, out / f"{name}_class_{tag}.pgm", epoch, cfg.seed)
            man.add(out / f"{name}_class_{tag}.pgm", f"{name}-class-heatmap", epoch)
            man.add(out / f"{name}_class_{tag}.json", f"{name}-class-heatmap-meta", epoch)

    tc = TrainConfig(epochs=cfg.epochs, lr=cfg.lr, batch_size=cfg.batch_size or None,
                     snapshot_epochs=tuple(cfg.snapshots), seed=cfg.seed, gate_mode=gm,
                     loss_kind=LossKind.SOFTMAX_CE)
    _, hist = train(arch, params, train_ds.images, train_ds.labels - 1, tc, callback=snapshot)

    header = ["epoch", "mean_paths_simple", "mean_paths_complex", "mean_ntk_diag_simple",
              "mean_ntk_diag_complex", "test_acc_simple", "test_acc_complex"]
    man.add(export_csv(rows, out / "fmnist_regions.csv", header), "region-series")
    man.add(export_csv(((e, l, a) for e, (l, a) in enumerate(zip(hist.loss, hist.accuracy))),
                       out / "loss.csv", ["epoch", "loss", "train_accuracy"]), "loss")
    man.add(export_csv(hist.step_loss, out / "steps.csv", ["step", "epoch", "loss"]), "steps")
    man.series = {"loss": hist.loss, "accuracy": hist.accuracy,
                  **{h: [r[i] for r in rows] for i, h in enumerate(header) if i}}
    man.write()
    return man


# --- oracle suite ----------------------------------------------------------

ForwardFn = Callable[[Architecture, ModelParams, np.ndarray], np.ndarray]


def _default_forward(arch, params, X):
    return forward(arch, params, X, HARD).output


def run_oracle_suite(cfg: ExperimentConfig, forward_fn: ForwardFn = _default_forward,
                     tol: float = 1e-9) -> RunManifest:
    """Fast forward vs brute-force path sums, and overlap kernel vs brute
    force, over random bias-free nets of every kind with d<=3, m<=4, L<=4.

    Raises :class:`OracleViolation` naming the first offending case.
    """
    cfg = cfg.resolved()
    man = _new_manifest(cfg)
    out = Path(man.out_dir)
    rows, worst_moe, worst_overlap = [], 0.0, 0
    sizes = [(d, m, L) for d in (1, 2, 3) for m in (2, 3, 4) for L in (2, 3, 4)]
    kinds = [Kind.RELU, Kind.DLGN, Kind.DLGN_PWC, Kind.DLN]
    failures = []
    for kind in kinds:
        for s in range(cfg.oracle_seeds):
            d, m, L = sizes[s % len(sizes)]
            seed = cfg.seed * 1_000_003 + s
            rng = make_rng(seed, kinds.index(kind))
            arch = Architecture(kind, d, m, L, use_bias=False)
            params = init_params(arch, rng, "he", mirror_gates=False)
            X = rng.normal(size=(cfg.oracle_inputs, d))
            fast = np.asarray(forward_fn(arch, params, X)).reshape(len(X), -1)
            moe = np.array([paths.moe_output(arch, params, x) for x in X])
            err = float(np.max(np.abs(fast - moe) / (1.0 + np.abs(fast))))
            ov = 0
            if kind is not Kind.DLN:
                lam = kn.overlap_kernel(gate_tensor(arch, params, X)).entries
                brute = np.array([[paths.overlap_bruteforce(arch, params, a, b) for b in X] for a in X])
                ov = int(np.max(np.abs(lam - brute)))
            rows.append((kind.value, seed, d, m, L, err, ov))
            worst_moe, worst_overlap = max(worst_moe, err), max(worst_overlap, ov)
            if not (err <= tol) or ov != 0:
                failures.append(f"kind={kind.value} seed={seed} d={d} m={m} L={L} "
                                f"moe_err={err:.3g} overlap_diff={ov}")
    man.add(export_csv(rows, out / "oracle.csv",
                       ["kind", "seed", "d", "m", "L", "moe_rel_err", "overlap_diff"]), "oracle")
    man.series = {"max_moe_error": worst_moe, "max_overlap_diff": worst_overlap,
                  "failures": failures}
    man.write()
    if failures:
        raise OracleViolation(failures[0])
    return man


RUNNERS = {"circle": run_circle, "fmnist": run_fmnist, "oracle": run_oracle_suite}
