import numpy as np
import pytest

from halfspace.core_math import finite_diff_grad, make_rng, max_relative_error
from halfspace.data import gen_circle
from halfspace.kernels import active_path_counts
from halfspace.models import (HARD, Architecture, GateMode, HardGatesError, Kind, LossKind, ModelParams,
                              TrainConfig, TrainingDiverged, dlgn_hyperplanes, forward, gate_tensor,
                              init_params, load_checkpoint, loss_and_grads, mse, predict,
                              save_checkpoint, train)
from halfspace.paths import moe_output

ALL_KINDS = list(Kind)


def net(kind, d=2, m=4, L=3, out=1, bias=True, seed=0, scheme="he"):
    arch = Architecture(kind, d, m, L, out, bias)
    return arch, init_params(arch, seed, scheme, mirror_gates=False)


@pytest.mark.parametrize("args", [(Kind.RELU, 0, 2, 3), (Kind.RELU, 2, 0, 3), (Kind.RELU, 2, 2, 1)])
def test_architecture_validation(args):
    with pytest.raises(ValueError):
        Architecture(*args)


def test_shapes():
    arch = Architecture(Kind.DLGN, 3, 5, 4, 2)
    assert arch.shapes() == [(5, 3), (5, 5), (5, 5), (2, 5)]
    p = init_params(arch, 0)
    assert [u.shape for u in p.U] == arch.shapes()
    assert init_params(Architecture(Kind.RELU, 3, 5, 4), 0).U is None


def test_dln_is_matrix_product():
    arch = Architecture(Kind.DLN, 2, 2, 3, use_bias=False)
    p = ModelParams([np.eye(2), np.array([[1.0, 2.0], [0.0, 1.0]]), np.array([[1.0, -1.0]])])
    x = np.array([1.0, 2.0])
    assert abs(predict(arch, p, x)[0, 0] - (p.W[2] @ p.W[1] @ p.W[0] @ x)[0]) < 1e-12
    arch, p = net(Kind.DLN, d=3, m=4, L=4, bias=False, seed=2)
    X = make_rng(1).normal(size=(7, 3))
    collapsed = p.W[3] @ p.W[2] @ p.W[1] @ p.W[0]
    assert np.max(np.abs(predict(arch, p, X) - X @ collapsed.T)) < 1e-12


def test_dln_gates_are_ones():
    arch, p = net(Kind.DLN)
    tr = forward(arch, p, make_rng(0).normal(size=(4, 2)))
    assert all(np.all(g == 1) for g in tr.gates)


def test_dimension_mismatch():
    arch, p = net(Kind.RELU)
    with pytest.raises(ValueError):
        forward(arch, p, np.zeros(3))


@pytest.mark.parametrize("kind", [Kind.DLGN, Kind.DLGN_PWC])
def test_dlgn_gates_invariant_to_positive_scaling(kind):
    arch, p = net(kind, bias=False, seed=3)
    X = make_rng(4).normal(size=(20, 2))
    assert np.array_equal(gate_tensor(arch, p, X), gate_tensor(arch, p, 2 * X))


def test_relu_matches_path_sum():
    arch, p = net(Kind.RELU, d=2, m=3, L=4, bias=False, seed=5)
    for x in make_rng(6).normal(size=(5, 2)):
        fast = predict(arch, p, x)[0]
        assert np.all(np.abs(fast - moe_output(arch, p, x)) <= 1e-9 * (1 + np.abs(fast)))


def test_hard_gates_are_binary():
    for kind in (Kind.RELU, Kind.DLGN, Kind.DLGN_PWC):
        arch, p = net(kind, seed=1)
        tr = forward(arch, p, make_rng(2).normal(size=(6, 2)), HARD)
        assert all(set(np.unique(g)) <= {0.0, 1.0} for g in tr.gates)


def test_pwc_scale_invariance():
    arch, p = net(Kind.DLGN_PWC, d=3, m=4, L=4, bias=False, seed=7)
    X = make_rng(8).normal(size=(100, 3))
    y = predict(arch, p, X)
    for c in (0.5, 2.0, 10.0):
        assert np.array_equal(predict(arch, p, c * X), y)


def test_soft_to_hard_limit():
    arch, p = net(Kind.DLGN, d=2, m=4, L=4, seed=9)
    X = make_rng(10).normal(size=(400, 2))
    tr = forward(arch, p, X, HARD)
    margin = np.min(np.stack([np.min(np.abs(e), axis=1) for e in tr.pre]), axis=0)
    X = X[margin > 0.1]
    assert len(X) > 10
    hard = predict(arch, p, X, HARD)
    errs = [np.max(np.abs(predict(arch, p, X, GateMode.soft(b)) - hard)) for b in (1, 10, 100, 1000)]
    assert all(a > b for a, b in zip(errs, errs[1:]))
    assert errs[-1] < 1e-6


def test_soft_gate_mode_needs_positive_beta():
    with pytest.raises(ValueError):
        GateMode.soft(0.0)


def test_perfect_fit_zero_loss():
    arch, p = net(Kind.RELU, seed=1)
    X = make_rng(3).normal(size=(5, 2))
    loss, g = loss_and_grads(arch, p, X, predict(arch, p, X), HARD)
    assert loss == 0.0
    assert all(np.max(np.abs(a)) < 1e-12 for a in g.arrays())


def test_hard_gates_need_frozen_gates():
    arch, p = net(Kind.DLGN)
    X = np.ones((2, 2))
    with pytest.raises(HardGatesError, match="hard gates are non-differentiable; freeze gates or use SOFT"):
        loss_and_grads(arch, p, X, np.zeros((2, 1)), HARD)
    loss_and_grads(arch, p.with_freeze(gates=True), X, np.zeros((2, 1)), HARD)


def _check_grads(arch, p, X, y, gm, lk):
    _, g = loss_and_grads(arch, p, X, y, gm, lk)
    trainable = [a for _, _, a, f in p.groups() if not f]
    analytic = [a for (_, _, a, f) in g.groups() if not f]
    numeric = finite_diff_grad(lambda: loss_and_grads(arch, p, X, y, gm, lk)[0], trainable)
    return max_relative_error(analytic, numeric)


def test_dlgn_soft_gradient_matches_finite_differences():
    arch, p = net(Kind.DLGN, d=2, m=4, L=3, seed=11, scheme="uniform")
    rng = make_rng(12)
    X, y = rng.normal(size=(8, 2)), rng.normal(size=(8, 1))
    assert _check_grads(arch, p, X, y, GateMode.soft(10.0), LossKind.MSE) < 1e-4


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_cross_entropy_gradient(kind):
    arch, p = net(kind, d=3, m=3, L=3, out=4, seed=13, scheme="uniform")
    rng = make_rng(14)
    X, y = rng.normal(size=(6, 3)), rng.integers(0, 4, size=6)
    assert _check_grads(arch, p, X, y, GateMode.soft(5.0), LossKind.SOFTMAX_CE) < 1e-4


def test_gates_frozen_gives_zero_w_grads():
    arch, p = net(Kind.DLGN, seed=2)
    p = p.with_freeze(gates=True)
    rng = make_rng(3)
    _, g = loss_and_grads(arch, p, rng.normal(size=(5, 2)), rng.normal(size=(5, 1)), GateMode.soft(10.0))
    assert all(np.all(w == 0) for w in g.W) and all(np.all(b == 0) for b in g.b)
    assert any(np.any(u != 0) for u in g.U)


@pytest.mark.parametrize("freeze", ["gates", "values"])
def test_training_leaves_frozen_group_bit_identical(freeze):
    arch, p = net(Kind.DLGN, seed=4, scheme="uniform")
    p = p.with_freeze(gates=freeze == "gates", values=freeze == "values")
    rng = make_rng(5)
    X, y = rng.normal(size=(16, 2)), rng.normal(size=(16, 1))
    gm = HARD if freeze == "gates" else GateMode.soft(10.0)
    out, _ = train(arch, p, X, y, TrainConfig(epochs=3, lr=1e-2, batch_size=4, gate_mode=gm))
    frozen = ("W", "b") if freeze == "gates" else ("U", "c")
    moving = ("U",) if freeze == "gates" else ("W",)
    for name in frozen:
        assert all(np.array_equal(a, b) for a, b in zip(getattr(p, name), getattr(out, name)))
    for name in moving:
        assert not all(np.array_equal(a, b) for a, b in zip(getattr(p, name)[:-1], getattr(out, name)[:-1]))


def test_train_does_not_mutate_input():
    arch, p = net(Kind.RELU, seed=0)
    before = p.copy()
    train(arch, p, np.ones((4, 2)), np.ones((4, 1)), TrainConfig(epochs=2))
    assert all(np.array_equal(a, b) for a, b in zip(before.arrays(), p.arrays()))


def test_dln_fits_linear_target():
    rng = make_rng(21)
    X = rng.normal(size=(64, 3))
    y = X @ np.array([[0.5], [-1.0], [2.0]])
    arch = Architecture(Kind.DLN, 3, 4, 3)
    _, hist = train(arch, init_params(arch, 0), X, y, TrainConfig(epochs=500, lr=1e-2))
    assert min(hist.loss) < 1e-4


def test_history_and_snapshots():
    arch, p = net(Kind.DLGN, scheme="uniform")
    X = make_rng(1).normal(size=(10, 2))
    seen = []
    _, h = train(arch, p, X, np.zeros((10, 1)), TrainConfig(epochs=4, snapshot_epochs=(0, 2), batch_size=3),
                 callback=lambda e, q: seen.append(e))
    assert len(h.loss) == 5 and seen == [0, 1, 2, 3, 4]
    assert sorted(h.snapshots) == [0, 2]
    assert h.step_loss[-1][:2] == (16, 4)


def test_divergence_reports_epoch():
    arch, p = net(Kind.RELU)
    X = np.array([[np.nan, 0.0]])
    with pytest.raises(TrainingDiverged) as info:
        train(arch, p, X, np.zeros((1, 1)), TrainConfig(epochs=2))
    assert info.value.epoch == 0


def test_gate_tensor_half_space():
    arch = Architecture(Kind.DLGN, 2, 1, 2, use_bias=False)
    p = ModelParams([np.array([[1.0, 0.0]]), np.array([[1.0]])], U=[np.ones((1, 2)), np.ones((1, 1))])
    G = gate_tensor(arch, p, np.array([[1.0, 0.0], [-1.0, 0.0]]))
    assert G[:, :, 0].tolist() == [[1, 0]]


def test_gate_tensor_all_positive():
    arch = Architecture(Kind.DLGN, 3, 4, 4, use_bias=False)
    rng = make_rng(0)
    p = ModelParams([np.abs(w) for w in init_params(arch, 0, "he").W], U=init_params(arch, 0).U)
    assert np.all(gate_tensor(arch, p, np.ones((2, 3))) == 1)
    with pytest.raises(ValueError):
        gate_tensor(Architecture(Kind.DLN, 3, 4, 4), init_params(Architecture(Kind.DLN, 3, 4, 4), rng), np.ones((1, 3)))


def test_gate_tensor_matches_trace_signs():
    arch, p = net(Kind.DLGN, d=3, m=5, L=4, seed=3)
    X = make_rng(4).normal(size=(9, 3))
    tr = forward(arch, p, X, HARD)
    assert np.array_equal(gate_tensor(arch, p, X), np.stack([e >= 0 for e in tr.pre]).astype(np.uint8))


def test_hyperplanes():
    arch, p = net(Kind.DLGN, L=2, seed=1)
    (A, c), = dlgn_hyperplanes(arch, p)
    assert np.array_equal(A, p.W[0]) and np.array_equal(c, p.b[0])
    arch, p = net(Kind.DLGN, d=2, m=4, L=4, seed=2)
    X = make_rng(3).normal(size=(10, 2))
    tr = forward(arch, p, X, HARD)
    for (A, c), eta in zip(dlgn_hyperplanes(arch, p), tr.pre):
        assert np.max(np.abs(X @ A.T + c - eta)) < 1e-12
    arch, p = net(Kind.DLGN, bias=False, seed=4)
    assert all(np.all(c == 0) for _, c in dlgn_hyperplanes(arch, p))
    with pytest.raises(ValueError):
        dlgn_hyperplanes(*net(Kind.RELU))


def test_mirrored_init_flat_path_counts():
    arch = Architecture(Kind.DLGN, 2, 16, 6)
    p = init_params(arch, 0)
    counts = active_path_counts(gate_tensor(arch, p, gen_circle(500).X))
    assert np.all(counts == 8 ** 5)


def test_init_scheme_validation():
    with pytest.raises(ValueError):
        init_params(Architecture(Kind.RELU, 2, 2, 2), 0, scheme="xavier")
    he = init_params(Architecture(Kind.RELU, 2, 2, 2), 0, scheme="he")
    assert all(np.all(b == 0) for b in he.b)


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_checkpoint_roundtrip(tmp_path, kind):
    arch, p = net(kind, out=2, seed=6, scheme="uniform")
    p = p.with_freeze(values=True)
    save_checkpoint(tmp_path / "ck.txt", arch, p)
    arch2, p2 = load_checkpoint(tmp_path / "ck.txt")
    assert arch2 == arch and p2.values_frozen and not p2.gates_frozen
    assert all(np.array_equal(a, b) for a, b in zip(p.arrays(), p2.arrays()))


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "bad.txt").write_text("nope\n")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.txt")


def test_circle_dlgn_converges_and_frozen_does_not():
    ds = gen_circle(500)
    arch = Architecture(Kind.DLGN, 2, 16, 6)
    p = init_params(arch, 0)
    cfg = dict(epochs=500, lr=3e-3, batch_size=64, seed=0)
    _, h = train(arch, p, ds.X, ds.y[:, None], TrainConfig(**cfg))
    assert min(h.mse) < 0.01
    _, hf = train(arch, p.with_freeze(gates=True), ds.X, ds.y[:, None], TrainConfig(gate_mode=HARD, **cfg))
    assert hf.mse[-1] > 0.01
    assert hf.mse[500] > h.mse[200]
    assert abs(mse(predict(arch, p, ds.X), ds.y[:, None]) - hf.mse[0]) < 1e-12
