import numpy as np
import pytest

from lbi import diffcore as dc
from lbi import ignoring as ig
from lbi import models as M
from lbi.errors import ConfigError, DataError, RunError


def one_d_instance():
    """Train (x=1, y=1), val (x=1, y=1), W=0, a=1, xi=0.1."""
    problem = ig.LeastSquaresProblem([[1.0]], [1.0], [[1.0]], [1.0])
    params = dc.ParameterSet({"w": np.array([0.0])})
    return problem, params


# --- weighted loss -----------------------------------------------------------


def test_weighted_loss_all_ones_is_plain_sum():
    losses = np.array([1.0, 2.0, 3.5])
    assert ig.weighted_train_loss(np.ones(3), losses) == pytest.approx(6.5, abs=0)


def test_weighted_loss_all_zero_and_zero_model_gradient():
    problem, params = one_d_instance()
    assert ig.weighted_train_loss(np.zeros(1), problem.per_example_train_losses(params)) == 0.0
    grads = problem.train_grads(params, np.zeros(1))
    assert np.array_equal(grads["w"], np.zeros(1))


def test_weighted_loss_arithmetic():
    assert ig.weighted_train_loss(np.array([0.5, 0.25]), np.array([2.0, 4.0])) == 2.0


def test_weighted_loss_length_mismatch():
    with pytest.raises(DataError):
        ig.weighted_train_loss(np.ones(2), np.ones(3))


def test_a_gradient_identity_is_per_example_loss():
    # The weighted sum is linear in a, so a central difference in a_i
    # recovers L_i to rounding, at any probe point W+-.
    rng = dc.make_rng(0)
    problem = ig.LeastSquaresProblem(
        rng.uniform(-1, 1, (5, 3)), rng.uniform(-1, 1, 5),
        rng.uniform(-1, 1, (2, 3)), rng.uniform(-1, 1, 2),
    )
    params = dc.ParameterSet({"w": rng.uniform(-1, 1, 3)})
    a = rng.uniform(0.2, 0.8, 5)
    losses = problem.per_example_train_losses(params)
    h = 1e-3
    for i in range(5):
        ap, am = a.copy(), a.copy()
        ap[i] += h
        am[i] -= h
        fd = (
            ig.weighted_train_loss(ap, losses) - ig.weighted_train_loss(am, losses)
        ) / (2 * h)
        assert abs(fd - losses[i]) <= 1e-12


# --- unrolled step -----------------------------------------------------------


def test_unroll_zero_step_is_identity():
    problem, params = one_d_instance()
    out = ig.unrolled_step(problem, params, np.ones(1), 0.0)
    assert np.array_equal(out["w"], params["w"])


def test_unroll_zero_weights_is_identity():
    problem, params = one_d_instance()
    out = ig.unrolled_step(problem, params, np.zeros(1), 0.1)
    assert np.array_equal(out["w"], params["w"])


def test_unroll_one_d_least_squares():
    # dL/dW = a (W - 1) = -1 at W=0, so W' = 0 - 0.1 * (-1) = 0.1
    problem, params = one_d_instance()
    out = ig.unrolled_step(problem, params, np.ones(1), 0.1)
    assert out["w"][0] == pytest.approx(0.1, abs=1e-15)


# --- hypergradients ----------------------------------------------------------


def test_hypergrad_fd_zero_xi_gives_zeros():
    problem, params = one_d_instance()
    assert np.array_equal(ig.hypergrad_fd(problem, params, np.ones(1), 0.0), np.zeros(1))


def test_hypergrad_exact_zero_xi_gives_zeros():
    problem, params = one_d_instance()
    out = ig.hypergrad_exact(problem, params, np.ones(1), 0.0)
    assert np.allclose(out, 0.0, atol=1e-12)


def test_one_d_closed_form_minus_009():
    # Hand differentiation: dL_val/da = (W' - 1) * xi * 1 = -0.09.
    problem, params = one_d_instance()
    fd = ig.hypergrad_fd(problem, params, np.ones(1), 0.1, eps=1e-4)
    exact = ig.hypergrad_exact(problem, params, np.ones(1), 0.1)
    assert fd[0] == pytest.approx(-0.09, abs=1e-9)
    assert exact[0] == pytest.approx(-0.09, abs=1e-7)


def test_hypergrad_exact_duplicate_examples_equal_components():
    problem = ig.LeastSquaresProblem(
        [[1.0, 0.5], [1.0, 0.5], [0.2, -1.0]], [1.0, 1.0, 0.0],
        [[0.3, 0.3]], [0.5],
    )
    params = dc.ParameterSet({"w": np.array([0.1, -0.2])})
    out = ig.hypergrad_exact(problem, params, np.array([0.7, 0.7, 0.4]), 0.05)
    assert out[0] == pytest.approx(out[1], abs=1e-10)


@pytest.mark.parametrize("trial", range(8))
def test_oracle_agreement_least_squares(trial):
    rng = dc.make_rng(200 + trial)
    n_tr = int(rng.integers(2, 11))
    n_val = int(rng.integers(1, 6))
    dim = int(rng.integers(1, 5))
    problem = ig.LeastSquaresProblem(
        rng.uniform(-2, 2, (n_tr, dim)), rng.uniform(-2, 2, n_tr),
        rng.uniform(-2, 2, (n_val, dim)), rng.uniform(-2, 2, n_val),
    )
    params = dc.ParameterSet({"w": rng.uniform(-1, 1, dim)})
    a = rng.uniform(0.1, 0.9, n_tr)
    fd = ig.hypergrad_fd(problem, params, a, 0.05, eps=1e-4)
    exact = ig.hypergrad_exact(problem, params, a, 0.05)
    mask = np.abs(exact) > 1e-8
    rel = np.abs(fd[mask] - exact[mask]) / np.abs(exact[mask])
    assert rel.max(initial=0.0) < 1e-2


def test_oracle_agreement_mlp_model():
    rng = dc.make_rng(300)
    model = M.MlpClassifier.create(3, 4, 2, seed=17)
    x_tr = rng.uniform(-1, 1, (6, 3))
    y_tr = rng.integers(0, 2, 6)
    x_val = rng.uniform(-1, 1, (3, 3))
    y_val = rng.integers(0, 2, 3)
    problem = ig.ModelBatchProblem(model, (x_tr, y_tr), (x_val, y_val))
    a = rng.uniform(0.2, 0.9, 6)
    fd = ig.hypergrad_fd(problem, model.params, a, 0.05)
    exact = ig.hypergrad_exact(problem, model.params, a, 0.05)
    mask = np.abs(exact) > 1e-8
    rel = np.abs(fd[mask] - exact[mask]) / np.abs(exact[mask])
    assert rel.max(initial=0.0) < 1e-2


def test_xi_linearity_at_first_order():
    rng = dc.make_rng(9)
    problem = ig.LeastSquaresProblem(
        rng.uniform(-1, 1, (4, 2)), rng.uniform(-1, 1, 4),
        rng.uniform(-1, 1, (2, 2)), rng.uniform(-1, 1, 2),
    )
    params = dc.ParameterSet({"w": rng.uniform(-1, 1, 2)})
    a = rng.uniform(0.3, 0.7, 4)
    xi = 1e-3
    h1 = ig.hypergrad_fd(problem, params, a, xi, eps=1e-5)
    h2 = ig.hypergrad_fd(problem, params, a, 2 * xi, eps=1e-5)
    mask = np.abs(h1) > 1e-10
    ratio = h2[mask] / h1[mask]
    assert np.all(np.abs(ratio - 2.0) < 0.1)  # within 5% of doubling


def test_hypergradient_report_recomputes_deviations():
    rep = ig.HypergradientReport(np.array([1.0, 2.0]), np.array([1.1, 2.0]))
    assert rep.max_abs_deviation == pytest.approx(0.1)
    assert rep.max_rel_deviation == pytest.approx(0.1 / 1.1)
    with pytest.raises(DataError):
        ig.HypergradientReport(np.zeros(2), np.zeros(3))


# --- state -------------------------------------------------------------------


def test_state_weights_strictly_interior():
    state = ig.IgnoringState(4)
    state.logits[:] = [-1e9, 1e9, 0.0, 5.0]
    np.clip(state.logits, -ig.LOGIT_CLIP, ig.LOGIT_CLIP, out=state.logits)
    a = state.weights()
    assert np.all(a > 0.0) and np.all(a < 1.0)


def test_state_rejects_bad_ids():
    state = ig.IgnoringState(3)
    with pytest.raises(DataError):
        state.adam_update(np.array([3]), np.array([0.1]), 0.1, (0.5, 0.999), 0.0)


def test_state_sparse_update_touches_only_batch():
    state = ig.IgnoringState(5)
    state.adam_update(np.array([1, 3]), np.array([1.0, -1.0]), 0.1, (0.5, 0.999), 0.0)
    assert state.logits[0] == 0.0 and state.logits[2] == 0.0 and state.logits[4] == 0.0
    assert state.logits[1] < 0.0 < state.logits[3]
    assert list(state.steps) == [0, 1, 0, 1, 0]


# --- the loop ----------------------------------------------------------------


def blob_task(seed=0, n_train=24, n_val=12, flip=None):
    """Two separable Gaussian blobs; optionally flip one training label."""
    rng = dc.make_rng(seed)
    centers = np.array([[1.5, 0.0], [-1.5, 0.0]])
    y_tr = rng.integers(0, 2, n_train)
    x_tr = centers[y_tr] + 0.3 * rng.standard_normal((n_train, 2))
    y_val = rng.integers(0, 2, n_val)
    x_val = centers[y_val] + 0.3 * rng.standard_normal((n_val, 2))
    if flip is not None:
        y_tr[flip] = 1 - y_tr[flip]
    model = M.MlpClassifier.create(2, 4, 2, seed=seed + 1)
    return ig.FeatureTask(model, x_tr, y_tr, x_val, y_val), y_tr


def test_lr_a_zero_freezes_weights_at_half():
    task, _ = blob_task(seed=1)
    cfg = ig.LbiConfig(epochs=3, train_batch_size=8, val_batch_size=8, lr_a=0.0, seed=0)
    result = ig.lbi_train(task, cfg)
    for snap in result.trace.snapshots:
        assert np.allclose(snap.weights, 0.5, atol=0)


def test_weights_stay_in_open_interval_every_snapshot():
    task, _ = blob_task(seed=2, flip=3)
    cfg = ig.LbiConfig(epochs=5, train_batch_size=8, val_batch_size=8, lr_a=0.3, seed=0)
    result = ig.lbi_train(task, cfg)
    for snap in result.trace.snapshots:
        assert np.all(snap.weights > 0.0) and np.all(snap.weights < 1.0)


def test_full_batch_permutation_equivariance():
    n = 10
    task, _ = blob_task(seed=3, n_train=n, n_val=6)
    cfg = ig.LbiConfig(
        epochs=3, train_batch_size=n, val_batch_size=6, lr_a=0.1, seed=5
    )
    res_a = ig.lbi_train(task, cfg)
    a_orig = res_a.final_weights()

    perm = dc.make_rng(99).permutation(n)
    task_b, _ = blob_task(seed=3, n_train=n, n_val=6)
    task_b.x_train = task_b.x_train[perm]
    task_b.y_train = task_b.y_train[perm]
    res_b = ig.lbi_train(task_b, cfg)
    a_perm = res_b.final_weights()
    assert np.allclose(a_perm, a_orig[perm], atol=1e-9)


def test_poisoned_example_ranks_in_bottom_decile():
    # One flipped label with clean validation support: its weight must
    # land among the lowest 10% after training.
    flip_idx = 4
    task, _ = blob_task(seed=4, n_train=20, n_val=12, flip=flip_idx)
    cfg = ig.LbiConfig(
        epochs=30, train_batch_size=20, val_batch_size=12, lr_a=0.2,
        lr_w=0.01, seed=0,
    )
    result = ig.lbi_train(task, cfg)
    a = result.final_weights()
    rank = int(np.argsort(a).tolist().index(flip_idx))
    assert rank < max(1, int(0.1 * len(a))) + 1


def test_divergence_raises_run_error_with_epoch():
    task, _ = blob_task(seed=5)
    task.x_train[0, 0] = np.nan  # poisons the loss on the first pass
    cfg = ig.LbiConfig(epochs=2, train_batch_size=8, val_batch_size=8, seed=0)
    with pytest.raises(RunError) as err:
        ig.lbi_train(task, cfg)
    assert err.value.epoch == 0


# --- removal -----------------------------------------------------------------


class _Ex:
    def __init__(self, id):
        self.id = id


def test_removal_threshold_zero_removes_nothing():
    examples = [_Ex(i) for i in range(3)]
    kept, removed = ig.apply_removal(examples, np.array([0.9, 0.2, 0.7]), 0.0)
    assert len(kept) == 3 and removed == []


def test_removal_threshold_one_errors():
    examples = [_Ex(i) for i in range(3)]
    with pytest.raises(RunError):
        ig.apply_removal(examples, np.array([0.9, 0.2, 0.7]), 1.0)


def test_removal_half_threshold():
    examples = [_Ex(i) for i in range(3)]
    kept, removed = ig.apply_removal(examples, np.array([0.9, 0.2, 0.7]), 0.5)
    assert [e.id for e in kept] == [0, 2]
    assert removed == [1]


def test_removal_bad_threshold():
    with pytest.raises(ConfigError):
        ig.apply_removal([_Ex(0)], np.array([0.5]), 1.5)


# --- ignoring network --------------------------------------------------------


def test_network_zero_params_gives_half():
    net = ig.IgnoringNetwork(3, 4, seed=0)
    for name, t in net.params.items():
        net.params[name] = np.zeros_like(t)
    a = ig.ignoring_network_forward(net, np.ones((5, 3)))
    assert np.allclose(a, 0.5, atol=0)


def test_network_identical_features_identical_weights():
    net = ig.IgnoringNetwork(3, 4, seed=1)
    feats = np.tile(np.array([[0.3, -0.2, 0.9]]), (4, 1))
    a = ig.ignoring_network_forward(net, feats)
    assert np.all(a == a[0])


def test_network_gradient_matches_finite_differences():
    rng = dc.make_rng(31)
    problem = ig.LeastSquaresProblem(
        rng.uniform(-1, 1, (2, 2)), rng.uniform(-1, 1, 2),
        rng.uniform(-1, 1, (2, 2)), rng.uniform(-1, 1, 2),
    )
    params = dc.ParameterSet({"w": rng.uniform(-0.5, 0.5, 2)})
    feats = rng.uniform(-1, 1, (2, 3))
    net = ig.IgnoringNetwork(3, 4, seed=2)
    xi = 0.05

    a, cache = net.forward(feats)
    h = ig.hypergrad_fd(problem, params, a, xi, eps=1e-5)
    analytic = net.grads_from_hypergrad(cache, h)

    def outer_loss(net_params):
        a_now, _ = net.forward(feats, params=net_params)
        unrolled = ig.unrolled_step(problem, params, a_now, xi)
        return problem.val_loss(unrolled)

    numeric = dc.finite_diff_grad(outer_loss, net.params, step=1e-5)
    assert dc.gradient_rel_error(analytic, numeric) < 1e-2


def test_lbi_train_with_network_runs_and_tracks_weights():
    task, _ = blob_task(seed=6, n_train=12, n_val=6)
    net = ig.IgnoringNetwork(2, 4, seed=3)
    cfg = ig.LbiConfig(epochs=2, train_batch_size=6, val_batch_size=6, lr_a=0.05, seed=0)
    result = ig.lbi_train(task, cfg, ignoring_network=net)
    assert result.network is net
    a = result.final_weights()
    assert a.shape == (12,)
    assert np.all((a > 0) & (a < 1))


# --- AUC helper --------------------------------------------------------------


def test_detection_auc_perfect_and_random():
    a = np.array([0.9, 0.8, 0.1, 0.2])
    mask = np.array([False, False, True, True])
    assert ig.detection_auc(a, mask) == 1.0
    assert ig.detection_auc(1 - a, mask) == 0.0
    uniform = np.array([0.5, 0.5, 0.5, 0.5])
    assert ig.detection_auc(uniform, mask) == 0.5


def test_trace_csv_layout(tmp_path):
    task, y = blob_task(seed=7, n_train=6, n_val=4)
    cfg = ig.LbiConfig(epochs=2, train_batch_size=6, val_batch_size=4, seed=0)
    result = ig.lbi_train(task, cfg)
    path = tmp_path / "trace.csv"
    result.trace.write_csv(path, example_ids=np.arange(6), corrupted=np.zeros(6, dtype=bool))
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "epoch,example_id,a,loss,corrupted"
    assert len(lines) == 1 + 2 * 6
