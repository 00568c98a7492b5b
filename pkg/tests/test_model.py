import numpy as np
import pytest

from cfmask.datasets import Dataset, make_madelon_like, normalize, split
from cfmask.masks import write_mask_csv
from cfmask.model import (DEFAULT_GAMMA_GRID, CfmModel, NonFiniteLossError, TrainingConfig, build_model,
                          complementary_loss, fit_method, select_gamma, train)
from cfmask.nn import LOG_EPS, one_hot
from cfmask.tensor import Rng, ShapeError


def logistic_oracle(X, y, iters=30):
    """Newton-Raphson logistic regression, returns training accuracy."""
    A = np.hstack([X, np.ones((X.shape[0], 1))])
    t = (y == 2).astype(float)
    w = np.zeros(A.shape[1])
    for _ in range(iters):
        p = 1 / (1 + np.exp(-np.clip(A @ w, -500, 500)))
        H = A.T @ (A * (p * (1 - p))[:, None]) + 1e-6 * np.eye(A.shape[1])
        w -= np.linalg.solve(H, A.T @ (p - t))
    return np.mean(((A @ w) > 0) == (t > 0.5))


@pytest.fixture(scope="module")
def toy():
    ds = make_madelon_like(500, 2, 0, 8, class_sep=3.0, seed=1)
    return normalize(ds)[0]


def small_data(seed=0, n=120, d=8):
    ds = make_madelon_like(n, 2, 2, d - 4, class_sep=3.0, seed=seed)
    return normalize(ds)[0]


# -- forward ----------------------------------------------------------------

def test_zero_input_zero_bias_uniform():
    model = CfmModel(6, 4, seed=0).eval()
    out = model.forward_dual(np.zeros((3, 6)))
    np.testing.assert_allclose(out.pred_main, 0.25, rtol=1e-15)
    np.testing.assert_allclose(out.pred_comp, 0.25, rtol=1e-15)


def test_eval_forward_deterministic_and_normalised():
    model = CfmModel(6, 3, seed=1).eval()
    x = Rng(2).normal(size=(5, 6))
    a, b = model.forward_dual(x), model.forward_dual(x)
    assert a.pred_main.tobytes() == b.pred_main.tobytes()
    assert a.pred_comp.tobytes() == b.pred_comp.tobytes()
    for p in (a.pred_main, a.pred_comp):
        np.testing.assert_allclose(p.sum(axis=1), 1.0, rtol=0, atol=1e-12)
    assert not model.training


def test_train_mode_shares_dropout_mask():
    model = CfmModel(6, 3, seed=1).train()
    out = model.forward_dual(Rng(3).normal(size=(4, 6)), rng=Rng(4))
    tc_main = out.cache[3][0]
    tc_comp = out.cache[4][0]
    assert tc_main[1] is tc_comp[1]
    assert np.any(tc_main[1] == 0)


def test_forward_shape_error():
    with pytest.raises(ShapeError):
        CfmModel(6, 3).eval().forward_dual(np.zeros((2, 5)))


def test_heads_independent_trunk_shared():
    model = CfmModel(6, 3, seed=2).eval()
    x = Rng(5).normal(size=(4, 6))
    base = model.forward_dual(x)
    model.head_comp.W += 0.5
    moved = model.forward_dual(x)
    assert moved.pred_main.tobytes() == base.pred_main.tobytes()
    assert np.any(moved.pred_comp != base.pred_comp)
    model.trunk_layers[0].W[0, 0] += 1e-3
    moved = model.forward_dual(x)
    assert np.any(moved.pred_main != base.pred_main)
    assert np.any(moved.pred_comp != base.pred_comp)


# -- losses -------------------------------------------------------------------

@pytest.mark.parametrize("c", [2, 10, 26])
def test_complementary_loss_uniform_is_log_c(c):
    loss, _, labels = complementary_loss(np.full((7, c), 1 / c), c, Rng(c))
    assert abs(loss - np.log(c)) < 1e-9
    assert labels.min() >= 1 and labels.max() <= c


def test_complementary_loss_needs_two_classes():
    with pytest.raises(ValueError):
        complementary_loss(np.ones((2, 1)), 1, Rng(0))


def test_complementary_loss_one_hot_two_classes():
    # half the random labels hit the zero entry, which is clamped at LOG_EPS
    rng = Rng(6)
    pred = np.array([[1.0, 0.0]])
    draws = [complementary_loss(pred, 2, rng)[0] for _ in range(10_000)]
    expected = 0.5 * -np.log(LOG_EPS)  # 13.8155...
    assert abs(np.mean(draws) - expected) / expected < 0.02


def test_complementary_loss_expectation():
    rng = Rng(7)
    pred = Rng(8).random((1, 5)) + 0.05
    pred /= pred.sum()
    draws = [complementary_loss(pred, 5, rng)[0] for _ in range(10_000)]
    against_uniform = -np.mean(np.log(pred))
    assert abs(np.mean(draws) - against_uniform) / against_uniform < 0.01


def test_total_loss_uniform_both_paths():
    model = CfmModel(5, 4, seed=0).eval()
    for head in (model.head_main, model.head_comp):
        head.W[...] = 0
    x = Rng(1).normal(size=(6, 5))
    parts, _ = model.loss_and_grads(x, np.arange(6) % 4 + 1, gamma=1.0, comp_labels=np.ones(6, int))
    assert abs(parts.total - 2 * np.log(4)) < 1e-12


def test_gamma_zero_objective_equals_baseline():
    x = Rng(2).normal(size=(6, 5))
    y = np.arange(6) % 3 + 1
    cfm = CfmModel(5, 3, seed=3).eval()
    fm = CfmModel(5, 3, complementary=False, seed=3).eval()
    a, ga = cfm.loss_and_grads(x, y, gamma=0.0, comp_labels=np.ones(6, int))
    b, gb = fm.loss_and_grads(x, y)
    assert a.total == b.total
    for k, v in gb.items():
        assert v.tobytes() == ga[k].tobytes()
    assert not ga["head_comp.W"].any()


def test_full_model_gradients():
    from cfmask import gradcheck
    inst = gradcheck.cfm_instance(n_features=5, n_classes=3, batch=3, seed=2, mask="vector", lam=0.05)
    assert gradcheck.check_model(inst).max_rel_error < 1e-5


# -- training -------------------------------------------------------------------

def test_epochs_zero_leaves_parameters(toy):
    model = CfmModel(toy.n_features, 2, seed=0)
    before = {k: v.copy() for k, v in model.params().items()}
    report = train(model, toy, TrainingConfig(epochs=0))
    assert report.epochs == []
    for k, v in model.params().items():
        assert v.tobytes() == before[k].tobytes()
    assert not model.training


def test_separable_toy_learns(toy):
    assert logistic_oracle(toy.X, toy.y) >= 0.98
    cfg = TrainingConfig(gamma=1.0, epochs=50, seed=0)
    model = build_model("cfm", toy.n_features, 2, cfg)
    report = train(model, toy, cfg)
    assert model.accuracy(toy.X, toy.y) >= 0.95
    total = np.array([e.total_loss for e in report.epochs])
    main = np.array([e.main_loss for e in report.epochs])
    comp = np.array([e.comp_loss for e in report.epochs])
    assert np.all(np.isfinite(total))

    def smooth(v):
        return np.convolve(v, np.ones(10) / 10, mode="valid")

    # minibatch and dropout noise allow tiny rises; the random-label term
    # can move a 10-epoch average by at most gamma * range / 10 on its own
    noise = 1e-3
    assert np.all(np.diff(smooth(main)) <= noise)
    assert np.all(np.diff(smooth(total)) <= noise + cfg.gamma * np.ptp(comp) / 10)
    assert smooth(total)[-1] < smooth(total)[0]
    assert len(report.epochs) == 50


def test_training_is_bit_reproducible():
    data = small_data()
    cfg = TrainingConfig(gamma=0.5, epochs=3, seed=9)
    runs = []
    for _ in range(2):
        model = build_model("cfm", data.n_features, 2, cfg)
        train(model, data, cfg)
        runs.append(model.params())
    for k in runs[0]:
        assert runs[0][k].tobytes() == runs[1][k].tobytes()


def test_gamma_zero_matches_fm_bit_for_bit(tmp_path):
    data = small_data(seed=4)
    cfm = fit_method("cfm", data, TrainingConfig(gamma=0.0, epochs=4, seed=5))
    fm = fit_method("fm", data, TrainingConfig(gamma=0.0, epochs=4, seed=5))
    write_mask_csv(tmp_path / "a.csv", cfm.masks)
    write_mask_csv(tmp_path / "b.csv", fm.masks)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    pc, pf = cfm.model.params(), fm.model.params()
    for k, v in pf.items():
        assert v.tobytes() == pc[k].tobytes(), k


def test_complementary_path_changes_the_mask():
    data = small_data(seed=4)
    a = fit_method("cfm", data, TrainingConfig(gamma=1.0, epochs=4, seed=5))
    b = fit_method("fm", data, TrainingConfig(epochs=4, seed=5))
    assert np.any(a.masks.m != b.masks.m)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts():
    data = small_data()
    X = data.X.copy()
    X[3, 0] = np.inf
    bad = data.with_X(X)
    with pytest.raises(NonFiniteLossError, match="epoch 0"):
        train(CfmModel(data.n_features, 2), bad, TrainingConfig(epochs=1))


def test_dfs_variant_trains_and_sparsity_shrinks_logits():
    data = small_data(seed=2)
    plain = fit_method("dfs-cfm", data, TrainingConfig(gamma=1.0, lam=0.0, epochs=5, seed=1))
    sparse = fit_method("dfs-cfm", data, TrainingConfig(gamma=1.0, lam=0.05, epochs=5, seed=1))
    assert np.abs(sparse.model.mask_net.logits).sum() < np.abs(plain.model.mask_net.logits).sum()
    assert abs(plain.masks.m.sum() - 1) < 1e-12


def test_config_validation():
    with pytest.raises(ValueError):
        TrainingConfig(gamma=-1)
    with pytest.raises(ValueError):
        TrainingConfig(validation_fraction=1.0)
    assert TrainingConfig().gamma_grid == DEFAULT_GAMMA_GRID == (0.001, 0.01, 0.1, 1.0, 10.0, 100.0)
    assert TrainingConfig().validation_fraction == 0.1


# -- gamma search ------------------------------------------------------------------

def test_select_gamma_single_value():
    data = small_data()
    res = select_gamma(data, TrainingConfig(gamma=None, gamma_grid=(0.3,), epochs=1))
    assert res.best_gamma == 0.3 and list(res.accuracies) == [0.3]


def test_select_gamma_is_argmax_with_small_tie_break():
    data = small_data(seed=3, n=200)
    res = select_gamma(data, TrainingConfig(gamma=None, epochs=2, seed=1))
    assert set(res.accuracies) == set(DEFAULT_GAMMA_GRID)
    best = max(res.accuracies.values())
    assert res.best_gamma == min(g for g, a in res.accuracies.items() if a == best)


def test_select_gamma_parallel_matches_serial():
    data = small_data(seed=3, n=200)
    cfg = TrainingConfig(gamma=None, epochs=1, seed=2, gamma_grid=(0.01, 1.0, 100.0))
    assert select_gamma(data, cfg, workers=1).accuracies == select_gamma(data, cfg, workers=3).accuracies


def test_validation_split_disjoint_and_seeded():
    a, b = split(200, (0.9, 0.1), 4), split(200, (0.9, 0.1), 4)
    assert np.array_equal(a.train, b.train)
    assert len(a.train) == 180 and len(a.test) == 20
    assert not set(a.train) & set(a.test)


def test_fit_method_grid_retrains_on_all_rows():
    data = small_data(seed=1, n=150)
    fit = fit_method("cfm", data, TrainingConfig(gamma=None, gamma_grid=(0.01, 10.0), epochs=2, seed=0))
    assert fit.search is not None and fit.gamma == fit.search.best_gamma
    assert fit.report.config["gamma"] == fit.gamma


# -- persistence ---------------------------------------------------------------------

@pytest.mark.parametrize("method", ["cfm", "fm", "dfs-cfm"])
def test_checkpoint_round_trip(tmp_path, method):
    data = small_data()
    fit = fit_method(method, data, TrainingConfig(gamma=1.0, epochs=2, seed=3))
    path = tmp_path / "ckpt.json"
    fit.model.save(path)
    loaded = CfmModel.load(path)
    assert loaded.predict_proba(data.X).tobytes() == fit.model.predict_proba(data.X).tobytes()
    assert loaded.architecture() == fit.model.architecture()


def test_labels_are_one_based():
    data = small_data()
    model = fit_method("fm", data, TrainingConfig(epochs=1)).model
    assert set(np.unique(model.predict(data.X))) <= {1, 2}
    with pytest.raises(ValueError):
        CfmModel(4, 1)
    assert one_hot([2], 2).tolist() == [[0.0, 1.0]]
    assert isinstance(data, Dataset)
