import numpy as np
import pytest

from conftest import exhaustive_best_split
from opcomm.demand import DemandSeries
from opcomm.features import FeatureRow
from opcomm.gbt import (
    ModelFormatError,
    TrainConfig,
    Tree,
    TreeEnsemble,
    compute_bin_boundaries,
    fit,
    load_model,
    load_model_file,
    predict,
    save_model,
    save_model_file,
    seasonal_naive_forecast,
)


def rows_from(X: np.ndarray, y: np.ndarray) -> list[FeatureRow]:
    return [FeatureRow(t, X[t], float(y[t])) for t in range(len(y))]


def random_problem(rng, n, d):
    X = rng.uniform(0, 10, size=(n, d))
    y = X[:, 0] * 3.0 + np.sin(X[:, min(1, d - 1)]) * 5.0 + rng.normal(0, 1, n)
    return X, np.abs(y)


class TestTrainConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(n_rounds=0)
        with pytest.raises(ValueError):
            TrainConfig(max_leaves=1)
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=0.0)
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=1.5)
        with pytest.raises(ValueError):
            TrainConfig(l2_lambda=-0.1)


class TestTreeApply:
    def test_hand_built_routing(self):
        # root splits feature 0 at 5.0; left child is a leaf, right child
        # splits feature 1 at 2.0
        tree = Tree(
            feature=[0, -1, 1, -1, -1],
            threshold=[5.0, 0.0, 2.0, 0.0, 0.0],
            left=[1, -1, 3, -1, -1],
            right=[2, -1, 4, -1, -1],
            value=[0.0, 10.0, 0.0, 20.0, 30.0],
        )
        X = np.array([[4.0, 9.0], [5.0, 9.0], [6.0, 2.0], [6.0, 2.5]])
        assert tree.apply(X).tolist() == [10.0, 10.0, 20.0, 30.0]
        assert tree.root_split() == (0, 5.0)

    def test_single_leaf(self):
        tree = Tree([-1], [0.0], [-1], [-1], [7.5])
        assert tree.apply(np.zeros((3, 2))).tolist() == [7.5, 7.5, 7.5]
        assert tree.root_split() is None

    def test_nonfinite_leaf_rejected(self):
        with pytest.raises(ValueError):
            Tree([-1], [0.0], [-1], [-1], [np.nan])


class TestBinBoundaries:
    def test_candidates_are_data_values_below_max(self):
        rng = np.random.default_rng(0)
        X = rng.uniform(0, 1, size=(50, 2))
        boundaries = compute_bin_boundaries(X, 16)
        for f, cand in enumerate(boundaries):
            col = X[:, f]
            assert np.all(np.isin(cand, col))
            assert np.all(cand < col.max())
            assert np.array_equal(cand, np.unique(cand))

    def test_constant_feature_has_no_candidates(self):
        X = np.column_stack([np.ones(20), np.arange(20.0)])
        boundaries = compute_bin_boundaries(X, 8)
        assert len(boundaries[0]) == 0
        assert len(boundaries[1]) > 0


class TestSplitSearch:
    def test_every_round_root_matches_bruteforce(self):
        """The histogram search must pick the same (feature, threshold) as a
        direct search over all candidates, every boosting round."""
        rng = np.random.default_rng(77)
        for case in range(6):
            n = int(rng.integers(40, 140))
            d = int(rng.integers(1, 4))
            X, y = random_problem(rng, n, d)
            cfg = TrainConfig(n_rounds=8, max_leaves=4, min_samples_leaf=5, n_bins=16)
            model = fit(rows_from(X, y), cfg)
            boundaries = compute_bin_boundaries(X, cfg.n_bins)
            pred = np.full(n, model.base_score)
            for tree in model.trees:
                residuals = y - pred
                want = exhaustive_best_split(
                    X, residuals, np.arange(n), boundaries,
                    cfg.min_samples_leaf, cfg.l2_lambda,
                )
                got = tree.root_split()
                if want is None:
                    assert got is None
                else:
                    _, f, j = want
                    assert got == (f, float(boundaries[f][j])), f"case {case}"
                pred += cfg.learning_rate * tree.apply(X)

    def test_min_samples_leaf_caps_tree_size(self):
        rng = np.random.default_rng(1)
        X, y = random_problem(rng, 10, 2)
        cfg = TrainConfig(n_rounds=3, max_leaves=8, min_samples_leaf=5)
        model = fit(rows_from(X, y), cfg)
        for tree in model.trees:
            # only a 5/5 root split is feasible with 10 samples
            assert tree.n_nodes <= 3


class TestFit:
    def test_train_mse_monotone_nonincreasing(self):
        rng = np.random.default_rng(42)
        X, y = random_problem(rng, 150, 3)
        model = fit(rows_from(X, y), TrainConfig(n_rounds=60))
        mse = np.asarray(model.train_mse)
        assert len(mse) > 0
        # allow last-ulp wiggle only
        assert np.all(np.diff(mse) <= 1e-12 * np.maximum(mse[:-1], 1.0))

    def test_constant_target_stops_immediately(self):
        X = np.random.default_rng(2).uniform(0, 1, size=(30, 2))
        y = np.full(30, 42.0)
        model = fit(rows_from(X, y), TrainConfig())
        assert model.trees == []
        assert np.all(model.predict_matrix(X) == 42.0)

    def test_fit_learns_structure(self):
        rng = np.random.default_rng(9)
        X, y = random_problem(rng, 200, 3)
        model = fit(rows_from(X, y), TrainConfig(n_rounds=100))
        pred = model.predict_matrix(X)
        assert np.mean((y - pred) ** 2) < 0.25 * np.var(y)

    def test_deterministic(self):
        rng = np.random.default_rng(4)
        X, y = random_problem(rng, 80, 2)
        a = save_model(fit(rows_from(X, y), TrainConfig(n_rounds=20)))
        b = save_model(fit(rows_from(X, y), TrainConfig(n_rounds=20)))
        assert a == b

    def test_predict_validates_width(self):
        rng = np.random.default_rng(5)
        X, y = random_problem(rng, 50, 2)
        model = fit(rows_from(X, y), TrainConfig(n_rounds=5))
        with pytest.raises(ValueError):
            model.predict_matrix(np.zeros((4, 3)))
        with pytest.raises(ValueError):
            predict(model, [1.0, 2.0, 3.0])


class TestSeasonalNaive:
    def test_returns_week_old_value(self):
        series = DemandSeries("S001", 0, np.arange(20.0))
        assert seasonal_naive_forecast(series, 7) == 0.0
        assert seasonal_naive_forecast(series, 19) == 12.0

    def test_bounds_checked(self):
        series = DemandSeries("S001", 0, np.arange(10.0))
        with pytest.raises(ValueError):
            seasonal_naive_forecast(series, 6)
        with pytest.raises(ValueError):
            seasonal_naive_forecast(series, 10)


class TestPersistence:
    def make_model(self):
        rng = np.random.default_rng(6)
        X, y = random_problem(rng, 100, 3)
        return fit(rows_from(X, y), TrainConfig(n_rounds=15)), X

    def test_round_trip_predictions_bit_exact(self):
        model, X = self.make_model()
        loaded = load_model(save_model(model, meta={"config_hash": "abc", "seed": "7"}))
        assert np.array_equal(loaded.predict_matrix(X), model.predict_matrix(X))
        assert loaded.meta == {"config_hash": "abc", "seed": "7"}
        assert loaded.schema_fingerprint == model.schema_fingerprint

    def test_document_stable_under_reserialization(self):
        model, _ = self.make_model()
        doc = save_model(model, meta={"config_hash": "abc"})
        assert save_model(load_model(doc)) == doc

    def test_file_round_trip(self, tmp_path):
        model, X = self.make_model()
        path = tmp_path / "model.txt"
        save_model_file(model, path)
        loaded = load_model_file(path)
        assert np.array_equal(loaded.predict_matrix(X), model.predict_matrix(X))

    def test_wrong_tag_rejected(self):
        with pytest.raises(ModelFormatError):
            load_model("other-format v1\nend\n")

    def test_wrong_version_rejected(self):
        with pytest.raises(ModelFormatError):
            load_model("opcomm-gbt v2\nend\n")

    def test_truncation_reported_with_line(self):
        model, _ = self.make_model()
        doc = save_model(model)
        truncated = "\n".join(doc.splitlines()[:10]) + "\n"
        with pytest.raises(ModelFormatError, match="line"):
            load_model(truncated)

    def test_corrupt_node_line_rejected(self):
        model, _ = self.make_model()
        doc = save_model(model).replace("node leaf ", "node leaf x", 1)
        with pytest.raises(ModelFormatError):
            load_model(doc)
