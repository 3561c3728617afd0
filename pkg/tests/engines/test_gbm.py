import numpy as np
import pandas as pd
import pytest

from fc.reserving.engines import fit_layer, load_fit
from fc.reserving.engines.gbm import Hyperparameters, gbm_importance
from fc.reserving.exc import (
    ConfigurationError,
    ConvergenceError,
    DomainError,
    UndefinedError,
)
from tests.conftest import get_log

STUMP = {
    "trees": 1,
    "depth": 1,
    "shrinkage": 1.0,
    "bag_fraction": 1.0,
    "min_node_size": 1,
}


def fit_gbm(frame, response, family, covariates, seed=0, **config):
    return fit_layer(
        frame,
        response,
        family,
        "gbm",
        covariates,
        np.ones(len(frame)),
        config=config,
        seed=seed,
    )


@pytest.fixture
def binary_frame():
    rng = np.random.default_rng(42)
    x = rng.uniform(0, 10, size=300)
    p = 1 / (1 + np.exp(-(x - 5)))
    return pd.DataFrame({"x": x, "close": (rng.random(300) < p).astype(int)})


def test_stump_splits_between_groups():
    frame = pd.DataFrame(
        {"x": [0.0, 1.0, 2.0, 3.0], "size": [1.0, 1.0, 10.0, 10.0]}
    )
    fit = fit_gbm(frame, "size", "gamma", ["x"], **STUMP)
    assert len(fit.trees) == 1
    tree = fit.trees[0]
    assert tree.threshold[0] == 1.5
    assert tree.depth == 1
    assert fit.predict(frame) == pytest.approx([1.0, 1.0, 10.0, 10.0])
    assert fit.deviance_trace[-1] == pytest.approx(0.0, abs=1e-12)
    assert gbm_importance(fit) == {"x": 100.0}


def test_unseen_levels_follow_the_reference_level():
    frame = pd.DataFrame(
        {
            "coverage": ["a", "a", "b", "b", "c", "c"],
            "size": [1.0, 1.0, 1.0, 1.0, 10.0, 10.0],
        }
    )
    fit = fit_gbm(frame, "size", "gamma", ["coverage"], **STUMP)
    nodes = fit.to_dict()["trees"][0]
    assert nodes[0]["left_levels"] == ["a", "b"]
    new = pd.DataFrame({"coverage": ["a", "d", "c"]})
    assert fit.predict(new) == pytest.approx([1.0, 1.0, 10.0])
    assert "unseen-level levels=['d'] rows=1 term=coverage" in get_log()


def test_bernoulli_boosting_approaches_group_rates():
    frame = pd.DataFrame(
        {
            "group": ["a"] * 100 + ["b"] * 100,
            "close": [1] * 90 + [0] * 10 + [1] * 10 + [0] * 90,
        }
    )
    fit = fit_gbm(
        frame,
        "close",
        "bernoulli",
        ["group"],
        trees=100,
        depth=1,
        shrinkage=0.1,
        bag_fraction=1.0,
        min_node_size=5,
    )
    p = fit.predict(pd.DataFrame({"group": ["a", "b"]}))
    assert p == pytest.approx([0.9, 0.1], abs=0.01)
    assert fit.dispersion == 1.0


def test_training_deviance_never_increases(binary_frame):
    fit = fit_gbm(
        binary_frame,
        "close",
        "bernoulli",
        ["x"],
        trees=40,
        depth=2,
        shrinkage=0.3,
        bag_fraction=0.5,
        min_node_size=5,
    )
    trace = np.array(fit.deviance_trace)
    assert len(trace) == 41
    assert (np.diff(trace) <= 0).all()
    assert trace[-1] < trace[0]


def test_bagging_is_seeded(binary_frame):
    config = dict(trees=10, bag_fraction=0.5, min_node_size=5)

    def predictions(seed):
        fit = fit_layer(
            binary_frame,
            "close",
            "bernoulli",
            "gbm",
            ["x"],
            np.ones(len(binary_frame)),
            config=config,
            seed=seed,
        )
        return fit.predict(binary_frame)

    assert (predictions(1) == predictions(1)).all()
    assert not (predictions(1) == predictions(2)).all()


def test_serialized_ensemble_predicts_identically(binary_frame):
    frame = binary_frame.assign(
        band=np.where(binary_frame["x"] > 3, "high", "low")
    )
    fit = fit_gbm(
        frame, "close", "bernoulli", ["x", "band"], trees=15, min_node_size=5
    )
    again = load_fit(fit.to_dict())
    assert again.hyperparameters.to_dict() == fit.hyperparameters.to_dict()
    np.testing.assert_array_equal(again.predict(frame), fit.predict(frame))
    importance = gbm_importance(fit)
    assert sum(importance.values()) == pytest.approx(100.0)


def test_empty_ensemble_has_no_importance():
    frame = pd.DataFrame({"x": [0.0, 1.0], "size": [1.0, 3.0]})
    fit = fit_gbm(frame, "size", "gamma", ["x"], trees=0)
    assert fit.predict(frame) == pytest.approx([2.0, 2.0])
    with pytest.raises(UndefinedError):
        gbm_importance(fit)


def test_defaults_come_from_system_config():
    hyper = Hyperparameters()
    assert hyper.to_dict() == {
        "trees": 300,
        "depth": 2,
        "shrinkage": 0.05,
        "bag_fraction": 0.75,
        "min_node_size": 10,
    }


@pytest.mark.parametrize(
    "config",
    [
        {"depth": 0},
        {"shrinkage": 0.0},
        {"bag_fraction": 1.5},
        {"min_node_size": 0},
        {"trees": -1},
        {"leaves": 4},
    ],
)
def test_invalid_hyperparameters(config):
    with pytest.raises(ConfigurationError):
        Hyperparameters.from_dict(config)


def test_response_domain():
    frame = pd.DataFrame({"x": [0.0, 1.0], "size": [0.0, 3.0]})
    with pytest.raises(DomainError):
        fit_gbm(frame, "size", "gamma", ["x"])
    frame = pd.DataFrame({"x": [0.0, 1.0], "close": [1, 1]})
    with pytest.raises(ConvergenceError):
        fit_gbm(frame, "close", "bernoulli", ["x"])


def test_zero_trees_predict_the_weighted_baseline():
    frame = pd.DataFrame({"x": [0.0, 1.0, 2.0], "close": [1, 0, 0]})
    fit = fit_layer(
        frame,
        "close",
        "bernoulli",
        "gbm",
        ["x"],
        np.array([3.0, 1.0, 2.0]),
        config={"trees": 0},
    )
    # Weighted proportion 3 / 6.
    assert fit.predict(frame) == pytest.approx([0.5, 0.5, 0.5])
    sizes = pd.DataFrame({"x": [0.0, 1.0], "size": [2.0, 8.0]})
    fit = fit_gbm(sizes, "size", "gamma", ["x"], trees=0)
    new = pd.DataFrame({"x": [-3.0, 0.5, 40.0]})
    assert fit.predict(new) == pytest.approx([5.0, 5.0, 5.0])
