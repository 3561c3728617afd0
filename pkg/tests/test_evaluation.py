import json
import math
import os.path

import numpy as np
import pandas as pd
import pytest

from fc.reserving.evaluation import (
    EvaluationConfig,
    EvaluationRun,
    ModelConfig,
    actual_development,
    average_importance,
    exclude_claims,
    forecast,
    moving_window_eval,
    percentage_error,
    predict_reserve,
    summarize,
)
from fc.reserving.exc import (
    ConfigurationError,
    SummaryError,
    UndefinedError,
)
from fc.reserving.generator import GeneratorConfig, generate
from fc.reserving.hierarchical import LayerSpec
from tests.conftest import FIXTURES, get_log


@pytest.fixture(scope="module")
def eval_portfolio():
    """Six calendar years of claims settling within three years."""
    doc = json.loads((FIXTURES / "generator.json").read_text())
    doc["window"] = {"start_year": 2011, "tau": 6, "d": 3}
    doc["claims_per_year"] = [200] * 6
    doc["settlement"]["base"] = [0.4, 0.5, 1.0]
    doc["payment"]["base"] = [0.7, 0.4, 0.3]
    doc["size"]["base"] = [1000, 800, 600]
    return generate(GeneratorConfig.from_dict(doc))


def model_config(**kw):
    doc = json.loads((FIXTURES / "model.json").read_text())
    doc.update(kw)
    return ModelConfig.from_dict(doc)


def test_percentage_error():
    assert percentage_error(110, 100) == pytest.approx(10.0)
    assert percentage_error(50, 100) == pytest.approx(-50.0)
    assert percentage_error(0, 20) == pytest.approx(-100.0)


def test_percentage_error_cap():
    assert percentage_error(1000, 100, cap=200) == 200.0
    assert percentage_error(0, 100, cap=50) == -50.0
    assert percentage_error(120, 100, cap=50) == pytest.approx(20.0)


@pytest.mark.parametrize("actual", [0, 0.0, math.nan, math.inf])
def test_percentage_error_undefined(actual):
    with pytest.raises(UndefinedError):
        percentage_error(10, actual)


def test_actual_development(small_portfolio):
    # Reported by year 1: A and B. A pays nothing in year 2.
    assert actual_development(small_portfolio, 1, 1) == 0.0
    # A pays 50 in calendar year 3.
    assert actual_development(small_portfolio, 1, 2) == 50.0
    # A pays 50 and C 30 in calendar year 3. D is reported too late.
    assert actual_development(small_portfolio, 2, 1) == 80.0


def test_model_config_defaults():
    config = ModelConfig("base")
    assert config.kind == "hrm"
    assert [spec.response for spec in config.layers] == [
        "close",
        "payment",
        "size",
    ]
    assert config.weighting == "development"
    assert config.level == 0.9
    assert ModelConfig("cl", kind="chainladder").layers == ()


def test_model_config_from_dict():
    config = model_config(paths=200, level=0.8)
    assert config.name == "hrm-glm"
    assert config.paths == 200
    assert config.layers[0].covariates == ("dev_year", "coverage")
    doc = config.to_dict()
    assert doc["paths"] == 200
    again = ModelConfig.from_dict(doc)
    assert again.layers == config.layers
    assert ModelConfig.from_dict({"kind": "crm"}).to_dict() == {
        "name": "crm",
        "kind": "crm",
        "level": 0.9,
    }


def test_model_config_from_covariates():
    config = ModelConfig.from_dict(
        {"name": "cov", "covariates": ["coverage"]}
    )
    for spec in config.layers:
        assert "coverage" in spec.covariates


@pytest.mark.parametrize(
    "kw",
    [
        {"kind": "bootstrap"},
        {"weighting": "recent"},
        {"paths": -1},
        {"level": 0.0},
        {"level": 1.0},
    ],
)
def test_model_config_invalid(kw):
    with pytest.raises(ConfigurationError):
        ModelConfig("broken", **kw)


def test_model_config_invalid_numbers():
    with pytest.raises(ConfigurationError):
        ModelConfig.from_dict({"kind": "dcl", "paths": "many"})


def test_evaluation_config():
    config = EvaluationConfig.from_dict(
        {
            "dates": ["2013", 2014],
            "horizon": 2,
            "cap": 500,
            "models": [{"kind": "chainladder"}, {"kind": "dcl"}],
        }
    )
    assert config.dates == (2013, 2014)
    assert config.horizon == 2
    assert config.cap == 500.0
    assert [m.kind for m in config.models] == ["chainladder", "dcl"]
    default = EvaluationConfig.from_dict({"dates": [2013]})
    assert default.horizon == 1
    assert default.cap is None
    assert [m.kind for m in default.models] == ["hrm"]


@pytest.mark.parametrize("doc", [{}, [2013], {"horizon": 1}])
def test_evaluation_config_needs_dates(doc):
    with pytest.raises(ConfigurationError):
        EvaluationConfig.from_dict(doc)


def test_predict_chainladder_and_dcl_agree(eval_portfolio):
    portfolio = eval_portfolio.censor(4)
    cl = predict_reserve(ModelConfig("cl", kind="chainladder"), portfolio, 1)
    dcl = predict_reserve(ModelConfig("dcl", kind="dcl"), portfolio, 1)
    assert cl[0] > 0
    assert dcl[0] == pytest.approx(cl[0], rel=1e-4)
    # Mack bounds around the chain ladder, none for DCL.
    assert cl[1] < cl[0] < cl[2]
    assert math.isnan(dcl[1]) and math.isnan(dcl[2])


def test_predict_hrm_with_bounds(eval_portfolio):
    portfolio = eval_portfolio.censor(4)
    predicted, lower, upper = predict_reserve(
        model_config(paths=300), portfolio, 1, seed=3
    )
    assert lower < predicted < upper
    expected, lower, upper = predict_reserve(
        model_config(), portfolio, 1, seed=3
    )
    assert expected == predicted
    assert math.isnan(lower) and math.isnan(upper)


@pytest.mark.parametrize(
    "dates, horizon",
    [
        ([2016], 1),
        ([2015], 2),
        ([2010], 1),
        ([], 1),
        ([2013, 2013], 1),
        ([2013], 0),
    ],
)
def test_moving_window_rejects_dates(eval_portfolio, dates, horizon):
    with pytest.raises(ConfigurationError):
        moving_window_eval(
            eval_portfolio,
            dates,
            [ModelConfig("cl", kind="chainladder")],
            horizon,
        )


@pytest.fixture(scope="module")
def evaluation_run(eval_portfolio):
    models = [
        model_config(),
        ModelConfig("chainladder", kind="chainladder"),
        ModelConfig("dcl", kind="dcl"),
        ModelConfig("crm", kind="crm"),
    ]
    return moving_window_eval(
        eval_portfolio, [2014, 2013, 2015], models, horizon=1, seed=5
    )


def test_moving_window_eval(evaluation_run, eval_portfolio):
    run = evaluation_run
    assert isinstance(run, EvaluationRun)
    assert len(run) == 12
    assert run.dates == [2013, 2014, 2015]
    assert run.models == ["hrm-glm", "chainladder", "dcl", "crm"]
    assert repr(run) == "<EvaluationRun dates=3 models=4>"
    results = run.results
    assert list(results.columns) == [
        "date",
        "model",
        "predicted",
        "actual",
        "pe",
        "lower",
        "upper",
    ]
    for date, rows in results.groupby("date"):
        cutoff = eval_portfolio.window.index(date)
        actual = actual_development(eval_portfolio, cutoff, 1)
        assert (rows["actual"] == actual).all()
        assert actual > 0


def test_moving_window_predictions_are_close(evaluation_run):
    results = evaluation_run.results
    assert results["pe"].notna().all()
    assert (results["pe"].abs() < 30).all()
    cl = evaluation_run.series("chainladder")
    dcl = evaluation_run.series("dcl")
    assert list(cl.index) == [2013, 2014, 2015]
    assert dcl.to_numpy() == pytest.approx(cl.to_numpy(), rel=1e-4)


def test_moving_window_is_deterministic(evaluation_run, eval_portfolio):
    again = moving_window_eval(
        eval_portfolio,
        [2014],
        [model_config(), ModelConfig("crm", kind="crm")],
        horizon=1,
        seed=5,
        threads=2,
    )
    first = evaluation_run.results
    first = first[first["date"] == 2014]
    first = first[first["model"].isin(["hrm-glm", "crm"])]
    assert again.results["predicted"].to_numpy() == pytest.approx(
        first["predicted"].to_numpy(), rel=1e-9
    )


def test_moving_window_horizon_two(eval_portfolio):
    run = moving_window_eval(
        eval_portfolio,
        [2013, 2014],
        [ModelConfig("chainladder", kind="chainladder")],
        horizon=2,
        cap=100,
    )
    assert run.horizon == 2
    assert (run.results["pe"].abs() <= 100).all()
    actual = actual_development(eval_portfolio, 3, 2)
    assert run.results.set_index("date").loc[2013, "actual"] == actual
    assert "evaluate-date" in get_log()


def test_moving_window_selects_on_first_date(eval_portfolio):
    close = LayerSpec(
        "close",
        1,
        "close",
        "bernoulli",
        covariates=("dev_year",),
        candidates=("coverage",),
        filter={"open": 1},
    )
    payment = LayerSpec(
        "payment",
        2,
        "payment",
        "bernoulli",
        covariates=("dev_year", "close"),
        filter={"open": 1},
    )
    size = LayerSpec(
        "size",
        3,
        "size",
        "gamma",
        covariates=("dev_year",),
        filter={"payment": 1},
    )
    config = ModelConfig("selected", layers=(close, payment, size))
    run = moving_window_eval(
        eval_portfolio, [2013, 2014], [config], horizon=1, seed=1
    )
    assert len(run) == 2
    log = get_log()
    assert "evaluation-selection model=selected" in log
    assert log.count("evaluation-selection") == 1


def test_uniform_weighting(eval_portfolio):
    config = ModelConfig("uniform", weighting="uniform")
    run = moving_window_eval(eval_portfolio, [2014], [config], horizon=1)
    assert np.isfinite(run.results["predicted"]).all()


def test_summarize_sequence():
    summary = summarize([10.0, -20.0, math.nan])
    assert summary == {
        "model": {
            "mean_pe": pytest.approx(-5.0),
            "mean_ape": pytest.approx(15.0),
            "entries": 2,
            "excluded": 1,
        }
    }


def test_summarize_frame_per_model():
    frame = pd.DataFrame(
        {
            "model": ["a", "b", "a", "b"],
            "pe": [4.0, math.nan, -2.0, math.nan],
        }
    )
    summary = summarize(frame)
    assert list(summary) == ["a", "b"]
    assert summary["a"]["mean_pe"] == pytest.approx(1.0)
    assert summary["a"]["mean_ape"] == pytest.approx(3.0)
    assert summary["b"]["entries"] == 0
    assert summary["b"]["excluded"] == 2
    assert math.isnan(summary["b"]["mean_pe"])


@pytest.mark.parametrize("pe", [[], [math.nan, math.nan]])
def test_summarize_undefined(pe):
    with pytest.raises(SummaryError):
        summarize(pe)


def test_run_summary_and_write(evaluation_run, tmp_path):
    summary = evaluation_run.summary()
    assert set(summary) == {"hrm-glm", "chainladder", "dcl", "crm"}
    for entry in summary.values():
        assert entry["entries"] == 3
        assert entry["mean_ape"] >= abs(entry["mean_pe"])
    results, written = evaluation_run.write(str(tmp_path))
    frame = pd.read_csv(results)
    assert len(frame) == 12
    assert frame["model"].tolist() == evaluation_run.results["model"].tolist()
    with open(written) as f:
        doc = json.load(f)
    assert doc["horizon"] == 1
    assert doc["cap"] is None
    assert doc["dates"] == [2013, 2014, 2015]
    assert doc["models"]["crm"]["entries"] == 3


@pytest.mark.slow
def test_well_specified_model_is_unbiased():
    doc = json.loads((FIXTURES / "generator.json").read_text())
    doc["window"] = {"start_year": 2011, "tau": 6, "d": 3}
    doc["claims_per_year"] = [833, 833, 833, 833, 834, 834]
    doc["settlement"]["base"] = [0.4, 0.5, 1.0]
    doc["payment"]["base"] = [0.7, 0.4, 0.3]
    doc["size"]["base"] = [1000, 800, 600]
    errors = []
    for seed in range(20):
        doc["seed"] = seed
        portfolio = generate(GeneratorConfig.from_dict(doc))
        assert len(portfolio.claims) == 5000
        run = moving_window_eval(
            portfolio, [2013, 2014], [model_config()], horizon=2, seed=seed
        )
        errors.extend(run.results["pe"])
    assert abs(np.mean(errors)) < 5.0


def gbm_config(**kw):
    doc = {
        "name": "gbm",
        "engine": "gbm",
        "covariates": ["dev_year"],
        "engine_configs": {"gbm": {"trees": 20, "depth": 2}},
    }
    doc.update(kw)
    return ModelConfig.from_dict(doc)


def test_model_config_segments_and_tuning():
    config = gbm_config(segment_by="coverage", tuning={"shrinkage": [0.1]})
    doc = config.to_dict()
    assert doc["segment_by"] == "coverage"
    assert doc["tuning"] == {"shrinkage": [0.1]}
    again = ModelConfig.from_dict(doc)
    assert again.segment_by == "coverage"
    assert again.tuning == config.tuning
    assert "segment_by" not in ModelConfig("plain").to_dict()


@pytest.mark.parametrize(
    "doc",
    [
        {"name": "glm", "tuning": {"trees": [10]}},
        {"name": "cl", "kind": "chainladder", "tuning": {"trees": [10]}},
        {"name": "gbm", "engine": "gbm", "tuning": {"trees": [-1]}},
        {"name": "gbm", "engine": "gbm", "tuning": {"leaves": [3]}},
    ],
)
def test_invalid_tuning(doc):
    with pytest.raises(ConfigurationError):
        ModelConfig.from_dict(doc)


def test_evaluation_config_exclude():
    config = EvaluationConfig.from_dict(
        {"dates": [2013], "exclude": {"coverage": "contents"}}
    )
    assert config.exclude == {"coverage": ["contents"]}
    assert EvaluationConfig.from_dict({"dates": [2013]}).exclude == {}
    with pytest.raises(ConfigurationError):
        EvaluationConfig.from_dict({"dates": [2013], "exclude": ["x"]})


def test_exclude_claims(small_portfolio):
    kept = exclude_claims(small_portfolio, {"coverage": ["contents"]})
    assert kept.claims.index.tolist() == ["A", "C"]
    assert set(kept.records["claim_id"]) == {"A", "C"}
    assert exclude_claims(small_portfolio, {}) is small_portfolio
    assert "evaluation-exclude claims=2" in get_log()


def test_segmented_reserve_adds_the_segment_reserves(eval_portfolio):
    portfolio = eval_portfolio.censor(4)
    plain = ModelConfig("cl", kind="chainladder")
    expected = 0.0
    for level in ["contents", "home"]:
        keep = portfolio.covariate_in("coverage", [level])
        expected += predict_reserve(plain, portfolio.subset(keep), 1)[0]
    segmented = ModelConfig("cl", kind="chainladder", segment_by="coverage")
    predicted, lower, upper = predict_reserve(segmented, portfolio, 1)
    assert predicted == pytest.approx(expected, rel=1e-12)
    # Mack bounds do not add up over segments.
    assert math.isnan(lower) and math.isnan(upper)


def test_segmented_bounds_come_from_summed_paths(eval_portfolio):
    portfolio = eval_portfolio.censor(4)
    config = ModelConfig.from_dict(
        {
            "name": "seg",
            "covariates": ["dev_year"],
            "paths": 200,
            "segment_by": "coverage",
        }
    )
    prediction = forecast(config, portfolio, 1, seed=2)
    assert len(prediction.totals) == 200
    assert prediction.lower < prediction.predicted < prediction.upper
    upper = np.quantile(prediction.totals, 0.95, method="inverted_cdf")
    assert prediction.upper == upper


def test_unknown_segment_covariate(eval_portfolio):
    config = ModelConfig("cl", kind="chainladder", segment_by="region")
    with pytest.raises(ConfigurationError):
        predict_reserve(config, eval_portfolio.censor(4), 1)


def test_moving_window_leaves_excluded_claims_out(eval_portfolio):
    models = [ModelConfig("cl", kind="chainladder")]
    run = moving_window_eval(
        eval_portfolio,
        [2013, 2014],
        models,
        horizon=1,
        exclude={"coverage": ["contents"]},
    )
    home = eval_portfolio.subset(
        eval_portfolio.covariate_in("coverage", ["home"])
    )
    expected = moving_window_eval(home, [2013, 2014], models, horizon=1)
    assert run.results["actual"].tolist() == expected.results["actual"].tolist()
    assert run.results["predicted"].to_numpy() == pytest.approx(
        expected.results["predicted"].to_numpy(), rel=1e-12
    )


def test_moving_window_segments(eval_portfolio):
    config = ModelConfig("cl", kind="chainladder", segment_by="coverage")
    run = moving_window_eval(eval_portfolio, [2013, 2014], [config], 1)
    assert run.models == ["cl"]
    assert len(run) == 2
    for date, predicted in zip([2013, 2014], run.results["predicted"]):
        portfolio = eval_portfolio.censor(eval_portfolio.window.index(date))
        assert predicted == pytest.approx(
            predict_reserve(config, portfolio, 1)[0], rel=1e-12
        )
    assert "evaluation-segments" in get_log()


def test_average_importance_counts_missing_covariates_as_zero():
    frame = pd.DataFrame(
        [
            (2013, "gbm", "close", "dev_year", 60.0),
            (2013, "gbm", "close", "coverage", 40.0),
            (2014, "gbm", "close", "dev_year", 100.0),
            (2014, "gbm", "size", "dev_year", 100.0),
        ],
        columns=["date", "model", "layer", "covariate", "importance"],
    )
    assert average_importance(frame) == {
        "gbm": {
            "close": {"coverage": 20.0, "dev_year": 80.0},
            "size": {"dev_year": 100.0},
        }
    }


@pytest.fixture(scope="module")
def tuned_run(eval_portfolio):
    config = gbm_config(
        covariates=["dev_year", "coverage"],
        tuning={"shrinkage": [0.05, 0.2]},
    )
    return moving_window_eval(
        eval_portfolio,
        [2013, 2014],
        [config, ModelConfig("cl", kind="chainladder")],
        horizon=1,
        seed=6,
    )


def test_moving_window_tunes_on_the_first_date(tuned_run):
    assert tuned_run.results["predicted"].notna().all()
    importance = tuned_run.importance
    assert set(importance["date"]) == {2013, 2014}
    assert set(importance["model"]) == {"gbm"}
    close = importance[importance["layer"] == "close"]
    for _, rows in close.groupby("date"):
        assert rows["importance"].sum() == pytest.approx(100.0)


def test_summary_averages_importance_over_dates(tuned_run, tmp_path):
    summary = tuned_run.summary()
    assert "importance" not in summary["cl"]
    close = summary["gbm"]["importance"]["close"]
    assert sum(close.values()) == pytest.approx(100.0)
    rows = tuned_run.importance
    rows = rows[(rows["layer"] == "close") & (rows["covariate"] == "dev_year")]
    assert close["dev_year"] == pytest.approx(rows["importance"].sum() / 2)
    written = tuned_run.write(str(tmp_path))
    assert [os.path.basename(p) for p in written] == [
        "results.csv",
        "summary.json",
        "importance.csv",
    ]
    assert len(pd.read_csv(written[2])) == len(tuned_run.importance)
