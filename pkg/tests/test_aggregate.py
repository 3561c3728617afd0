import numpy as np
import pytest
from scipy import stats

from fc.reserving.aggregate import (
    bridge_test,
    chain_ladder,
    crm_rbns,
    dcl_rbns,
    fit_multiplicative,
    lrt_bridge,
    mack_se,
)
from fc.reserving.exc import (
    ConfigurationError,
    EstimabilityError,
    NestingError,
)
from fc.reserving.generator import (
    GeneratorConfig,
    expected_triangle,
    generate,
)
from fc.reserving.hierarchical import LayerSpec, fit_hrm
from fc.reserving.triangle import Triangle, build_triangle
from fc.reserving.weighting import WeightVector
from tests.conftest import FIXTURES, get_log

nan = np.nan
F0 = 326 / 210


@pytest.fixture
def multiplicative_triangles():
    """Counts n * pi and sizes n * pi * mu * gamma on the upper triangle."""
    exposure = np.array([10.0, 10.0, 10.0])
    pi = np.array([0.5, 0.3, 0.2])
    mu = np.array([100.0, 200.0, 300.0])
    gamma = np.array([1.0, 1.1, 1.2])
    mask = Triangle.standard_mask(3, 3)
    counts = np.where(mask, np.outer(exposure, pi), nan)
    sizes = np.where(mask, counts * np.outer(gamma, mu), nan)
    return Triangle(counts, exposure), Triangle(sizes, exposure)


def test_chain_ladder(mack_triangle):
    cl = chain_ladder(mack_triangle)
    assert cl.factors == pytest.approx([F0, 1.1])
    assert cl.ultimates == pytest.approx([165.0, 193.6, 120 * F0 * 1.1])
    assert cl.reserves == pytest.approx([0.0, 17.6, 120 * F0 * 1.1 - 120])
    assert cl.reserve == pytest.approx(102.5142857143)
    assert cl.horizon_reserve(1) == pytest.approx(17.6 + 120 * F0 - 120)
    assert cl.horizon_reserve(2) == pytest.approx(cl.reserve)
    assert cl.to_dict()["reserve"] == cl.reserve
    with pytest.raises(ConfigurationError):
        cl.horizon_reserve(0)


def test_mack_standard_errors(mack_triangle):
    result = mack_se(mack_triangle)
    # 11/21 from the two individual factors, copied to the last period.
    assert result.sigma2 == pytest.approx([11 / 21, 11 / 21])
    assert result.standard_errors == pytest.approx(
        [0.0, 14.1548802510, 18.3923752881]
    )
    assert result.total_standard_error == pytest.approx(27.7060225660)
    lower, upper = result.interval
    z = stats.norm.ppf(0.975)
    assert upper - result.reserve == pytest.approx(z * 27.7060225660)
    assert lower < result.reserve < upper
    assert result.to_dict()["level"] == 0.95


def test_mack_needs_three_rows():
    triangle = Triangle([[100.0, 50.0], [110.0, nan]])
    assert chain_ladder(triangle).reserve == pytest.approx(55.0)
    with pytest.raises(EstimabilityError):
        mack_se(triangle)
    with pytest.raises(ConfigurationError):
        mack_se(triangle, level=1.0)


def test_mack_extrapolates_the_last_variance():
    values = np.where(
        Triangle.standard_mask(4, 4),
        [
            [100.0, 60.0, 20.0, 5.0],
            [120.0, 65.0, 25.0, 0.0],
            [90.0, 50.0, 0.0, 0.0],
            [110.0, 0.0, 0.0, 0.0],
        ],
        nan,
    )
    result = mack_se(Triangle(values))
    s = result.sigma2
    assert s[2] == pytest.approx(min(s[1] ** 2 / s[0], s[0], s[1]))


def test_chain_ladder_needs_a_leading_block():
    with pytest.raises(ConfigurationError):
        chain_ladder(Triangle([[1.0, nan, 2.0], [1.0, nan, nan]]))
    with pytest.raises(EstimabilityError):
        chain_ladder(Triangle([[0.0, 1.0], [0.0, nan]]))


def test_multiplicative_fit_reproduces_the_chain_ladder(mack_triangle):
    fit = fit_multiplicative(mack_triangle)
    assert fit.beta.sum() == pytest.approx(1.0)
    assert fit.reserve == pytest.approx(chain_ladder(mack_triangle).reserve)
    assert fit.ultimates == pytest.approx(chain_ladder(mack_triangle).ultimates)
    with pytest.raises(EstimabilityError):
        fit_multiplicative(Triangle([[1.0, 2.0], [0.0, nan]]))


def test_dcl_on_multiplicative_triangles(multiplicative_triangles):
    counts, sizes = multiplicative_triangles
    params = dcl_rbns(counts=counts, sizes=sizes)
    assert params.payment_probability == pytest.approx([0.5, 0.3, 0.2])
    # Scale moves between mean sizes and inflation, the product is fixed.
    products = np.outer(params.inflation, params.mean_size)
    assert products / products[0, 0] == pytest.approx(
        np.outer([1.0, 1.1, 1.2], [1.0, 2.0, 3.0])
    )
    assert params.reserve() == pytest.approx(660.0 + 720.0 + 720.0)
    assert params.reserve() == pytest.approx(chain_ladder(sizes).reserve)
    everything = params.reserve(observed=np.zeros((3, 3), dtype=bool))
    assert everything == pytest.approx(params.expected().sum())
    assert "dcl-reserve reserve=" in get_log()


def test_crm_on_multiplicative_triangles(multiplicative_triangles):
    counts, sizes = multiplicative_triangles
    params = crm_rbns(counts=counts, sizes=sizes)
    assert params.intensity == pytest.approx([0.5, 0.3, 0.2])
    assert params.reserve() == pytest.approx(2100.0)
    assert params.reserve(exposure=np.array([20.0, 20.0, 20.0])) == (
        pytest.approx(4200.0)
    )
    assert set(params.to_dict()) == {"intensity", "alpha", "beta", "reserve"}


def test_crm_payment_intensity_is_counts_per_claim():
    counts = Triangle([[4.0, 2.0]])
    sizes = Triangle([[400.0, 100.0]])
    params = crm_rbns(counts=counts, sizes=sizes, exposure=[2.0])
    assert params.intensity == pytest.approx([2.0, 1.0])
    assert params.reserve() == 0.0


def test_dcl_from_a_portfolio_matches_the_chain_ladder(synthetic_portfolio):
    params = dcl_rbns(synthetic_portfolio)
    sizes = build_triangle(synthetic_portfolio, "size")
    assert params.reserve() == pytest.approx(
        chain_ladder(sizes).reserve, rel=1e-6
    )
    assert crm_rbns(synthetic_portfolio).reserve() > 0


def test_aggregate_inputs_are_checked(multiplicative_triangles):
    counts, sizes = multiplicative_triangles
    with pytest.raises(ConfigurationError):
        dcl_rbns()
    with pytest.raises(ConfigurationError):
        dcl_rbns(counts=counts, sizes=Triangle([[1.0]]), exposure=[1.0])
    with pytest.raises(ConfigurationError):
        crm_rbns(counts=Triangle(counts.values), sizes=sizes, exposure=None)


def test_claim_level_tweedie_model_reproduces_the_chain_ladder(
    synthetic_portfolio,
):
    specs = [
        LayerSpec(
            "size",
            1,
            "size",
            "gamma",
            covariates=["reporting_year", "dev_year"],
            variance_power=1.0,
        )
    ]
    model = fit_hrm(
        synthetic_portfolio, specs, weights=WeightVector.uniform(1, 4)
    )
    cl = chain_ladder(build_triangle(synthetic_portfolio, "size"))
    assert model.expected_reserve(synthetic_portfolio) == pytest.approx(
        cl.reserve, rel=1e-6
    )
    for horizon in (1, 2):
        assert model.expected_reserve(
            synthetic_portfolio, horizon=horizon
        ) == pytest.approx(cl.horizon_reserve(horizon), rel=1e-6)


def test_lrt_bridge():
    result = lrt_bridge(-5.0, -7.0, 2)
    assert result.statistic == pytest.approx(4.0)
    assert result.p_value == pytest.approx(np.exp(-2.0))
    # Rounding noise around zero counts as no improvement.
    assert lrt_bridge(-5.0, -5.0 + 1e-12, 1).statistic == 0.0
    with pytest.raises(NestingError):
        lrt_bridge(-10.0, -8.0, 1)
    with pytest.raises(ConfigurationError):
        lrt_bridge(-5.0, -7.0, 0)


def test_lrt_bridge_critical_value():
    # 2 * (l1 - l0) = 3.841 on one degree of freedom.
    result = lrt_bridge(-10.0, -10.0 - 3.841 / 2, 1)
    assert result.statistic == pytest.approx(3.841)
    assert result.p_value == pytest.approx(0.05, abs=1e-3)


def test_bridge_test_finds_the_settlement_effect(synthetic_portfolio):
    result = bridge_test(synthetic_portfolio, ["coverage"])
    assert list(result.layers) == ["close", "payment", "size"]
    assert all(r.dof == 1 for r in result.layers.values())
    assert result.layers["close"].p_value < 1e-3
    assert result.joint.dof == 3
    assert result.joint.statistic == pytest.approx(
        sum(r.statistic for r in result.layers.values())
    )
    assert result.to_dict()["candidates"] == ["coverage"]
    assert "bridge-test-layer layer=close" in get_log()
    with pytest.raises(ConfigurationError):
        bridge_test(synthetic_portfolio, [])


def null_config(seed):
    return GeneratorConfig.from_dict(
        {
            "window": {"start_year": 1, "tau": 4, "d": 4},
            "claims_per_year": 200,
            "seed": seed,
            "covariates": {"noise": {"levels": ["a", "b", "c"]}},
            "settlement": {"base": [0.0, 0.0, 0.0, 1.0]},
            "payment": {"base": [0.5, 0.4, 0.3, 0.2]},
            "size": {"base": [100, 100, 100, 100], "dispersion": 1.0},
        }
    )


@pytest.mark.slow
def test_bridge_test_is_calibrated_under_the_null():
    specs = [LayerSpec("payment", 1, "payment")]
    rejections = 0
    reps = 500
    for seed in range(reps):
        portfolio = generate(null_config(seed))
        result = bridge_test(portfolio, ["noise"], specs)
        assert result.joint.dof == 2
        rejections += result.joint.p_value < 0.05
    assert 0.03 <= rejections / reps <= 0.07


def multiplicative_config(seed, claims_per_year=12500, shock=None):
    doc = GeneratorConfig.load(str(FIXTURES / "multiplicative.json")).to_dict()
    doc["claims_per_year"] = [claims_per_year] * 4
    doc["seed"] = seed
    if shock:
        doc["shock"] = shock
    return doc


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(5))
def test_aggregate_methods_recover_the_expected_reserve(seed):
    config = GeneratorConfig.from_dict(multiplicative_config(seed))
    portfolio = generate(config)
    assert len(portfolio.claims) == 50000
    expected = expected_triangle(config)
    triangle = build_triangle(portfolio, "size")
    truth = expected[~triangle.observed].sum()
    assert chain_ladder(triangle).reserve == pytest.approx(truth, rel=0.05)
    assert dcl_rbns(portfolio).reserve() == pytest.approx(truth, rel=0.05)
    assert crm_rbns(portfolio).reserve() == pytest.approx(truth, rel=0.05)
    # Paid per reported claim: survival times payment probability.
    pi = dcl_rbns(portfolio).payment_probability
    assert pi[:2] == pytest.approx([0.8, 0.7 * 0.6], rel=0.02)


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(3))
def test_individual_model_is_robust_to_a_frequency_shock(seed):
    # Five times the claims in the last reporting year. The extra claims
    # settle fast and are three times as large.
    doc = multiplicative_config(
        seed, 500, {"reporting_year": 4, "factor": 5.0}
    )
    doc["settlement"]["effects"] = {"extreme_weather": {"1": 3.0}}
    doc["size"]["effects"] = {"extreme_weather": {"1": float(np.log(3))}}
    config = GeneratorConfig.from_dict(doc)
    portfolio = generate(config)
    assert list(portfolio.reported_counts) == [500, 500, 500, 2500]
    triangle = build_triangle(portfolio, "size")
    truth = expected_triangle(config)[~triangle.observed].sum()

    specs = [
        LayerSpec(
            "close",
            1,
            "close",
            "bernoulli",
            covariates=("dev_year", "extreme_weather"),
            filter={"open": 1},
        ),
        LayerSpec(
            "payment",
            2,
            "payment",
            "bernoulli",
            covariates=("dev_year",),
            filter={"open": 1},
        ),
        LayerSpec(
            "size",
            3,
            "size",
            "gamma",
            covariates=("dev_year", "reporting_year", "extreme_weather"),
            filter={"payment": 1},
        ),
    ]
    model = fit_hrm(portfolio, specs)
    individual = model.expected_reserve(portfolio)
    assert individual == pytest.approx(truth, rel=0.10)
    naive = chain_ladder(triangle).reserve
    assert abs(naive - truth) / truth > 0.25
