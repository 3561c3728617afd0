"""Aggregate reserving on runoff triangles and the bridge to layer models.

Chain ladder with Mack standard errors works on the cumulative triangle.
The multiplicative model E(X[i, j]) = alpha[i] * beta[j] with
sum(beta) = 1 is fitted by over-dispersed Poisson maximum likelihood; its
reserve coincides with the chain-ladder reserve. The double chain ladder
and collective reserving variants split the size triangle into payment
counts and sizes. The bridge test compares, per layer, a model with
reporting and development year effects only against a model with
additional claim covariates.

"""

import copy
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
from scipy import stats

from .engines import fit_layer
from .engines.family import Gamma
from .exc import ConfigurationError, EstimabilityError, NestingError
from .hierarchical import default_layer_specs, training_frame, validate_specs
from .portfolio import Portfolio
from .triangle import Triangle, build_triangle
from .util import log
from .weighting import weighted_loglik

INDEX_COVARIATES = ["reporting_year", "dev_year"]


@dataclass
class ChainLadder:
    triangle: Triangle
    factors: np.ndarray
    completed: np.ndarray
    ultimates: np.ndarray
    latest: np.ndarray
    reserves: np.ndarray

    @property
    def reserve(self):
        return float(self.reserves.sum())

    @property
    def incremental(self):
        """Completed triangle in incremental form."""
        return np.diff(self.completed, axis=1, prepend=0.0)

    def horizon_reserve(self, horizon):
        """Projected payments of the next `horizon` calendar years."""
        if horizon < 1:
            raise ConfigurationError("horizon must be >= 1")
        rows, d = self.completed.shape
        offset = np.arange(d)[None, :] - self.triangle.latest[:, None]
        mask = (offset >= 1) & (offset <= horizon)
        return float(self.incremental[mask].sum())

    def to_dict(self):
        return {
            "factors": self.factors.tolist(),
            "ultimates": self.ultimates.tolist(),
            "reserves": self.reserves.tolist(),
            "reserve": self.reserve,
        }


def _check_standard(triangle):
    observed = triangle.observed
    latest = triangle.latest
    if (latest < 0).any():
        raise EstimabilityError("every triangle row needs an observed cell")
    expected = np.arange(observed.shape[1])[None, :] <= latest[:, None]
    if (observed != expected).any():
        raise ConfigurationError(
            "the observed cells of every row must be a leading block"
        )


def chain_ladder(triangle: Triangle):
    """Volume-weighted development factors on the cumulative triangle."""
    _check_standard(triangle)
    cumulative = triangle.cumulative()
    rows, d = cumulative.shape
    latest = triangle.latest
    factors = np.ones(d - 1)
    for k in range(d - 1):
        used = latest >= k + 1
        if not used.any():
            raise EstimabilityError(
                "no row observes development year {}".format(k + 2),
                dev_year=k + 2,
            )
        denominator = cumulative[used, k].sum()
        if not denominator > 0:
            raise EstimabilityError(
                "cumulative column sum of development year {} is zero".format(
                    k + 1
                ),
                dev_year=k + 1,
            )
        factors[k] = cumulative[used, k + 1].sum() / denominator
    completed = cumulative.copy()
    for k in range(d - 1):
        project = latest <= k
        completed[project, k + 1] = completed[project, k] * factors[k]
    latest_values = cumulative[np.arange(rows), latest]
    ultimates = completed[:, -1]
    result = ChainLadder(
        triangle,
        factors,
        completed,
        ultimates,
        latest_values,
        ultimates - latest_values,
    )
    log.debug("chain-ladder", factors=factors.tolist(), reserve=result.reserve)
    return result


@dataclass
class MackResult:
    chain_ladder: ChainLadder
    sigma2: np.ndarray
    standard_errors: np.ndarray
    total_standard_error: float
    level: float

    @property
    def reserve(self):
        return self.chain_ladder.reserve

    @property
    def interval(self):
        z = stats.norm.ppf(0.5 + self.level / 2.0)
        se = self.total_standard_error
        return (self.reserve - z * se, self.reserve + z * se)

    def to_dict(self):
        lower, upper = self.interval
        return dict(
            self.chain_ladder.to_dict(),
            sigma2=self.sigma2.tolist(),
            standard_errors=self.standard_errors.tolist(),
            total_standard_error=self.total_standard_error,
            level=self.level,
            interval=[lower, upper],
        )


def mack_se(triangle: Triangle, level=0.95):
    """Mack standard errors of the chain-ladder reserve.

    The variance of the last development period that has a single
    individual factor is extrapolated as
    min(s[k-1]**2 / s[k-2], s[k-2], s[k-1]). When only one earlier
    variance exists the rule is undefined and that variance is carried
    over unchanged.

    """
    if not 0 < level < 1:
        raise ConfigurationError("interval level must lie in (0, 1)")
    cl = chain_ladder(triangle)
    cumulative = triangle.cumulative()
    rows, d = cumulative.shape
    if rows < 3:
        raise EstimabilityError(
            "Mack variances need at least 3 rows, got {}".format(rows),
            dev_year=2,
        )
    latest = triangle.latest
    f = cl.factors
    sigma2 = np.full(d - 1, np.nan)
    volume = np.zeros(d - 1)
    for k in range(d - 1):
        used = (latest >= k + 1) & (cumulative[:, k] > 0)
        volume[k] = cumulative[latest >= k + 1, k].sum()
        n = int(used.sum())
        if n >= 2:
            c = cumulative[used, k]
            ratio = cumulative[used, k + 1] / c
            sigma2[k] = np.sum(c * (ratio - f[k]) ** 2) / (n - 1)
    for k in range(d - 1):
        if not np.isnan(sigma2[k]):
            continue
        if k == 0:
            raise EstimabilityError(
                "cannot estimate the variance of development year 2",
                dev_year=2,
            )
        if k == 1 or np.isnan(sigma2[k - 2]):
            sigma2[k] = sigma2[k - 1]
        elif sigma2[k - 2] == 0:
            sigma2[k] = 0.0
        else:
            sigma2[k] = min(
                sigma2[k - 1] ** 2 / sigma2[k - 2],
                sigma2[k - 2],
                sigma2[k - 1],
            )

    completed = cl.completed
    ultimate = completed[:, -1]
    with np.errstate(divide="ignore", invalid="ignore"):
        step = sigma2 / f**2
        step = np.where(f > 0, step, 0.0)
    mse = np.zeros(rows)
    for i in range(rows):
        if ultimate[i] == 0:
            continue
        for k in range(latest[i], d - 1):
            process = 1.0 / completed[i, k] if completed[i, k] > 0 else 0.0
            mse[i] += step[k] * (process + 1.0 / volume[k])
        mse[i] *= ultimate[i] ** 2
    total = mse.sum()
    for i in range(rows):
        for l in range(i + 1, rows):
            start = max(latest[i], latest[l])
            cross = sum(step[k] / volume[k] for k in range(start, d - 1))
            total += 2.0 * ultimate[i] * ultimate[l] * cross
    result = MackResult(
        cl, sigma2, np.sqrt(mse), float(math.sqrt(max(total, 0.0))), level
    )
    log.debug(
        "mack-se",
        reserve=cl.reserve,
        standard_error=result.total_standard_error,
    )
    return result


@dataclass
class MultiplicativeFit:
    """Row effects alpha (on the claim-count scale) and column effects beta."""

    alpha: np.ndarray
    beta: np.ndarray
    observed: np.ndarray
    values: Optional[np.ndarray] = None

    @property
    def fitted(self):
        return np.outer(self.alpha, self.beta)

    @property
    def reserves(self):
        return np.where(self.observed, 0.0, self.fitted).sum(axis=1)

    @property
    def reserve(self):
        return float(self.reserves.sum())

    @property
    def ultimates(self):
        observed = np.nansum(np.where(self.observed, self.values, 0.0), axis=1)
        return observed + self.reserves

    def to_dict(self):
        return {
            "alpha": self.alpha.tolist(),
            "beta": self.beta.tolist(),
            "reserve": self.reserve,
        }


def _cell_frame(values, mask):
    i, j = np.nonzero(mask)
    return pd.DataFrame(
        {
            "reporting_year": i + 1,
            "dev_year": j + 1,
            "y": values[i, j],
        }
    )


def _multiplicative(values, observed, offset=None, allow_zero=False):
    """Poisson fit of alpha[i] * beta[j] (times exp(offset)) on cells.

    Rows and columns without a positive observed cell raise, or get a
    zero effect with `allow_zero`.

    """
    rows, d = values.shape
    if (np.where(observed, values, 0.0) < 0).any():
        raise ConfigurationError("triangle cells must be >= 0")
    positive = observed & (values > 0)
    live_rows = positive.any(axis=1)
    live_columns = positive.any(axis=0)
    if not allow_zero:
        if not live_rows.all():
            row = int(np.flatnonzero(~live_rows)[0])
            raise EstimabilityError(
                "triangle row {} has no positive cell".format(row + 1)
            )
        if not live_columns.all():
            column = int(np.flatnonzero(~live_columns)[0])
            raise EstimabilityError(
                "development year {} has no positive cell".format(column + 1),
                dev_year=column + 1,
            )
    alpha = np.zeros(rows)
    beta = np.zeros(d)
    if not live_rows.any():
        return alpha, beta
    mask = observed & live_rows[:, None] & live_columns[None, :]
    frame = _cell_frame(values, mask)
    cell_offset = None
    if offset is not None:
        cell_offset = offset[mask]
    fit = fit_layer(
        frame,
        "y",
        Gamma(variance_power=1.0),
        "glm",
        INDEX_COVARIATES,
        np.ones(len(frame)),
        offset=cell_offset,
    )
    live_r = np.flatnonzero(live_rows)
    live_c = np.flatnonzero(live_columns)
    # The model is multiplicative: one live row and column identify it.
    row_cells = pd.DataFrame(
        {"reporting_year": live_r + 1, "dev_year": live_c[0] + 1}
    )
    column_cells = pd.DataFrame(
        {"reporting_year": live_r[0] + 1, "dev_year": live_c + 1}
    )
    row_eta = fit.linear_predictor(row_cells)
    column_eta = fit.linear_predictor(column_cells)
    alpha[live_r] = np.exp(row_eta)
    beta[live_c] = np.exp(column_eta - column_eta[0])
    total = beta.sum()
    beta /= total
    alpha *= total
    return alpha, beta


def fit_multiplicative(triangle: Triangle):
    """Over-dispersed Poisson fit of E(X[i, j]) = alpha[i] * beta[j]."""
    alpha, beta = _multiplicative(triangle.values, triangle.observed)
    fit = MultiplicativeFit(alpha, beta, triangle.observed, triangle.values)
    log.debug("multiplicative-fit", reserve=fit.reserve)
    return fit


@dataclass
class LrtResult:
    statistic: float
    dof: int
    p_value: float
    full_loglik: float = math.nan
    reduced_loglik: float = math.nan

    def to_dict(self):
        return {
            "statistic": self.statistic,
            "dof": self.dof,
            "p_value": self.p_value,
            "full_loglik": self.full_loglik,
            "reduced_loglik": self.reduced_loglik,
        }


def lrt_bridge(full_loglik, reduced_loglik, dof, tolerance=1e-8):
    """Likelihood-ratio test of a reduced model nested in a full model."""
    if dof <= 0:
        raise ConfigurationError(
            "the full model needs more parameters, got dof {}".format(dof)
        )
    statistic = 2.0 * (full_loglik - reduced_loglik)
    scale = max(1.0, abs(full_loglik), abs(reduced_loglik))
    if statistic < -tolerance * scale:
        raise NestingError(
            "the full model fits worse than the reduced model "
            "(statistic {:.6g})".format(statistic)
        )
    statistic = max(statistic, 0.0)
    return LrtResult(
        statistic,
        int(dof),
        float(stats.chi2.sf(statistic, dof)),
        float(full_loglik),
        float(reduced_loglik),
    )


@dataclass
class BridgeTestResult:
    layers: Dict[str, LrtResult]
    joint: LrtResult
    candidates: List[str] = field(default_factory=list)

    def to_dict(self):
        return {
            "candidates": self.candidates,
            "layers": {k: v.to_dict() for k, v in self.layers.items()},
            "joint": self.joint.to_dict(),
        }


def bridge_test(
    portfolio: Portfolio,
    candidates,
    layer_specs=None,
    first_modeled_year=1,
):
    """Test whether claim covariates improve on the triangle structure.

    Per layer the reduced model uses reporting and development year
    factors (plus lower-layer outcomes the layer conditions on), the full
    model adds `candidates`. Gamma layers evaluate both likelihoods with
    the dispersion of the full model. The joint test sums statistics and
    degrees of freedom over the layers.

    """
    candidates = list(candidates)
    if not candidates:
        raise ConfigurationError("the bridge test needs candidate covariates")
    specs = validate_specs(layer_specs or default_layer_specs())
    frame = training_frame(portfolio, specs, first_modeled_year)
    results = {}
    for spec in specs:
        rows = frame[spec.select(frame, portfolio.window.d)]
        if not len(rows):
            raise EstimabilityError(
                "layer {!r} has no rows for {}".format(
                    spec.name, spec.describe_filter()
                )
            )
        lower = [c for c in spec.covariates if c in ("close", "payment")]
        reduced_covariates = INDEX_COVARIATES + lower
        full_covariates = reduced_covariates + [
            c for c in candidates if c not in reduced_covariates
        ]
        weights = np.ones(len(rows))
        reduced = fit_layer(
            rows,
            spec.response,
            spec.family_object,
            "glm",
            reduced_covariates,
            weights,
        )
        full = fit_layer(
            rows,
            spec.response,
            spec.family_object,
            "glm",
            full_covariates,
            weights,
        )
        if not spec.is_binary:
            reduced = copy.copy(reduced)
            reduced.dispersion = full.dispersion
        results[spec.name] = lrt_bridge(
            weighted_loglik(full, rows, weights, spec.response),
            weighted_loglik(reduced, rows, weights, spec.response),
            full.n_parameters - reduced.n_parameters,
        )
        log.info(
            "bridge-test-layer",
            layer=spec.name,
            statistic=results[spec.name].statistic,
            p_value=results[spec.name].p_value,
        )
    joint = lrt_bridge(
        sum(r.full_loglik for r in results.values()),
        sum(r.reduced_loglik for r in results.values()),
        sum(r.dof for r in results.values()),
    )
    return BridgeTestResult(results, joint, candidates)


def _aggregate_inputs(source, counts, sizes, exposure):
    if isinstance(source, Portfolio):
        counts = build_triangle(source, "payment")
        sizes = build_triangle(source, "size")
        exposure = source.reported_counts
    if counts is None or sizes is None:
        raise ConfigurationError("need a portfolio or count and size triangles")
    if exposure is None:
        exposure = counts.exposure
    if exposure is None:
        raise ConfigurationError("need the number of claims per reporting year")
    exposure = np.asarray(exposure, dtype=float)
    if counts.shape != sizes.shape or exposure.shape != (counts.shape[0],):
        raise ConfigurationError("count and size triangles do not match")
    return counts, sizes, exposure


def _payment_rates(counts, exposure):
    """Payments per reported claim and development year."""
    observed = counts.observed
    rates = np.zeros(counts.shape[1])
    for j in range(counts.shape[1]):
        rows = observed[:, j]
        total = exposure[rows].sum()
        if not total > 0:
            raise EstimabilityError(
                "no exposure observed in development year {}".format(j + 1),
                dev_year=j + 1,
            )
        rates[j] = counts.values[rows, j].sum() / total
    return rates


@dataclass
class DclParams:
    payment_probability: np.ndarray
    mean_size: np.ndarray
    inflation: np.ndarray
    exposure: np.ndarray
    observed: np.ndarray

    def expected(self):
        """Expected payment per cell: n_i * pi_j * mu_j * gamma_i."""
        return np.outer(
            self.exposure * self.inflation,
            self.payment_probability * self.mean_size,
        )

    def reserve(self, exposure=None, observed=None):
        exposure = self.exposure if exposure is None else exposure
        observed = self.observed if observed is None else observed
        cells = np.outer(
            exposure * self.inflation,
            self.payment_probability * self.mean_size,
        )
        return float(np.where(observed, 0.0, cells).sum())

    def to_dict(self):
        return {
            "payment_probability": self.payment_probability.tolist(),
            "mean_size": self.mean_size.tolist(),
            "inflation": self.inflation.tolist(),
            "reserve": self.reserve(),
        }


def dcl_rbns(source=None, counts=None, sizes=None, exposure=None):
    """Double chain ladder style RBNS reserve.

    The multiplicative fit of the size triangle is reparameterized with
    beta[j] = pi[j] * mu[j] and alpha[i] = n[i] * gamma[i], where pi are
    the payment probabilities per reported claim.

    """
    counts, sizes, exposure = _aggregate_inputs(
        source, counts, sizes, exposure
    )
    alpha, beta = _multiplicative(
        sizes.values, sizes.observed, allow_zero=True
    )
    pi = _payment_rates(counts, exposure)
    with np.errstate(divide="ignore", invalid="ignore"):
        mu = np.where(pi > 0, beta / pi, 0.0)
        gamma = np.where(exposure > 0, alpha / exposure, 0.0)
    params = DclParams(pi, mu, gamma, exposure, sizes.observed)
    log.info("dcl-reserve", reserve=params.reserve())
    return params


@dataclass
class CrmParams:
    intensity: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    exposure: np.ndarray
    observed: np.ndarray

    def reserve(self, exposure=None, observed=None):
        """Sum of n_i * lambda_j * alpha_i * beta_j over unobserved cells."""
        exposure = self.exposure if exposure is None else exposure
        observed = self.observed if observed is None else observed
        cells = np.outer(exposure * self.alpha, self.intensity * self.beta)
        return float(np.where(observed, 0.0, cells).sum())

    def to_dict(self):
        return {
            "intensity": self.intensity.tolist(),
            "alpha": self.alpha.tolist(),
            "beta": self.beta.tolist(),
            "reserve": self.reserve(),
        }


def crm_rbns(source=None, counts=None, sizes=None, exposure=None):
    """Collective reserving style RBNS reserve.

    Payment counts are Poisson with mean n_i * lambda_j. Sizes given the
    counts have mean X1[i, j] * alpha_i * beta_j and are fitted with the
    observed counts as exposure; the reserve uses the expected counts.

    """
    counts, sizes, exposure = _aggregate_inputs(
        source, counts, sizes, exposure
    )
    intensity = _payment_rates(counts, exposure)
    observed = sizes.observed & (np.nan_to_num(counts.values) > 0)
    with np.errstate(divide="ignore"):
        offset = np.log(np.where(observed, counts.values, 1.0))
    alpha, beta = _multiplicative(
        sizes.values, observed, offset=offset, allow_zero=True
    )
    params = CrmParams(intensity, alpha, beta, exposure, sizes.observed)
    log.info("crm-reserve", reserve=params.reserve())
    return params
