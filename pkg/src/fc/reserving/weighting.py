"""Development-year weights, cross-validation folds and weighted likelihoods.

Training data of development year j come from the reporting years that
have reached age j, while the reserve concerns the younger reporting
years. The ratio of their claim counts re-weights each development year
so that the fit targets the claims that still have to develop.

"""

from collections.abc import Mapping

import numpy as np

from .exc import ConfigurationError, DegenerateExposureError, EvaluationError
from .util import log


class WeightVector(Mapping):
    """Nonnegative weight per development year."""

    def __init__(self, weights):
        weights = {int(j): float(w) for j, w in dict(weights).items()}
        for j, w in weights.items():
            if not np.isfinite(w) or w < 0:
                raise ConfigurationError(
                    "weight of development year {} must be finite and >= 0, "
                    "got {}".format(j, w)
                )
        self._weights = dict(sorted(weights.items()))

    def __getitem__(self, dev_year):
        return self._weights[dev_year]

    def __iter__(self):
        return iter(self._weights)

    def __len__(self):
        return len(self._weights)

    def __repr__(self):
        return "<WeightVector {}>".format(
            " ".join("{}:{:.4g}".format(j, w) for j, w in self.items())
        )

    @classmethod
    def uniform(cls, first_modeled_year, d):
        return cls({j: 1.0 for j in range(first_modeled_year, d + 1)})

    def for_rows(self, dev_years):
        """Weight per observation."""
        dev_years = np.asarray(dev_years, dtype=int)
        missing = sorted(set(dev_years.tolist()) - set(self._weights))
        if missing:
            raise EvaluationError(
                "no weight for development years {}".format(missing)
            )
        lookup = np.zeros(max(self._weights) + 1)
        for j, w in self._weights.items():
            lookup[j] = w
        return lookup[dev_years]

    def to_dict(self):
        return {str(j): w for j, w in self._weights.items()}

    @classmethod
    def from_dict(cls, doc):
        return cls({int(j): w for j, w in doc.items()})


def development_year_weights(
    reported_counts, d, first_modeled_year=1, reporting_years=None
):
    """w_j = sum(n_i, i > L-j+1) / sum(n_i, i <= L-j+1).

    `reported_counts` holds n_1 .. n_L for the L observed reporting years.
    L is `reporting_years`, or `d` for a window of exactly d years; a
    vector of any other length is rejected.
    The first modeled year gets weight 1 when its numerator is empty.
    Development years beyond L have no training data and get no weight.

    """
    n = np.asarray(reported_counts, dtype=float)
    if n.ndim != 1 or not len(n):
        raise ConfigurationError("reported counts must be a non-empty vector")
    if (n < 0).any() or not np.isfinite(n).all():
        raise ConfigurationError("reported counts must be finite and >= 0")
    expected = d if reporting_years is None else reporting_years
    if len(n) != expected:
        raise ConfigurationError(
            "expected {} reported counts, got {}".format(expected, len(n))
        )
    if d < first_modeled_year:
        raise ConfigurationError(
            "d={} is below the first modeled year {}".format(
                d, first_modeled_year
            )
        )
    L = len(n)
    weights = {}
    for j in range(first_modeled_year, min(d, L) + 1):
        numerator = n[L - j + 1 :].sum()
        denominator = n[: L - j + 1].sum()
        if j == 1:
            weights[j] = 1.0
            continue
        if denominator == 0:
            raise DegenerateExposureError(
                "no training claims for development year {}".format(j),
                dev_year=j,
            )
        weights[j] = numerator / denominator
    result = WeightVector(weights)
    log.debug("development-year-weights", weights=result.to_dict())
    return result


def assign_folds(observations, K, seed, strata=None):
    """Fold label in 1 .. K per observation.

    `observations` is a frame (one row per claim and development year) or
    the number of observations. Labels come from a seeded permutation, so
    fold sizes differ by at most one. With `strata` the permutation is
    taken within each stratum before dealing out labels, which balances
    every stratum over the folds.

    """
    if isinstance(observations, (int, np.integer)):
        n = int(observations)
    else:
        n = len(observations)
    if K < 2:
        raise ConfigurationError("need at least 2 folds, got {}".format(K))
    if K > n:
        raise ConfigurationError(
            "cannot split {} observations into {} folds".format(n, K)
        )
    rng = np.random.default_rng(seed)
    if strata is None:
        order = rng.permutation(n)
    else:
        strata = np.asarray(strata)
        if strata.shape != (n,):
            raise ConfigurationError("need one stratum per observation")
        order = np.lexsort((rng.random(n), strata))
    labels = np.empty(n, dtype=int)
    labels[order] = np.arange(n) % K + 1
    return labels


def row_weights(weights, dev_years):
    if isinstance(weights, WeightVector):
        return weights.for_rows(dev_years)
    weights = np.asarray(weights, dtype=float)
    if weights.shape != np.shape(dev_years):
        raise EvaluationError("need one weight per observation")
    return weights


def log_densities(fit, observations, response=None):
    """Per-observation log density of the response under a layer fit."""
    response = response or fit.response
    if response not in observations.columns:
        raise EvaluationError(
            "observations lack the response {!r}".format(response)
        )
    y = observations[response].to_numpy(dtype=float)
    mu = fit.predict(observations)
    return fit.family.log_density(y, mu, fit.dispersion)


def weighted_loglik(fit, observations, weights, response=None):
    """Sum of w_j * log f(response | covariates) over the observations.

    `weights` is a WeightVector (looked up by `dev_year`) or one weight per
    observation.

    """
    if not len(observations):
        return 0.0
    w = row_weights(weights, observations["dev_year"].to_numpy())
    terms = log_densities(fit, observations, response)
    used = w > 0
    return float(np.sum(w[used] * terms[used]))
