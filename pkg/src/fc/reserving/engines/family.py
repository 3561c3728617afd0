"""Response families of the layer models.

The Bernoulli family uses the logit link. The gamma family uses the log
link with variance function mu ** variance_power; power 2 is the gamma
GLM, power 1 the over-dispersed Poisson quasi-likelihood which admits zero
responses.

"""

import numpy as np
from scipy import special, stats

from ..exc import ConfigurationError, DomainError, EvaluationError


class Family(object):
    name: str
    link: str

    def __repr__(self):
        return "<{} link={}>".format(self.__class__.__name__, self.link)

    def to_dict(self):
        return {"family": self.name}


class Bernoulli(Family):
    name = "bernoulli"
    link = "logit"
    variance_power = None

    def inverse_link(self, eta):
        return special.expit(eta)

    def link_function(self, mu):
        return special.logit(mu)

    def check_responses(self, y):
        if np.isnan(y).any() or not np.isin(y, (0, 1)).all():
            raise DomainError("bernoulli responses must be 0 or 1")

    def initial_mu(self, y, w):
        return (y + 0.5) / 2.0

    def working_weights(self, mu):
        return mu * (1.0 - mu)

    def score_terms(self, y, mu):
        """d loglik / d eta per observation."""
        return y - mu

    def scale_terms(self, y, mu):
        return np.ones_like(mu)

    def pearson_terms(self, y, mu):
        return (y - mu) ** 2 / (mu * (1.0 - mu))

    def unit_deviance(self, y, mu):
        return -2.0 * np.log(np.where(y == 1, mu, 1.0 - mu))

    def log_density(self, y, mu, dispersion=1.0):
        if np.any(~np.isfinite(mu) | (mu <= 0) | (mu >= 1)):
            raise EvaluationError(
                "bernoulli probabilities must lie strictly within (0, 1)"
            )
        return np.log(np.where(y == 1, mu, 1.0 - mu))


class Gamma(Family):
    name = "gamma"
    link = "log"

    def __init__(self, variance_power=2.0):
        variance_power = float(variance_power)
        if not 1.0 <= variance_power <= 2.0:
            raise ConfigurationError(
                "variance_power must lie in [1, 2], got {}".format(
                    variance_power
                )
            )
        self.variance_power = variance_power

    def __repr__(self):
        return "<Gamma link=log variance_power={:g}>".format(
            self.variance_power
        )

    def to_dict(self):
        return {"family": self.name, "variance_power": self.variance_power}

    def inverse_link(self, eta):
        return np.exp(eta)

    def link_function(self, mu):
        return np.log(mu)

    def check_responses(self, y):
        if np.isnan(y).any():
            raise DomainError("gamma responses must not be missing")
        if self.variance_power == 2.0:
            if (y <= 0).any():
                raise DomainError("gamma responses must be > 0")
        elif (y < 0).any():
            raise DomainError("responses must be >= 0")

    def initial_mu(self, y, w):
        mean = np.sum(w * y) / np.sum(w)
        return (y + mean) / 2.0

    def working_weights(self, mu):
        return mu ** (2.0 - self.variance_power)

    def score_terms(self, y, mu):
        return (y - mu) * mu ** (1.0 - self.variance_power)

    def scale_terms(self, y, mu):
        return 1.0 + np.abs(y) * mu ** (1.0 - self.variance_power)

    def pearson_terms(self, y, mu):
        return (y - mu) ** 2 / mu**self.variance_power

    def unit_deviance(self, y, mu):
        p = self.variance_power
        if p == 2.0:
            return 2.0 * ((y - mu) / mu - np.log(y / mu))
        if p == 1.0:
            return 2.0 * (special.xlogy(y, y) - special.xlogy(y, mu) - (y - mu))
        return 2.0 * (
            y ** (2.0 - p) / ((1.0 - p) * (2.0 - p))
            - y * mu ** (1.0 - p) / (1.0 - p)
            + mu ** (2.0 - p) / (2.0 - p)
        )

    def log_density(self, y, mu, dispersion):
        """Gamma log density (power 2) or quasi log-likelihood (power < 2)."""
        if np.any(~np.isfinite(mu) | (mu <= 0)):
            raise EvaluationError("predicted means must be > 0")
        if not dispersion > 0:
            raise EvaluationError(
                "dispersion must be > 0 to evaluate the likelihood, "
                "got {}".format(dispersion)
            )
        if self.variance_power == 2.0:
            shape = 1.0 / dispersion
            scale = dispersion * mu
            return (
                (shape - 1.0) * np.log(y)
                - y / scale
                - special.gammaln(shape)
                - shape * np.log(scale)
            )
        return -self.unit_deviance(y, mu) / (2.0 * dispersion)


def gamma_draws(u, mu, dispersion, variance_power=2.0):
    """Inverse-CDF draws with mean mu and variance dispersion * mu**power.

    Quantiles that underflow for small shapes are raised to the smallest
    positive float, so a drawn payment always has a positive size.

    """
    mu = np.asarray(mu, dtype=float)
    if dispersion == 0:
        return mu.copy()
    tiny = np.finfo(float).tiny
    shape = mu ** (2.0 - variance_power) / dispersion
    scale = dispersion * mu ** (variance_power - 1.0)
    draws = stats.gamma.ppf(np.maximum(u, tiny), shape, scale=scale)
    return np.maximum(draws, tiny)


def get_family(name, variance_power=None):
    if name == "bernoulli":
        if variance_power not in (None, 2, 2.0):
            raise ConfigurationError(
                "variance_power does not apply to the bernoulli family"
            )
        return Bernoulli()
    if name == "gamma":
        return Gamma(2.0 if variance_power is None else variance_power)
    raise ConfigurationError("unknown family {!r}".format(name))


def deviance(family, y, mu, weights):
    return float(np.sum(weights * family.unit_deviance(y, mu)))
