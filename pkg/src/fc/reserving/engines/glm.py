"""Weighted generalized linear models fitted by IRLS with step-halving."""

import numpy as np
import scipy.linalg

from ..exc import ConfigurationError, ConvergenceError
from ..sysconfig import sysconfig
from ..util import log
from .design import Design, DesignEncoder
from .family import Bernoulli, Gamma, deviance, get_family

# Pivots below this fraction of the largest pivot count as aliased.
ALIAS_TOLERANCE = 1e-9

# Fitted probabilities closer than this to 0 or 1 mean separated data.
SATURATION = 1e-10
# Converged logits beyond this suggest quasi-separation.
QUASI_SEPARATION = 15


class GlmFit(object):
    """A fitted GLM layer: coefficients per design column plus encoding."""

    engine = "glm"

    def __init__(
        self,
        encoder: DesignEncoder,
        family,
        coefficients,
        dispersion=1.0,
        iterations=0,
        gradient_norm=0.0,
        aliased=(),
        response=None,
    ):
        self.encoder = encoder
        self.family = family
        self.coefficients = dict(coefficients)
        self.dispersion = float(dispersion)
        self.iterations = iterations
        self.gradient_norm = gradient_norm
        self.aliased = list(aliased)
        self.response = response

    def __repr__(self):
        return "<GlmFit {} {} terms={}>".format(
            self.family.name, self.link, len(self.coefficients)
        )

    @property
    def link(self):
        return self.family.link

    @property
    def covariates(self):
        return self.encoder.covariates

    @property
    def n_parameters(self):
        return len(self.coefficients)

    def _beta(self):
        columns = self.encoder.columns
        keep = [i for i, c in enumerate(columns) if c in self.coefficients]
        beta = np.array([self.coefficients[columns[i]] for i in keep])
        return keep, beta

    def linear_predictor(self, frame, offset=None):
        keep, beta = self._beta()
        eta = self.encoder.matrix(frame)[:, keep] @ beta
        if offset is not None:
            eta = eta + offset
        return eta

    def predict(self, frame, offset=None):
        """Predictions on the response scale."""
        return self.family.inverse_link(self.linear_predictor(frame, offset))

    def to_dict(self):
        return {
            "engine": self.engine,
            "family": self.family.to_dict(),
            "encoder": self.encoder.to_dict(),
            "coefficients": self.coefficients,
            "dispersion": self.dispersion,
            "iterations": self.iterations,
            "gradient_norm": self.gradient_norm,
            "aliased": self.aliased,
            "response": self.response,
        }

    @classmethod
    def from_dict(cls, doc):
        family = get_family(
            doc["family"]["family"], doc["family"].get("variance_power")
        )
        return cls(
            DesignEncoder.from_dict(doc["encoder"]),
            family,
            doc["coefficients"],
            dispersion=doc.get("dispersion", 1.0),
            iterations=doc.get("iterations", 0),
            gradient_norm=doc.get("gradient_norm", 0.0),
            aliased=doc.get("aliased", ()),
            response=doc.get("response"),
        )


def find_aliased(X, weights):
    """Indices of design columns that are linear combinations of others.

    Uses a pivoted QR decomposition of the rows with positive weight.

    """
    rows = X[weights > 0]
    if rows.size == 0 or X.shape[1] == 0:
        return []
    _, r, pivots = scipy.linalg.qr(rows, mode="economic", pivoting=True)
    diagonal = np.abs(np.diag(r))
    if not diagonal.size or diagonal[0] == 0:
        return list(range(X.shape[1]))
    rank = int(np.sum(diagonal > ALIAS_TOLERANCE * diagonal[0]))
    return sorted(int(i) for i in pivots[rank:])


def _check_weights(weights, n):
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (n,):
        raise ConfigurationError(
            "expected {} weights, got shape {}".format(n, weights.shape)
        )
    if not np.isfinite(weights).all() or (weights < 0).any():
        raise ConfigurationError("weights must be finite and >= 0")
    if not weights.sum() > 0:
        raise ConfigurationError("weights must have a positive total")
    return weights


def _wls(X, z, w):
    sw = np.sqrt(w)
    beta, *_ = scipy.linalg.lstsq(X * sw[:, None], z * sw)
    return beta


def _boundary(message, iteration, eta, w):
    return ConvergenceError(
        message,
        diagnostics={
            "iterations": iteration,
            "max_abs_eta": float(np.max(np.abs(eta[w > 0]), initial=0.0)),
        },
    )


def _check_saturation(family, eta, mu, w, iteration):
    rows = w > 0
    working = family.working_weights(mu[rows])
    if not np.isfinite(working).all() or not (working > 0).all():
        raise _boundary(
            "fitted values left the support of the family", iteration, eta, w
        )
    if isinstance(family, Bernoulli):
        edge = np.minimum(mu[rows], 1.0 - mu[rows])
        if edge.size and edge.min() < SATURATION:
            raise _boundary(
                "complete separation: fitted probabilities reached 0 or 1",
                iteration,
                eta,
                w,
            )


def _irls(X, y, w, family, offset, tolerance, max_iterations, max_halvings):
    mu = family.initial_mu(y, w)
    eta = family.link_function(mu)
    beta = _wls(X, eta - offset, w * family.working_weights(mu))
    trace = []

    def evaluate(beta):
        eta = X @ beta + offset
        mu = family.inverse_link(eta)
        return eta, mu, deviance(family, y, mu, w)

    eta, mu, dev = evaluate(beta)
    if not np.isfinite(dev):
        raise ConvergenceError(
            "non-finite deviance at the starting values",
            diagnostics={"iterations": 0},
        )

    def gradient(mu):
        score = X.T @ (w * family.score_terms(y, mu))
        scale = float(np.sum(w * family.scale_terms(y, mu)))
        return float(np.max(np.abs(score), initial=0.0)), scale

    converged = False
    norm, scale = gradient(mu)
    for iteration in range(1, max_iterations + 1):
        _check_saturation(family, eta, mu, w, iteration - 1)
        working = family.working_weights(mu)
        with np.errstate(divide="ignore", invalid="ignore"):
            z = eta - offset + family.score_terms(y, mu) / working
        # Rows without weight do not enter the fit.
        z = np.where(w > 0, z, 0.0)
        candidate = _wls(X, z, np.where(w > 0, w * working, 0.0))
        step = candidate - beta
        for halving in range(max_halvings + 1):
            new_eta, new_mu, new_dev = evaluate(beta + step)
            if np.isfinite(new_dev) and new_dev <= dev + 1e-12 * abs(dev):
                break
            step = step / 2.0
        else:
            raise ConvergenceError(
                "step-halving failed to decrease the deviance",
                diagnostics={"iterations": iteration, "trace": trace},
            )
        beta = beta + step
        eta, mu, previous, dev = new_eta, new_mu, dev, new_dev
        previous_norm = norm
        norm, scale = gradient(mu)
        trace.append({"deviance": dev, "gradient": norm, "halvings": halving})
        log.debug(
            "irls-iteration",
            iteration=iteration,
            deviance=dev,
            gradient=norm,
            halvings=halving,
        )
        if converged:
            # One polishing step after reaching the tolerance.
            if norm > previous_norm:
                beta = beta - step
                eta, mu, dev = evaluate(beta)
                norm = previous_norm
            return beta, mu, iteration, norm, trace
        if norm <= tolerance * max(scale, 1.0):
            converged = True
        elif abs(previous - dev) <= 1e-15 * max(abs(dev), 1e-300) and (
            norm <= 1e-6 * max(scale, 1.0)
        ):
            # Deviance at machine precision, the gradient cannot shrink.
            log.debug("irls-stalled", iteration=iteration, gradient=norm)
            return beta, mu, iteration, norm, trace
    if converged:
        return beta, mu, max_iterations, norm, trace
    raise ConvergenceError(
        "no convergence after {} iterations (gradient {:.3g})".format(
            max_iterations, norm
        ),
        diagnostics={"iterations": max_iterations, "trace": trace},
    )


def fit_glm(
    design: Design,
    responses,
    weights,
    family,
    offset=None,
    tolerance=None,
    max_iterations=None,
    response=None,
):
    """Maximize the weighted log-likelihood of a GLM.

    Aliased design columns are reported and dropped before fitting.
    Dispersion is estimated by the weighted Pearson statistic, scaled
    to the weight total.

    """
    tolerance = tolerance or sysconfig.glm["tolerance"]
    max_iterations = max_iterations or sysconfig.glm["max_iterations"]
    max_halvings = sysconfig.glm["max_halvings"]

    X = design.matrix
    n = X.shape[0]
    y = np.asarray(responses, dtype=float)
    if y.shape != (n,):
        raise ConfigurationError(
            "expected {} responses, got shape {}".format(n, y.shape)
        )
    w = _check_weights(weights, n)
    offset = np.zeros(n) if offset is None else np.asarray(offset, float)
    family.check_responses(y[w > 0])

    if isinstance(family, Bernoulli):
        positive = y[w > 0]
        if positive.min() == positive.max():
            raise ConvergenceError(
                "complete separation: all responses are {}".format(
                    int(positive[0])
                ),
                diagnostics={"iterations": 0, "response": int(positive[0])},
            )
    elif isinstance(family, Gamma) and not np.sum(w * y) > 0:
        raise ConvergenceError(
            "all responses are zero", diagnostics={"iterations": 0}
        )

    columns = design.columns
    aliased = find_aliased(X, w)
    if aliased:
        log.warning(
            "aliased-terms",
            terms=[columns[i] for i in aliased],
            response=response,
        )
    keep = [i for i in range(len(columns)) if i not in set(aliased)]
    beta, mu, iterations, norm, trace = _irls(
        X[:, keep], y, w, family, offset, tolerance, max_iterations,
        max_halvings,
    )

    if isinstance(family, Bernoulli):
        dispersion = 1.0
        eta = X[:, keep] @ beta + offset
        if np.all(np.abs(y - mu)[w > 0] < 1e-6):
            raise _boundary(
                "complete separation: the covariates predict every response",
                iterations,
                eta,
                w,
            )
        if np.max(np.abs(eta), initial=0.0) > QUASI_SEPARATION:
            log.warning(
                "quasi-separation",
                response=response,
                max_abs_eta=float(np.max(np.abs(eta))),
            )
    else:
        positive = w > 0
        pearson = np.sum(w * family.pearson_terms(y, mu)) / np.sum(w)
        rows = int(positive.sum())
        if rows > len(keep):
            pearson *= rows / (rows - len(keep))
        dispersion = float(pearson)

    fit = GlmFit(
        design.encoder,
        family,
        {columns[i]: float(b) for i, b in zip(keep, beta)},
        dispersion=dispersion,
        iterations=iterations,
        gradient_norm=norm,
        aliased=[columns[i] for i in aliased],
        response=response,
    )
    log.debug(
        "glm-fit",
        family=family.name,
        response=response,
        rows=n,
        parameters=len(keep),
        iterations=iterations,
        dispersion=dispersion,
    )
    return fit


def fit_logistic(design, responses, weights, offset=None, response=None):
    return fit_glm(
        design, responses, weights, Bernoulli(), offset, response=response
    )


def fit_gamma(
    design, responses, weights, variance_power=2.0, offset=None, response=None
):
    return fit_glm(
        design,
        responses,
        weights,
        Gamma(variance_power),
        offset,
        response=response,
    )
