"""Layer engines: fit a regression for one layer and predict with it."""

import pandas as pd

from ..exc import ConfigurationError, PredictionError
from .design import make_design
from .family import get_family
from .gbm import GbmFit, fit_gbm
from .glm import GlmFit, fit_glm

ENGINES = ("glm", "gbm")


def fit_layer(
    frame,
    response,
    family,
    engine,
    covariates,
    weights,
    config=None,
    seed=0,
    offset=None,
):
    """Fit `response` on `covariates` of the rows in `frame`.

    `family` is a family instance or name. `config` holds engine settings:
    `tolerance` and `max_iterations` for GLMs, the boosting
    hyperparameters for GBMs.

    """
    if isinstance(family, str):
        family = get_family(family)
    config = dict(config or {})
    design = make_design(frame, covariates)
    y = frame[response].to_numpy(dtype=float)
    if engine == "glm":
        unknown = set(config) - {"tolerance", "max_iterations"}
        if unknown:
            raise ConfigurationError(
                "unknown glm settings: {}".format(", ".join(sorted(unknown)))
            )
        return fit_glm(
            design, y, weights, family, offset, response=response, **config
        )
    if engine == "gbm":
        if family.variance_power not in (None, 2.0):
            raise ConfigurationError(
                "the gbm engine supports the gamma family with "
                "variance_power 2 only"
            )
        if offset is not None:
            raise ConfigurationError("the gbm engine does not take offsets")
        return fit_gbm(
            design,
            y,
            family.name,
            weights,
            hyperparameters=config,
            seed=seed,
            response=response,
        )
    raise ConfigurationError("unknown engine {!r}".format(engine))


def load_fit(doc):
    engine = doc.get("engine")
    if engine == "glm":
        return GlmFit.from_dict(doc)
    if engine == "gbm":
        return GbmFit.from_dict(doc)
    raise ConfigurationError("unknown engine {!r}".format(engine))


def predict_layer(fit, row):
    """Probability or mean of one covariate row on the response scale."""
    frame = pd.DataFrame([dict(row)])
    for name in fit.covariates:
        for part in name.split(":"):
            if part not in frame.columns:
                raise PredictionError(
                    "missing covariate {!r}".format(part), term=part
                )
    return float(fit.predict(frame)[0])
