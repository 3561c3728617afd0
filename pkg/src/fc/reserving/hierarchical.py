"""Hierarchical reserving models: ordered layers fitted one after another.

Each development year of a claim produces an update vector
(close, payment, size). The likelihood of a claim-year factorizes over the
layers in their order: a layer conditions on the static covariates, the
claim's past and the outcomes of the lower layers of the same year. Every
layer is an ordinary regression on the claim-years passing its filter.

"""

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Tuple

import numpy as np
import pandas as pd

from .engines import ENGINES, fit_layer, load_fit
from .engines.family import get_family
from .engines.selection import select_covariates, tune_gbm
from .exc import ConfigurationError, FittingError, ModelSpecError, StateError
from .portfolio import (
    FIRST_YEAR_COVARIATES,
    HISTORY_COVARIATES,
    LAYER_FIELDS,
    ObservationWindow,
    Portfolio,
)
from .util import conditional_update, load_document, log
from .weighting import (
    WeightVector,
    development_year_weights,
    log_densities,
    weighted_loglik,
)

FORMAT_VERSION = 1
FAMILIES = ("bernoulli", "gamma")


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a hierarchical model.

    `filter` maps claim-year columns to the value a row must have to enter
    the layer, e.g. ``{"open": 1}`` or ``{"payment": 1}``. Covariates may
    name static covariates, development covariates, interactions `a:b`
    and the responses of lower layers.

    """

    name: str
    order: int
    response: str
    family: str = "bernoulli"
    engine: str = "glm"
    covariates: Tuple[str, ...] = ()
    filter: Mapping[str, int] = field(default_factory=dict)
    variance_power: float = 2.0
    candidates: Tuple[str, ...] = ()
    config: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))
        object.__setattr__(self, "candidates", tuple(self.candidates))
        object.__setattr__(self, "filter", dict(self.filter))
        object.__setattr__(self, "config", dict(self.config))
        if self.response not in LAYER_FIELDS:
            raise ModelSpecError(
                "layer {!r}: response must be one of {}, got {!r}".format(
                    self.name, ", ".join(LAYER_FIELDS), self.response
                )
            )
        if self.family not in FAMILIES:
            raise ModelSpecError(
                "layer {!r}: unknown family {!r}".format(self.name, self.family)
            )
        if self.engine not in ENGINES:
            raise ModelSpecError(
                "layer {!r}: unknown engine {!r}".format(self.name, self.engine)
            )
        if self.family == "bernoulli" and self.variance_power != 2.0:
            raise ModelSpecError(
                "layer {!r}: variance_power needs the gamma family".format(
                    self.name
                )
            )
        if self.engine == "gbm" and self.variance_power != 2.0:
            raise ModelSpecError(
                "layer {!r}: the gbm engine needs variance_power 2".format(
                    self.name
                )
            )
        if not 1.0 <= self.variance_power <= 2.0:
            raise ModelSpecError(
                "layer {!r}: variance_power must lie in [1, 2]".format(
                    self.name
                )
            )

    @property
    def family_object(self):
        if self.family == "bernoulli":
            return get_family("bernoulli")
        return get_family("gamma", self.variance_power)

    @property
    def is_binary(self):
        return self.family == "bernoulli"

    def covariate_parts(self):
        return {part for c in self.covariates for part in c.split(":")}

    def select(self, frame, d=None):
        """Mask of the rows passing the filter.

        With `d` the settlement layer skips development year `d`, where
        settlement is certain.

        """
        mask = np.ones(len(frame), dtype=bool)
        for column, value in self.filter.items():
            if column not in frame.columns:
                raise ModelSpecError(
                    "layer {!r}: filter column {!r} is unknown".format(
                        self.name, column
                    )
                )
            mask &= frame[column].to_numpy() == value
        if d is not None and self.response == "close":
            mask &= frame["dev_year"].to_numpy() < d
        return mask

    def describe_filter(self):
        if not self.filter:
            return "all claim-years"
        return " and ".join(
            "{}={}".format(k, v) for k, v in sorted(self.filter.items())
        )

    def to_dict(self):
        doc = {
            "name": self.name,
            "order": self.order,
            "response": self.response,
            "family": self.family,
            "engine": self.engine,
            "covariates": list(self.covariates),
            "filter": dict(self.filter),
        }
        if self.family == "gamma":
            doc["variance_power"] = self.variance_power
        if self.candidates:
            doc["candidates"] = list(self.candidates)
        if self.config:
            doc["config"] = dict(self.config)
        return doc

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ModelSpecError(
                "layer {!r}: unknown keys {}".format(
                    doc.get("name"), ", ".join(sorted(unknown))
                )
            )
        for key in ("name", "order", "response"):
            if key not in doc:
                raise ModelSpecError("layer spec lacks {!r}".format(key))
        return cls(**doc)


def validate_specs(specs):
    """Check the layer order and the covariate references between layers."""
    specs = sorted(specs, key=lambda s: s.order)
    if not specs:
        raise ModelSpecError("a model needs at least one layer")
    orders = [s.order for s in specs]
    if orders != list(range(1, len(specs) + 1)):
        raise ModelSpecError(
            "layer orders must be 1..{} without gaps, got {}".format(
                len(specs), orders
            )
        )
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ModelSpecError("layer names must be unique: {}".format(names))
    responses = [s.response for s in specs]
    if len(set(responses)) != len(responses):
        raise ModelSpecError(
            "each response may be modeled once: {}".format(responses)
        )
    for index, spec in enumerate(specs):
        lower = set(responses[:index])
        for part in spec.covariate_parts() | set(spec.candidates):
            if part in LAYER_FIELDS and part not in lower:
                raise ModelSpecError(
                    "layer {!r} uses {!r} which is not the outcome of a "
                    "lower layer".format(spec.name, part)
                )
        for column in spec.filter:
            if column in LAYER_FIELDS and column not in lower:
                raise ModelSpecError(
                    "layer {!r} filters on {!r} which is not the outcome of "
                    "a lower layer".format(spec.name, column)
                )
    return specs


def default_layer_specs(covariates=(), engine="glm"):
    """The three-layer model: settlement, payment and payment size."""
    covariates = tuple(covariates)
    return [
        LayerSpec(
            "close",
            1,
            "close",
            "bernoulli",
            engine,
            covariates,
            {"open": 1},
        ),
        LayerSpec(
            "payment",
            2,
            "payment",
            "bernoulli",
            engine,
            covariates + ("close",),
            {"open": 1},
        ),
        LayerSpec(
            "size",
            3,
            "size",
            "gamma",
            engine,
            covariates + ("close",),
            {"payment": 1},
        ),
    ]


def load_layer_specs(source):
    """Layer specs from a model-config document or its path."""
    doc = load_document(source) if isinstance(source, str) else source
    if isinstance(doc, Mapping):
        doc = doc.get("layers", [])
    if not isinstance(doc, list):
        raise ModelSpecError("a model config lists its layers")
    return validate_specs([LayerSpec.from_dict(layer) for layer in doc])


def has_settlement_layer(specs):
    return any(s.response == "close" for s in specs)


def training_frame(portfolio: Portfolio, specs, first_modeled_year=1):
    """The claim-years the layers are fitted on.

    Without a settlement layer observed settlement is ignored: every
    claim-year counts as open.

    """
    frame = portfolio.claim_years(first_modeled_year)
    if not has_settlement_layer(specs):
        frame["open"] = 1
    return frame


def _layer_config(spec, engine_configs):
    engine_configs = engine_configs or {}
    config = dict(engine_configs.get(spec.engine, {}))
    config.update(engine_configs.get(spec.name, {}))
    config.update(spec.config)
    return config


def fit_hrm(
    portfolio: Portfolio,
    layer_specs=None,
    weights=None,
    engine_configs=None,
    first_modeled_year=1,
    seed=0,
):
    """Fit all layers in order on the claim-years passing their filters.

    Without explicit `weights` the development-year weights of the
    portfolio's reported counts apply.

    """
    specs = validate_specs(layer_specs or default_layer_specs())
    window = portfolio.window
    if weights is None:
        weights = development_year_weights(
            portfolio.reported_counts,
            window.d,
            first_modeled_year,
            reporting_years=window.tau,
        )
    elif not isinstance(weights, WeightVector):
        weights = WeightVector(weights)
    frame = training_frame(portfolio, specs, first_modeled_year)
    row_weights = weights.for_rows(frame["dev_year"].to_numpy())
    fits = {}
    for spec in specs:
        mask = spec.select(frame, window.d)
        if not mask.any():
            raise FittingError(
                "layer {!r} has no training rows for {}".format(
                    spec.name, spec.describe_filter()
                )
            )
        layer_log = log.bind(layer=spec.name)
        fits[spec.name] = fit_layer(
            frame[mask],
            spec.response,
            spec.family_object,
            spec.engine,
            list(spec.covariates),
            row_weights[mask],
            config=_layer_config(spec, engine_configs),
            seed=seed + spec.order,
        )
        layer_log.info(
            "fit-layer",
            engine=spec.engine,
            family=spec.family,
            rows=int(mask.sum()),
            covariates=list(spec.covariates),
        )
    return HierarchicalModel(specs, fits, window, first_modeled_year, weights)


def _layer_rows(layer_spec, portfolio, specs, weights, first_modeled_year):
    if weights is None:
        weights = development_year_weights(
            portfolio.reported_counts,
            portfolio.window.d,
            first_modeled_year,
            reporting_years=portfolio.window.tau,
        )
    elif not isinstance(weights, WeightVector):
        weights = WeightVector(weights)
    frame = training_frame(portfolio, specs, first_modeled_year)
    mask = layer_spec.select(frame, portfolio.window.d)
    frame = frame[mask].reset_index(drop=True)
    if not len(frame):
        raise FittingError(
            "layer {!r} has no training rows for {}".format(
                layer_spec.name, layer_spec.describe_filter()
            )
        )
    return frame, weights.for_rows(frame["dev_year"].to_numpy())


def forward_select(
    layer_spec: LayerSpec,
    candidates,
    portfolio: Portfolio,
    K=None,
    weights=None,
    seed=0,
    first_modeled_year=1,
    engine_configs=None,
    threads=1,
    layer_specs=None,
):
    """Forward selection of covariates for one layer.

    The layer's own covariates form the base model. Returns the
    `Selection` with the chosen candidates in order of inclusion.

    """
    candidates = list(candidates)
    if not candidates:
        raise ConfigurationError(
            "layer {!r}: no candidate covariates".format(layer_spec.name)
        )
    frame, row_weights = _layer_rows(
        layer_spec,
        portfolio,
        layer_specs or [layer_spec],
        weights,
        first_modeled_year,
    )
    return select_covariates(
        frame,
        layer_spec.response,
        layer_spec.family_object,
        layer_spec.engine,
        list(layer_spec.covariates),
        candidates,
        row_weights,
        K=K,
        seed=seed,
        config=_layer_config(layer_spec, engine_configs),
        threads=threads,
    )


def select_layers(
    portfolio,
    layer_specs,
    K=None,
    weights=None,
    seed=0,
    first_modeled_year=1,
    engine_configs=None,
    threads=1,
):
    """Run forward selection for every layer that lists candidates.

    Returns the updated specs and the selections by layer name.

    """
    specs = validate_specs(layer_specs)
    selections = {}
    result = []
    for spec in specs:
        if spec.candidates:
            selection = forward_select(
                spec,
                spec.candidates,
                portfolio,
                K=K,
                weights=weights,
                seed=seed,
                first_modeled_year=first_modeled_year,
                engine_configs=engine_configs,
                threads=threads,
                layer_specs=specs,
            )
            selections[spec.name] = selection
            spec = replace(
                spec,
                covariates=tuple(selection.covariates),
                candidates=(),
            )
        result.append(spec)
    return validate_specs(result), selections


def tune_layers(
    portfolio,
    layer_specs,
    grid,
    K=None,
    weights=None,
    seed=0,
    first_modeled_year=1,
    engine_configs=None,
    threads=1,
):
    """Tune the boosting settings of every gbm layer on `grid`.

    Each tuned layer keeps the winning setting in its own config. Returns
    the updated specs and the tunings by layer name.

    """
    specs = validate_specs(layer_specs)
    if not any(s.engine == "gbm" for s in specs):
        raise ConfigurationError("tuning needs at least one gbm layer")
    tunings = {}
    result = []
    for spec in specs:
        if spec.engine == "gbm":
            frame, row_weights = _layer_rows(
                spec, portfolio, specs, weights, first_modeled_year
            )
            tuning = tune_gbm(
                frame,
                spec.response,
                spec.family_object,
                list(spec.covariates),
                row_weights,
                grid,
                base=_layer_config(spec, engine_configs),
                K=K,
                seed=seed + spec.order,
                threads=threads,
            )
            tunings[spec.name] = tuning
            spec = replace(spec, config=tuning.best)
        result.append(spec)
    return validate_specs(result), tunings


class HierarchicalModel(object):
    """Fitted layers in order, together with their training context."""

    def __init__(
        self,
        layers,
        fits,
        window: ObservationWindow,
        first_modeled_year=1,
        weights: Optional[WeightVector] = None,
    ):
        self.layers = validate_specs(layers)
        self.fits = dict(fits)
        self.window = window
        self.first_modeled_year = first_modeled_year
        self.weights = weights
        self.log = log.bind(subsystem="hrm")

    def __repr__(self):
        return "<HierarchicalModel {}>".format(
            " > ".join(s.name for s in self.layers)
        )

    @property
    def fitted(self):
        return all(s.name in self.fits for s in self.layers)

    def check_fitted(self):
        if not self.fitted:
            missing = [s.name for s in self.layers if s.name not in self.fits]
            raise StateError("layers {} are not fitted".format(missing))

    @property
    def has_settlement(self):
        return has_settlement_layer(self.layers)

    def layer(self, response):
        for spec in self.layers:
            if spec.response == response:
                return spec
        return None

    @property
    def is_history_free(self):
        """Whether no layer conditions on the simulated past."""
        history = set(HISTORY_COVARIATES)
        return not any(
            spec.covariate_parts() & history or set(spec.filter) & history
            for spec in self.layers
        )

    def frame(self, portfolio):
        return training_frame(portfolio, self.layers, self.first_modeled_year)

    def layer_logliks(self, portfolio=None, frame=None, weights=None):
        """Weighted log-likelihood per layer on the rows passing its filter."""
        self.check_fitted()
        if frame is None:
            frame = self.frame(portfolio)
        weights = weights if weights is not None else self.weights
        if weights is None:
            weights = WeightVector.uniform(
                self.first_modeled_year, self.window.d
            )
        result = {}
        for spec in self.layers:
            mask = spec.select(frame, self.window.d)
            rows = frame[mask]
            if isinstance(weights, WeightVector):
                w = weights
            else:
                w = np.asarray(weights, dtype=float)[mask]
            result[spec.name] = weighted_loglik(
                self.fits[spec.name], rows, w, spec.response
            )
        return result

    def loglik(self, portfolio=None, frame=None, weights=None):
        return math.fsum(self.layer_logliks(portfolio, frame, weights).values())

    def row_logliks(self, frame):
        """Unweighted log-likelihood contribution per claim-year row."""
        self.check_fitted()
        total = np.zeros(len(frame))
        for spec in self.layers:
            mask = spec.select(frame, self.window.d)
            if mask.any():
                total[mask] += log_densities(
                    self.fits[spec.name], frame[mask], spec.response
                )
        return total

    def expected_development(self, portfolio: Portfolio, horizon=None):
        """Expected open claims, payments and size per claim and future year.

        Exact for history-free models: the binary layers of every future
        year are enumerated and weighted with the probability that the
        claim is still open.

        """
        self.check_fitted()
        if not self.is_history_free:
            raise StateError(
                "expected development needs a model without history "
                "covariates; simulate instead"
            )
        binary = {s.response for s in self.layers if s.is_binary}
        for spec in self.layers:
            for part in spec.covariate_parts() | set(spec.filter):
                if part in LAYER_FIELDS and part not in binary:
                    raise ModelSpecError(
                        "layer {!r} conditions on the continuous outcome "
                        "{!r}; simulate instead".format(spec.name, part)
                    )
        states = future_claims(self, portfolio)
        d = self.window.d
        tau = portfolio.window.tau
        steps = d - states["observed_years"].to_numpy()
        if horizon is not None:
            steps = np.minimum(steps, horizon)
        survival = np.ones(len(states))
        results = []
        for step in range(1, int(steps.max(initial=0)) + 1):
            active = steps >= step
            if not active.any():
                break
            base = step_frame(
                states[active], step, tau, self.first_modeled_year
            )
            alive = survival[active]
            branches = [(base.copy(), np.ones(len(base)))]
            expected_size = np.zeros(len(base))
            for spec in self.layers:
                fit = self.fits[spec.name]
                split = []
                for frame, probability in branches:
                    mask = spec.select(frame, d)
                    if spec.is_binary:
                        p = np.zeros(len(frame))
                        if mask.any():
                            p[mask] = fit.predict(frame[mask])
                        if spec.response == "close":
                            p[frame["dev_year"].to_numpy() == d] = 1.0
                        for outcome, weight in ((1, p), (0, 1.0 - p)):
                            branch = frame.copy()
                            branch[spec.response] = outcome
                            split.append((branch, probability * weight))
                    else:
                        mu = np.zeros(len(frame))
                        if mask.any():
                            mu[mask] = fit.predict(frame[mask])
                        expected_size += probability * mu
                        frame[spec.response] = mu
                        split.append((frame, probability))
                branches = split
            payments = np.zeros(len(base))
            closing = np.zeros(len(base))
            payment_layer = self.layer("payment")
            size_layer = self.layer("size")
            for frame, probability in branches:
                if payment_layer is not None:
                    payments += probability * frame["payment"].to_numpy()
                elif size_layer is not None:
                    payments += probability * size_layer.select(frame)
                if self.has_settlement:
                    closing += probability * frame["close"].to_numpy()
            result = base[["claim_id", "reporting_year", "dev_year"]].copy()
            result["calendar_year"] = tau + step
            result["step"] = step
            result["open"] = alive
            result["payment"] = alive * payments
            result["size"] = alive * expected_size
            results.append(result)
            survival[active] = alive * (1.0 - closing)
        if not results:
            return pd.DataFrame(
                columns=[
                    "claim_id",
                    "reporting_year",
                    "dev_year",
                    "calendar_year",
                    "step",
                    "open",
                    "payment",
                    "size",
                ]
            )
        return pd.concat(results, ignore_index=True)

    def expected_reserve(self, portfolio: Portfolio, horizon=None):
        development = self.expected_development(portfolio, horizon)
        return float(development["size"].sum())

    def to_dict(self):
        self.check_fitted()
        return {
            "version": FORMAT_VERSION,
            "window": self.window.to_dict(),
            "first_modeled_year": self.first_modeled_year,
            "weights": self.weights.to_dict() if self.weights else None,
            "layers": [
                dict(spec.to_dict(), fit=self.fits[spec.name].to_dict())
                for spec in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, doc):
        if doc.get("version") != FORMAT_VERSION:
            raise ConfigurationError(
                "unsupported model format version {!r}".format(
                    doc.get("version")
                )
            )
        layers = []
        fits = {}
        for layer in doc["layers"]:
            layer = dict(layer)
            fit = layer.pop("fit", None)
            spec = LayerSpec.from_dict(layer)
            layers.append(spec)
            if fit is not None:
                fits[spec.name] = load_fit(fit)
        weights = doc.get("weights")
        return cls(
            layers,
            fits,
            ObservationWindow(**doc["window"]),
            doc.get("first_modeled_year", 1),
            WeightVector.from_dict(weights) if weights else None,
        )

    def save(self, path):
        conditional_update(path, self.to_dict())

    @classmethod
    def load(cls, path):
        return cls.from_dict(load_document(path))


def future_claims(model: HierarchicalModel, portfolio: Portfolio):
    """Claims that still develop, with their state at the end of the data.

    Claims observed for `d` years are complete. With a settlement layer,
    claims settled in the data are complete too.

    """
    d = model.window.d
    if portfolio.window.d != d:
        raise ConfigurationError(
            "the model covers {} development years, the portfolio {}".format(
                d, portfolio.window.d
            )
        )
    claims = portfolio.claims
    keep = claims["observed_years"].to_numpy() < d
    if model.has_settlement:
        keep &= claims["settlement_year"].to_numpy() == 0
    frame = portfolio.claim_years(1)
    last = frame.groupby("claim_id", sort=False).tail(1).set_index("claim_id")
    states = claims[keep].drop(columns=["settlement_year"]).copy()
    last = last.reindex(states.index)
    states["size_last_year"] = last["size"].to_numpy(dtype=float)
    states["total_amount_paid"] = (
        last["total_amount_paid"].to_numpy(dtype=float)
        + last["size"].to_numpy(dtype=float)
    )
    states["paid_last_year"] = (states["size_last_year"] > 0).astype(int)
    if model.first_modeled_year == 2:
        first = frame[frame["dev_year"] == 1].set_index("claim_id")
        for name, source in zip(FIRST_YEAR_COVARIATES, LAYER_FIELDS):
            states[name] = first[source].reindex(states.index).to_numpy()
    states.index.name = "claim_id"
    return states.reset_index()


def step_frame(states, step, tau, first_modeled_year=1):
    """Covariate rows of the claims in `states` for future step `step`."""
    frame = states.copy()
    frame["dev_year"] = frame["observed_years"].to_numpy() + step
    frame["calendar_year"] = tau + step
    frame["open"] = 1
    return frame.reset_index(drop=True)
