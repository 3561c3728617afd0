"""Synthetic claim portfolios drawn from a known three-layer model.

Each reported claim develops year by year: settlement with probability
p_j, a payment with probability q_j (shifted when the claim closes in the
same year) and a gamma distributed size with mean mu_j. Covariate effects
shift the logit of p and q and the log of mu. Development is censored at
the end of the observation window.

In multiplicative mode the mean size of a payment is chosen such that the
expected incremental paid amount of reporting year i in development year
j is n_i * alpha_i * beta_j.

"""

from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np
import pandas as pd
from scipy import special

from .engines.family import gamma_draws
from .exc import ConfigurationError
from .portfolio import (
    CovariateSpec,
    ObservationWindow,
    Portfolio,
    Schema,
    bin_continuous,
    check_breakpoints,
)
from .util import load_document, log

SHOCK_LEVELS = ("0", "1")
PROBABILITY_TOLERANCE = 1e-9


def _check_keys(doc, allowed, what):
    if not isinstance(doc, Mapping):
        raise ConfigurationError("{} must be a mapping".format(what))
    unknown = set(doc) - set(allowed)
    if unknown:
        raise ConfigurationError(
            "unknown {} settings: {}".format(what, ", ".join(sorted(unknown)))
        )


@dataclass(frozen=True)
class CovariateDistribution:
    """Distribution of one static covariate.

    Categorical covariates draw a level with the given probabilities.
    Numeric covariates are uniform on [low, high) and missing with
    probability `missing`; breakpoints add a binned copy.

    """

    name: str
    kind: str = "categorical"
    levels: Mapping = field(default_factory=dict)
    low: float = 0.0
    high: float = 1.0
    missing: float = 0.0
    breakpoints: tuple = ()

    @classmethod
    def from_dict(cls, name, doc):
        _check_keys(
            doc,
            ("kind", "levels", "low", "high", "missing", "breakpoints"),
            "covariate {!r}".format(name),
        )
        levels = doc.get("levels", {})
        if isinstance(levels, (list, tuple)):
            levels = {str(level): 1.0 / len(levels) for level in levels}
        return cls(
            name=name,
            kind=doc.get("kind", "categorical"),
            levels={str(k): float(v) for k, v in levels.items()},
            low=float(doc.get("low", 0.0)),
            high=float(doc.get("high", 1.0)),
            missing=float(doc.get("missing", 0.0)),
            breakpoints=tuple(float(b) for b in doc.get("breakpoints", ())),
        )

    def to_dict(self):
        if self.kind == "categorical":
            return {"kind": self.kind, "levels": dict(self.levels)}
        doc = {
            "kind": self.kind,
            "low": self.low,
            "high": self.high,
            "missing": self.missing,
        }
        if self.breakpoints:
            doc["breakpoints"] = list(self.breakpoints)
        return doc

    def validate(self):
        if self.kind == "categorical":
            probs = np.array(list(self.levels.values()), dtype=float)
            if not len(probs) or (probs < 0).any():
                raise ConfigurationError(
                    "covariate {!r} needs levels with nonnegative "
                    "probabilities".format(self.name)
                )
            if abs(probs.sum() - 1.0) > PROBABILITY_TOLERANCE:
                raise ConfigurationError(
                    "level probabilities of {!r} sum to {}, not 1".format(
                        self.name, probs.sum()
                    )
                )
        elif self.kind == "numeric":
            if not self.high > self.low:
                raise ConfigurationError(
                    "covariate {!r} needs low < high".format(self.name)
                )
            if not 0 <= self.missing < 1:
                raise ConfigurationError(
                    "missing share of {!r} must lie in [0, 1)".format(
                        self.name
                    )
                )
            check_breakpoints(self.breakpoints)
        else:
            raise ConfigurationError(
                "covariate {!r}: cannot generate kind {!r}".format(
                    self.name, self.kind
                )
            )

    @property
    def spec(self):
        return CovariateSpec(self.name, self.kind, self.breakpoints)

    def draw(self, rng, n):
        if self.kind == "categorical":
            labels = np.array(list(self.levels), dtype=object)
            probs = np.array(list(self.levels.values()), dtype=float)
            picks = rng.choice(len(labels), size=n, p=probs / probs.sum())
            return labels[picks]
        values = rng.uniform(self.low, self.high, size=n)
        values[rng.random(n) < self.missing] = np.nan
        return values


@dataclass(frozen=True)
class LayerTruth:
    """True baseline per development year and effects of one layer.

    `effects` maps a categorical covariate to per-level effects and a
    numeric covariate to a slope (missing values contribute nothing).
    `close_effect` applies in the settlement year of a claim.

    """

    base: tuple = ()
    effects: Mapping = field(default_factory=dict)
    close_effect: float = 0.0
    dispersion: Optional[float] = None

    @classmethod
    def from_dict(cls, doc, what):
        _check_keys(
            doc, ("base", "effects", "close_effect", "dispersion"), what
        )
        effects = {}
        for name, effect in (doc.get("effects") or {}).items():
            if isinstance(effect, Mapping):
                effect = {str(k): float(v) for k, v in effect.items()}
            else:
                effect = float(effect)
            effects[name] = effect
        dispersion = doc.get("dispersion")
        return cls(
            base=tuple(float(b) for b in doc.get("base", ())),
            effects=effects,
            close_effect=float(doc.get("close_effect", 0.0)),
            dispersion=None if dispersion is None else float(dispersion),
        )

    def to_dict(self):
        doc = {"base": list(self.base), "effects": dict(self.effects)}
        if self.close_effect:
            doc["close_effect"] = self.close_effect
        if self.dispersion is not None:
            doc["dispersion"] = self.dispersion
        return doc

    def shift(self, claims):
        """Link-scale shift of every claim."""
        shift = np.zeros(len(claims))
        for name, effect in self.effects.items():
            values = claims[name]
            if isinstance(effect, Mapping):
                shift += values.map(effect).fillna(0.0).to_numpy(dtype=float)
            else:
                shift += effect * np.nan_to_num(values.to_numpy(dtype=float))
        return shift


@dataclass(frozen=True)
class Shock:
    """Extra claims of one reporting year, tagged by a binary covariate."""

    reporting_year: int
    factor: float
    covariate: str = "extreme_weather"

    @classmethod
    def from_dict(cls, doc):
        _check_keys(doc, ("reporting_year", "factor", "covariate"), "shock")
        return cls(
            reporting_year=int(doc["reporting_year"]),
            factor=float(doc["factor"]),
            covariate=doc.get("covariate", "extreme_weather"),
        )

    def to_dict(self):
        return {
            "reporting_year": self.reporting_year,
            "factor": self.factor,
            "covariate": self.covariate,
        }


@dataclass
class GeneratorConfig:
    window: ObservationWindow
    claims_per_year: tuple
    settlement: LayerTruth
    payment: LayerTruth
    size: LayerTruth
    covariates: tuple = ()
    alpha: Optional[tuple] = None
    beta: Optional[tuple] = None
    shock: Optional[Shock] = None
    seed: int = 0

    @classmethod
    def from_dict(cls, doc):
        _check_keys(
            doc,
            (
                "window",
                "claims_per_year",
                "covariates",
                "settlement",
                "payment",
                "size",
                "multiplicative",
                "shock",
                "seed",
            ),
            "generator",
        )
        try:
            window = ObservationWindow(**doc["window"])
            counts = doc["claims_per_year"]
            if isinstance(counts, (int, float)):
                counts = [counts] * window.tau
            covariates = tuple(
                CovariateDistribution.from_dict(name, spec)
                for name, spec in (doc.get("covariates") or {}).items()
            )
            multiplicative = doc.get("multiplicative")
            alpha = beta = None
            if multiplicative is not None:
                _check_keys(multiplicative, ("alpha", "beta"), "multiplicative")
                alpha = tuple(float(a) for a in multiplicative["alpha"])
                beta = tuple(float(b) for b in multiplicative["beta"])
            config = cls(
                window=window,
                claims_per_year=tuple(int(n) for n in counts),
                settlement=LayerTruth.from_dict(
                    doc.get("settlement", {}), "settlement"
                ),
                payment=LayerTruth.from_dict(doc.get("payment", {}), "payment"),
                size=LayerTruth.from_dict(doc.get("size", {}), "size"),
                covariates=covariates,
                alpha=alpha,
                beta=beta,
                shock=(
                    Shock.from_dict(doc["shock"]) if doc.get("shock") else None
                ),
                seed=int(doc.get("seed", 0)),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigurationError("invalid generator config: {}".format(e))
        config.validate()
        return config

    @classmethod
    def load(cls, path):
        return cls.from_dict(load_document(path))

    def to_dict(self):
        doc = {
            "window": self.window.to_dict(),
            "claims_per_year": list(self.claims_per_year),
            "covariates": {c.name: c.to_dict() for c in self.covariates},
            "settlement": self.settlement.to_dict(),
            "payment": self.payment.to_dict(),
            "size": self.size.to_dict(),
            "seed": self.seed,
        }
        if self.multiplicative:
            doc["multiplicative"] = {
                "alpha": list(self.alpha),
                "beta": list(self.beta),
            }
        if self.shock is not None:
            doc["shock"] = self.shock.to_dict()
        return doc

    @property
    def tau(self):
        return self.window.tau

    @property
    def d(self):
        return self.window.d

    @property
    def multiplicative(self):
        return self.alpha is not None

    @property
    def covariate_names(self):
        names = [c.name for c in self.covariates]
        if self.shock is not None:
            names.append(self.shock.covariate)
        return names

    def _levels(self, name):
        if self.shock is not None and name == self.shock.covariate:
            return SHOCK_LEVELS
        for c in self.covariates:
            if c.name == name:
                return tuple(c.levels) if c.kind == "categorical" else None
        raise ConfigurationError(
            "effect on unknown covariate {!r}".format(name)
        )

    def validate(self):
        d = self.d
        if len(self.claims_per_year) != self.tau:
            raise ConfigurationError(
                "need {} claim counts, got {}".format(
                    self.tau, len(self.claims_per_year)
                )
            )
        if min(self.claims_per_year) < 0:
            raise ConfigurationError("claim counts must be nonnegative")
        names = self.covariate_names
        if len(set(names)) != len(names):
            raise ConfigurationError("duplicate covariate names")
        for c in self.covariates:
            c.validate()
        for name, layer in self.layers():
            if name == "size" and self.multiplicative and not layer.base:
                continue
            if len(layer.base) != d:
                raise ConfigurationError(
                    "{} needs {} baseline values, got {}".format(
                        name, d, len(layer.base)
                    )
                )
            base = np.array(layer.base)
            if name == "size":
                if not (base > 0).all():
                    raise ConfigurationError("size means must be > 0")
            elif not ((base >= 0) & (base <= 1)).all():
                raise ConfigurationError(
                    "{} probabilities must lie in [0, 1]".format(name)
                )
            for covariate, effect in layer.effects.items():
                levels = self._levels(covariate)
                if isinstance(effect, Mapping):
                    if levels is None:
                        raise ConfigurationError(
                            "numeric covariate {!r} needs a slope".format(
                                covariate
                            )
                        )
                    unknown = set(effect) - set(levels)
                    if unknown:
                        raise ConfigurationError(
                            "{} effects name unknown levels of {!r}: "
                            "{}".format(name, covariate, sorted(unknown))
                        )
                elif levels is not None:
                    raise ConfigurationError(
                        "categorical covariate {!r} needs level effects".format(
                            covariate
                        )
                    )
        if self.settlement.close_effect:
            raise ConfigurationError("settlement cannot depend on itself")
        if self.size.dispersion is None or not self.size.dispersion > 0:
            raise ConfigurationError("size needs a dispersion > 0")
        if self.shock is not None:
            if not 1 <= self.shock.reporting_year <= self.tau:
                raise ConfigurationError("shock reporting year outside window")
            if not self.shock.factor >= 1:
                raise ConfigurationError("shock factor must be >= 1")
        if self.multiplicative:
            self._validate_multiplicative()

    def _validate_multiplicative(self):
        if len(self.alpha) != self.tau or len(self.beta) != self.d:
            raise ConfigurationError(
                "multiplicative mode needs {} alphas and {} betas".format(
                    self.tau, self.d
                )
            )
        if min(self.alpha) <= 0 or min(self.beta) <= 0:
            raise ConfigurationError("alpha and beta must be > 0")
        shock = self.shock.covariate if self.shock is not None else None
        for name, layer in self.layers():
            if layer.close_effect or set(layer.effects) - {shock}:
                raise ConfigurationError(
                    "multiplicative mode allows effects of the shock "
                    "covariate only ({} layer)".format(name)
                )
        exposure = self.survival(self.settlement.base) * np.array(
            self.payment.base
        )
        if not (exposure > 0).all():
            raise ConfigurationError(
                "multiplicative mode needs a positive chance of a payment "
                "in every development year"
            )

    def layers(self):
        return [
            ("settlement", self.settlement),
            ("payment", self.payment),
            ("size", self.size),
        ]

    def survival(self, settlement):
        """Probability to be open at the start of each development year."""
        p = np.array(settlement, dtype=float)
        p[-1] = 1.0
        return np.concatenate([[1.0], np.cumprod(1.0 - p)[:-1]])

    def base_sizes(self):
        """Baseline mean size per reporting year and development year."""
        if not self.multiplicative:
            return np.tile(np.array(self.size.base), (self.tau, 1))
        exposure = self.survival(self.settlement.base) * np.array(
            self.payment.base
        )
        return np.outer(self.alpha, np.array(self.beta) / exposure)

    def schema(self):
        covariates = [c.spec for c in self.covariates]
        if self.shock is not None:
            covariates.append(
                CovariateSpec(self.shock.covariate, "categorical")
            )
        return Schema(covariates, self.window)


def _draw_claims(config, rng):
    counts = np.array(config.claims_per_year)
    reporting = np.repeat(np.arange(1, config.tau + 1), counts)
    shocked = np.zeros(len(reporting), dtype=bool)
    if config.shock is not None:
        i = config.shock.reporting_year
        extra = int(round(counts[i - 1] * (config.shock.factor - 1)))
        reporting = np.concatenate([reporting, np.full(extra, i)])
        shocked = np.concatenate([shocked, np.ones(extra, dtype=bool)])
    n = len(reporting)
    claims = pd.DataFrame(
        {"reporting_year": reporting},
        index=["C{:07d}".format(k) for k in range(1, n + 1)],
    )
    for covariate in config.covariates:
        claims[covariate.name] = covariate.draw(rng, n)
        if covariate.breakpoints:
            claims[covariate.name + "_bin"] = bin_continuous(
                claims[covariate.name], covariate.breakpoints
            )
    if config.shock is not None:
        claims[config.shock.covariate] = np.where(
            shocked, SHOCK_LEVELS[1], SHOCK_LEVELS[0]
        ).astype(object)
    return claims


def _probability(base, shift):
    with np.errstate(divide="ignore"):
        return special.expit(special.logit(base) + shift)


def generate(config: GeneratorConfig) -> Portfolio:
    """Draw a portfolio from `config`, censored at the window end.

    Covariates come from the stream `(seed, 0)` and the development of all
    claims from the stream `(seed, 1)`, claim by claim in id order.

    """
    config.validate()
    d, tau = config.d, config.tau
    claims = _draw_claims(config, np.random.default_rng([config.seed, 0]))
    n = len(claims)
    draws = np.random.default_rng([config.seed, 1]).random((n, d, 3))
    reporting = claims["reporting_year"].to_numpy()
    observed = config.window.observed_years(reporting)
    shifts = [layer.shift(claims) for _, layer in config.layers()]
    sizes = config.base_sizes()[reporting - 1]
    dispersion = config.size.dispersion

    frames = []
    alive = np.ones(n, dtype=bool)
    for j in range(1, d + 1):
        rows = np.flatnonzero(alive & (observed >= j))
        if not len(rows):
            break
        u = draws[rows, j - 1]
        if j == d:
            close = np.ones(len(rows), dtype=int)
        else:
            p = _probability(config.settlement.base[j - 1], shifts[0][rows])
            close = (u[:, 0] < p).astype(int)
        q = _probability(
            config.payment.base[j - 1],
            shifts[1][rows] + config.payment.close_effect * close,
        )
        payment = (u[:, 1] < q).astype(int)
        mu = sizes[rows, j - 1] * np.exp(
            shifts[2][rows] + config.size.close_effect * close
        )
        amounts = gamma_draws(u[:, 2], mu, dispersion)
        frames.append(
            pd.DataFrame(
                {
                    "claim_id": claims.index[rows],
                    "dev_year": j,
                    "close": close,
                    "payment": payment,
                    "size": np.where(payment == 1, amounts, 0.0),
                }
            )
        )
        alive[rows[close == 1]] = False

    records = pd.concat(frames, ignore_index=True) if frames else None
    if records is None:
        records = pd.DataFrame(
            columns=["claim_id", "dev_year", "close", "payment", "size"]
        )
    portfolio = Portfolio(config.window, claims, records, config.schema())
    log.info(
        "generate-portfolio",
        seed=config.seed,
        claims=len(portfolio.claims),
        records=len(portfolio.records),
        multiplicative=config.multiplicative,
    )
    return portfolio


def expected_triangle(config: GeneratorConfig):
    """Expected incremental paid amounts per reporting and development year.

    Covers the full rectangle (no censoring). Only configs whose effects
    come from the shock covariate have a closed form here.

    """
    config.validate()
    shock = config.shock.covariate if config.shock is not None else None
    for name, layer in config.layers():
        if set(layer.effects) - {shock}:
            raise ConfigurationError(
                "no closed form with covariate effects ({} layer)".format(name)
            )
    counts = np.array(config.claims_per_year, dtype=float)
    groups = [(SHOCK_LEVELS[0], counts)]
    if config.shock is not None:
        extra = np.zeros(config.tau)
        i = config.shock.reporting_year
        extra[i - 1] = round(counts[i - 1] * (config.shock.factor - 1))
        groups.append((SHOCK_LEVELS[1], extra))

    sizes = config.base_sizes()
    expected = np.zeros((config.tau, config.d))
    for level, n in groups:
        row = pd.DataFrame(index=[0])
        if shock:
            row[shock] = level
        a_p, a_q, a_mu = [layer.shift(row)[0] for _, layer in config.layers()]
        p = _probability(np.array(config.settlement.base), a_p)
        open_ = config.survival(p)
        p[-1] = 1.0
        per_claim = np.zeros(config.d)
        for close, weight in ((1, p), (0, 1.0 - p)):
            q = _probability(
                np.array(config.payment.base),
                a_q + config.payment.close_effect * close,
            )
            mean = np.exp(a_mu + config.size.close_effect * close)
            per_claim = per_claim + weight * q * mean
        expected += n[:, None] * sizes * (open_ * per_claim)[None, :]
    return expected
