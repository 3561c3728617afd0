"""Covariate selection and boosting tuning by cross-validation."""

import itertools
import math
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np

from ..exc import (
    ConfigurationError,
    ConvergenceError,
    DomainError,
    EvaluationError,
    FittingError,
    PredictionError,
)
from ..sysconfig import sysconfig
from ..util import log, parallel_map
from ..weighting import assign_folds, weighted_loglik
from . import fit_layer
from .gbm import Hyperparameters

# Fold failures that make a candidate unusable rather than the run invalid.
FOLD_FAILURES = (
    ConvergenceError,
    DomainError,
    EvaluationError,
    PredictionError,
)


@dataclass
class Selection:
    """Selected covariates in order of inclusion.

    `gains` holds the hold-out likelihood increase of each step,
    `importance` the same rescaled to sum to 100.

    """

    base: List[str]
    selected: List[str] = field(default_factory=list)
    gains: Dict[str, float] = field(default_factory=dict)
    scores: List[float] = field(default_factory=list)

    @property
    def covariates(self):
        return self.base + self.selected

    @property
    def importance(self):
        total = sum(self.gains.values())
        if not total > 0:
            return {}
        return {name: 100.0 * g / total for name, g in self.gains.items()}

    def to_dict(self):
        return {
            "base": self.base,
            "selected": self.selected,
            "gains": self.gains,
            "importance": self.importance,
            "scores": self.scores,
        }


def cross_validated_loglik(
    frame,
    response,
    family,
    engine,
    covariates,
    folds,
    row_weights,
    config=None,
    seed=0,
):
    """Hold-out weighted log-likelihood summed over all folds.

    A fold whose model cannot be fitted or evaluated scores -inf.

    """
    total = 0.0
    for k in np.unique(folds):
        test = folds == k
        train = ~test
        try:
            fit = fit_layer(
                frame[train],
                response,
                family,
                engine,
                covariates,
                row_weights[train],
                config=config,
                seed=seed,
            )
            total += weighted_loglik(
                fit, frame[test], row_weights[test], response
            )
        except FOLD_FAILURES as e:
            log.warning(
                "fold-failed",
                response=response,
                fold=int(k),
                covariates=covariates,
                error=str(e),
            )
            return -math.inf
    return total


def _folds(frame, K, seed):
    K = K or sysconfig.selection["folds"]
    strata = None
    if sysconfig.selection["stratify"]:
        strata = frame["dev_year"].to_numpy()
    return assign_folds(len(frame), K, seed, strata=strata)


def select_covariates(
    frame,
    response,
    family,
    engine,
    base,
    candidates,
    row_weights,
    K=None,
    seed=0,
    config=None,
    threads=1,
):
    """Add the candidate with the largest hold-out gain until none improves.

    All steps share one fold assignment. Candidates of a step are scored
    independently and may run in parallel.

    """
    folds = _folds(frame, K, seed)
    row_weights = np.asarray(row_weights, dtype=float)
    frame = frame.reset_index(drop=True)

    def score(covariates):
        return cross_validated_loglik(
            frame,
            response,
            family,
            engine,
            covariates,
            folds,
            row_weights,
            config,
            seed,
        )

    selection = Selection(list(base))
    current = score(selection.covariates)
    if not math.isfinite(current):
        raise FittingError(
            "cannot fit the base model of {!r} on {}".format(
                response, selection.covariates or "the intercept"
            )
        )
    selection.scores.append(current)
    remaining = [c for c in candidates if c not in selection.covariates]
    while remaining:
        scores = parallel_map(
            lambda c: score(selection.covariates + [c]), remaining, threads
        )
        for candidate, value in zip(remaining, scores):
            log.debug(
                "selection-candidate",
                response=response,
                candidate=candidate,
                gain=value - current,
            )
        best = int(np.argmax(scores))
        if not scores[best] > current:
            break
        candidate = remaining.pop(best)
        selection.selected.append(candidate)
        selection.gains[candidate] = scores[best] - current
        selection.scores.append(scores[best])
        current = scores[best]
    log.info(
        "forward-selection",
        response=response,
        engine=engine,
        selected=selection.selected,
    )
    return selection


@dataclass
class Tuning:
    """Boosting settings scored by hold-out likelihood.

    `best` is the complete setting with the highest score; ties keep the
    setting listed first.

    """

    best: Dict[str, object]
    scores: List[tuple] = field(default_factory=list)

    def to_dict(self):
        return {
            "best": self.best,
            "scores": [
                {"config": config, "score": score}
                for config, score in self.scores
            ],
        }


def grid_settings(grid, base=None):
    """Every combination of the `grid` values on top of `base`."""
    grid = dict(grid or {})
    if not grid:
        raise ConfigurationError("a tuning grid needs at least one setting")
    names = sorted(grid)
    for name in names:
        values = grid[name]
        if not isinstance(values, (list, tuple)) or not values:
            raise ConfigurationError(
                "tuning grid {!r} needs a list of values".format(name)
            )
    settings = []
    for values in itertools.product(*(grid[n] for n in names)):
        setting = dict(base or {})
        setting.update(zip(names, values))
        Hyperparameters.from_dict(setting)
        settings.append(setting)
    return settings


def tune_gbm(
    frame,
    response,
    family,
    covariates,
    row_weights,
    grid,
    base=None,
    K=None,
    seed=0,
    threads=1,
):
    """Grid search of boosting hyperparameters.

    `grid` maps hyperparameter names to the values to try; the others
    keep their `base` value or the configured default. All settings are
    scored on one fold assignment.

    """
    settings = grid_settings(grid, base)
    frame = frame.reset_index(drop=True)
    folds = _folds(frame, K, seed)
    row_weights = np.asarray(row_weights, dtype=float)
    scores = parallel_map(
        lambda setting: cross_validated_loglik(
            frame,
            response,
            family,
            "gbm",
            list(covariates),
            folds,
            row_weights,
            setting,
            seed,
        ),
        settings,
        threads,
    )
    best = int(np.argmax(scores))
    if not math.isfinite(scores[best]):
        raise FittingError(
            "no boosting setting of {!r} could be fitted".format(response)
        )
    log.info(
        "gbm-tuning",
        response=response,
        settings=len(settings),
        best=settings[best],
        score=scores[best],
    )
    return Tuning(settings[best], list(zip(settings, scores)))
