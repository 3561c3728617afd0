"""Moving-window out-of-time evaluation of reserving models.

At every evaluation date (the end of a calendar year) a model is refitted
on the data known then and its reserve for the next `horizon` calendar
years is compared with the payments that were actually made in those
years on the claims reported by the date.

Models may be fitted separately per level of a static claim covariate
and claims may be left out of the evaluation altogether.

"""

import math
import os.path
from dataclasses import dataclass, field, replace
from typing import Dict, Mapping, Optional

import numpy as np
import pandas as pd

from .aggregate import chain_ladder, crm_rbns, dcl_rbns, mack_se
from .engines.gbm import gbm_importance
from .engines.selection import grid_settings
from .exc import (
    ConfigurationError,
    EstimabilityError,
    FittingError,
    SummaryError,
    UndefinedError,
)
from .hierarchical import (
    default_layer_specs,
    fit_hrm,
    load_layer_specs,
    select_layers,
    tune_layers,
)
from .portfolio import Portfolio
from .simulation import simulate_paths
from .triangle import build_triangle
from .util import conditional_update, load_document, log, parallel_map
from .weighting import WeightVector

MODEL_KINDS = ("hrm", "chainladder", "dcl", "crm")
WEIGHTINGS = ("development", "uniform")
RESULT_COLUMNS = [
    "date",
    "model",
    "predicted",
    "actual",
    "pe",
    "lower",
    "upper",
]
IMPORTANCE_COLUMNS = ["date", "model", "layer", "covariate", "importance"]


@dataclass
class ModelConfig:
    """One model of an evaluation run.

    `hrm` models carry their layer specs; layers listing candidates are
    selected once on the first evaluation date, and with a `tuning` grid
    their gbm layers are tuned there too. With `segment_by` one model is
    fitted per level of that claim covariate and the reserves are added.
    `level` is the coverage of the reported bounds.

    """

    name: str
    kind: str = "hrm"
    layers: tuple = ()
    first_modeled_year: int = 1
    engine_configs: Mapping = field(default_factory=dict)
    weighting: str = "development"
    paths: int = 0
    level: float = 0.9
    segment_by: Optional[str] = None
    tuning: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ConfigurationError(
                "model {!r}: unknown kind {!r}, choose one of {}".format(
                    self.name, self.kind, ", ".join(MODEL_KINDS)
                )
            )
        if self.weighting not in WEIGHTINGS:
            raise ConfigurationError(
                "model {!r}: unknown weighting {!r}".format(
                    self.name, self.weighting
                )
            )
        if self.paths < 0:
            raise ConfigurationError(
                "model {!r}: paths must be >= 0".format(self.name)
            )
        if not 0 < self.level < 1:
            raise ConfigurationError(
                "model {!r}: level must lie in (0, 1)".format(self.name)
            )
        if self.kind == "hrm" and not self.layers:
            self.layers = tuple(default_layer_specs())
        self.tuning = dict(self.tuning or {})
        if self.tuning and not any(s.engine == "gbm" for s in self.layers):
            raise ConfigurationError(
                "model {!r}: tuning needs a gbm layer".format(self.name)
            )
        if self.tuning:
            grid_settings(self.tuning)

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        kind = doc.get("kind", "hrm")
        layers = ()
        if kind == "hrm":
            if "layers" in doc:
                layers = load_layer_specs(doc["layers"])
            else:
                layers = default_layer_specs(
                    doc.get("covariates", ()), doc.get("engine", "glm")
                )
        try:
            return cls(
                name=doc.get("name", kind),
                kind=kind,
                layers=tuple(layers),
                first_modeled_year=int(doc.get("first_modeled_year", 1)),
                engine_configs=doc.get("engine_configs", {}),
                weighting=doc.get("weighting", "development"),
                paths=int(doc.get("paths", 0)),
                level=float(doc.get("level", 0.9)),
                segment_by=doc.get("segment_by"),
                tuning=doc.get("tuning", {}),
            )
        except (TypeError, ValueError) as e:
            raise ConfigurationError("invalid model config: {}".format(e))

    def to_dict(self):
        doc = {"name": self.name, "kind": self.kind, "level": self.level}
        if self.kind == "hrm":
            doc.update(
                layers=[spec.to_dict() for spec in self.layers],
                first_modeled_year=self.first_modeled_year,
                engine_configs=dict(self.engine_configs),
                weighting=self.weighting,
                paths=self.paths,
            )
            if self.tuning:
                doc["tuning"] = dict(self.tuning)
        if self.segment_by:
            doc["segment_by"] = self.segment_by
        return doc


@dataclass
class EvaluationConfig:
    dates: tuple
    horizon: int
    models: tuple
    cap: Optional[float] = None
    seed: int = 0
    exclude: Mapping = field(default_factory=dict)

    @classmethod
    def from_dict(cls, doc):
        if not isinstance(doc, Mapping) or "dates" not in doc:
            raise ConfigurationError("an evaluation config lists its dates")
        models = doc.get("models") or [{"name": "hrm", "kind": "hrm"}]
        cap = doc.get("cap")
        return cls(
            dates=tuple(int(d) for d in doc["dates"]),
            horizon=int(doc.get("horizon", 1)),
            models=tuple(ModelConfig.from_dict(m) for m in models),
            cap=None if cap is None else float(cap),
            seed=int(doc.get("seed", 0)),
            exclude=_load_exclude(doc.get("exclude") or {}),
        )

    @classmethod
    def load(cls, path):
        return cls.from_dict(load_document(path))


def _load_exclude(doc):
    if not isinstance(doc, Mapping):
        raise ConfigurationError(
            "exclude maps claim covariates to the levels to leave out"
        )
    exclude = {}
    for name, levels in doc.items():
        if isinstance(levels, (str, int, float)):
            levels = [levels]
        exclude[str(name)] = list(levels)
    return exclude


def percentage_error(predicted, actual, cap=None):
    """Signed error of `predicted` relative to `actual`, in percent."""
    if not actual or not math.isfinite(actual):
        raise UndefinedError(
            "percentage error undefined for actual {!r}".format(actual)
        )
    pe = (predicted - actual) / actual * 100.0
    if cap is not None:
        pe = max(-cap, min(cap, pe))
    return pe


def actual_development(portfolio: Portfolio, cutoff, horizon):
    """Paid amounts of claims reported by `cutoff` in the next years.

    `cutoff` is a calendar year index; payments of calendar years
    cutoff + 1 .. cutoff + horizon count.

    """
    reporting = portfolio.claims["reporting_year"]
    records = portfolio.records
    first = reporting.reindex(records["claim_id"]).to_numpy()
    calendar = first + records["dev_year"].to_numpy() - 1
    inside = (first <= cutoff) & (calendar > cutoff)
    inside &= calendar <= cutoff + horizon
    return float(records["size"].to_numpy()[inside].sum())




def exclude_claims(portfolio: Portfolio, exclude):
    """The portfolio without the claims taking an excluded level.

    `exclude` maps claim covariates to the levels to leave out.

    """
    if not exclude:
        return portfolio
    drop = np.zeros(len(portfolio.claims), dtype=bool)
    for name, levels in exclude.items():
        drop |= portfolio.covariate_in(name, levels)
    log.info(
        "evaluation-exclude",
        covariates=sorted(exclude),
        claims=int(drop.sum()),
    )
    return portfolio.subset(~drop)


def segment_levels(portfolio: Portfolio, name):
    if name not in portfolio.covariate_names:
        raise ConfigurationError("unknown segment covariate {!r}".format(name))
    values = portfolio.claims[name]
    if values.isna().any():
        raise ConfigurationError(
            "segment covariate {!r} has missing values".format(name)
        )
    return sorted(pd.unique(values).tolist(), key=str)


def _segment_config(config, level):
    return replace(
        config,
        name="{}[{}]".format(config.name, level),
        segment_by=None,
    )


@dataclass
class Prediction:
    """Horizon reserve of one model at one date.

    `totals` are the simulated horizon totals when the model simulated
    paths. `importance` maps gbm layers to their covariate importance.

    """

    predicted: float
    lower: float = math.nan
    upper: float = math.nan
    totals: Optional[np.ndarray] = None
    importance: Dict[str, Dict[str, float]] = field(default_factory=dict)


def _horizon_band(triangle, horizon):
    d = triangle.shape[1]
    offset = np.arange(d)[None, :] - triangle.latest[:, None]
    return (offset >= 1) & (offset <= horizon)


def _bounds(totals, level):
    tail = (1.0 - level) / 2.0
    lower, upper = np.quantile(
        totals, [tail, 1.0 - tail], method="inverted_cdf"
    )
    return float(lower), float(upper)


def _weights(config, portfolio):
    if config.weighting == "uniform":
        return WeightVector.uniform(
            config.first_modeled_year, portfolio.window.d
        )
    return None


def _layer_importance(model):
    importance = {}
    for spec in model.layers:
        if spec.engine != "gbm":
            continue
        try:
            importance[spec.name] = gbm_importance(model.fits[spec.name])
        except UndefinedError as e:
            log.warning("importance-undefined", layer=spec.name, error=str(e))
    return importance


def _predict_hrm(config, portfolio, horizon, seed):
    model = fit_hrm(
        portfolio,
        list(config.layers),
        weights=_weights(config, portfolio),
        engine_configs=config.engine_configs,
        first_modeled_year=config.first_modeled_year,
        seed=seed,
    )
    prediction = Prediction(math.nan, importance=_layer_importance(model))
    if model.is_history_free:
        prediction.predicted = model.expected_reserve(portfolio, horizon)
    if config.paths or not model.is_history_free:
        result = simulate_paths(
            model,
            portfolio,
            n_paths=config.paths or None,
            seed=seed,
            horizon=horizon,
            keep_records=False,
        )
        totals = result.totals(horizon)
        prediction.totals = totals
        prediction.lower, prediction.upper = _bounds(totals, config.level)
        if not model.is_history_free:
            prediction.predicted = float(np.mean(totals))
    return prediction


def _predict_chainladder(config, portfolio, horizon):
    triangle = build_triangle(portfolio, "size")
    cl = chain_ladder(triangle)
    prediction = Prediction(cl.horizon_reserve(horizon))
    try:
        mack = mack_se(triangle, config.level)
    except EstimabilityError as e:
        log.warning("mack-undefined", model=config.name, error=str(e))
    else:
        if mack.reserve > 0:
            # Mack bounds of the full reserve, scaled to the horizon.
            scale = prediction.predicted / mack.reserve
            prediction.lower, prediction.upper = [
                scale * b for b in mack.interval
            ]
    return prediction


def _predict_aggregate(config, portfolio, horizon):
    method = dcl_rbns if config.kind == "dcl" else crm_rbns
    params = method(portfolio)
    band = _horizon_band(build_triangle(portfolio, "size"), horizon)
    return Prediction(params.reserve(observed=~band))


def _predict_one(config, portfolio, horizon, seed):
    if config.kind == "hrm":
        return _predict_hrm(config, portfolio, horizon, seed)
    if config.kind == "chainladder":
        return _predict_chainladder(config, portfolio, horizon)
    return _predict_aggregate(config, portfolio, horizon)


def _predict_segments(config, segments, portfolio, horizon, seed):
    parts = {}
    for offset, (level, segment) in enumerate(segments.items()):
        keep = portfolio.covariate_in(config.segment_by, [level])
        if not keep.any():
            log.warning("segment-empty", model=config.name, segment=level)
            continue
        parts[level] = _predict_one(
            segment, portfolio.subset(keep), horizon, seed + offset
        )
    if not parts:
        raise FittingError(
            "model {!r} has no claims in any segment".format(config.name)
        )
    prediction = Prediction(sum(p.predicted for p in parts.values()))
    totals = [p.totals for p in parts.values()]
    if all(t is not None for t in totals) and len(set(map(len, totals))) == 1:
        prediction.totals = np.sum(totals, axis=0)
        prediction.lower, prediction.upper = _bounds(
            prediction.totals, config.level
        )
    for level, part in parts.items():
        for layer, values in part.importance.items():
            prediction.importance["{}/{}".format(level, layer)] = values
    return prediction


def forecast(config: ModelConfig, portfolio, horizon, seed=0, segments=None):
    """The `Prediction` of a model fitted on `portfolio`.

    Segmented models fit the configs in `segments`, by level, or the
    model itself on every level present in the portfolio.

    """
    if config.segment_by is None:
        return _predict_one(config, portfolio, horizon, seed)
    if segments is None:
        segments = {
            level: _segment_config(config, level)
            for level in segment_levels(portfolio, config.segment_by)
        }
    return _predict_segments(config, segments, portfolio, horizon, seed)


def predict_reserve(config: ModelConfig, portfolio, horizon, seed=0):
    """Horizon reserve of a model fitted on `portfolio` with bounds."""
    prediction = forecast(config, portfolio, horizon, seed)
    return prediction.predicted, prediction.lower, prediction.upper


def average_importance(frame):
    """Covariate importance per model and layer averaged over dates.

    A covariate missing at a date counts as 0 there.

    """
    averages = {}
    for (model, layer), rows in frame.groupby(["model", "layer"], sort=False):
        table = rows.pivot_table(
            index="date",
            columns="covariate",
            values="importance",
            aggfunc="sum",
            fill_value=0.0,
        )
        averages.setdefault(model, {})[layer] = {
            str(name): float(value) for name, value in table.mean().items()
        }
    return averages


class EvaluationRun(object):
    """Results of a moving-window evaluation, one row per date and model.

    `importance` holds the gbm covariate importance of every date.

    """

    def __init__(self, results, horizon, models, cap=None, importance=None):
        self.results = results
        self.horizon = horizon
        self.models = list(models)
        self.cap = cap
        if importance is None:
            importance = pd.DataFrame(columns=IMPORTANCE_COLUMNS)
        self.importance = importance

    def __repr__(self):
        return "<EvaluationRun dates={} models={}>".format(
            self.results["date"].nunique(), len(self.models)
        )

    def __len__(self):
        return len(self.results)

    @property
    def dates(self):
        return sorted(self.results["date"].unique().tolist())

    def series(self, model):
        rows = self.results[self.results["model"] == model]
        return rows.set_index("date")["pe"]

    def summary(self):
        return summarize(self)

    def write(self, directory):
        results = os.path.join(directory, "results.csv")
        self.results.to_csv(results, index=False, encoding="utf-8")
        summary = os.path.join(directory, "summary.json")
        conditional_update(
            summary,
            {
                "horizon": self.horizon,
                "cap": self.cap,
                "dates": self.dates,
                "models": self.summary(),
            },
        )
        if not len(self.importance):
            return results, summary
        importance = os.path.join(directory, "importance.csv")
        self.importance.to_csv(importance, index=False, encoding="utf-8")
        return results, summary, importance


def _check_dates(portfolio, dates, horizon):
    if horizon < 1:
        raise ConfigurationError("horizon must be >= 1, got {}".format(horizon))
    if not dates:
        raise ConfigurationError("need at least one evaluation date")
    if len(set(dates)) != len(dates):
        raise ConfigurationError("evaluation dates must be distinct")
    window = portfolio.window
    for date in dates:
        cutoff = window.index(date)
        if cutoff < 1 or cutoff + horizon > window.tau:
            raise ConfigurationError(
                "evaluation date {} outside the data range {}-{} for "
                "horizon {}".format(
                    date, window.start_year, window.end_year, horizon
                )
            )
    return sorted(dates)


def _prepare(config, portfolio, seed, threads):
    """Selection and tuning of an `hrm` model on the first date."""
    if config.kind != "hrm":
        return config
    layers = list(config.layers)
    weights = _weights(config, portfolio)
    if any(s.candidates for s in layers):
        layers, selections = select_layers(
            portfolio,
            layers,
            weights=weights,
            seed=seed,
            first_modeled_year=config.first_modeled_year,
            engine_configs=config.engine_configs,
            threads=threads,
        )
        log.info(
            "evaluation-selection",
            model=config.name,
            selected={k: s.selected for k, s in selections.items()},
        )
    if config.tuning:
        layers, tunings = tune_layers(
            portfolio,
            layers,
            config.tuning,
            weights=weights,
            seed=seed,
            first_modeled_year=config.first_modeled_year,
            engine_configs=config.engine_configs,
            threads=threads,
        )
        log.info(
            "evaluation-tuning",
            model=config.name,
            best={k: t.best for k, t in tunings.items()},
        )
    return replace(config, layers=tuple(layers))


def _prepare_segments(config, dataset, first, seed, threads):
    segments = {}
    for level in segment_levels(dataset, config.segment_by):
        segment = _segment_config(config, level)
        keep = first.covariate_in(config.segment_by, [level])
        if keep.any():
            segment = _prepare(segment, first.subset(keep), seed, threads)
        segments[level] = segment
    log.info(
        "evaluation-segments",
        model=config.name,
        segment_by=config.segment_by,
        levels=[str(level) for level in segments],
    )
    return segments


def moving_window_eval(
    dataset: Portfolio,
    dates,
    model_configs,
    horizon,
    seed=0,
    threads=1,
    cap=None,
    exclude=None,
):
    """Refit and predict every model at every date.

    `dates` are calendar years; each is the last year of the training
    data. Covariates of `hrm` layers with candidates are selected and
    gbm layers of models with a tuning grid are tuned on the data of the
    first date; the result is kept for all other dates. Claims taking a
    level listed in `exclude` are left out before anything else.

    """
    dataset = exclude_claims(dataset, exclude)
    dates = _check_dates(dataset, list(dates), horizon)
    window = dataset.window
    models = []
    first = dataset.censor(window.index(dates[0]))
    for config in model_configs:
        if config.segment_by is None:
            models.append((_prepare(config, first, seed, threads), None))
        else:
            segments = _prepare_segments(config, dataset, first, seed, threads)
            models.append((config, segments))

    def evaluate(date):
        cutoff = window.index(date)
        portfolio = dataset.censor(cutoff)
        actual = actual_development(dataset, cutoff, horizon)
        rows = []
        importance = []
        for config, segments in models:
            prediction = forecast(config, portfolio, horizon, seed, segments)
            predicted = prediction.predicted
            try:
                pe = percentage_error(predicted, actual, cap)
            except UndefinedError:
                log.warning(
                    "percentage-error-undefined", date=date, model=config.name
                )
                pe = math.nan
            log.info(
                "evaluate-date",
                date=date,
                model=config.name,
                predicted=predicted,
                actual=actual,
                pe=pe,
            )
            rows.append(
                (
                    date,
                    config.name,
                    predicted,
                    actual,
                    pe,
                    prediction.lower,
                    prediction.upper,
                )
            )
            for layer, values in prediction.importance.items():
                for covariate, value in values.items():
                    importance.append(
                        (date, config.name, layer, covariate, value)
                    )
        return rows, importance

    results = parallel_map(evaluate, dates, threads)
    frame = pd.DataFrame(
        [row for rows, _ in results for row in rows], columns=RESULT_COLUMNS
    )
    importance = pd.DataFrame(
        [row for _, rows in results for row in rows],
        columns=IMPORTANCE_COLUMNS,
    )
    return EvaluationRun(
        frame,
        horizon,
        [config.name for config, _ in models],
        cap,
        importance=importance,
    )


def summarize(run):
    """Mean and mean absolute percentage error per model.

    `run` is an EvaluationRun, a results frame or a plain sequence of
    percentage errors. Undefined (NaN) entries are excluded and counted.
    The summary of a run with gbm layers also carries their covariate
    importance averaged over the dates.

    """
    importance = {}
    if isinstance(run, EvaluationRun):
        frame = run.results
        importance = average_importance(run.importance)
    elif isinstance(run, pd.DataFrame):
        frame = run
    else:
        frame = pd.DataFrame({"model": "model", "pe": list(run)})
    if not len(frame):
        raise SummaryError("cannot summarize an empty evaluation")
    pe = frame["pe"].astype(float)
    if pe.isna().all():
        raise SummaryError("every percentage error is undefined")
    summary = {}
    for model, values in pe.groupby(frame["model"], sort=False):
        defined = values.dropna()
        summary[model] = {
            "mean_pe": float(defined.mean()) if len(defined) else math.nan,
            "mean_ape": (
                float(defined.abs().mean()) if len(defined) else math.nan
            ),
            "entries": int(len(defined)),
            "excluded": int(values.isna().sum()),
        }
        if model in importance:
            summary[model]["importance"] = importance[model]
    return summary
