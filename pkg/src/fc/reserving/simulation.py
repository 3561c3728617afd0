"""Monte Carlo simulation of the future development of reported claims.

Every path walks the future calendar years in order. In each year the
layers are drawn in their order for all claims that are still open; the
outcomes of lower layers and the updated history feed the higher layers
and the following years. Settlement is absorbing and forced in
development year `d`.

"""

import math
from dataclasses import dataclass, field
from typing import Dict, Iterator

import numpy as np
import pandas as pd

from .engines.family import gamma_draws
from .exc import ConfigurationError, InputError, StateError
from .hierarchical import HierarchicalModel, future_claims, step_frame
from .portfolio import Portfolio
from .sysconfig import sysconfig
from .util import conditional_update, log, parallel_map

RECORD_COLUMNS = [
    "path_id",
    "claim_id",
    "reporting_year",
    "dev_year",
    "calendar_year",
    "step",
    "close",
    "payment",
    "size",
]
SUMMARY_COLUMNS = ["path_id", "step", "open", "payments", "size"]


@dataclass
class SimulatedPath:
    path_id: int
    records: pd.DataFrame

    def total(self, horizon=None):
        records = self.records
        if horizon is not None:
            records = records[records["step"] <= horizon]
        return float(records["size"].sum())


class SimulationResult(object):
    """Simulated records and per-path summaries of one simulation run."""

    def __init__(self, n_paths, steps, records, summary, tau):
        self.n_paths = n_paths
        self.steps = steps
        self.records = records
        self.summary = summary
        self.tau = tau

    def __repr__(self):
        return "<SimulationResult paths={} steps={}>".format(
            self.n_paths, self.steps
        )

    def __len__(self):
        return self.n_paths

    def paths(self) -> Iterator[SimulatedPath]:
        if self.records is None:
            raise StateError("simulated records were not kept")
        grouped = dict(tuple(self.records.groupby("path_id", sort=True)))
        for path_id in range(self.n_paths):
            records = grouped.get(path_id, self.records.iloc[:0])
            yield SimulatedPath(path_id, records.reset_index(drop=True))

    def totals(self, horizon=None):
        """Total simulated size per path."""
        summary = self.summary
        if horizon is not None:
            summary = summary[summary["step"] <= horizon]
        totals = summary.groupby("path_id")["size"].sum()
        return totals.reindex(range(self.n_paths), fill_value=0.0).to_numpy()

    def series(self, column, horizon=None):
        """Mean of a summary column per future calendar year."""
        summary = self.summary
        if horizon is not None:
            summary = summary[summary["step"] <= horizon]
        sums = summary.groupby("step")[column].sum() / self.n_paths
        return {int(self.tau + step): float(v) for step, v in sums.items()}


def _simulate_batch(model, states, path_ids, seed, horizon, tau, keep_records):
    d = model.window.d
    layers = model.layers
    n_claims = len(states)
    n_layers = len(layers)
    rngs = [np.random.default_rng([seed, path_id]) for path_id in path_ids]
    batch = len(path_ids)
    ages = states["observed_years"].to_numpy()
    steps = d - ages
    if horizon is not None:
        steps = np.minimum(steps, horizon)
    max_steps = int(steps.max(initial=0))

    # Flat arrays over (path, claim) in path-major order.
    alive = np.ones(batch * n_claims, dtype=bool)
    size_last = np.tile(states["size_last_year"].to_numpy(float), batch)
    total_paid = np.tile(states["total_amount_paid"].to_numpy(float), batch)
    claim_index = np.tile(np.arange(n_claims), batch)
    path_index = np.repeat(np.asarray(path_ids), n_claims)
    payment_layer = model.layer("payment")

    records = []
    summary = []
    for step in range(1, max_steps + 1):
        # Same draws per path and step whatever the batch size.
        draws = np.stack([rng.random((n_layers, n_claims)) for rng in rngs])
        active = alive & (steps[claim_index] >= step)
        if not active.any():
            continue
        rows = np.flatnonzero(active)
        frame = step_frame(
            states.iloc[claim_index[rows]], step, tau, model.first_modeled_year
        )
        frame["size_last_year"] = size_last[rows]
        frame["total_amount_paid"] = total_paid[rows]
        frame["paid_last_year"] = (size_last[rows] > 0).astype(int)
        for i, spec in enumerate(layers):
            fit = model.fits[spec.name]
            u = draws[path_index[rows] - path_ids[0], i, claim_index[rows]]
            mask = spec.select(frame, d)
            outcome = np.zeros(len(frame))
            if spec.is_binary:
                p = np.zeros(len(frame))
                if mask.any():
                    p[mask] = fit.predict(frame[mask])
                if spec.response == "close":
                    p[frame["dev_year"].to_numpy() == d] = 1.0
                outcome = (u < p).astype(int)
            elif mask.any():
                mu = fit.predict(frame[mask])
                outcome[mask] = gamma_draws(
                    u[mask],
                    mu,
                    fit.dispersion,
                    spec.family_object.variance_power,
                )
            frame[spec.response] = outcome
        for column in ("close", "payment", "size"):
            if column not in frame.columns:
                frame[column] = 0
        if payment_layer is None:
            frame["payment"] = (frame["size"] > 0).astype(int)
        frame["size"] = frame["size"].astype(float)
        frame["path_id"] = path_index[rows]
        frame["step"] = step

        if model.has_settlement:
            alive[rows] = frame["close"].to_numpy() == 0
        size_last[rows] = frame["size"].to_numpy()
        total_paid[rows] += frame["size"].to_numpy()

        grouped = frame.groupby("path_id").agg(
            open=("claim_id", "size"),
            payments=("payment", "sum"),
            size=("size", "sum"),
        )
        grouped["step"] = step
        summary.append(grouped.reset_index())
        if keep_records:
            records.append(frame[RECORD_COLUMNS])
    return records, summary


def simulate_paths(
    model: HierarchicalModel,
    portfolio: Portfolio,
    n_paths=None,
    seed=0,
    horizon=None,
    threads=1,
    keep_records=True,
):
    """Simulate `n_paths` futures of the open claims of `portfolio`.

    Path `i` draws from its own stream seeded with `(seed, i)`, so results
    for the first paths do not depend on the total number of paths or on
    the batching.

    """
    if not isinstance(model, HierarchicalModel) or not model.fitted:
        raise StateError("simulation needs a fitted hierarchical model")
    n_paths = sysconfig.simulation["paths"] if n_paths is None else n_paths
    if n_paths < 1:
        raise ConfigurationError(
            "need at least one path, got {}".format(n_paths)
        )
    if horizon is not None and horizon < 1:
        raise ConfigurationError("horizon must be >= 1, got {}".format(horizon))
    states = future_claims(model, portfolio)
    tau = portfolio.window.tau
    steps = 0
    if len(states):
        steps = int((model.window.d - states["observed_years"]).max())
        if horizon is not None:
            steps = min(steps, horizon)

    chunk = sysconfig.simulation["chunk_rows"]
    per_batch = max(1, chunk // max(len(states), 1))
    batches = [
        list(range(start, min(start + per_batch, n_paths)))
        for start in range(0, n_paths, per_batch)
    ]
    log.info(
        "simulate-paths",
        paths=n_paths,
        claims=len(states),
        steps=steps,
        batches=len(batches),
    )

    def run(path_ids):
        return _simulate_batch(
            model, states, path_ids, seed, horizon, tau, keep_records
        )

    results = parallel_map(run, batches, threads)
    records = [frame for batch, _ in results for frame in batch]
    summary = [frame for _, batch in results for frame in batch]
    if summary:
        summary = pd.concat(summary, ignore_index=True)
        summary = summary.sort_values(["path_id", "step"], kind="stable")
        summary = summary[SUMMARY_COLUMNS].reset_index(drop=True)
    else:
        summary = pd.DataFrame(columns=SUMMARY_COLUMNS)
    if keep_records:
        if records:
            records = pd.concat(records, ignore_index=True)
            records = records.sort_values(
                ["path_id", "step", "claim_id"], kind="stable"
            ).reset_index(drop=True)
        else:
            records = pd.DataFrame(columns=RECORD_COLUMNS)
    else:
        records = None
    return SimulationResult(n_paths, steps, records, summary, tau)


@dataclass
class ReserveReport:
    """Distribution of the simulated future payments."""

    mean: float
    totals: np.ndarray
    quantiles: Dict[float, float]
    open_claims: Dict[int, float] = field(default_factory=dict)
    payments: Dict[int, float] = field(default_factory=dict)
    sizes: Dict[int, float] = field(default_factory=dict)
    horizon: int = None

    @property
    def n_paths(self):
        return len(self.totals)

    @property
    def standard_error(self):
        if self.n_paths < 2:
            return math.nan
        return float(np.std(self.totals, ddof=1) / math.sqrt(self.n_paths))

    def to_dict(self):
        return {
            "reserve": self.mean,
            "standard_error": self.standard_error,
            "paths": self.n_paths,
            "horizon": self.horizon,
            "quantiles": {str(k): v for k, v in self.quantiles.items()},
            "open_claims": {str(k): v for k, v in self.open_claims.items()},
            "payments": {str(k): v for k, v in self.payments.items()},
            "sizes": {str(k): v for k, v in self.sizes.items()},
        }

    def write_json(self, path):
        conditional_update(path, self.to_dict())

    def write_csv(self, path):
        """Per-path totals, one row per path."""
        frame = pd.DataFrame(
            {"path_id": np.arange(self.n_paths), "total": self.totals}
        )
        frame.to_csv(path, index=False, encoding="utf-8")


def rbns_reserve(paths, quantile_levels=None, horizon=None):
    """Reserve estimate and empirical quantiles of simulated totals.

    `paths` is a SimulationResult or an iterable of SimulatedPath.

    """
    if quantile_levels is None:
        quantile_levels = sysconfig.simulation["quantiles"]
    quantile_levels = [float(q) for q in quantile_levels]
    for q in quantile_levels:
        if not 0 < q < 1:
            raise ConfigurationError(
                "quantile levels must lie in (0, 1), got {}".format(q)
            )
    if isinstance(paths, SimulationResult):
        if not paths.n_paths:
            raise InputError("no simulated paths")
        totals = paths.totals(horizon)
        open_claims = paths.series("open", horizon)
        payments = paths.series("payments", horizon)
        sizes = paths.series("size", horizon)
    else:
        paths = list(paths)
        if not paths:
            raise InputError("no simulated paths")
        totals = np.array([p.total(horizon) for p in paths])
        records = pd.concat([p.records for p in paths], ignore_index=True)
        if horizon is not None:
            records = records[records["step"] <= horizon]
        by_year = records.groupby("calendar_year")
        open_claims = (by_year.size() / len(paths)).to_dict()
        payments = (by_year["payment"].sum() / len(paths)).to_dict()
        sizes = (by_year["size"].sum() / len(paths)).to_dict()
    quantiles = {
        q: float(np.quantile(totals, q, method="inverted_cdf"))
        for q in quantile_levels
    }
    report = ReserveReport(
        float(np.mean(totals)),
        np.asarray(totals, dtype=float),
        quantiles,
        {int(k): float(v) for k, v in open_claims.items()},
        {int(k): float(v) for k, v in payments.items()},
        {int(k): float(v) for k, v in sizes.items()},
        horizon,
    )
    log.info(
        "rbns-reserve",
        reserve=report.mean,
        paths=report.n_paths,
        horizon=horizon,
    )
    return report
