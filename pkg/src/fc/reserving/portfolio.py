"""Claim portfolios: the long-format development data of reported claims.

A portfolio holds one row per claim (static covariates, reporting year) and
one row per observed development year of a claim (the update vector
close/payment/size). Reporting years and calendar years are 1-based indices
within the observation window; the CSV interface carries calendar years.

"""

import math
import os.path
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Iterator, Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from .exc import (
    ConfigurationError,
    ConsistencyError,
    DuplicateRecordError,
    SchemaError,
)
from .util import load_document, log

REQUIRED_COLUMNS = (
    "claim_id",
    "reporting_year",
    "dev_year",
    "close",
    "payment",
    "size",
)
LAYER_FIELDS = ("close", "payment", "size")
HISTORY_COVARIATES = ("size_last_year", "total_amount_paid", "paid_last_year")
DERIVED_COLUMNS = ("calendar_year",) + HISTORY_COVARIATES
FIRST_YEAR_COVARIATES = ("close_year1", "payment_year1", "size_year1")
COVARIATE_KINDS = ("categorical", "numeric", "date")
NA_LABEL = "NA"

_CLAIM_COLUMNS = ("reporting_year", "observed_years", "settlement_year")


@dataclass(frozen=True)
class ObservationWindow:
    """`tau` observed calendar years starting at `start_year`.

    All claims settle within `d` development years; `d` defaults to `tau`.

    """

    start_year: int
    tau: int
    d: Optional[int] = None

    def __post_init__(self):
        if self.d is None:
            object.__setattr__(self, "d", self.tau)
        if self.tau < 1:
            raise ConfigurationError(
                "observation window needs tau >= 1, got {}".format(self.tau)
            )
        if self.d < 1:
            raise ConfigurationError(
                "observation window needs d >= 1, got {}".format(self.d)
            )

    @property
    def end_year(self):
        return self.start_year + self.tau - 1

    def index(self, calendar_year):
        """1-based index of a calendar year within the window."""
        return int(calendar_year) - self.start_year + 1

    def observed_years(self, reporting_year):
        return np.minimum(self.d, self.tau - np.asarray(reporting_year) + 1)

    def censored(self, tau):
        return ObservationWindow(self.start_year, tau, self.d)

    def to_dict(self):
        return {"start_year": self.start_year, "tau": self.tau, "d": self.d}


@dataclass(frozen=True)
class CovariateSpec:
    name: str
    kind: str
    breakpoints: tuple = ()
    na_label: str = NA_LABEL

    def __post_init__(self):
        if self.kind not in COVARIATE_KINDS:
            raise SchemaError(
                "column {!r} has unknown kind {!r}".format(self.name, self.kind)
            )
        if self.breakpoints and self.kind != "numeric":
            raise SchemaError(
                "column {!r}: breakpoints need kind numeric".format(self.name)
            )
        if self.breakpoints:
            check_breakpoints(self.breakpoints)

    @property
    def derived(self):
        """Names of the covariates derived from this column."""
        if self.kind == "date":
            return (self.name + "_month",)
        if self.breakpoints:
            return (self.name + "_bin",)
        return ()


class Schema(object):
    """Declares the covariate columns of a portfolio CSV.

    The document maps column names to their kind (categorical, numeric or
    date) and optional binning breakpoints. An optional window section
    fixes the observation window instead of inferring it from the data.

    """

    def __init__(self, covariates: Sequence[CovariateSpec] = (), window=None):
        self.covariates = tuple(covariates)
        self.window = window
        names = [c.name for c in self.covariates]
        clashes = set(names) & set(REQUIRED_COLUMNS + DERIVED_COLUMNS)
        if clashes:
            raise SchemaError(
                "covariate columns clash with reserved names: {}".format(
                    ", ".join(sorted(clashes))
                )
            )

    @classmethod
    def from_dict(cls, doc):
        if not isinstance(doc, Mapping):
            raise SchemaError("schema document must be a mapping")
        na_label = doc.get("na_label", NA_LABEL)
        covariates = []
        for name, spec in (doc.get("columns") or {}).items():
            if isinstance(spec, str):
                spec = {"kind": spec}
            covariates.append(
                CovariateSpec(
                    name=name,
                    kind=spec.get("kind", "categorical"),
                    breakpoints=tuple(spec.get("breakpoints", ())),
                    na_label=spec.get("na_label", na_label),
                )
            )
        window = None
        if doc.get("window"):
            window = ObservationWindow(**doc["window"])
        return cls(covariates, window)

    @classmethod
    def load(cls, path):
        return cls.from_dict(load_document(path))

    def to_dict(self):
        columns = {}
        for c in self.covariates:
            spec = {"kind": c.kind}
            if c.breakpoints:
                spec["breakpoints"] = list(c.breakpoints)
            if c.na_label != NA_LABEL:
                spec["na_label"] = c.na_label
            columns[c.name] = spec
        doc = {"columns": columns}
        if self.window is not None:
            doc["window"] = self.window.to_dict()
        return doc

    @property
    def columns(self):
        return [c.name for c in self.covariates]

    @property
    def covariate_names(self):
        """All static covariates available to models, derived ones included."""
        names = []
        for c in self.covariates:
            names.append(c.name)
            names.extend(c.derived)
        return names


@dataclass(frozen=True)
class Claim:
    claim_id: str
    reporting_year: int
    static_covariates: Mapping = field(default_factory=dict)
    observed_years: int = 1
    settlement_year: Optional[int] = None


@dataclass(frozen=True)
class DevelopmentRecord:
    claim_id: str
    dev_year: int
    close: int
    payment: int
    size: float
    calendar_year: Optional[int] = None
    size_last_year: Optional[float] = None
    total_amount_paid: Optional[float] = None


def check_breakpoints(breakpoints):
    values = [float(b) for b in breakpoints]
    for a, b in zip(values, values[1:]):
        if not b > a:
            raise ConfigurationError(
                "breakpoints must be strictly increasing: {}".format(values)
            )
    return values


def _format_bound(value):
    return "{:g}".format(value)


def bin_labels(breakpoints):
    """Labels of the half-open intervals [a, b) cut by `breakpoints`."""
    values = check_breakpoints(breakpoints)
    if not values:
        return ["all"]
    labels = [_format_bound(values[0]) + "-"]
    for a, b in zip(values, values[1:]):
        labels.append("[{},{})".format(_format_bound(a), _format_bound(b)))
    labels.append(_format_bound(values[-1]) + "+")
    return labels


def bin_continuous(values, breakpoints, na_label=NA_LABEL):
    """Map numeric values to the labels of their half-open interval.

    A value equal to a breakpoint belongs to the interval starting there.
    Missing values map to `na_label`.

    """
    labels = np.asarray(bin_labels(breakpoints), dtype=object)
    values = pd.to_numeric(pd.Series(values, dtype=object), errors="coerce")
    edges = np.asarray(check_breakpoints(breakpoints), dtype=float)
    raw = values.to_numpy(dtype=float)
    positions = np.searchsorted(edges, raw, side="right")
    result = labels[np.minimum(positions, len(labels) - 1)]
    result[np.isnan(raw)] = na_label
    return list(result)


class Portfolio(object):
    """Reported claims and their observed development.

    `claims` is indexed by claim id and carries the reporting year index,
    the number of observed development years, the settlement year (0 while
    open) and the static covariates. `records` holds one row per claim and
    observed development year. Both frames are treated as read-only.

    """

    def __init__(
        self,
        window: ObservationWindow,
        claims: pd.DataFrame,
        records: pd.DataFrame,
        schema: Optional[Schema] = None,
        validate=True,
    ):
        self.window = window
        self.schema = schema if schema is not None else Schema()
        claims = claims.copy()
        claims.index = claims.index.astype(str)
        claims.index.name = "claim_id"
        claims["reporting_year"] = claims["reporting_year"].astype(int)
        claims["observed_years"] = window.observed_years(
            claims["reporting_year"].to_numpy()
        ).astype(int)
        records = records.copy()
        records["claim_id"] = records["claim_id"].astype(str)
        records = records.sort_values(["claim_id", "dev_year"], kind="stable")
        records = records.reset_index(drop=True)
        if validate:
            _validate(window, claims, records)
        claims["settlement_year"] = _settlement_years(claims, records)
        self.claims = claims.sort_index(kind="stable")
        self.records = records.drop(columns=["row"], errors="ignore")

    def __repr__(self):
        return "<Portfolio {}-{} claims={} records={}>".format(
            self.window.start_year,
            self.window.end_year,
            len(self.claims),
            len(self.records),
        )

    @property
    def reported_counts(self):
        """n_i: number of claims per reporting year, i = 1 .. tau."""
        counts = np.bincount(
            self.claims["reporting_year"].to_numpy(dtype=int),
            minlength=self.window.tau + 1,
        )
        return counts[1 : self.window.tau + 1]

    @property
    def covariate_names(self):
        return [
            c
            for c in self.claims.columns
            if c not in _CLAIM_COLUMNS and not c.startswith("_")
        ]

    @property
    def is_derived(self):
        return all(c in self.records.columns for c in DERIVED_COLUMNS)

    def iter_claims(self) -> Iterator[Claim]:
        names = self.covariate_names
        for claim_id, row in self.claims.iterrows():
            settled = int(row["settlement_year"])
            yield Claim(
                claim_id=claim_id,
                reporting_year=int(row["reporting_year"]),
                static_covariates=MappingProxyType(
                    {name: row[name] for name in names}
                ),
                observed_years=int(row["observed_years"]),
                settlement_year=settled or None,
            )

    def iter_records(self) -> Iterator[DevelopmentRecord]:
        derived = self.is_derived
        for row in self.records.itertuples(index=False):
            extra = {}
            if derived:
                extra = dict(
                    calendar_year=int(row.calendar_year),
                    size_last_year=float(row.size_last_year),
                    total_amount_paid=float(row.total_amount_paid),
                )
            yield DevelopmentRecord(
                claim_id=row.claim_id,
                dev_year=int(row.dev_year),
                close=int(row.close),
                payment=int(row.payment),
                size=float(row.size),
                **extra,
            )

    def replace(self, window=None, claims=None, records=None):
        return Portfolio(
            window or self.window,
            self.claims if claims is None else claims,
            self.records if records is None else records,
            self.schema,
            validate=False,
        )

    def subset(self, keep):
        """The portfolio restricted to the claims where `keep` is true."""
        claims = self.claims[np.asarray(keep, dtype=bool)]
        records = self.records[self.records["claim_id"].isin(claims.index)]
        return self.replace(
            claims=claims, records=records.reset_index(drop=True)
        )

    def covariate_in(self, name, levels):
        """Mask of the claims whose covariate `name` takes one of `levels`.

        Levels match by value or by their text.

        """
        if name not in self.covariate_names:
            raise ConfigurationError(
                "unknown claim covariate {!r}".format(name)
            )
        levels = list(levels)
        values = self.claims[name]
        text = values.astype(str).isin([str(level) for level in levels])
        return (values.isin(levels) | text).to_numpy()

    def censor(self, tau):
        """The portfolio as known at the end of calendar year index `tau`.

        Claims reported later and records of later calendar years are
        dropped. Derived covariates are recomputed.

        """
        if not 1 <= tau <= self.window.tau:
            raise ConfigurationError(
                "cannot censor a window of {} years at year {}".format(
                    self.window.tau, tau
                )
            )
        claims = self.claims[self.claims["reporting_year"] <= tau]
        records = self.records[list(("claim_id", "dev_year") + LAYER_FIELDS)]
        reporting = claims["reporting_year"].reindex(records["claim_id"])
        calendar = reporting.to_numpy() + records["dev_year"].to_numpy() - 1
        records = records[~np.isnan(calendar) & (calendar <= tau)]
        censored = Portfolio(
            self.window.censored(tau),
            claims,
            records,
            self.schema,
            validate=False,
        )
        return derive_development_covariates(censored)

    def claim_years(self, first_modeled_year=1):
        """One row per claim and development year up to the observed age.

        Years after the settlement year are padded with zero outcomes and
        `open` = 0. Development covariates derive from the full history
        starting at year 1. With `first_modeled_year` 2 the year-1 outcomes
        become static covariates and rows start at year 2.

        """
        if first_modeled_year not in (1, 2):
            raise ConfigurationError(
                "first_modeled_year must be 1 or 2, got {}".format(
                    first_modeled_year
                )
            )
        claims = self.claims
        ages = claims["observed_years"].to_numpy(dtype=int)
        ids = np.repeat(claims.index.to_numpy(), ages)
        starts = np.repeat(np.cumsum(ages) - ages, ages)
        offsets = np.arange(ages.sum()) - starts
        frame = pd.DataFrame(
            {"claim_id": ids, "dev_year": (offsets + 1).astype(int)}
        )
        outcomes = self.records[["claim_id", "dev_year"] + list(LAYER_FIELDS)]
        frame = frame.merge(outcomes, on=["claim_id", "dev_year"], how="left")
        frame[["close", "payment"]] = (
            frame[["close", "payment"]].fillna(0).astype(int)
        )
        frame["size"] = frame["size"].fillna(0.0).astype(float)
        frame = _add_history(frame)

        static = claims.drop(columns=["observed_years"])
        frame = frame.join(static, on="claim_id")
        frame["calendar_year"] = frame["reporting_year"] + frame["dev_year"] - 1
        settled = frame["settlement_year"].to_numpy()
        frame["open"] = (
            (settled == 0) | (frame["dev_year"].to_numpy() <= settled)
        ).astype(int)
        frame["observed_years"] = frame["claim_id"].map(
            claims["observed_years"]
        )

        if first_modeled_year == 2:
            first = frame[frame["dev_year"] == 1].set_index("claim_id")
            for name, source in zip(FIRST_YEAR_COVARIATES, LAYER_FIELDS):
                frame[name] = frame["claim_id"].map(first[source])
            frame = frame[frame["dev_year"] >= 2]
        return frame.reset_index(drop=True)


def _settlement_years(claims, records):
    closing = records[records["close"] == 1]
    settled = closing.groupby("claim_id")["dev_year"].min()
    return settled.reindex(claims.index).fillna(0).astype(int).to_numpy()


def _add_history(frame):
    """Add lagged and cumulative size columns to a sorted long frame."""
    previous = frame[["claim_id", "dev_year", "size"]].copy()
    previous["dev_year"] += 1
    previous = previous.rename(columns={"size": "size_last_year"})
    frame = frame.merge(previous, on=["claim_id", "dev_year"], how="left")
    frame["size_last_year"] = frame["size_last_year"].fillna(0.0)
    cumulative = frame.groupby("claim_id", sort=False)["size"].cumsum()
    frame["total_amount_paid"] = cumulative - frame["size"]
    frame["paid_last_year"] = (frame["size_last_year"] > 0).astype(int)
    return frame


def _row_of(records, position):
    if "row" in records.columns:
        return int(records["row"].iloc[position])
    return None


def _first(mask):
    return int(np.flatnonzero(np.asarray(mask))[0])


def _validate(window, claims, records):
    if claims.index.has_duplicates:
        dup = claims.index[claims.index.duplicated()][0]
        raise DuplicateRecordError("duplicate claim id {!r}".format(dup))
    reporting = claims["reporting_year"].to_numpy()
    bad = (reporting < 1) | (reporting > window.tau)
    if bad.any():
        raise ConsistencyError(
            "claim {!r}: reporting year index {} outside window".format(
                claims.index[_first(bad)], reporting[_first(bad)]
            )
        )
    if records.empty:
        return
    key = records[["claim_id", "dev_year"]]
    duplicated = key.duplicated().to_numpy()
    if duplicated.any():
        pos = _first(duplicated)
        raise DuplicateRecordError(
            "duplicate record for claim {!r} dev year {} (row {})".format(
                records["claim_id"].iloc[pos],
                records["dev_year"].iloc[pos],
                _row_of(records, pos),
            )
        )
    unknown = ~records["claim_id"].isin(claims.index).to_numpy()
    if unknown.any():
        pos = _first(unknown)
        raise ConsistencyError(
            "record for unknown claim {!r}".format(
                records["claim_id"].iloc[pos]
            ),
            row=_row_of(records, pos),
        )
    for name in ("close", "payment"):
        values = records[name].to_numpy()
        bad = (values != 0) & (values != 1)
        if bad.any():
            raise ConsistencyError(
                "{} must be 0 or 1".format(name),
                row=_row_of(records, _first(bad)),
            )
    size = records["size"].to_numpy(dtype=float)
    payment = records["payment"].to_numpy()
    checks = [
        (~np.isfinite(size) | (size < 0), "size must be a nonnegative amount"),
        ((size > 0) & (payment == 0), "size > 0 requires payment = 1"),
        ((size == 0) & (payment == 1), "payment = 1 requires size > 0"),
    ]
    dev_year = records["dev_year"].to_numpy()
    ages = claims["observed_years"].reindex(records["claim_id"]).to_numpy()
    checks.append((dev_year < 1, "dev_year must be >= 1"))
    checks.append(
        (dev_year > ages, "dev_year beyond the observed years of the claim")
    )
    settled = (
        records[records["close"] == 1].groupby("claim_id")["dev_year"].min()
    )
    settlement = settled.reindex(records["claim_id"]).to_numpy()
    checks.append(
        (
            ~np.isnan(settlement) & (dev_year > settlement),
            "record after the settlement year (claims cannot reopen)",
        )
    )
    for mask, message in checks:
        if mask.any():
            pos = _first(mask)
            raise ConsistencyError(
                "claim {!r} dev year {}: {}".format(
                    records["claim_id"].iloc[pos], dev_year[pos], message
                ),
                row=_row_of(records, pos),
            )


def derive_development_covariates(portfolio: Portfolio) -> Portfolio:
    """Fill calendar year, size of last year and total amount paid."""
    records = portfolio.records.drop(
        columns=[c for c in DERIVED_COLUMNS if c in portfolio.records.columns]
    )
    records = _add_history(records)
    reporting = portfolio.claims["reporting_year"].reindex(records["claim_id"])
    records["calendar_year"] = (
        reporting.to_numpy(dtype=int) + records["dev_year"].to_numpy() - 1
    )
    return portfolio.replace(records=records)


def _parse_int(frame, column):
    values = pd.to_numeric(frame[column], errors="coerce")
    bad = values.isna() | (values != values.round())
    if bad.any():
        pos = _first(bad)
        raise SchemaError(
            "row {}: column {!r} needs an integer, got {!r}".format(
                pos + 1, column, frame[column].iloc[pos]
            )
        )
    return values.astype(int)


def _parse_covariates(frame, schema):
    """Convert raw covariate columns and add the derived copies."""
    result = pd.DataFrame(index=frame.index)
    for spec in schema.covariates:
        raw = frame[spec.name]
        if spec.kind == "categorical":
            result[spec.name] = raw.where(raw != "", spec.na_label)
        elif spec.kind == "numeric":
            values = pd.to_numeric(raw.where(raw != "", None), errors="coerce")
            bad = values.isna() & (raw != "")
            if bad.any():
                pos = _first(bad)
                raise SchemaError(
                    "row {}: column {!r} needs a number, got {!r}".format(
                        pos + 1, spec.name, raw.iloc[pos]
                    )
                )
            result[spec.name] = values.astype(float)
            if spec.breakpoints:
                result[spec.name + "_bin"] = bin_continuous(
                    values, spec.breakpoints, spec.na_label
                )
        else:
            dates = pd.to_datetime(
                raw.where(raw != "", None), errors="coerce", format="ISO8601"
            )
            bad = dates.isna() & (raw != "")
            if bad.any():
                pos = _first(bad)
                raise SchemaError(
                    "row {}: column {!r} needs an ISO date, got {!r}".format(
                        pos + 1, spec.name, raw.iloc[pos]
                    )
                )
            result[spec.name] = raw
            months = dates.dt.month.map(
                lambda m: spec.na_label if math.isnan(m) else "{:02d}".format(
                    int(m)
                )
            )
            result[spec.name + "_month"] = months.astype(object)
    return result


def ingest_csv(path, schema_config, window=None) -> Portfolio:
    """Read a long-format portfolio CSV.

    `schema_config` is a Schema, a schema document or the path of one. The
    window is taken from the argument, the schema or inferred from the
    data (first reporting year to last calendar year with a record).

    """
    if isinstance(schema_config, Schema):
        schema = schema_config
    elif isinstance(schema_config, Mapping):
        schema = Schema.from_dict(schema_config)
    else:
        schema = Schema.load(schema_config)
    if not os.path.exists(path):
        raise ConfigurationError("data file not found: {}".format(path))
    frame = pd.read_csv(
        path, dtype=str, keep_default_na=False, encoding="utf-8"
    )
    for column in REQUIRED_COLUMNS + tuple(schema.columns):
        if column not in frame.columns:
            raise SchemaError("missing column {!r} in {}".format(column, path))

    frame["row"] = np.arange(1, len(frame) + 1)
    for column in ("reporting_year", "dev_year", "close", "payment"):
        frame[column] = _parse_int(frame, column)
    size = pd.to_numeric(frame["size"], errors="coerce")
    if size.isna().any():
        pos = _first(size.isna())
        raise ConsistencyError(
            "size must be a number, got {!r}".format(frame["size"].iloc[pos]),
            row=pos + 1,
        )
    frame["size"] = size.astype(float)

    window = window or schema.window
    if window is None:
        if frame.empty:
            # Nothing to infer from: a one-year placeholder window.
            log.warning("empty-portfolio", path=str(path))
            window = ObservationWindow(1, 1)
        else:
            start = int(frame["reporting_year"].min())
            end = int(
                (frame["reporting_year"] + frame["dev_year"] - 1).max()
            )
            window = ObservationWindow(start, end - start + 1)

    covariates = _parse_covariates(frame, schema)
    static = pd.concat(
        [frame[["claim_id", "reporting_year"]], covariates], axis=1
    )
    first = static.drop_duplicates("claim_id")
    # Static covariates must not change between the rows of a claim.
    check = static.merge(first, on="claim_id", suffixes=("", "_first"))
    for column in ["reporting_year"] + list(covariates.columns):
        a, b = check[column], check[column + "_first"]
        differs = ~((a == b) | (a.isna() & b.isna()))
        if differs.any():
            pos = _first(differs)
            raise ConsistencyError(
                "claim {!r}: {} changes between rows".format(
                    check["claim_id"].iloc[pos], column
                ),
                row=pos + 1,
            )
    claims = first.set_index("claim_id")
    claims["reporting_year"] = claims["reporting_year"].map(window.index)
    records = frame[["claim_id", "dev_year", "close", "payment", "size", "row"]]

    portfolio = Portfolio(window, claims, records, schema)
    log.info(
        "ingest-portfolio",
        path=str(path),
        claims=len(portfolio.claims),
        records=len(portfolio.records),
    )
    return portfolio


def write_csv(portfolio: Portfolio, path):
    """Write a portfolio in the CSV format read by `ingest_csv`."""
    claims = portfolio.claims
    columns = portfolio.schema.columns
    records = portfolio.records[["claim_id", "dev_year"] + list(LAYER_FIELDS)]
    frame = records.join(claims[["reporting_year"] + columns], on="claim_id")
    frame["reporting_year"] += portfolio.window.start_year - 1
    frame = frame[list(REQUIRED_COLUMNS) + columns]
    frame.to_csv(path, index=False, na_rep="", encoding="utf-8")
