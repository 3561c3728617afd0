"""Covariate encoding shared by the layer engines.

A covariate term is either a column name or an interaction `a:b` of
columns. Terms on object, boolean or categorical columns, the index
columns (development, reporting and calendar year) and all interactions
are categorical: the GLM design gets one indicator per level except the
reference level (the first level in natural sort order). Other terms are
numeric and enter linearly.

"""

import functools

import numpy as np
import pandas as pd
from pandas.api import types as ptypes

from ..exc import PredictionError
from ..util import log

INTERCEPT = "(Intercept)"
FACTOR_COVARIATES = ("dev_year", "reporting_year", "calendar_year")


def _natural_key(level):
    try:
        return (0, float(level), "")
    except ValueError:
        return (1, 0.0, level)


def _as_labels(series):
    def label(value):
        if value is None or (isinstance(value, float) and np.isnan(value)):
            return "NA"
        if isinstance(value, (float, np.floating)) and value.is_integer():
            return str(int(value))
        return str(value)

    return series.map(label).astype(object)


class Term(object):
    def __init__(self, name, kind, levels=()):
        self.name = name
        self.kind = kind
        self.levels = list(levels)
        self._codes = {level: i for i, level in enumerate(self.levels)}

    def __repr__(self):
        return "<Term {} {}>".format(self.name, self.kind)

    @property
    def parts(self):
        return tuple(self.name.split(":"))

    @property
    def reference(self):
        return self.levels[0] if self.levels else None

    @property
    def columns(self):
        if self.kind == "numeric":
            return [self.name]
        return ["{}[{}]".format(self.name, level) for level in self.levels[1:]]

    def raw(self, frame):
        for part in self.parts:
            if part not in frame.columns:
                raise PredictionError(
                    "missing covariate {!r}".format(part), term=part
                )
        if len(self.parts) == 1:
            return frame[self.name]
        labels = [_as_labels(frame[part]) for part in self.parts]
        combined = labels[0]
        for other in labels[1:]:
            combined = combined + "|" + other
        return combined

    def labels(self, frame):
        return _as_labels(self.raw(frame))

    def numeric(self, frame):
        values = pd.to_numeric(self.raw(frame), errors="coerce").to_numpy(
            dtype=float
        )
        if np.isnan(values).any():
            raise PredictionError(
                "numeric covariate {!r} has missing values".format(self.name),
                term=self.name,
            )
        return values

    def codes(self, frame):
        """Level index per row; unseen levels take the reference level 0."""
        labels = self.labels(frame)
        codes = labels.map(self._codes)
        unseen = codes.isna().to_numpy()
        codes = codes.fillna(0).to_numpy(dtype=int)
        if unseen.any():
            log.warning(
                "unseen-level",
                term=self.name,
                levels=sorted(set(labels[unseen])),
                rows=int(unseen.sum()),
            )
        return codes

    def to_dict(self):
        return {"name": self.name, "kind": self.kind, "levels": self.levels}

    @classmethod
    def from_dict(cls, doc):
        return cls(doc["name"], doc["kind"], doc.get("levels", ()))


def term_kind(frame, name):
    parts = name.split(":")
    if len(parts) > 1 or name in FACTOR_COVARIATES:
        return "categorical"
    if name not in frame.columns:
        raise PredictionError("missing covariate {!r}".format(name), term=name)
    series = frame[name]
    if ptypes.is_bool_dtype(series) or not ptypes.is_numeric_dtype(series):
        return "categorical"
    return "numeric"


class DesignEncoder(object):
    """Learns the levels of the covariate terms and encodes frames."""

    def __init__(self, terms, intercept=True):
        self.terms = list(terms)
        self.intercept = intercept

    def __repr__(self):
        return "<DesignEncoder {}>".format([t.name for t in self.terms])

    @classmethod
    def fit(cls, frame, covariates, intercept=True):
        terms = []
        for name in covariates:
            kind = term_kind(frame, name)
            term = Term(name, kind)
            if kind == "categorical":
                levels = sorted(set(term.labels(frame)), key=_natural_key)
                term = Term(name, kind, levels)
            terms.append(term)
        return cls(terms, intercept)

    @property
    def covariates(self):
        return [t.name for t in self.terms]

    @property
    def columns(self):
        columns = [INTERCEPT] if self.intercept else []
        for term in self.terms:
            columns.extend(term.columns)
        return columns

    def matrix(self, frame):
        """The GLM design matrix of `frame`.

        Unseen levels of categorical terms encode as the reference level.

        """
        n = len(frame)
        blocks = [np.ones((n, 1))] if self.intercept else []
        for term in self.terms:
            if term.kind == "numeric":
                blocks.append(term.numeric(frame)[:, None])
                continue
            codes = term.codes(frame)
            block = np.zeros((n, max(len(term.levels) - 1, 0)))
            rows = np.flatnonzero(codes > 0)
            block[rows, codes[rows] - 1] = 1.0
            blocks.append(block)
        if not blocks:
            return np.zeros((n, 0))
        return np.hstack(blocks)

    def features(self, frame):
        """Raw feature matrix for tree engines (values or level codes)."""
        n = len(frame)
        result = np.zeros((n, len(self.terms)))
        for i, term in enumerate(self.terms):
            if term.kind == "numeric":
                result[:, i] = term.numeric(frame)
            else:
                result[:, i] = term.codes(frame)
        return result

    def to_dict(self):
        return {
            "intercept": self.intercept,
            "terms": [t.to_dict() for t in self.terms],
        }

    @classmethod
    def from_dict(cls, doc):
        return cls(
            [Term.from_dict(t) for t in doc["terms"]],
            doc.get("intercept", True),
        )


class Design(object):
    """Training covariates together with the encoder fitted on them.

    GLM engines use the indicator `matrix`, tree engines the raw
    `features`.

    """

    def __init__(self, encoder, frame):
        self.encoder = encoder
        self.frame = frame

    def __len__(self):
        return len(self.frame)

    @functools.cached_property
    def matrix(self):
        return self.encoder.matrix(self.frame)

    @functools.cached_property
    def features(self):
        return self.encoder.features(self.frame)

    @property
    def columns(self):
        return self.encoder.columns


def make_design(frame, covariates, intercept=True):
    encoder = DesignEncoder.fit(frame, covariates, intercept)
    return Design(encoder, frame)
