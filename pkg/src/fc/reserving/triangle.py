"""Runoff triangles: a layer aggregated by reporting and development year."""

import numpy as np
import pandas as pd

from .exc import ConfigurationError, SchemaError
from .portfolio import LAYER_FIELDS, Portfolio

TRIANGLE_LAYERS = LAYER_FIELDS + ("open",)


class Triangle(object):
    """Incremental cells X[i, j] of reporting year i and development year j.

    Unobserved cells hold NaN. `exposure` holds the number of reported
    claims per row if known.

    """

    def __init__(self, values, exposure=None, layer=None, start_year=None):
        values = np.array(values, dtype=float)
        if values.ndim != 2 or not values.size:
            raise ConfigurationError("a triangle needs a non-empty matrix")
        self.values = values
        self.exposure = (
            None if exposure is None else np.asarray(exposure, dtype=float)
        )
        if self.exposure is not None and self.exposure.shape != (len(values),):
            raise ConfigurationError("need one exposure per triangle row")
        self.layer = layer
        self.start_year = start_year

    def __repr__(self):
        return "<Triangle {} {}x{}>".format(self.layer, *self.values.shape)

    @property
    def shape(self):
        return self.values.shape

    @property
    def observed(self):
        return ~np.isnan(self.values)

    @property
    def latest(self):
        """Index of the last observed column per row (-1 if none)."""
        observed = self.observed
        last = observed.shape[1] - 1 - np.argmax(observed[:, ::-1], axis=1)
        return np.where(observed.any(axis=1), last, -1)

    def cumulative(self):
        return np.cumsum(np.nan_to_num(self.values), axis=1) + np.where(
            self.observed, 0.0, np.nan
        )

    def scaled(self, factor):
        return Triangle(
            self.values * factor, self.exposure, self.layer, self.start_year
        )

    @classmethod
    def standard_mask(cls, rows, d):
        """Observed region of `rows` reporting years: i + j <= rows + 1."""
        i = np.arange(1, rows + 1)[:, None]
        j = np.arange(1, d + 1)[None, :]
        return i + j <= rows + 1

    def to_frame(self):
        rows, d = self.shape
        first = 1 if self.start_year is None else self.start_year
        frame = pd.DataFrame(
            self.values,
            index=pd.RangeIndex(first, first + rows, name="reporting_year"),
            columns=[str(j) for j in range(1, d + 1)],
        )
        return frame

    def to_csv(self, path):
        """Write the matrix with blank unobserved cells."""
        self.to_frame().to_csv(path, na_rep="", encoding="utf-8")

    @classmethod
    def from_csv(cls, path, layer=None):
        """Read a CSV matrix; blank cells are unobserved."""
        frame = pd.read_csv(
            path, dtype=str, keep_default_na=False, encoding="utf-8"
        )
        if not len(frame.columns) or frame.columns[0] != "reporting_year":
            raise SchemaError(
                "{}: the first column must be reporting_year".format(path)
            )
        if not len(frame):
            raise SchemaError("{}: the triangle has no rows".format(path))
        labels = frame["reporting_year"]
        try:
            values = (
                frame.drop(columns=["reporting_year"])
                .replace("", np.nan)
                .astype(float)
                .to_numpy()
            )
            first = int(labels.iloc[0])
        except ValueError as e:
            raise SchemaError("{}: {}".format(path, e))
        start_year = first if first > 1 else None
        return cls(values, layer=layer, start_year=start_year)


def aggregate(records, layer, rows, d, first_row=1):
    """Sum `layer` of long-format records into a full rows x d matrix.

    Cells without records are 0; nothing is masked.

    """
    if layer not in records.columns:
        raise SchemaError("records lack the column {!r}".format(layer))
    matrix = np.zeros((rows, d))
    i = records["reporting_year"].to_numpy(dtype=int) - first_row
    j = records["dev_year"].to_numpy(dtype=int) - 1
    inside = (i >= 0) & (i < rows) & (j >= 0) & (j < d)
    cells = records[layer].to_numpy(dtype=float)[inside]
    np.add.at(matrix, (i[inside], j[inside]), cells)
    return matrix


def build_triangle(portfolio: Portfolio, layer):
    """Triangle of `layer` summed over claims per reporting and dev year.

    Claim-years after settlement count as zero. The `open` layer counts
    the claims open at the start of each development year.

    """
    if layer not in TRIANGLE_LAYERS:
        raise ConfigurationError(
            "cannot aggregate {!r}: choose one of {}".format(
                layer, ", ".join(TRIANGLE_LAYERS)
            )
        )
    window = portfolio.window
    rows, d = window.tau, window.d
    frame = portfolio.claim_years(1)
    values = aggregate(frame, layer, rows, d)
    observed = np.arange(1, d + 1)[None, :] <= window.observed_years(
        np.arange(1, rows + 1)
    )[:, None]
    values[~observed] = np.nan
    return Triangle(
        values,
        exposure=portfolio.reported_counts,
        layer=layer,
        start_year=window.start_year,
    )
