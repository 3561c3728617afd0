import os
import random
import sys
import time
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
import structlog

import fc.reserving.logging
from fc.reserving.generator import GeneratorConfig, generate
from fc.reserving.portfolio import ObservationWindow, Portfolio, Schema
from fc.reserving.triangle import Triangle

FIXTURES = Path(__file__).parent / "fixtures"

########################################################
# portfolio fixtures


def make_portfolio(claims, records, tau, d=None, start_year=1, schema=None):
    """Build a portfolio from plain rows.

    `claims` are tuples (claim_id, reporting_year index, covariates...),
    `records` tuples (claim_id, dev_year, close, payment, size).

    """
    covariates = [c.name for c in schema.covariates] if schema else []
    claims = pd.DataFrame(
        claims, columns=["claim_id", "reporting_year"] + covariates
    ).set_index("claim_id")
    records = pd.DataFrame(
        records, columns=["claim_id", "dev_year", "close", "payment", "size"]
    )
    window = ObservationWindow(start_year, tau, d)
    return Portfolio(window, claims, records, schema)


@pytest.fixture
def small_portfolio():
    """Four claims over three years with one categorical covariate."""
    schema = Schema.from_dict({"columns": {"coverage": "categorical"}})
    claims = [
        ("A", 1, "home"),
        ("B", 1, "contents"),
        ("C", 2, "home"),
        ("D", 3, "contents"),
    ]
    records = [
        ("A", 1, 0, 1, 100.0),
        ("A", 2, 0, 0, 0.0),
        ("A", 3, 1, 1, 50.0),
        ("B", 1, 1, 1, 80.0),
        ("C", 1, 0, 0, 0.0),
        ("C", 2, 0, 1, 30.0),
        ("D", 1, 0, 1, 20.0),
    ]
    return make_portfolio(claims, records, 3, schema=schema)


@pytest.fixture
def generator_config():
    return GeneratorConfig.load(str(FIXTURES / "generator.json"))


@pytest.fixture
def synthetic_portfolio(generator_config):
    return generate(generator_config)


@pytest.fixture
def mack_triangle():
    # Cumulative [[100, 150, 165], [110, 176, .], [120, ., .]].
    nan = np.nan
    return Triangle(
        [[100.0, 50.0, 15.0], [110.0, 66.0, nan], [120.0, nan, nan]],
        layer="size",
    )


########################################################
# logging


@pytest.fixture(scope="session")
def setup_structlog():
    from fc.reserving import util

    # set to True to temporarily get detailed tracebacks
    log_exceptions = True

    def test_logger(logger, method_name, event):
        stack = event.pop("stack", None)
        exc = event.pop("exception", None)
        event_name = event.pop("event", "")
        event_prefix = os.path.basename(event_name) if event_name else " "

        result = []
        if event_name:
            result.append(event_name)
        for key in sorted(event):
            result.append("{}={}".format(key, str(event[key]).strip()))
        result = " ".join(result)

        reltime = time.time() - util.test_log_start
        print(f"{reltime:08.4f} {result}", file=sys.stderr)
        if stack:
            print(
                fc.reserving.logging.prefix(event_prefix, stack),
                file=sys.stderr,
            )
        if exc:
            print(
                fc.reserving.logging.prefix(event_prefix, exc),
                file=sys.stderr,
            )

        # Allow tests to inspect only methods and events they are interested
        # in.
        show_methods = util.test_log_options["show_methods"]
        if show_methods and method_name not in show_methods:
            raise structlog.DropEvent

        show_events = util.test_log_options["show_events"]
        if show_events:
            for show in show_events:
                if show in event_name:
                    break
            else:
                raise structlog.DropEvent

        util.log_data.append(result)
        if log_exceptions:
            if stack:
                util.log_data.extend(stack.splitlines())
            if exc:
                util.log_data.extend(exc.splitlines())
        raise structlog.DropEvent

    def test_log_print(*args):
        """A helper for tests to insert output into the stdout log.

        This adds the same timestamps as the default output for the
        log and avoids this to become part of the output content that
        we run assertions on.
        """
        reltime = time.time() - util.test_log_start
        print(f"{reltime:08.4f}", *args, file=sys.stderr)

    util.test_log_print = test_log_print

    # Higher-scoped fixtures may log before `reset_structlog` runs.
    util.log_data = []
    util.test_log_start = time.time()
    util.test_log_options = {
        "show_methods": [],
        "show_events": [],
    }

    structlog.configure(
        processors=(
            ([structlog.processors.format_exc_info] if log_exceptions else [])
            + [test_logger]
        )
    )


@pytest.fixture(autouse=True)
def reset_structlog(setup_structlog):
    from fc.reserving import util

    util.log_data = []
    util.test_log_start = time.time()
    util.test_log_options = {
        "show_methods": [],
        "show_events": [],
    }


def get_log():
    from fc.reserving import util

    result = "\n".join(util.log_data)
    util.log_data = []
    return result


########################################################
# pytest integration


def pytest_collectstart(collector):
    from fc.reserving.sysconfig import sysconfig

    sysconfig.load_system_config()


def pytest_collection_modifyitems(items):
    """Reorder test items in place: `first` and `last` markers win."""
    # Shuffled to catch tests depending on global state, e.g. sysconfig
    # overrides that are not undone.
    sorted_items = items.copy()
    random.shuffle(sorted_items)

    def sort_key(item):
        if list(item.iter_markers("last")):
            return 1
        if list(item.iter_markers("first")):
            return -1
        return 0

    sorted_items.sort(key=sort_key)
    items[:] = sorted_items
