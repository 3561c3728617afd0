"""Global helper functions and utilites for fc.reserving."""

import contextlib
import filecmp
import hashlib
import json
import os
import os.path
import tempfile
from multiprocessing.pool import ThreadPool
from typing import Callable, Dict, List

import numpy as np
import yaml
from structlog import get_logger

from .exc import ConfigurationError

log = get_logger()

# Test harnesses
log_data: List[str]
test_log_start: float
test_log_options: Dict[str, List[str]]
test_log_print: Callable


def load_document(path):
    """Load a JSON (or YAML) configuration document."""
    if not os.path.exists(path):
        raise ConfigurationError(
            "configuration file not found: {}".format(path)
        )
    with open(path, encoding="utf-8") as f:
        try:
            data = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigurationError(
                "cannot parse configuration file {}: {}".format(path, e)
            )
    if data is None:
        raise ConfigurationError("empty configuration file: {}".format(path))
    return data


def json_default(value):
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(repr(value))


def conditional_update(filename, data, mode=0o644, encode_json=True):
    """Updates JSON file on disk only if there is different content."""
    with tempfile.NamedTemporaryFile(
        mode="w",
        suffix=".tmp",
        prefix=os.path.basename(filename),
        dir=os.path.dirname(filename) or ".",
        delete=False,
        encoding="utf-8",
    ) as tf:
        if encode_json:
            json.dump(
                data,
                tf,
                ensure_ascii=False,
                indent=1,
                sort_keys=True,
                default=json_default,
            )
        else:
            tf.write(data)
        tf.write("\n")
        os.chmod(tf.fileno(), mode)
    if not (os.path.exists(filename)) or not (filecmp.cmp(filename, tf.name)):
        with open(tf.name, "a") as f:
            os.fsync(f.fileno())
        os.rename(tf.name, filename)
    else:
        os.unlink(tf.name)


def sha256sum(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(2**16), b""):
            h.update(chunk)
    return h.hexdigest()


def thread_count(threads):
    """Resolve a `--threads` value: 0 means one thread per CPU."""
    if threads is None or threads < 0:
        raise ConfigurationError(
            "thread count must be >= 0, got {}".format(threads)
        )
    if threads == 0:
        return os.cpu_count() or 1
    return threads


@contextlib.contextmanager
def thread_pool(threads):
    pool = ThreadPool(thread_count(threads))
    try:
        yield pool
    finally:
        pool.close()
        pool.join()


def parallel_map(func, items, threads=1):
    """Map `func` over `items`, in a thread pool if more than one thread.

    Results keep the order of `items`.

    """
    items = list(items)
    if thread_count(threads) == 1 or len(items) < 2:
        return [func(item) for item in items]
    with thread_pool(threads) as pool:
        return pool.map(func, items)
