"""Gradient boosted regression trees for Bernoulli and gamma layers.

Trees are fitted to the negative gradient of the deviance by weighted
least squares; leaves then take the exact (gamma) or one-step Newton
(Bernoulli) value on the link scale. Numeric splits send `x < threshold`
left. Categorical splits order the levels of a node by their mean
gradient and send a prefix of that order left; levels unseen in training
follow the reference level, as in the GLM design.

"""

import numpy as np
from scipy import special

from ..exc import ConfigurationError, ConvergenceError, DomainError
from ..exc import UndefinedError
from ..sysconfig import sysconfig
from ..util import log
from .design import Design, DesignEncoder
from .family import get_family

LOSSES = ("bernoulli", "gamma")
MAX_HALVINGS = 30
# Bernoulli Newton leaves are clipped to this range on the logit scale.
MAX_LEAF = 5.0


class Hyperparameters(object):
    def __init__(
        self,
        trees=None,
        depth=None,
        shrinkage=None,
        bag_fraction=None,
        min_node_size=None,
    ):
        defaults = sysconfig.gbm
        self.trees = defaults["trees"] if trees is None else trees
        self.depth = defaults["depth"] if depth is None else depth
        self.shrinkage = (
            defaults["shrinkage"] if shrinkage is None else shrinkage
        )
        self.bag_fraction = (
            defaults["bag_fraction"] if bag_fraction is None else bag_fraction
        )
        self.min_node_size = (
            defaults["min_node_size"]
            if min_node_size is None
            else min_node_size
        )
        self.validate()

    def validate(self):
        checks = [
            (int(self.trees) == self.trees and self.trees >= 0, "trees >= 0"),
            (int(self.depth) == self.depth and self.depth >= 1, "depth >= 1"),
            (0 < self.shrinkage <= 1, "shrinkage in (0, 1]"),
            (0 < self.bag_fraction <= 1, "bag_fraction in (0, 1]"),
            (self.min_node_size >= 1, "min_node_size >= 1"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigurationError(
                    "invalid boosting hyperparameters: need {}".format(message)
                )

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc or {})
        unknown = set(doc) - set(cls().to_dict())
        if unknown:
            raise ConfigurationError(
                "unknown boosting hyperparameters: {}".format(
                    ", ".join(sorted(unknown))
                )
            )
        return cls(**doc)

    def to_dict(self):
        return {
            "trees": self.trees,
            "depth": self.depth,
            "shrinkage": self.shrinkage,
            "bag_fraction": self.bag_fraction,
            "min_node_size": self.min_node_size,
        }


class Tree(object):
    """A binary regression tree stored as parallel node arrays."""

    def __init__(self):
        self.feature = []
        self.threshold = []
        self.left_levels = []
        self.left = []
        self.right = []
        self.value = []
        self.gain = []

    def __len__(self):
        return len(self.feature)

    def add_node(self):
        for array in (self.feature, self.left, self.right):
            array.append(-1)
        self.threshold.append(0.0)
        self.left_levels.append(None)
        self.value.append(0.0)
        self.gain.append(0.0)
        return len(self.feature) - 1

    @property
    def depth(self):
        def depth(node):
            if self.feature[node] < 0:
                return 0
            return 1 + max(depth(self.left[node]), depth(self.right[node]))

        return depth(0)

    def goes_left(self, node, features):
        x = features[:, self.feature[node]]
        if self.left_levels[node] is not None:
            return np.isin(x, self.left_levels[node])
        return x < self.threshold[node]

    def apply(self, features):
        """Leaf index per row."""
        leaves = np.zeros(features.shape[0], dtype=int)
        pending = [(0, np.arange(features.shape[0]))]
        while pending:
            node, rows = pending.pop()
            if self.feature[node] < 0:
                leaves[rows] = node
                continue
            left = self.goes_left(node, features[rows])
            pending.append((self.left[node], rows[left]))
            pending.append((self.right[node], rows[~left]))
        return leaves

    def predict(self, features):
        return np.asarray(self.value)[self.apply(features)]

    def to_dict(self, encoder):
        nodes = []
        for i in range(len(self)):
            node = {"value": self.value[i]}
            if self.feature[i] >= 0:
                term = encoder.terms[self.feature[i]]
                node.update(
                    feature=term.name,
                    gain=self.gain[i],
                    left=self.left[i],
                    right=self.right[i],
                )
                if self.left_levels[i] is not None:
                    node["left_levels"] = [
                        term.levels[int(c)] for c in self.left_levels[i]
                    ]
                else:
                    node["threshold"] = self.threshold[i]
            nodes.append(node)
        return nodes

    @classmethod
    def from_dict(cls, nodes, encoder):
        index = {t.name: i for i, t in enumerate(encoder.terms)}
        tree = cls()
        for node in nodes:
            i = tree.add_node()
            tree.value[i] = node["value"]
            if "feature" not in node:
                continue
            feature = index[node["feature"]]
            tree.feature[i] = feature
            tree.gain[i] = node.get("gain", 0.0)
            tree.left[i] = node["left"]
            tree.right[i] = node["right"]
            if "left_levels" in node:
                levels = encoder.terms[feature].levels
                tree.left_levels[i] = sorted(
                    levels.index(level) for level in node["left_levels"]
                )
            else:
                tree.threshold[i] = node["threshold"]
        return tree


class GbmFit(object):
    """A boosted ensemble.

    The link-scale prediction is `initial_value + shrinkage * sum(trees)`.

    """

    engine = "gbm"

    def __init__(
        self,
        encoder: DesignEncoder,
        loss,
        initial_value,
        shrinkage,
        trees,
        hyperparameters: Hyperparameters,
        dispersion=1.0,
        deviance_trace=(),
        response=None,
    ):
        self.encoder = encoder
        self.loss = loss
        self.initial_value = float(initial_value)
        self.shrinkage = float(shrinkage)
        self.trees = list(trees)
        self.hyperparameters = hyperparameters
        self.dispersion = float(dispersion)
        self.deviance_trace = list(deviance_trace)
        self.response = response

    def __repr__(self):
        return "<GbmFit {} trees={}>".format(self.loss, len(self.trees))

    @property
    def family(self):
        return get_family(self.loss)

    @property
    def covariates(self):
        return self.encoder.covariates

    @property
    def n_parameters(self):
        return sum(len(t) for t in self.trees)

    def decision_function(self, frame, offset=None):
        eta = np.full(len(frame), self.initial_value)
        if self.trees:
            features = self.encoder.features(frame)
            for tree in self.trees:
                eta += self.shrinkage * tree.predict(features)
        if offset is not None:
            eta = eta + offset
        return eta

    def predict(self, frame, offset=None):
        eta = self.decision_function(frame, offset)
        if self.loss == "bernoulli":
            return special.expit(eta)
        return np.exp(eta)

    def to_dict(self):
        return {
            "engine": self.engine,
            "loss": self.loss,
            "encoder": self.encoder.to_dict(),
            "initial_value": self.initial_value,
            "shrinkage": self.shrinkage,
            "hyperparameters": self.hyperparameters.to_dict(),
            "dispersion": self.dispersion,
            "deviance_trace": self.deviance_trace,
            "trees": [t.to_dict(self.encoder) for t in self.trees],
            "response": self.response,
        }

    @classmethod
    def from_dict(cls, doc):
        encoder = DesignEncoder.from_dict(doc["encoder"])
        return cls(
            encoder,
            doc["loss"],
            doc["initial_value"],
            doc["shrinkage"],
            [Tree.from_dict(nodes, encoder) for nodes in doc["trees"]],
            Hyperparameters.from_dict(doc["hyperparameters"]),
            dispersion=doc.get("dispersion", 1.0),
            deviance_trace=doc.get("deviance_trace", ()),
            response=doc.get("response"),
        )


def _mean(y, w):
    return float(np.sum(w * y) / np.sum(w))


def _deviance(loss, y, eta, w):
    if loss == "bernoulli":
        p = special.expit(eta)
        return float(-2.0 * np.sum(w * np.log(np.where(y == 1, p, 1.0 - p))))
    mu = np.exp(eta)
    return float(2.0 * np.sum(w * ((y - mu) / mu - np.log(y / mu))))


def _negative_gradient(loss, y, eta):
    if loss == "bernoulli":
        return y - special.expit(eta)
    return y * np.exp(-eta) - 1.0


def _leaf_value(loss, y, eta, w):
    if not np.sum(w) > 0:
        return 0.0
    if loss == "bernoulli":
        p = special.expit(eta)
        denominator = np.sum(w * p * (1.0 - p))
        if not denominator > 0:
            return 0.0
        value = np.sum(w * (y - p)) / denominator
        return float(np.clip(value, -MAX_LEAF, MAX_LEAF))
    return float(np.log(np.sum(w * y * np.exp(-eta)) / np.sum(w)))


def _split_gain(sg, sw, total_g, total_w):
    with np.errstate(divide="ignore", invalid="ignore"):
        return (
            sg**2 / sw
            + (total_g - sg) ** 2 / (total_w - sw)
            - total_g**2 / total_w
        )


def _best_split(features, kinds, g, w, min_node, threshold):
    """Best (gain, feature, rule) for one node or None.

    Ties resolve to the lowest feature index, then the lowest split point.

    """
    total_g = float(np.sum(w * g))
    total_w = float(np.sum(w))
    n = len(g)
    best = None
    best_gain = threshold
    for f, kind in enumerate(kinds):
        x = features[:, f]
        if kind == "numeric":
            order = np.argsort(x, kind="stable")
            xs = x[order]
            sg = np.cumsum((w * g)[order])[:-1]
            sw = np.cumsum(w[order])[:-1]
            counts = np.arange(1, n)
            valid = (
                (xs[:-1] < xs[1:])
                & (counts >= min_node)
                & (n - counts >= min_node)
                & (sw > 0)
                & (total_w - sw > 0)
            )
            if not valid.any():
                continue
            gains = _split_gain(sg, sw, total_g, total_w)
            gains = np.where(valid, gains, -np.inf)
            k = int(np.argmax(gains))
            if gains[k] > best_gain:
                best_gain = float(gains[k])
                best = (f, float((xs[k] + xs[k + 1]) / 2.0), None)
        else:
            levels, inverse = np.unique(x, return_inverse=True)
            if len(levels) < 2:
                continue
            level_g = np.bincount(inverse, weights=w * g)
            level_w = np.bincount(inverse, weights=w)
            level_n = np.bincount(inverse)
            with np.errstate(divide="ignore", invalid="ignore"):
                means = np.where(level_w > 0, level_g / level_w, 0.0)
            order = np.lexsort((levels, means))
            sg = np.cumsum(level_g[order])[:-1]
            sw = np.cumsum(level_w[order])[:-1]
            counts = np.cumsum(level_n[order])[:-1]
            valid = (
                (counts >= min_node)
                & (n - counts >= min_node)
                & (sw > 0)
                & (total_w - sw > 0)
            )
            if not valid.any():
                continue
            gains = _split_gain(sg, sw, total_g, total_w)
            gains = np.where(valid, gains, -np.inf)
            k = int(np.argmax(gains))
            if gains[k] > best_gain:
                best_gain = float(gains[k])
                left = sorted(float(v) for v in levels[order[: k + 1]])
                best = (f, 0.0, left)
    if best is None:
        return None
    return (best_gain,) + best


def grow_tree(features, kinds, y, eta, w, loss, hyper):
    g = _negative_gradient(loss, y, eta)
    threshold = 1e-12 * max(float(np.sum(w * g**2)), 1e-300)
    tree = Tree()

    def grow(rows, depth):
        node = tree.add_node()
        split = None
        if depth < hyper.depth and len(rows) >= 2 * hyper.min_node_size:
            split = _best_split(
                features[rows],
                kinds,
                g[rows],
                w[rows],
                hyper.min_node_size,
                threshold,
            )
        if split is None:
            tree.value[node] = _leaf_value(loss, y[rows], eta[rows], w[rows])
            return node
        gain, feature, split_point, left_levels = split
        tree.feature[node] = feature
        tree.gain[node] = gain
        tree.threshold[node] = split_point
        tree.left_levels[node] = left_levels
        goes_left = tree.goes_left(node, features[rows])
        tree.left[node] = grow(rows[goes_left], depth + 1)
        tree.right[node] = grow(rows[~goes_left], depth + 1)
        return node

    grow(np.arange(len(y)), 0)
    return tree


def fit_gbm(
    design: Design,
    responses,
    loss,
    weights,
    hyperparameters=None,
    seed=0,
    response=None,
):
    """Boost trees on the weighted deviance of `loss`.

    The full-data training deviance never increases: a tree whose
    shrunken step would increase it is halved until it does not (or
    contributes nothing).

    """
    if loss not in LOSSES:
        raise ConfigurationError("unknown boosting loss {!r}".format(loss))
    if hyperparameters is None:
        hyper = Hyperparameters()
    elif isinstance(hyperparameters, Hyperparameters):
        hyper = hyperparameters
    else:
        hyper = Hyperparameters.from_dict(hyperparameters)

    y = np.asarray(responses, dtype=float)
    w = np.asarray(weights, dtype=float)
    n = len(y)
    if w.shape != (n,) or (w < 0).any() or not w.sum() > 0:
        raise ConfigurationError("weights must be >= 0 with a positive total")
    if loss == "gamma" and (np.isnan(y).any() or (y <= 0).any()):
        raise DomainError("gamma responses must be > 0")
    if loss == "bernoulli" and not np.isin(y, (0, 1)).all():
        raise DomainError("bernoulli responses must be 0 or 1")

    baseline = _mean(y, w)
    if loss == "bernoulli":
        if baseline in (0.0, 1.0):
            raise ConvergenceError(
                "complete separation: all responses are {}".format(
                    int(baseline)
                ),
                diagnostics={"trees": 0},
            )
        initial = float(special.logit(baseline))
    else:
        initial = float(np.log(baseline))

    encoder = design.encoder
    features = design.features
    kinds = [t.kind for t in encoder.terms]
    rng = np.random.default_rng(seed)
    eta = np.full(n, initial)
    trace = [_deviance(loss, y, eta, w)]
    trees = []
    bag = max(1, int(round(hyper.bag_fraction * n)))
    for index in range(hyper.trees):
        if bag < n:
            rows = np.sort(rng.choice(n, size=bag, replace=False))
        else:
            rows = np.arange(n)
        tree = grow_tree(
            features[rows], kinds, y[rows], eta[rows], w[rows], loss, hyper
        )
        contribution = tree.predict(features)
        factor = 1.0
        for _ in range(MAX_HALVINGS):
            candidate = eta + hyper.shrinkage * factor * contribution
            dev = _deviance(loss, y, candidate, w)
            if np.isfinite(dev) and dev <= trace[-1]:
                break
            factor /= 2.0
        else:
            factor = 0.0
            candidate = eta
            dev = trace[-1]
            tree.gain = [0.0] * len(tree)
        tree.value = [v * factor for v in tree.value]
        eta = candidate
        trace.append(dev)
        trees.append(tree)
        if (index + 1) % 50 == 0:
            log.debug("gbm-progress", trees=index + 1, deviance=dev)

    if loss == "gamma":
        mu = np.exp(eta)
        dispersion = float(np.sum(w * ((y - mu) / mu) ** 2) / np.sum(w))
    else:
        dispersion = 1.0
    fit = GbmFit(
        encoder,
        loss,
        initial,
        hyper.shrinkage,
        trees,
        hyper,
        dispersion=dispersion,
        deviance_trace=trace,
        response=response,
    )
    log.debug(
        "gbm-fit",
        loss=loss,
        response=response,
        rows=n,
        trees=len(trees),
        deviance=trace[-1],
    )
    return fit


def gbm_importance(fit: GbmFit):
    """Total split gain per covariate, scaled to sum to 100."""
    if not fit.trees:
        raise UndefinedError("importance of an empty ensemble is undefined")
    totals = np.zeros(len(fit.encoder.terms))
    for tree in fit.trees:
        for feature, gain in zip(tree.feature, tree.gain):
            if feature >= 0:
                totals[feature] += gain
    if not totals.sum() > 0:
        raise UndefinedError("the ensemble contains no informative split")
    scores = 100.0 * totals / totals.sum()
    return {t.name: float(s) for t, s in zip(fit.encoder.terms, scores)}
