import argparse
import json
import os
import os.path
import sys
from importlib import metadata

from .exc import ConfigurationError, EstimabilityError, ReservingError
from .logging import init_logging
from .sysconfig import parse_float_list, sysconfig
from .util import (
    conditional_update,
    json_default,
    load_document,
    log,
    sha256sum,
)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3

MANIFEST = "manifest.json"


def version():
    try:
        return metadata.version("fc.reserving")
    except metadata.PackageNotFoundError:
        return "unknown"


class Command(object):
    """Runs one subcommand and keeps track of its inputs and outputs."""

    def __init__(self, name, args):
        self.name = name
        self.args = args
        self.inputs = {}
        self.outputs = []
        self.out = args.out
        self.seed = args.seed
        if self.seed is None:
            self.seed = sysconfig.cli["seed"]
        self.threads = args.threads
        if self.threads is None:
            self.threads = sysconfig.cli["threads"]
        self.log = log.bind(subsystem=name)

    def input(self, option):
        path = getattr(self.args, option)
        if not path:
            raise ConfigurationError(
                "{} needs --{}".format(self.name, option.replace("_", "-"))
            )
        if not os.path.exists(path):
            raise ConfigurationError("input file not found: {}".format(path))
        self.inputs[path] = sha256sum(path)
        return path

    def output(self, filename):
        os.makedirs(self.out, exist_ok=True)
        path = os.path.join(self.out, filename)
        self.outputs.append(path)
        return path

    def write_json(self, filename, data):
        conditional_update(self.output(filename), data)

    def show(self, data):
        print(json.dumps(data, indent=1, sort_keys=True, default=json_default))

    def portfolio(self):
        from .portfolio import ingest_csv

        return ingest_csv(self.input("data"), self.input("schema"))

    def write_manifest(self):
        os.makedirs(self.out, exist_ok=True)
        conditional_update(
            os.path.join(self.out, MANIFEST),
            {
                "command": self.name,
                "inputs": self.inputs,
                "outputs": sorted(self.outputs),
                "seed": self.seed,
                "version": version(),
            },
        )

    def __call__(self):
        getattr(self, self.name.replace("-", "_"))()
        self.write_manifest()

    # Subcommands

    def generate(self):
        from .generator import GeneratorConfig, generate
        from .portfolio import write_csv

        config = GeneratorConfig.load(self.input("config"))
        if self.args.seed is not None:
            config.seed = self.args.seed
        self.seed = config.seed
        portfolio = generate(config)
        write_csv(portfolio, self.output("portfolio.csv"))
        self.write_json("schema.json", portfolio.schema.to_dict())
        self.show(
            {
                "claims": len(portfolio.claims),
                "records": len(portfolio.records),
                "seed": config.seed,
            }
        )

    def model_config(self):
        from .evaluation import ModelConfig

        doc = {"name": "hrm"}
        if self.args.model:
            doc = load_document(self.input("model"))
        if doc.get("kind", "hrm") != "hrm":
            raise ConfigurationError("fit needs a hierarchical model config")
        return ModelConfig.from_dict(doc)

    def fit(self):
        from .hierarchical import fit_hrm, select_layers
        from .weighting import WeightVector

        portfolio = self.portfolio()
        config = self.model_config()
        specs = list(config.layers)
        if any(spec.candidates for spec in specs):
            specs, selections = select_layers(
                portfolio,
                specs,
                seed=self.seed,
                first_modeled_year=config.first_modeled_year,
                engine_configs=config.engine_configs,
                threads=self.threads,
            )
            self.write_json(
                "selection.json",
                {name: s.to_dict() for name, s in selections.items()},
            )
        weights = None
        if config.weighting == "uniform":
            weights = WeightVector.uniform(
                config.first_modeled_year, portfolio.window.d
            )
        model = fit_hrm(
            portfolio,
            specs,
            weights=weights,
            engine_configs=config.engine_configs,
            first_modeled_year=config.first_modeled_year,
            seed=self.seed,
        )
        model.save(self.output("model.json"))
        self.show(
            {
                "layers": {
                    spec.name: list(spec.covariates) for spec in model.layers
                },
                "loglik": model.loglik(portfolio),
            }
        )

    def _simulate(self, keep_records):
        from .hierarchical import HierarchicalModel
        from .simulation import simulate_paths

        model = HierarchicalModel.load(self.input("model"))
        portfolio = self.portfolio()
        return simulate_paths(
            model,
            portfolio,
            n_paths=self.args.paths,
            seed=self.seed,
            horizon=self.args.horizon,
            threads=self.threads,
            keep_records=keep_records,
        )

    def simulate(self):
        result = self._simulate(keep_records=True)
        result.records.to_csv(
            self.output("records.csv"), index=False, encoding="utf-8"
        )
        result.summary.to_csv(
            self.output("summary.csv"), index=False, encoding="utf-8"
        )
        self.show(
            {
                "paths": result.n_paths,
                "steps": result.steps,
                "records": len(result.records),
            }
        )

    def reserve(self):
        from .simulation import rbns_reserve

        result = self._simulate(keep_records=False)
        quantiles = None
        if self.args.quantiles:
            quantiles = parse_float_list(self.args.quantiles)
        report = rbns_reserve(result, quantiles, self.args.horizon)
        report.write_json(self.output("reserve.json"))
        report.write_csv(self.output("totals.csv"))
        self.show(report.to_dict())

    def triangle(self):
        from .triangle import build_triangle

        triangle = build_triangle(self.portfolio(), self.args.layer)
        path = self.output("triangle-{}.csv".format(self.args.layer))
        triangle.to_csv(path)
        self.show({"layer": self.args.layer, "shape": list(triangle.shape)})

    def chainladder(self):
        from .aggregate import chain_ladder, mack_se
        from .triangle import Triangle, build_triangle

        if self.args.triangle:
            triangle = Triangle.from_csv(self.input("triangle"))
        else:
            triangle = build_triangle(self.portfolio(), self.args.layer)
        result = chain_ladder(triangle).to_dict()
        try:
            result = mack_se(triangle).to_dict()
        except EstimabilityError as e:
            self.log.warning("mack-undefined", error=str(e))
        self.write_json("chainladder.json", result)
        self.show(result)

    def dcl(self):
        from .aggregate import dcl_rbns

        params = dcl_rbns(self.portfolio())
        self.write_json("dcl.json", params.to_dict())
        self.show(params.to_dict())

    def crm(self):
        from .aggregate import crm_rbns

        params = crm_rbns(self.portfolio())
        self.write_json("crm.json", params.to_dict())
        self.show(params.to_dict())

    def evaluate(self):
        from .evaluation import EvaluationConfig, moving_window_eval

        config = EvaluationConfig.load(self.input("config"))
        if self.args.seed is None:
            self.seed = config.seed
        portfolio = self.portfolio()
        run = moving_window_eval(
            portfolio,
            config.dates,
            config.models,
            self.args.horizon or config.horizon,
            seed=self.seed,
            threads=self.threads,
            cap=config.cap,
            exclude=config.exclude,
        )
        os.makedirs(self.out, exist_ok=True)
        self.outputs.extend(run.write(self.out))
        self.show(run.summary())

    def bridge_test(self):
        from .aggregate import bridge_test
        from .hierarchical import load_layer_specs

        doc = load_document(self.input("config"))
        if not isinstance(doc, dict) or "candidates" not in doc:
            raise ConfigurationError("a bridge-test config lists candidates")
        specs = load_layer_specs(doc) if "layers" in doc else None
        result = bridge_test(
            self.portfolio(),
            doc["candidates"],
            specs,
            first_modeled_year=int(doc.get("first_modeled_year", 1)),
        )
        self.write_json("bridge-test.json", result.to_dict())
        self.show(result.to_dict())


SUBCOMMANDS = [
    ("generate", "Generate a synthetic portfolio."),
    ("fit", "Fit a hierarchical model."),
    ("simulate", "Simulate the development of open claims."),
    ("reserve", "Estimate the RBNS reserve by simulation."),
    ("triangle", "Aggregate a layer into a runoff triangle."),
    ("chainladder", "Chain ladder with Mack standard errors."),
    ("dcl", "Double chain ladder style reserve."),
    ("crm", "Collective reserving model reserve."),
    ("evaluate", "Moving-window evaluation of models."),
    ("bridge-test", "Test covariates against the triangle."),
]


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--config", help="generator, evaluation or bridge-test config"
    )
    common.add_argument("--data", help="portfolio CSV")
    common.add_argument("--schema", help="schema of the portfolio CSV")
    common.add_argument("--model", help="model config or fitted model")
    common.add_argument("--triangle", help="triangle CSV")
    common.add_argument(
        "--layer",
        default="size",
        choices=["close", "payment", "size", "open"],
        help="layer to aggregate (default: size)",
    )
    common.add_argument(
        "--out", default=".", help="output directory (default: .)"
    )
    common.add_argument("--seed", type=int, help="random seed")
    common.add_argument("--paths", type=int, help="number of simulated paths")
    common.add_argument("--horizon", type=int, help="years to project")
    common.add_argument(
        "--threads", type=int, help="worker threads (0 = one per CPU)"
    )
    common.add_argument(
        "--quantiles", help="comma separated quantile levels of the reserve"
    )

    a = argparse.ArgumentParser(
        prog="fc-reserving",
        description="Hierarchical claims reserving",
    )
    a.set_defaults(func=None)
    a.add_argument(
        "--verbose",
        "-v",
        action="store_true",
        default=False,
        help="Increase logging level.",
    )
    a.add_argument("--logfile", help="Also log to this file.")

    sub = a.add_subparsers(title="subcommands")
    for name, description in SUBCOMMANDS:
        p = sub.add_parser(name, help=description, parents=[common])
        p.set_defaults(func=name)
    return a


def run(argv=None):
    """Run the command line `argv` and return the exit status."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on usage errors and 0 after --help.
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    if args.func is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE

    exitcode = EXIT_OK
    try:
        init_logging(args.verbose, args.logfile)
        log.debug("load-system-config")
        sysconfig.load_system_config()
        Command(args.func, args)()
    except ConfigurationError as e:
        log.error("configuration-error", error=str(e))
        exitcode = EXIT_CONFIG
    except ReservingError as e:
        log.error("reserving-error", kind=e.__class__.__name__, error=str(e))
        exitcode = EXIT_ERROR
    except Exception:
        log.exception("unexpected-exception", exc_info=True)
        exitcode = EXIT_ERROR

    if exitcode != EXIT_OK:
        log.debug("exit", status=exitcode)
    return exitcode


def main(argv=None):
    sys.exit(run(argv))
