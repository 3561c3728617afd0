import configparser
import os
import os.path

from .exc import ConfigurationError

SYSTEM_CONFIG = "/etc/fc-reserving.conf"


def parse_float_list(value: str) -> list[float]:
    return [float(x) for x in value.replace(",", " ").split()]


class SysConfig(object):
    """A global config state registry.

    This is used to manage the defaults for engine hyperparameters,
    simulation sizes and CLI behaviour used in various places within
    fc.reserving.

    This provides the code for loading all those options from a central
    config file and to allow tests overriding those values gracefully.
    The built-in defaults are loaded on construction so that library use
    works without calling `load_system_config`.
    """

    cp: configparser.ConfigParser

    def __init__(self):
        self.glm = {}
        self.gbm = {}
        self.selection = {}
        self.simulation = {}
        self.cli = {}
        self.load_system_config(system=False)

    def read_config_files(self, system=True):
        """Tries to open fc-reserving.conf at various locations."""
        self.cp = configparser.ConfigParser()
        self.cp.read(os.path.dirname(__file__) + "/default.conf")
        if system:
            self.cp.read(SYSTEM_CONFIG)
            override = os.environ.get("FC_RESERVING_CONF")
            if override:
                if not os.path.exists(override):
                    raise ConfigurationError(
                        "FC_RESERVING_CONF names a missing file: {}".format(
                            override
                        )
                    )
                self.cp.read(override)
        if "glm" not in self.cp.sections():
            raise ConfigurationError(
                "error while reading config file: section [glm] not found"
            )

    def load_system_config(self, system=True):
        self.read_config_files(system)
        try:
            self.glm["tolerance"] = self.cp.getfloat("glm", "tolerance")
            self.glm["max_iterations"] = self.cp.getint(
                "glm", "max-iterations"
            )
            self.glm["max_halvings"] = self.cp.getint("glm", "max-halvings")

            self.gbm["trees"] = self.cp.getint("gbm", "trees")
            self.gbm["depth"] = self.cp.getint("gbm", "depth")
            self.gbm["shrinkage"] = self.cp.getfloat("gbm", "shrinkage")
            self.gbm["bag_fraction"] = self.cp.getfloat("gbm", "bag-fraction")
            self.gbm["min_node_size"] = self.cp.getint("gbm", "min-node-size")

            self.selection["folds"] = self.cp.getint("selection", "folds")
            self.selection["stratify"] = self.cp.getboolean(
                "selection", "stratify"
            )

            self.simulation["paths"] = self.cp.getint("simulation", "paths")
            self.simulation["quantiles"] = parse_float_list(
                self.cp.get("simulation", "quantiles")
            )
            self.simulation["chunk_rows"] = self.cp.getint(
                "simulation", "chunk-rows"
            )

            self.cli["seed"] = self.cp.getint("cli", "seed")
            self.cli["threads"] = self.cp.getint("cli", "threads")
        except (configparser.Error, ValueError) as e:
            raise ConfigurationError(
                "error while reading config file: {}".format(e)
            )


sysconfig = SysConfig()
