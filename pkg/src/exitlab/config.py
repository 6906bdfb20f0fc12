"""Experiment configuration: a TOML file with a fixed key tree.

Unknown sections or keys are rejected by name so typos cannot silently
fall back to defaults.  Dotted --set overrides reuse TOML literal syntax
for the value (bare words become strings).  Sentinels: 0 for "use the
chain value" where noted, empty lists for "unset".
"""

import hashlib
import json

try:
    import tomllib as tomli
except ModuleNotFoundError:
    import tomli

from .errors import ConfigError
from .model import make_chain_spec

__all__ = ["DEFAULTS", "default_config", "load_config", "apply_overrides",
           "build_spec", "config_digest", "example_text"]

# full default tree; every key that may appear in a config file is here
DEFAULTS = {
    "chain": {
        "n": 1,
        "d": 1,
        "drifts": [["0"]],
        "sigma": [["1"]],
        "epsilons": [],
        "horizon": 4.0,
        "x0": [],
    },
    "domains": {
        "boxes": [],
    },
    "controls": {
        "sets": [],
    },
    "grid": {
        "nodes": 41,
        "level": 0,
    },
    "mc": {
        "n_paths": 10000,
        "dt": 1e-3,
        "master_seed": 0,
        "n_times": 201,
        "absorb": "joint",
        "horizon": 0.0,
        "window": [],
    },
    "eigen": {
        "tol": 1e-8,
        "max_iter": 500,
        "eps_values": [],
    },
    "crosscheck": {
        "agreement_tol": 0.07,
    },
    "hjb": {
        "tol": 1e-9,
        "max_sweeps": 50,
        "mode": "joint",
    },
    "exitprob": {
        "target": ["x1+"],
        "expression": "",
        "k": 10.0,
    },
    "sweep": {
        "eps_values": [0.2, 0.1, 0.05, 0.025],
        "target": ["x1+"],
        "expression": "",
        "k": 10.0,
    },
    "couple": {
        "eps_values": [0.2, 0.1, 0.05, 0.025],
        "n_paths": 1000,
    },
    "ordering": {
        "n_paths": 1000,
    },
    "skeleton": {
        "dt": 1e-2,
        "blowup_radius": 1e6,
    },
    "output": {
        "triplets": False,
        "plots": True,
    },
}


def _check_type(dotted, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"config key '{dotted}' needs a boolean, "
                              f"got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"config key '{dotted}' needs an integer, "
                              f"got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key '{dotted}' needs a number, "
                              f"got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"config key '{dotted}' needs a string, "
                              f"got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"config key '{dotted}' needs an array, "
                              f"got {value!r}")
        return value
    raise ConfigError(f"config key '{dotted}' has unsupported type")


def _merge(tree):
    cfg = {}
    for section, keys in DEFAULTS.items():
        cfg[section] = dict(keys)
    for section, body in tree.items():
        if section not in DEFAULTS:
            raise ConfigError(f"unknown config section '[{section}]'")
        if not isinstance(body, dict):
            raise ConfigError(f"config section '[{section}]' must be a "
                              "table")
        for key, value in body.items():
            if key not in DEFAULTS[section]:
                raise ConfigError(f"unknown config key '{section}.{key}'")
            cfg[section][key] = _check_type(f"{section}.{key}", value,
                                            DEFAULTS[section][key])
    return cfg


def default_config() -> dict:
    """The full default tree (what an empty config file resolves to)."""
    return _merge({})


def load_config(path) -> dict:
    """Parse and validate a config file; returns the full tree with
    defaults filled in."""
    try:
        with open(path, "rb") as fh:
            tree = tomli.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"config file does not parse: {exc}") from exc
    return _merge(tree)


def apply_overrides(cfg: dict, pairs) -> dict:
    """Apply --set dotted.key=value entries in order; values use TOML
    literal syntax, with bare words read as strings."""
    for raw in pairs:
        if "=" not in raw:
            raise ConfigError(f"override '{raw}' is not dotted.key=value")
        dotted, text = raw.split("=", 1)
        dotted = dotted.strip()
        parts = dotted.split(".")
        if len(parts) != 2:
            raise ConfigError(f"override key '{dotted}' must be "
                              "section.key")
        section, key = parts
        if section not in DEFAULTS or key not in DEFAULTS[section]:
            raise ConfigError(f"unknown config key '{dotted}'")
        try:
            value = tomli.loads(f"v = {text.strip()}")["v"]
        except tomli.TOMLDecodeError:
            value = text.strip()
        cfg[section][key] = _check_type(dotted, value,
                                        DEFAULTS[section][key])
    return cfg


def build_spec(cfg: dict):
    """ChainSpec from the [chain]/[domains]/[controls] sections."""
    chain = cfg["chain"]
    n, d = chain["n"], chain["d"]
    boxes = cfg["domains"]["boxes"]
    if not boxes:
        boxes = [[[-1.0, 1.0]] * d] * n
    sets = cfg["controls"]["sets"] or None
    x0 = chain["x0"] or None
    eps = chain["epsilons"] or None
    return make_chain_spec(
        n=n, d=d, drifts=chain["drifts"], sigma=chain["sigma"],
        domains=boxes, control_sets=sets, epsilons=eps,
        horizon=chain["horizon"], x0=x0)


def config_digest(cfg: dict) -> str:
    """Stable digest of the resolved tree (defaults + file + overrides)."""
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def example_text() -> str:
    """A fully commented example config with every default inline."""
    return '''\
# Exit-rate laboratory configuration.  Every key shown here is optional
# and set to its default; unknown keys are errors.

[chain]
n = 1                    # subsystem count
d = 1                    # state dimension per subsystem
drifts = [["0"]]         # per subsystem: d expressions over x1..x_{i*d}, u1..u_{r_i}
sigma = [["1"]]          # d x m matrix of expressions over x1..xd
epsilons = []            # regularization intensities for blocks 2..n ([] = zeros)
horizon = 4.0            # default simulation horizon (time units)
x0 = []                  # start point per subsystem ([] = box centers)

[domains]
boxes = []               # per subsystem: d [lo, hi] pairs ([] = (-1,1) everywhere)

[controls]
sets = []                # per subsystem: list of control vectors ([] = single zero)

[grid]
nodes = 41               # nodes per axis (int) or per-axis list, boundary included
level = 0                # chain prefix length for PDE work (0 = full chain)

[mc]
n_paths = 10000
dt = 0.001
master_seed = 0          # overridden by --seed
n_times = 201            # survival-curve sample times
absorb = "joint"         # "joint" = exit of the product domain, "level" = last block
horizon = 0.0            # simulation horizon override (0 = chain horizon)
window = []              # rate fit window [lo, hi] ([] = tail half [T/2, T])

[eigen]
tol = 1e-8
max_iter = 500
eps_values = []          # optional ladder: eigenvalue per epsilon

[crosscheck]
agreement_tol = 0.07     # relative eigenvalue-vs-MC agreement bound

[hjb]
tol = 1e-9               # |delta lambda| stopping threshold
max_sweeps = 50
mode = "joint"           # feedback mode: "joint" or "own" (experimental)

[exitprob]
target = ["x1+"]         # boundary faces ("x<i>+" / "x<i>-")
expression = ""          # boundary data expression (overrides target+k)
k = 10.0                 # indicator ramp sharpness (width 1/k)

[sweep]
eps_values = [0.2, 0.1, 0.05, 0.025]   # strictly decreasing ladder
target = ["x1+"]
expression = ""
k = 10.0

[couple]
eps_values = [0.2, 0.1, 0.05, 0.025]
n_paths = 1000

[ordering]
n_paths = 1000

[skeleton]
dt = 0.01                # RK4 step for the noise-free skeleton
blowup_radius = 1e6

[output]
triplets = false         # dump the assembled operator as i j value lines
plots = true             # render figures next to the CSVs
'''
