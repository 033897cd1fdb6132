"""TOML run configuration with strict schema validation."""
from __future__ import annotations

import sys
from dataclasses import dataclass, field, fields, replace

from .diffopt import OptimConfig
from .discriminator import LAYERS, TRAIN_EPOCHS, TRAIN_LR, NoiseSpec
from .errors import ConfigError
from .humanoid import HUMANOID_OPTIM
from .retarget import FIT_OPTIM, HUMAN_OPTIM, OBJECT_OPTIM, FitWeights, LossWeights
from .selection import BEAM_ITERATIONS, BEAM_WIDTH, INITIAL_SAMPLE, PipelineConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

_NUM = (int, float)

# section -> key -> accepted types
SCHEMA = {
    "": {"seed": int, "jobs": int},
    "paths": {"source_mesh": str, "targets": list, "sources": list, "model": str, "out": str},
    "grid": {"resolution": int, "padding": _NUM},
    "morph": {"steps": int},
    "beam": {"width": int, "iterations": int, "initial_sample": int},
    "weights": {f.name: _NUM for f in fields(LossWeights)},
    "fit_weights": {f.name: _NUM for f in fields(FitWeights)},
    "optim.object": {"learning_rate": _NUM, "iterations": int},
    "optim.human": {"learning_rate": _NUM, "iterations": int},
    "optim.fit": {"learning_rate": _NUM, "iterations": int},
    "optim.humanoid": {"learning_rate": _NUM, "iterations": int},
    "discriminator": {"learning_rate": _NUM, "epochs": int, "batch_size": int, "pairs": int,
                      "rot_range": list, "trans_range": list, "activation": str, "layers": list},
    "humanoid": {"chain": str, "pairs": str, "w_pairs": _NUM, "w_temporal": _NUM},
}


@dataclass
class RunConfig:
    seed: int = 0
    jobs: int = 1
    paths: dict = field(default_factory=dict)
    resolution: int = 64
    padding: float = None
    morph_steps: int = 4
    beam_width: int = BEAM_WIDTH
    beam_iterations: int = BEAM_ITERATIONS
    initial_sample: int = INITIAL_SAMPLE
    weights: LossWeights = LossWeights()
    fit_weights: FitWeights = FitWeights()
    object_optim: OptimConfig = OBJECT_OPTIM
    human_optim: OptimConfig = HUMAN_OPTIM
    fit_optim: OptimConfig = FIT_OPTIM
    humanoid_optim: OptimConfig = HUMANOID_OPTIM
    disc_lr: float = TRAIN_LR
    disc_epochs: int = TRAIN_EPOCHS
    disc_batch: int = 512
    disc_pairs: int = 10000
    noise: NoiseSpec = NoiseSpec()
    activation: str = "silu"
    layers: tuple = LAYERS
    humanoid_chain: str = None
    humanoid_pairs: str = None
    w_pairs: float = 1.0
    w_temporal: float = 1.0

    def pipeline(self):
        return PipelineConfig(self.beam_width, self.beam_iterations, self.initial_sample, self.morph_steps,
                              self.resolution, self.padding, self.weights, self.object_optim, self.human_optim,
                              self.seed)


def _check(section, table):
    allowed = SCHEMA[section]
    prefix = f"{section}." if section else ""
    for key, val in table.items():
        path = prefix + key
        if key not in allowed:
            raise ConfigError("unknown key", path)
        want = allowed[key]
        ok = isinstance(val, want) and not (isinstance(val, bool) and want is not bool)
        if not ok:
            names = "/".join(t.__name__ for t in (want if isinstance(want, tuple) else (want,)))
            raise ConfigError(f"expected {names}, got {type(val).__name__}", path)


def _flatten(doc):
    """Split the parsed document into schema sections (``optim`` holds sub-tables)."""
    out = {"": {}}
    for key, val in doc.items():
        if key == "optim":
            if not isinstance(val, dict):
                raise ConfigError("expected a table", "optim")
            for sub, tab in val.items():
                name = f"optim.{sub}"
                if name not in SCHEMA:
                    raise ConfigError("unknown section", name)
                if not isinstance(tab, dict):
                    raise ConfigError("expected a table", name)
                out[name] = tab
        elif isinstance(val, dict):
            if key not in SCHEMA or key == "":
                raise ConfigError("unknown section", key)
            out[key] = val
        else:
            out[""][key] = val
    for sec, tab in out.items():
        _check(sec, tab)
    return out


def _range(val, path):
    if len(val) != 2 or not all(isinstance(v, _NUM) and not isinstance(v, bool) for v in val):
        raise ConfigError("expected [lo, hi]", path)
    return (float(val[0]), float(val[1]))


def _optim(base, tab, path):
    try:
        return replace(base, **{k: (float(v) if k == "learning_rate" else v) for k, v in tab.items()})
    except ValueError as e:
        raise ConfigError(str(e), path) from None


def from_dict(doc):
    secs = _flatten(doc)
    cfg = RunConfig()
    top = secs[""]
    cfg.seed = top.get("seed", cfg.seed)
    cfg.jobs = top.get("jobs", cfg.jobs)
    if cfg.seed < 0:
        raise ConfigError("must be >= 0", "seed")
    if cfg.jobs < 1:
        raise ConfigError("must be >= 1", "jobs")
    cfg.paths = dict(secs.get("paths", {}))
    g = secs.get("grid", {})
    cfg.resolution = g.get("resolution", cfg.resolution)
    if cfg.resolution < 4:
        raise ConfigError("must be >= 4", "grid.resolution")
    cfg.padding = float(g["padding"]) if "padding" in g else None
    cfg.morph_steps = secs.get("morph", {}).get("steps", cfg.morph_steps)
    if cfg.morph_steps < 0:
        raise ConfigError("must be >= 0", "morph.steps")
    b = secs.get("beam", {})
    cfg.beam_width = b.get("width", cfg.beam_width)
    cfg.beam_iterations = b.get("iterations", cfg.beam_iterations)
    cfg.initial_sample = b.get("initial_sample", cfg.initial_sample)
    for k, v in (("width", cfg.beam_width), ("iterations", cfg.beam_iterations),
                 ("initial_sample", cfg.initial_sample)):
        if v < 1:
            raise ConfigError("must be >= 1", f"beam.{k}")
    for sec, attr, cls in (("weights", "weights", LossWeights), ("fit_weights", "fit_weights", FitWeights)):
        tab = secs.get(sec, {})
        for k, v in tab.items():
            if v < 0:
                raise ConfigError("must be >= 0", f"{sec}.{k}")
        setattr(cfg, attr, cls(**{k: float(v) for k, v in tab.items()}))
    for name in ("object", "human", "fit", "humanoid"):
        attr = f"{name}_optim"
        setattr(cfg, attr, _optim(getattr(cfg, attr), secs.get(f"optim.{name}", {}), f"optim.{name}"))
    d = secs.get("discriminator", {})
    cfg.disc_lr = float(d.get("learning_rate", cfg.disc_lr))
    cfg.disc_epochs = d.get("epochs", cfg.disc_epochs)
    cfg.disc_batch = d.get("batch_size", cfg.disc_batch)
    cfg.disc_pairs = d.get("pairs", cfg.disc_pairs)
    if cfg.disc_lr <= 0:
        raise ConfigError("must be > 0", "discriminator.learning_rate")
    for k in ("epochs", "batch_size", "pairs"):
        if d.get(k, 1) < 1:
            raise ConfigError("must be >= 1", f"discriminator.{k}")
    try:
        cfg.noise = NoiseSpec(_range(d["rot_range"], "discriminator.rot_range") if "rot_range" in d
                              else cfg.noise.rot_range,
                              _range(d["trans_range"], "discriminator.trans_range") if "trans_range" in d
                              else cfg.noise.trans_range)
    except ValueError as e:
        raise ConfigError(str(e), "discriminator") from None
    cfg.activation = d.get("activation", cfg.activation)
    if cfg.activation not in ("tanh", "silu", "softplus"):
        raise ConfigError("unknown activation", "discriminator.activation")
    if "layers" in d:
        layers = d["layers"]
        if (len(layers) < 2 or not all(isinstance(n, int) and n > 0 for n in layers)
                or layers[0] != 63 or layers[-1] != 1):
            raise ConfigError("expected positive ints starting at 63 and ending at 1", "discriminator.layers")
        cfg.layers = tuple(layers)
    h = secs.get("humanoid", {})
    cfg.humanoid_chain = h.get("chain")
    cfg.humanoid_pairs = h.get("pairs")
    cfg.w_pairs = float(h.get("w_pairs", cfg.w_pairs))
    cfg.w_temporal = float(h.get("w_temporal", cfg.w_temporal))
    if cfg.w_pairs < 0 or cfg.w_temporal < 0:
        raise ConfigError("must be >= 0", "humanoid")
    return cfg


def load(path):
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"invalid TOML: {e}", str(path)) from None
    return from_dict(doc)
