"""Run configuration: one JSON document covering every module.

Angles are written in degrees in the JSON (keys carry a ``_deg``
suffix) and converted to radians at load.  Unknown sections or keys are
rejected by name.  Sections omit freely; every field has the default
the model was specified with (0.4 s steps, 9 observed + 12 predicted
frames, 5 x 3 anchor grid, batch 8 / lr 1e-3 / 25 epochs).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

from .anchors import AnchorConfig
from .data import DcmSimConfig, SimConfig
from .dcm import FixedDcmParams
from .neural import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """The configuration document is malformed."""


@dataclass(frozen=True)
class HorizonConfig:
    dt: float = 0.4
    t_obs: int = 9
    t_pred: int = 21

    def __post_init__(self):
        if self.dt <= 0 or not 0 < self.t_obs < self.t_pred:
            raise ValueError("need dt > 0 and 0 < t_obs < t_pred")


@dataclass(frozen=True)
class EvalConfig:
    collision_threshold: float = 0.2
    collision_substeps: int = 4
    top_k: int = 3
    neighbour_replay: bool = False


@dataclass
class RunConfig:
    seed: int = 42
    threads: int = 1
    horizons: HorizonConfig = field(default_factory=HorizonConfig)
    anchors: AnchorConfig = field(default_factory=AnchorConfig)
    dcm: FixedDcmParams = field(default_factory=FixedDcmParams)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    dcm_sim: DcmSimConfig = field(default_factory=DcmSimConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


def _deg(x):
    return math.radians(float(x))


def _deg_list(xs):
    return tuple(math.radians(float(x)) for x in xs)


# section -> (dataclass, {json key: (field name, converter)})
_SECTIONS = {
    "horizons": (HorizonConfig, {"dt": ("dt", float), "t_obs": ("t_obs", int), "t_pred": ("t_pred", int)}),
    "anchors": (
        AnchorConfig,
        {
            "direction_offsets_deg": ("direction_offsets", _deg_list),
            "speed_multipliers": ("speed_multipliers", tuple),
            "min_radius": ("min_radius", float),
        },
    ),
    "dcm": (
        FixedDcmParams,
        {
            "perception_radius": ("perception_radius", float),
            "occupancy_floor": ("occupancy_floor", float),
            "collision_decay": ("collision_decay", float),
            "collision_aim_cone_deg": ("collision_aim_cone", _deg),
            "leader_cone_deg": ("leader_cone", _deg),
            "leader_range": ("leader_range", float),
            "leader_alignment_cone_deg": ("leader_alignment_cone", _deg),
            "leader_distance_exponent": ("leader_distance_exponent", float),
        },
    ),
    "model": (
        ModelConfig,
        {
            "embedding_dim": ("embedding_dim", int),
            "interaction_dim": ("interaction_dim", int),
            "hidden_dim": ("hidden_dim", int),
            "grid_cells": ("grid_cells", int),
            "grid_resolution": ("grid_resolution", float),
            "goal_conditioned": ("goal_conditioned", bool),
            "sigma_min": ("sigma_min", float),
            "sigma_max": ("sigma_max", float),
            "rho_scale": ("rho_scale", float),
        },
    ),
    "train": (
        TrainConfig,
        {
            "learning_rate": ("learning_rate", float),
            "batch_size": ("batch_size", int),
            "epochs": ("epochs", int),
            "seed": ("seed", int),
            "beta1": ("beta1", float),
            "beta2": ("beta2", float),
            "epsilon": ("epsilon", float),
            "clip_norm": ("clip_norm", lambda x: None if x is None else float(x)),
            "teacher_forcing": ("teacher_forcing", bool),
        },
    ),
    "sim": (
        SimConfig,
        {
            "n_scenes": ("n_scenes", int),
            "min_peds": ("min_peds", int),
            "max_peds": ("max_peds", int),
            "arena_radius": ("arena_radius", float),
            "desired_speed": ("desired_speed", float),
            "speed_jitter": ("speed_jitter", float),
            "relaxation_time": ("relaxation_time", float),
            "repulsion_strength": ("repulsion_strength", float),
            "repulsion_range": ("repulsion_range", float),
            "goal_tolerance": ("goal_tolerance", float),
            "spawn_gap": ("spawn_gap", float),
            "euler_substeps": ("euler_substeps", int),
            "seed": ("seed", int),
        },
    ),
    "dcm_sim": (
        DcmSimConfig,
        {
            "n_scenes": ("n_scenes", int),
            "min_peds": ("min_peds", int),
            "max_peds": ("max_peds", int),
            "arena_radius": ("arena_radius", float),
            "platoon_fraction": ("platoon_fraction", float),
            "initial_speed": ("initial_speed", float),
            "speed_floor": ("speed_floor", float),
            "speed_cap": ("speed_cap", float),
            "seed": ("seed", int),
        },
    ),
    "eval": (
        EvalConfig,
        {
            "collision_threshold": ("collision_threshold", float),
            "collision_substeps": ("collision_substeps", int),
            "top_k": ("top_k", int),
            "neighbour_replay": ("neighbour_replay", bool),
        },
    ),
}

_SEEDED_SECTIONS = ("train", "sim", "dcm_sim")


def _build_section(name: str, body: dict, master_seed: int):
    cls, keys = _SECTIONS[name]
    if not isinstance(body, dict):
        raise ConfigError(f"section '{name}' must be an object")
    kwargs = {}
    for key, value in body.items():
        if key not in keys:
            raise ConfigError(f"unknown key '{key}' in section '{name}'")
        field_name, convert = keys[key]
        try:
            kwargs[field_name] = convert(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for '{name}.{key}': {exc}") from None
    if name in _SEEDED_SECTIONS and "seed" not in kwargs:
        kwargs["seed"] = master_seed
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"section '{name}': {exc}") from None


def load_config(path=None, document: dict | None = None) -> RunConfig:
    """Load and validate a config file (or a pre-parsed document)."""
    if document is None:
        if path is None:
            document = {}
        else:
            try:
                with open(path) as fh:
                    document = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc.msg})") from None
    if not isinstance(document, dict):
        raise ConfigError("config root must be a JSON object")
    known_top = {"seed", "threads", *(_SECTIONS)}
    for key in document:
        if key not in known_top:
            raise ConfigError(f"unknown key '{key}'")
    seed = document.get("seed", 42)
    threads = document.get("threads", 1)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError("'seed' must be an integer")
    if not isinstance(threads, int) or isinstance(threads, bool) or threads < 1:
        raise ConfigError("'threads' must be a positive integer")
    cfg = RunConfig(seed=seed, threads=threads)
    for name in _SECTIONS:
        if name in document:
            setattr(cfg, name, _build_section(name, document[name], seed))
        elif name in _SEEDED_SECTIONS:
            setattr(cfg, name, _build_section(name, {}, seed))
    return cfg


def config_echo(cfg: RunConfig) -> dict:
    """The configuration back in its JSON schema (for manifests/checkpoints)."""
    echo: dict = {"seed": cfg.seed, "threads": cfg.threads}
    for name, (_cls, keys) in _SECTIONS.items():
        section = getattr(cfg, name)
        body = {}
        for json_key, (field_name, _conv) in keys.items():
            value = getattr(section, field_name)
            if json_key.endswith("_deg"):
                if isinstance(value, tuple):
                    value = [round(math.degrees(v), 9) for v in value]
                else:
                    value = round(math.degrees(value), 9)
            elif isinstance(value, tuple):
                value = list(value)
            body[json_key] = value
        echo[name] = body
    return echo
