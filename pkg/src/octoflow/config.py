"""Flat ``key = value`` configuration files with a registered schema.

Units are encoded in key names (``_mm``, ``_ms``, ``_mls``). Unknown keys are
rejected. Values are written in a canonical form so write -> read -> write is
byte-identical.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .hemo_bc import InflowWaveform, InjectionParams, PhysicsConstants, synth_inflow_waveform
from .model import ModelConfig
from .vasctree import TreeGenConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Key:
    name: str
    kind: str  # int, float, bool, str, ints, floats
    default: Any
    help: str = ""


def _k(name, kind, default, help=""):
    return Key(name, kind, default, help)


RUN_SCHEMA: tuple[Key, ...] = (
    _k("seed", "int", 0, "master seed for data generation and training"),
    _k("n_cases", "int", 16, "number of synthetic cases"),
    # geometry
    _k("root_radius_min_mm", "float", 1.62),
    _k("root_radius_max_mm", "float", 1.98),
    _k("bifurcation_angle_min_deg", "float", 35.0),
    _k("bifurcation_angle_max_deg", "float", 135.0),
    _k("n_generations_choices", "ints", (3, 4, 5), "generation counts sampled per case"),
    _k("radius_decay_exponent", "float", 3.0),
    _k("extension_factor", "float", 5.0),
    _k("segment_length_over_radius", "float", 8.0),
    _k("vertical_attraction", "float", 0.3),
    _k("spacing_mm", "float", 0.5, "lumen point spacing"),
    # boundary conditions and oracle
    _k("waveform_samples", "int", 256),
    _k("t_l_ms", "float", 250.0),
    _k("q_ca_max_mls", "float", 2.5),
    _k("mixing_factor", "float", 0.3),
    _k("split_exponent", "float", 3.0),
    _k("kinematic_viscosity_m2s", "float", 3.2e-6),
    _k("density_kgm3", "float", 1060.0),
    _k("n_cycles", "int", 2),
    # octree
    _k("max_depth", "int", 10),
    # model
    _k("latent_dim", "int", 32),
    _k("unet_channels", "ints", (32, 64, 128, 256)),
    _k("encoder_blocks", "ints", (2, 3, 4, 6)),
    _k("decoder_blocks", "int", 2),
    _k("bottleneck_divisor", "int", 4),
    _k("head_hidden", "int", 128),
    _k("trunk_width", "int", 64),
    _k("lrelu_slope", "float", 0.01),
    _k("waveform_length", "int", 256),
    _k("waveform_scale_mls", "float", 5.0),
    _k("model_seed", "int", 0),
    # training
    _k("lr", "float", 1e-3),
    _k("batch_time_points", "int", 10),
    _k("batch_spatial_points", "int", 4096),
    _k("max_epochs", "int", 40),
    _k("velocity_scale_ms", "float", 1.0, "velocity normalisation, m/s"),
    _k("augment_rotation", "bool", True),
    _k("augment_translation_mm", "float", 5.0),
    _k("time_budget_s", "float", 0.0, "stop training after this wall time; 0 disables"),
    # benchmark
    _k("bench_runs", "int", 10),
    _k("bench_warmup", "int", 5),
)

BC_SCHEMA: tuple[Key, ...] = (
    _k("mean_flow_mls", "float", 4.4),
    _k("cycle_ms", "float", 885.0),
    _k("age", "str", "young"),
    _k("t_s_ms", "float", 885.0),
    _k("t_l_ms", "float", 250.0),
    _k("q_ca_max_mls", "float", 2.5),
    _k("mixing_factor", "float", 0.3),
    _k("split_exponent", "float", 3.0),
    _k("n_cycles", "int", 2),
    _k("waveform_samples", "int", 256),
)

MODEL_SIDECAR_KEYS = (
    "latent_dim", "unet_channels", "encoder_blocks", "decoder_blocks", "bottleneck_divisor",
    "head_hidden", "trunk_width", "lrelu_slope", "waveform_length", "waveform_scale_mls",
    "max_depth", "velocity_scale_ms",
)
MODEL_SCHEMA = tuple(k for k in RUN_SCHEMA if k.name in MODEL_SIDECAR_KEYS)


def _parse_value(key: Key, raw: str):
    try:
        if key.kind == "int":
            return int(raw)
        if key.kind == "float":
            return float(raw)
        if key.kind == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if key.kind == "ints":
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if key.kind == "floats":
            return tuple(float(v) for v in raw.split(",") if v.strip())
        return raw
    except ValueError:
        raise ConfigError(f"invalid value for {key.name} ({key.kind}): {raw!r}") from None


def _format_value(key: Key, v) -> str:
    if key.kind == "int":
        return str(int(v))
    if key.kind == "float":
        return repr(float(v))
    if key.kind == "bool":
        return "true" if v else "false"
    if key.kind == "ints":
        return ",".join(str(int(x)) for x in v)
    if key.kind == "floats":
        return ",".join(repr(float(x)) for x in v)
    return str(v)


def defaults(schema=RUN_SCHEMA) -> dict[str, Any]:
    return {k.name: k.default for k in schema}


def parse_config(text: str, schema=RUN_SCHEMA) -> dict[str, Any]:
    """Parse config text over the schema defaults."""
    keys = {k.name: k for k in schema}
    values = defaults(schema)
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        name, raw = (s.strip() for s in line.split("=", 1))
        if name not in keys:
            raise ConfigError(f"line {lineno}: unknown key {name!r}")
        values[name] = _parse_value(keys[name], raw)
    return values


def format_config(values: dict[str, Any], schema=RUN_SCHEMA) -> str:
    names = {k.name for k in schema}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown keys: {sorted(unknown)}")
    merged = {**defaults(schema), **values}
    return "".join(f"{k.name} = {_format_value(k, merged[k.name])}\n" for k in schema)


def read_config(path: str | Path | None, schema=RUN_SCHEMA) -> dict[str, Any]:
    if path is None:
        return defaults(schema)
    return parse_config(Path(path).read_text(encoding="utf-8"), schema)


def write_config(values: dict[str, Any], path: str | Path, schema=RUN_SCHEMA) -> None:
    Path(path).write_text(format_config(values, schema), encoding="utf-8")


# -- typed views -----------------------------------------------------------

def tree_config(cfg: dict, n_generations: int = 3) -> TreeGenConfig:
    return TreeGenConfig(
        root_radius_range=(cfg["root_radius_min_mm"], cfg["root_radius_max_mm"]),
        bifurcation_angle_range=(cfg["bifurcation_angle_min_deg"], cfg["bifurcation_angle_max_deg"]),
        n_generations=n_generations,
        radius_decay_exponent=cfg["radius_decay_exponent"],
        extension_factor=cfg["extension_factor"],
        segment_length_over_radius=cfg["segment_length_over_radius"],
        vertical_attraction=cfg["vertical_attraction"],
    )


def model_config(cfg: dict) -> ModelConfig:
    return ModelConfig(
        latent_dim=cfg["latent_dim"],
        unet_channels=tuple(cfg["unet_channels"]),
        encoder_blocks=tuple(cfg["encoder_blocks"]),
        decoder_blocks=cfg["decoder_blocks"],
        bottleneck_divisor=cfg["bottleneck_divisor"],
        head_hidden=cfg["head_hidden"],
        trunk_width=cfg["trunk_width"],
        lrelu_slope=cfg["lrelu_slope"],
        waveform_length=cfg["waveform_length"],
        waveform_scale_mls=cfg["waveform_scale_mls"],
        octree_depth=cfg["max_depth"],
    )


def physics_constants(cfg: dict) -> PhysicsConstants:
    return PhysicsConstants(cfg["kinematic_viscosity_m2s"], cfg["density_kgm3"], cfg["mixing_factor"])


def bc_values(waveform: InflowWaveform, injection: InjectionParams, cfg: dict) -> dict[str, Any]:
    return {
        "mean_flow_mls": waveform.mean_flow,
        "cycle_ms": waveform.cycle_length,
        "age": waveform.age_group,
        "t_s_ms": injection.T_S,
        "t_l_ms": injection.T_L,
        "q_ca_max_mls": injection.Q_CA_max,
        "mixing_factor": cfg["mixing_factor"],
        "split_exponent": cfg["split_exponent"],
        "n_cycles": cfg["n_cycles"],
        "waveform_samples": len(waveform.samples),
    }


def bc_objects(bc: dict) -> tuple[InflowWaveform, InjectionParams]:
    wf = synth_inflow_waveform(bc["mean_flow_mls"], bc["cycle_ms"], bc["age"], bc["waveform_samples"])
    inj = InjectionParams(bc["t_s_ms"], bc["t_l_ms"], bc["q_ca_max_mls"])
    return wf, inj
