"""INI config files for the CLI: sections of key = value pairs.

One format serves every subcommand; each reads only the sections it needs.
``default_config_text`` emits a fully commented template, and presets adjust
the training block (the "paper-wiping" preset restores the published
hyperparameters: hidden 256, batch 256, 1000 epochs).
"""

from __future__ import annotations

import configparser
from pathlib import Path


class ConfigError(ValueError):
    pass


def load_ini(path: str | Path) -> configparser.ConfigParser:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    parser.read(path)
    return parser


def _floats(raw: str) -> list[float]:
    return [float(tok) for tok in raw.replace(",", " ").split()]


def _ints(raw: str) -> list[int]:
    return [int(tok) for tok in raw.replace(",", " ").split()]


def _names(raw: str) -> list[str]:
    return [tok.strip() for tok in raw.split(",") if tok.strip()]


def section(parser: configparser.ConfigParser, name: str) -> dict[str, str]:
    return dict(parser[name]) if parser.has_section(name) else {}


def synth_request_dict(parser: configparser.ConfigParser, seed: int | None, out_path: str) -> dict:
    sc = section(parser, "scenario")
    grid = section(parser, "grid")
    dset = section(parser, "dataset")
    levels = {k: _floats(v) for k, v in grid.items() if k != "seeds"}
    if not levels:
        levels = {"temporal": [0.0, 0.5, 1.0], "physical": [0.0, 0.5, 1.0]}
    seeds = _ints(grid.get("seeds", "0 1"))
    req = {
        "scenario": {
            "task": sc.get("task", "wiping"),
            "joints": int(sc.get("joints", 3)),
            "dt": float(sc.get("dt", 0.002)),
            "duration_ticks": int(sc.get("duration_ticks", 0)),
            "noise_scale": float(sc.get("noise_scale", 0.01)),
        },
        "levels": levels,
        "seeds": seeds,
        "dataset": {
            "window": int(dset.get("window", 50)),
            "hop": int(dset.get("hop", 12)),
            "stride": int(dset.get("stride", 20)),
            "train_fraction": float(dset.get("train_fraction", 0.8)),
        },
        "out_path": out_path,
    }
    if seed is not None:
        req["seed"] = seed
    return req


def train_request_dict(
    parser: configparser.ConfigParser,
    dataset_path: str,
    out_path: str,
    seed: int | None = None,
    baseline: bool = False,
    preset: str | None = None,
    history_path: str | None = None,
) -> dict:
    mo = section(parser, "model")
    trn = section(parser, "train")
    model = {
        "hidden_dim": int(mo.get("hidden_dim", 64)),
        "encoder_layers": int(mo.get("encoder_layers", 3)),
        "decoder_layers": int(mo.get("decoder_layers", 3)),
        "window": int(mo.get("window", 50)),
        "constrained": _names(mo.get("constrained", "physical, temporal")),
        "unconstrained": int(mo.get("unconstrained", 1)),
        "predictor_input": mo.get("predictor_input", "mu"),
    }
    train = {
        "epochs": int(trn.get("epochs", 150)),
        "batch_size": int(trn.get("batch_size", 32)),
        "learning_rate": float(trn.get("learning_rate", 1e-3)),
        "clip_norm": float(trn.get("clip_norm", 1.0)),
        "alpha": float(trn.get("alpha", 1.0)),
        "beta": float(trn.get("beta", 0.3)),
        "gamma": float(trn.get("gamma", 2.5)),
        "eval_every": int(trn.get("eval_every", 10)),
        "seed": int(trn.get("seed", 0)),
        "strict_sequence_mse": trn.get("strict_sequence_mse", "false").lower() == "true",
    }
    if preset:
        apply_preset(model, train, preset)
    if baseline:
        train["gamma"] = 0.0
    if seed is not None:
        train["seed"] = seed
    return {
        "dataset_path": dataset_path,
        "model": model,
        "train": train,
        "out_path": out_path,
        "history_path": history_path,
    }


def apply_preset(model: dict, train: dict, preset: str) -> None:
    if preset == "paper-wiping":
        model["hidden_dim"] = 256
        train.update({"epochs": 1000, "batch_size": 256, "alpha": 1.0, "beta": 0.3, "gamma": 2.5})
    elif preset == "paper-wiping-baseline":
        model["hidden_dim"] = 256
        train.update({"epochs": 1000, "batch_size": 256, "alpha": 1.0, "beta": 4.0, "gamma": 0.0})
    elif preset == "smoke-wiping":
        pass  # the defaults
    else:
        raise ConfigError(f"unknown preset {preset!r}")


def eval_request_dict(parser: configparser.ConfigParser, checkpoint_path: str, seed: int | None, out_dir: str | None) -> dict:
    pr = section(parser, "protocol")
    sc = section(parser, "scenario")
    req = {
        "checkpoint_path": checkpoint_path,
        "task": sc.get("task", pr.get("task", "wiping")),
        "directives": _names(pr["directives"]) if "directives" in pr else None,
        "command_values": _floats(pr.get("command_values", "-2 -1 0 1 2")),
        "reference": pr.get("reference", "synthesized"),
        "trials_per_level": int(pr.get("trials_per_level", 4)),
        "ticks": int(pr.get("ticks", 500)),
        "all_dims": pr.get("all_dims", "false").lower() == "true",
        "out_dir": out_dir,
    }
    if seed is not None:
        req["seed"] = seed
    lines = section(parser, "reference_lines")
    if lines:
        req["reference_lines"] = {key: _floats(val) for key, val in lines.items()}
    return req


def ablate_request_dict(parser: configparser.ConfigParser, checkpoint_path: str, seed: int | None, out_path: str | None) -> dict:
    ab = section(parser, "ablation")
    sc = section(parser, "scenario")
    return {
        "checkpoint_path": checkpoint_path,
        "task": sc.get("task", "wiping"),
        "schemes": _names(ab.get("schemes", "none, inverse, exponential, inverse_log")),
        "exponential_m": float(ab.get("exponential_m", 0.05)),
        "seeds": _ints(ab.get("seeds", "0 1 2 3 4")),
        "switch_directive": ab.get("switch_directive", "temporal"),
        "switch_value": float(ab.get("switch_value", 2.0)),
        "switch_tick": int(ab.get("switch_tick", 150)),
        "ticks": int(ab.get("ticks", 500)),
        "follower_noise": float(ab.get("follower_noise", 0.005)),
        "out_path": out_path,
    }


def engine_dict(parser: configparser.ConfigParser) -> dict:
    en = section(parser, "engine")
    return {
        "command_update_stride": int(en.get("command_update_stride", 20)),
        "ticks": int(en.get("ticks", 1500)),
        "scheme": en.get("scheme", "inverse_log"),
        "exponential_m": float(en.get("exponential_m", 0.05)),
        "speed": float(en.get("speed", 1.0)),
        "follower_noise": float(en.get("follower_noise", 0.0)),
    }


DEFAULT_CONFIG = """\
# modmotion run configuration (INI; every subcommand reads its own sections)

[scenario]
task = wiping            ; wiping | pick_and_place
joints = 3
dt = 0.002
noise_scale = 0.01
; duration_ticks = 0     ; 0 = auto-size for the slowest label

[grid]
temporal = 0.0, 0.5, 1.0
physical = 0.0, 0.5, 1.0
seeds = 0, 1

[dataset]
window = 50
hop = 12
stride = 20
train_fraction = 0.8

[model]
hidden_dim = 64          ; published setting: 256
encoder_layers = 3
decoder_layers = 3
window = 50
constrained = physical, temporal
unconstrained = 1
predictor_input = mu     ; mu | sample

[train]
epochs = 150             ; published setting: 1000
batch_size = 32          ; published setting: 256
learning_rate = 1e-3
clip_norm = 1.0
alpha = 1.0
beta = 0.3
gamma = 2.5              ; 0 disables weak-label supervision (baseline)
eval_every = 10
seed = 0

[protocol]
directives = temporal, physical
command_values = -2, -1, 0, 1, 2
reference = synthesized  ; synthesized | paper
trials_per_level = 4
ticks = 500

[reference_lines]
; published constants, loadable with reference = paper
wiping.temporal = -6.379, 12.414
wiping.physical = -1.115, -1.017
pick_and_place.temporal = -7.097, 16.525
pick_and_place.spatial = -0.725, 3.526

[ablation]
schemes = none, inverse, exponential, inverse_log
exponential_m = 0.05
seeds = 0, 1, 2, 3, 4
switch_directive = temporal
switch_value = 2.0
switch_tick = 150
ticks = 500
follower_noise = 0.005

[engine]
command_update_stride = 20
ticks = 1500
scheme = inverse_log
speed = 1.0              ; wall-clock pacing factor; 0 = as fast as possible
"""


def write_default_config(path: str | Path) -> None:
    Path(path).write_text(DEFAULT_CONFIG)
