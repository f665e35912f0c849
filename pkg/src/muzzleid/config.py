"""Declarative run configuration.

One TOML file carries every knob: dataset layout, network width, optimizer,
mining, augmentation, preprocessing, detector training, evaluation, and
serving. Unknown sections or keys are rejected outright so a typo cannot
silently fall back to a default, and every run writes its fully resolved
config next to its artifacts. Command-line flags override file values.
"""

import copy
import json
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

from .augment import AugmentConfig
from .embedder import TripletLossParams
from .errors import FormatError, SpecError
from .imgproc import PreprocessParams
from .miner import MiningConfig
from .neuralcore import OptimizerState

DEFAULTS = {
    "run": {
        "seed": 7,
        "threads": 1,
        "data": "data",
        "out": "runs",
    },
    "data": {
        "train_ids": 32,
        "val_ids": 8,
        "test_ids": 8,
        "images_per_id": 12,
    },
    "embedder": {
        "dim": 128,
        "margin": 0.5,
        "reduction": "sum",
        "epochs": 30,
        "far_target": 0.01,
        "eval_pos_pairs": 400,
        "eval_neg_pairs": 400,
    },
    "optimizer": {
        "learning_rate": 0.003,
        "beta1": 0.9,
        "beta2": 0.999,
        "epsilon": 1e-8,
        "decay_factor": 0.8,
        "decay_interval_epochs": 8,
    },
    "mining": {
        "min_triplet_threshold": 512,
        "negatives_per_pair": 16,
        "batch_size": 32,
        "max_anchor_pairs": 20000,
    },
    "augment": {
        "rotation_range": 15.0,
        "zoom_range": 0.10,
        "crop_fraction": 0.10,
        "shear_range": 10.0,
        "translation_range": 0.10,
        "h_flip_prob": 0.5,
        "v_flip_prob": 0.1,
        "blackout_prob": 0.3,
        "blackout_min_frac": 0.05,
        "blackout_max_frac": 0.20,
        "salt_pepper_prob": 0.3,
        "salt_density": 0.01,
        "pepper_density": 0.01,
    },
    "preprocess": {
        "sharpen_k": 1.0,
        "clahe_grid_x": 8,
        "clahe_grid_y": 8,
        "clahe_clip": 2.0,
    },
    "detector": {
        "scenes": 200,
        "epochs": 50,
        "split_ratio": 0.8,
        "batch_size": 16,
    },
    "evaluate": {
        "pairs": 995,
        "far_target": 0.01,
        "resamples": 10,
    },
    "serve": {
        "host": "127.0.0.1",
        "port": 8000,
        "gallery": "gallery.jsonl",
        "checkpoint": "model.ckpt",
        "detector_checkpoint": "detector.ckpt",
        "threshold_override": 0.0,  # 0 means use the checkpoint threshold
    },
}


def _check_value(section, key, value, default):
    if isinstance(default, bool) or isinstance(value, bool):
        if type(value) is not type(default):
            raise SpecError(f"[{section}] {key} must be a bool")
        return value
    if isinstance(default, int) and isinstance(value, int):
        return value
    if isinstance(default, float) and isinstance(value, (int, float)):
        return float(value)
    if isinstance(default, str) and isinstance(value, str):
        return value
    raise SpecError(f"[{section}] {key} expects "
                    f"{type(default).__name__}, got {value!r}")


class RunConfig:
    """Fully resolved settings; construct via defaults(), from_file(), or
    from_dict(), then read sections with [] indexing."""

    def __init__(self, values):
        self.values = values

    def __getitem__(self, section):
        return self.values[section]

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.values == other.values

    @classmethod
    def defaults(cls):
        return cls(copy.deepcopy(DEFAULTS))

    @classmethod
    def from_dict(cls, data):
        values = copy.deepcopy(DEFAULTS)
        for section, keys in data.items():
            if section not in values:
                raise SpecError(f"unknown config section [{section}]")
            if not isinstance(keys, dict):
                raise SpecError(f"[{section}] must be a table")
            for key, value in keys.items():
                if key not in values[section]:
                    raise SpecError(f"unknown key {key!r} in [{section}]")
                values[section][key] = _check_value(
                    section, key, value, DEFAULTS[section][key])
        return cls(values)

    @classmethod
    def from_file(cls, path):
        try:
            with open(path, "rb") as f:
                data = tomllib.load(f)
        except tomllib.TOMLDecodeError as e:
            raise FormatError(f"{path}: {e}") from None
        return cls.from_dict(data)

    def override(self, section, key, value):
        """One flag-level override; value may arrive as a string."""
        if section not in self.values or key not in self.values[section]:
            raise SpecError(f"unknown config key [{section}] {key}")
        default = DEFAULTS[section][key]
        if isinstance(value, str) and not isinstance(default, str):
            try:
                value = type(default)(value)
            except ValueError:
                raise SpecError(f"[{section}] {key}: cannot parse "
                                f"{value!r}") from None
        self.values[section][key] = _check_value(section, key, value, default)
        return self

    def to_toml(self):
        lines = []
        for section in sorted(self.values):
            lines.append(f"[{section}]")
            for key in sorted(self.values[section]):
                value = self.values[section][key]
                if isinstance(value, bool):
                    text = "true" if value else "false"
                elif isinstance(value, str):
                    text = json.dumps(value)
                else:
                    text = repr(value)
                lines.append(f"{key} = {text}")
            lines.append("")
        return "\n".join(lines)

    def save(self, path):
        Path(path).write_text(self.to_toml())
        return Path(path)

    # factories for the module-level config objects

    def mining_config(self):
        return MiningConfig(alpha=self["embedder"]["margin"],
                            **self["mining"])

    def augment_config(self, seed):
        return AugmentConfig(seed=seed, **self["augment"])

    def optimizer_state(self):
        return OptimizerState(**self["optimizer"])

    def loss_params(self):
        return TripletLossParams(alpha=self["embedder"]["margin"],
                                 reduction=self["embedder"]["reduction"])

    def preprocess_params(self):
        return PreprocessParams(**self["preprocess"])
