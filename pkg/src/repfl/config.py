"""Experiment configuration files.

An experiment is described by an INI file with the sections below.  Every
key is optional; unknown sections or keys are rejected before any compute.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError
from .federation import FederationConfig
from .supcon import AugmentationPolicy


def _bool(text: str) -> bool:
    value = text.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple:
    text = text.strip()
    return tuple(int(v) for v in text.split(",") if v.strip()) if text else ()


def _str(text: str) -> str:
    return text.strip()


# section -> key -> (parser, default, help)
KEYS = {
    "data": {
        "source": (_str, "synth", "synth | csv | binary"),
        "path": (_str, "", "dataset file for csv/binary sources"),
        "test_path": (_str, "", "optional separate test file; otherwise a stratified split is made"),
        "test_fraction": (float, 0.2, "held-out fraction per class when no test file is given"),
        "test_mode": (_str, "matched", "client test sets: matched | present | full"),
        "synth_classes": (int, 10, "synthetic mixture: number of classes"),
        "synth_per_class": (int, 500, "synthetic mixture: samples per class"),
        "synth_dim": (int, 32, "synthetic mixture: input dimension d"),
        "synth_spread": (float, 1.0, "synthetic mixture: per-feature std sigma"),
        "synth_separation": (float, 4.0, "synthetic mixture: distance between class means"),
        "synth_seed": (int, -1, "seed for the synthetic data; -1 follows the run seed"),
    },
    "federation": {
        "method": (_str, "repper", "repper | fedavg | fedavg-ft | fedprox | fedprox-ft"),
        "num_clients": (int, 20, "K, number of clients"),
        "participation": (float, 0.2, "C, fraction of clients sampled per round, in (0, 1]"),
        "rounds": (int, 100, "T, communication rounds"),
        "local_epochs": (int, 10, "local epochs per round (representation / baseline training)"),
        "pcl_epochs": (int, 10, "epochs of personalized head training"),
        "batch_size": (int, 256, "B, source samples per mini-batch"),
        "lr_rep": (float, 1e-3, "learning rate for representation and baseline training"),
        "lr_cls": (float, 1e-3, "learning rate for head training and fine-tuning"),
        "temperature": (float, 0.1, "SC loss temperature"),
        "alpha": (float, 0.5, "Dirichlet concentration of the client split"),
        "optimizer": (_str, "adam", "adam | sgd"),
        "weight_decay": (float, 1e-4, "weight decay"),
        "prox_mu": (float, 0.01, "FedProx proximal coefficient"),
        "ft_epochs": (int, 10, "head fine-tuning epochs for the -ft baselines"),
        "adapt_iterations": (int, 100, "head training passes for new clients"),
        "lr_decay": (float, 0.1, "learning-rate multiplier applied at lr_decay_round"),
        "lr_decay_round": (int, -1, "round at which the decay applies; -1 means ceil(2T/3)"),
        "min_size": (int, 10, "minimum training samples per client in the split"),
    },
    "model": {
        "encoder_hidden": (_ints, (256, 128), "comma-separated hidden widths of the encoder"),
        "feature_dim": (int, 64, "g, encoder output width (must be below d)"),
        "projection_dim": (int, 0, "width of a training-only projection stack; 0 disables it"),
        "head_kind": (_str, "logistic", "logistic | linear-svm | mlp"),
        "head_hidden": (int, 64, "hidden width of the mlp head"),
    },
    "augmentation": {
        "noise_std": (float, 0.05, "gaussian feature noise std"),
        "mask_prob": (float, 0.1, "probability of zeroing each feature"),
        "flip": (_bool, False, "random horizontal flips (needs image_shape)"),
        "shift": (int, 0, "random shifts up to this many pixels (needs image_shape)"),
        "image_shape": (_ints, (), "h,w,c layout of image rows, if any"),
        "baseline_augment": (_bool, True, "baselines also train on one augmented view"),
    },
    "output": {
        "dir": (_str, "out", "output directory"),
        "seeds": (_ints, (0,), "comma-separated seeds"),
        "save_checkpoints": (_bool, True, "write parameter checkpoints"),
    },
}


def help_text() -> str:
    lines = ["configuration keys (INI sections, all optional):"]
    for section, keys in KEYS.items():
        lines.append(f"  [{section}]")
        for key, (_, default, doc) in keys.items():
            if isinstance(default, tuple):
                default = ",".join(str(v) for v in default)
            lines.append(f"    {key} = {default!s:<10} {doc}")
    return "\n".join(lines)


@dataclass(frozen=True)
class DataSource:
    source: str = "synth"
    path: str = ""
    test_path: str = ""
    test_fraction: float = 0.2
    test_mode: str = "matched"
    synth_classes: int = 10
    synth_per_class: int = 500
    synth_dim: int = 32
    synth_spread: float = 1.0
    synth_separation: float = 4.0
    synth_seed: int = -1


@dataclass(frozen=True)
class ExperimentConfig:
    federation: FederationConfig
    data: DataSource = field(default_factory=DataSource)
    output_dir: str = "out"
    seeds: tuple = (0,)
    save_checkpoints: bool = True

    def for_seed(self, seed: int, method: str = None) -> FederationConfig:
        cfg = replace(self.federation, seed=int(seed))
        return replace(cfg, method=method) if method else cfg

    def snapshot(self, seed: int = None, method: str = None) -> dict:
        """Everything that determines results; output paths are excluded."""
        fed = self.federation if seed is None else self.for_seed(seed, method)
        return {"federation": federation_to_dict(fed),
                "data": {f.name: getattr(self.data, f.name) for f in fields(self.data)}}


def federation_to_dict(cfg: FederationConfig) -> dict:
    d = cfg.as_dict()
    aug = d["augmentation"]
    aug["image_shape"] = list(aug["image_shape"]) if aug["image_shape"] else None
    return d


def federation_from_dict(d: dict) -> FederationConfig:
    d = dict(d)
    aug = dict(d.pop("augmentation", {}))
    if aug.get("image_shape"):
        aug["image_shape"] = tuple(aug["image_shape"])
    d["encoder_hidden"] = tuple(d.get("encoder_hidden", (256, 128)))
    try:
        return FederationConfig(augmentation=AugmentationPolicy(**aug), **d)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def parse_config(text: str, overrides: dict = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None
    values = {s: {k: entry[1] for k, entry in keys.items()} for s, keys in KEYS.items()}
    for section in parser.sections():
        if section not in KEYS:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in KEYS[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            try:
                values[section][key] = KEYS[section][key][0](raw)
            except ValueError as exc:
                raise ConfigError(f"[{section}] {key}: {exc}") from None
    for (section, key), value in (overrides or {}).items():
        values[section][key] = value
    return build_config(values)


def build_config(values: dict) -> ExperimentConfig:
    aug = dict(values["augmentation"])
    baseline_augment = aug.pop("baseline_augment")
    aug["image_shape"] = tuple(aug["image_shape"]) or None
    data = DataSource(**values["data"])
    if data.source not in ("synth", "csv", "binary"):
        raise ConfigError(f"unknown data source {data.source!r}")
    if data.source != "synth" and not data.path:
        raise ConfigError(f"data source {data.source!r} needs a path")
    if data.test_mode not in ("matched", "present", "full"):
        raise ConfigError(f"unknown test_mode {data.test_mode!r}")
    if not 0.0 < data.test_fraction < 1.0:
        raise ConfigError("test_fraction must lie in (0, 1)")
    try:
        fed = FederationConfig(**values["federation"], **values["model"],
                               augmentation=AugmentationPolicy(**aug),
                               baseline_augment=baseline_augment)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    out = values["output"]
    if not out["seeds"]:
        raise ConfigError("at least one seed is required")
    return ExperimentConfig(fed, data, out["dir"], tuple(out["seeds"]), out["save_checkpoints"])


def load_config(path, overrides: dict = None) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, overrides)
