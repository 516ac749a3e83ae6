"""YAML run configuration: strict parsing, echoes, and preset access.

Config files are complete by design: every tunable appears in the file,
nothing is defaulted in code, and unknown keys are rejected so typos fail
loudly. The five ablation switches live under model.{rrwp,dropkey,
edge_flip,norm,pool} plus rewire.r, so each ablation is a one-line edit.
"""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass
from pathlib import Path

import yaml

from .errors import DataError, ValidationError
from .model import ModelConfig

TOP_KEYS = ("model", "train", "rewire", "encode")
MODEL_KEYS = (
    "task",
    "out_dim",
    "num_layers",
    "width",
    "head_hidden",
    "activation",
    "degree_mode",
    "log_length_scaling",
    "rrwp",
    "dropkey",
    "edge_flip",
    "norm",
    "pool",
)
TRAIN_KEYS = (
    "epochs",
    "batch_size",
    "lr_init",
    "lr_peak",
    "lr_final",
    "warmup_ratio",
    "weight_decay",
    "beta1",
    "beta2",
    "label_smoothing",
    "val_fraction",
)
REWIRE_KEYS = ("r", "retry_until_simple")
ENCODE_KEYS = ("k",)


@dataclass(frozen=True)
class TrainSettings:
    epochs: int
    batch_size: int
    lr_init: float
    lr_peak: float
    lr_final: float
    warmup_ratio: float
    weight_decay: float
    beta1: float
    beta2: float
    label_smoothing: float
    val_fraction: float

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ValidationError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValidationError("label_smoothing must be in [0, 1)")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValidationError("val_fraction must be in [0, 1)")


@dataclass(frozen=True)
class RunConfig:
    task: str
    out_dim: int
    num_layers: int
    width: int
    head_hidden: int | None
    activation: str
    degree_mode: str
    log_length_scaling: bool
    rrwp_enabled: bool
    dropkey_rate: float
    edge_flip_enabled: bool
    norm_kind: str
    pool_kind: str
    train: TrainSettings
    rewire_r: int
    retry_until_simple: bool
    encode_k: int


def _strict_section(mapping: dict, name: str, keys: tuple) -> dict:
    if name not in mapping:
        raise ValidationError(f"config is missing section {name!r}")
    section = mapping[name]
    if not isinstance(section, dict):
        raise ValidationError(f"config section {name!r} must be a mapping")
    missing = [k for k in keys if k not in section]
    unknown = [k for k in section if k not in keys]
    if missing:
        raise ValidationError(f"config section {name!r} missing keys: {missing}")
    if unknown:
        raise ValidationError(f"config section {name!r} has unknown keys: {unknown}")
    return section


def _nested_flag(section: dict, outer: str, inner: str):
    block = section[outer]
    if not isinstance(block, dict) or set(block) != {inner}:
        raise ValidationError(
            f"config key model.{outer} must be a mapping with the single "
            f"key {inner!r}"
        )
    return block[inner]


def parse_config(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ValidationError("config root must be a mapping")
    unknown = [k for k in data if k not in TOP_KEYS]
    if unknown:
        raise ValidationError(f"config has unknown top-level sections: {unknown}")
    model = _strict_section(data, "model", MODEL_KEYS)
    train = _strict_section(data, "train", TRAIN_KEYS)
    rewire = _strict_section(data, "rewire", REWIRE_KEYS)
    encode = _strict_section(data, "encode", ENCODE_KEYS)

    head_hidden = model["head_hidden"]
    if head_hidden is not None:
        head_hidden = int(head_hidden)
    return RunConfig(
        task=str(model["task"]),
        out_dim=int(model["out_dim"]),
        num_layers=int(model["num_layers"]),
        width=int(model["width"]),
        head_hidden=head_hidden,
        activation=str(model["activation"]),
        degree_mode=str(model["degree_mode"]),
        log_length_scaling=bool(model["log_length_scaling"]),
        rrwp_enabled=bool(_nested_flag(model, "rrwp", "enabled")),
        dropkey_rate=float(_nested_flag(model, "dropkey", "rate")),
        edge_flip_enabled=bool(_nested_flag(model, "edge_flip", "enabled")),
        norm_kind=str(_nested_flag(model, "norm", "kind")),
        pool_kind=str(_nested_flag(model, "pool", "kind")),
        train=TrainSettings(
            epochs=int(train["epochs"]),
            batch_size=int(train["batch_size"]),
            lr_init=float(train["lr_init"]),
            lr_peak=float(train["lr_peak"]),
            lr_final=float(train["lr_final"]),
            warmup_ratio=float(train["warmup_ratio"]),
            weight_decay=float(train["weight_decay"]),
            beta1=float(train["beta1"]),
            beta2=float(train["beta2"]),
            label_smoothing=float(train["label_smoothing"]),
            val_fraction=float(train["val_fraction"]),
        ),
        rewire_r=int(rewire["r"]),
        retry_until_simple=bool(rewire["retry_until_simple"]),
        encode_k=int(encode["k"]),
    )


def config_echo(rc: RunConfig) -> dict:
    """Nested dict in the on-disk layout, for manifests and checkpoints."""
    return {
        "model": {
            "task": rc.task,
            "out_dim": rc.out_dim,
            "num_layers": rc.num_layers,
            "width": rc.width,
            "head_hidden": rc.head_hidden,
            "activation": rc.activation,
            "degree_mode": rc.degree_mode,
            "log_length_scaling": rc.log_length_scaling,
            "rrwp": {"enabled": rc.rrwp_enabled},
            "dropkey": {"rate": rc.dropkey_rate},
            "edge_flip": {"enabled": rc.edge_flip_enabled},
            "norm": {"kind": rc.norm_kind},
            "pool": {"kind": rc.pool_kind},
        },
        "train": {
            "epochs": rc.train.epochs,
            "batch_size": rc.train.batch_size,
            "lr_init": rc.train.lr_init,
            "lr_peak": rc.train.lr_peak,
            "lr_final": rc.train.lr_final,
            "warmup_ratio": rc.train.warmup_ratio,
            "weight_decay": rc.train.weight_decay,
            "beta1": rc.train.beta1,
            "beta2": rc.train.beta2,
            "label_smoothing": rc.train.label_smoothing,
            "val_fraction": rc.train.val_fraction,
        },
        "rewire": {"r": rc.rewire_r, "retry_until_simple": rc.retry_until_simple},
        "encode": {"k": rc.encode_k},
    }


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise DataError(f"{path}: invalid YAML: {exc}") from exc
    return parse_config(data)


def save_config(rc: RunConfig, path) -> None:
    Path(path).write_text(
        yaml.safe_dump(config_echo(rc), sort_keys=False), encoding="utf-8"
    )


def preset_path(name: str) -> Path:
    """Locate a shipped preset like 'zinc' or 'desk_overfit'."""
    resource = importlib.resources.files("grass").joinpath(
        "presets", f"{name}.yaml"
    )
    if not resource.is_file():
        available = sorted(
            p.name.removesuffix(".yaml")
            for p in importlib.resources.files("grass").joinpath("presets").iterdir()
        )
        raise ValidationError(f"unknown preset {name!r}; available: {available}")
    return Path(str(resource))


def load_preset(name: str) -> RunConfig:
    return load_config(preset_path(name))


def build_model_config(
    rc: RunConfig,
    node_in_dim: int,
    edge_in_dim: int,
    max_out: int,
    max_in: int,
) -> ModelConfig:
    """Join architecture settings with dataset-derived dimensions."""
    return ModelConfig(
        num_layers=rc.num_layers,
        width=rc.width,
        k=rc.encode_k,
        node_in_dim=node_in_dim,
        edge_in_dim=edge_in_dim,
        max_out=max_out,
        max_in=max_in,
        out_dim=rc.out_dim,
        task=rc.task,
        head_hidden=rc.head_hidden,
        dropkey_rate=rc.dropkey_rate,
        activation=rc.activation,
        degree_mode=rc.degree_mode,
        rrwp_enabled=rc.rrwp_enabled,
        edge_flip_enabled=rc.edge_flip_enabled,
        norm_kind=rc.norm_kind,
        pool_kind=rc.pool_kind,
        log_length_scaling=rc.log_length_scaling,
    )
