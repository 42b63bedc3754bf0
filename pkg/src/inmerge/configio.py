"""Config <-> plain-dict conversion with strict key checking.

Used by the checkpoint trailer (config echo) and the CLI's run-config
files. Unknown keys are rejected everywhere so a typo like "aplha" fails
loudly instead of silently training with a default.
"""

from __future__ import annotations

from dataclasses import asdict

from .errors import ConfigError
from .layers import LayerSpec
from .merging import MergeConfig
from .model import ArchConfig
from .training import TrainConfig


def _check_keys(section: str, given: dict, allowed: set[str]) -> None:
    unknown = set(given) - allowed
    if unknown:
        raise ConfigError(f"{section}: unknown key(s) {sorted(unknown)}; allowed: {sorted(allowed)}")


def _require(section: str, given: dict, key: str):
    if key not in given:
        raise ConfigError(f"{section}: missing required key {key!r}")
    return given[key]


MERGE_KEYS = {"alpha", "merge_prob", "sim_threshold", "skip_layers", "seed", "invert_gate"}


def merge_to_dict(cfg: MergeConfig) -> dict:
    return asdict(cfg)


def merge_from_dict(d: dict, default_seed: int = 0) -> MergeConfig:
    _check_keys("merge", d, MERGE_KEYS)
    try:
        cfg = MergeConfig(
            alpha=float(d.get("alpha", 0.8)),
            merge_prob=float(d.get("merge_prob", 0.3)),
            sim_threshold=float(d.get("sim_threshold", 0.3)),
            skip_layers=int(d.get("skip_layers", 0)),
            seed=int(d.get("seed", default_seed)),
            invert_gate=bool(d.get("invert_gate", False)),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"merge: {exc}") from None
    cfg.validate()
    return cfg


TRAIN_KEYS = {
    "lr0", "momentum", "weight_decay", "milestones", "gamma", "batch_size",
    "epochs_pretrain", "epochs_inmerge", "seed", "augment",
}


def train_to_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["milestones"] = list(cfg.milestones) if cfg.milestones is not None else None
    d["merge"] = merge_to_dict(cfg.merge) if cfg.merge is not None else None
    return d


def train_from_dict(d: dict, merge: MergeConfig | None = None) -> TrainConfig:
    d = dict(d)
    embedded = d.pop("merge", None)
    _check_keys("train", d, TRAIN_KEYS)
    if embedded is not None and merge is None:
        merge = merge_from_dict(embedded, default_seed=int(d.get("seed", 0)))
    milestones = d.get("milestones")
    try:
        cfg = TrainConfig(
            lr0=float(d.get("lr0", 0.01)),
            momentum=float(d.get("momentum", 0.9)),
            weight_decay=float(d.get("weight_decay", 1e-4)),
            milestones=tuple(int(m) for m in milestones) if milestones is not None else None,
            gamma=float(d.get("gamma", 0.1)),
            batch_size=int(d.get("batch_size", 128)),
            epochs_pretrain=int(d.get("epochs_pretrain", 20)),
            epochs_inmerge=int(d.get("epochs_inmerge", 5)),
            seed=int(d.get("seed", 0)),
            augment=bool(d.get("augment", False)),
            merge=merge,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train: {exc}") from None
    cfg.validate()
    return cfg


ARCH_KEYS = {"input_shape", "num_classes", "head", "preset", "layers"}
LAYER_KEYS = {
    "kind", "out_channels", "in_channels", "kernel_h", "kernel_w",
    "stride", "padding", "window", "in_features", "out_features",
}


def arch_to_dict(cfg: ArchConfig) -> dict:
    d = {
        "input_shape": list(cfg.input_shape),
        "num_classes": cfg.num_classes,
        "head": cfg.head,
        "preset": cfg.preset,
        "layers": [asdict(s) for s in cfg.layers] if cfg.layers is not None else None,
    }
    return d


def arch_from_dict(d: dict) -> ArchConfig:
    _check_keys("arch", d, ARCH_KEYS)
    shape = _require("arch", d, "input_shape")
    try:
        layers = d.get("layers")
        if layers is not None:
            specs = []
            for i, ld in enumerate(layers):
                _check_keys(f"arch.layers[{i}]", ld, LAYER_KEYS)
                specs.append(LayerSpec(**ld))
            layers = tuple(specs)
        cfg = ArchConfig(
            input_shape=tuple(int(v) for v in shape),
            num_classes=int(_require("arch", d, "num_classes")),
            head=str(d.get("head", "multiclass")),
            preset=d.get("preset"),
            layers=layers,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"arch: {exc}") from None
    cfg.validate()
    return cfg
