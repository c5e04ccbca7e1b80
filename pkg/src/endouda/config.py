"""Run configuration: one YAML file describing data, models, training,
adaptation, and evaluation; flags override file values, defaults fill gaps.
"""

import os
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path

import yaml

from .adapt import AdaptConfig
from .data import PhotometricParams, SyntheticShiftConfig
from .losses import JointLossParams, SsimParams
from .models import EncoderConfig
from .training import TrainConfig

OUT_ROOT_ENV = "ENDOUDA_OUT_ROOT"


class ConfigError(Exception):
    pass


@dataclass
class DataConfig:
    kind: str = "synthetic"  # or "directory"
    directory: str = None  # root with source/ and target/ subtrees
    synthetic: SyntheticShiftConfig = field(default_factory=SyntheticShiftConfig)
    source_val_fraction: float = 0.1
    target_test_fraction: float = 0.2

    def __post_init__(self):
        if self.kind not in ("synthetic", "directory"):
            raise ValueError(f"data.kind must be 'synthetic' or 'directory', got {self.kind!r}")
        if self.kind == "directory" and not self.directory:
            raise ValueError("data.directory is required when data.kind == 'directory'")
        for name in ("source_val_fraction", "target_test_fraction"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"data.{name} must be in (0, 1), got {v}")


@dataclass
class EvalConfig:
    threshold: float = 0.5
    panel_count: int = 8

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"eval.threshold must be in (0, 1), got {self.threshold}")
        if self.panel_count < 0:
            raise ValueError("eval.panel_count must be >= 0")


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train_vae: TrainConfig = field(default_factory=lambda: TrainConfig(stage="vae"))
    train_seg: TrainConfig = field(default_factory=lambda: TrainConfig(stage="seg"))
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    sweep_fractions: tuple = (0.0, 0.10, 0.25, 0.50)

    def __post_init__(self):
        self.sweep_fractions = tuple(self.sweep_fractions)
        for f in self.sweep_fractions:
            if not 0.0 <= f <= 1.0:
                raise ValueError(f"sweep.fractions entries must be in [0, 1], got {f}")
        if self.data.kind == "synthetic":
            if self.data.synthetic.image_size != self.encoder.input_size:
                raise ValueError(
                    f"data.image_size {self.data.synthetic.image_size} != "
                    f"encoder.input_size {self.encoder.input_size}"
                )

    def resolved_output_dir(self):
        root = os.environ.get(OUT_ROOT_ENV)
        out = Path(self.output_dir)
        if root and not out.is_absolute():
            return Path(root) / out
        return out

    def to_yaml(self, path):
        payload = _listify(asdict(self))
        with open(path, "w") as f:
            yaml.safe_dump(payload, f, sort_keys=False)
        return path


def _listify(obj):
    if isinstance(obj, dict):
        return {k: _listify(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_listify(v) for v in obj]
    return obj


def _build(cls, mapping, path, **overrides):
    """Construct a dataclass from a config mapping, naming bad fields."""
    mapping = dict(mapping or {})
    mapping.update(overrides)
    known = {f.name for f in cls.__dataclass_fields__.values()}  # type: ignore[attr-defined]
    unknown = set(mapping) - known
    if unknown:
        raise ConfigError(f"unknown field(s) {sorted(unknown)} in section '{path}'")
    try:
        return cls(**mapping)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid value in section '{path}': {exc}") from exc


def _tupled(mapping, *keys):
    for k in keys:
        if k in mapping and mapping[k] is not None:
            mapping[k] = tuple(mapping[k])
    return mapping


def _photometric(section, path):
    return _build(PhotometricParams, _tupled(dict(section or {}), "channel_gains", "channel_permutation"), path)


def load_run_config(path=None, seed=None, output_dir=None, raw=None):
    """Build a RunConfig from a YAML file (or a pre-parsed dict).

    Precedence: explicit arguments > file values > dataclass defaults.
    """
    if raw is None:
        raw = {}
        if path is not None:
            with open(path) as f:
                raw = yaml.safe_load(f) or {}
    if not isinstance(raw, dict):
        raise ConfigError("top-level config must be a mapping")
    raw = dict(raw)
    known = {"seed", "output_dir", "data", "encoder", "train_vae", "train_seg", "adapt", "eval", "sweep"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown top-level field(s): {sorted(unknown)}")

    run_seed = seed if seed is not None else raw.get("seed", 0)
    out_dir = output_dir if output_dir is not None else raw.get("output_dir", "runs/default")

    data_raw = dict(raw.get("data") or {})
    syn_keys = (
        "num_images",
        "image_size",
        "blob_count_range",
        "blob_scale_range",
        "texture_noise_amplitude",
        "source_transform",
        "target_transform",
    )
    syn_raw = {k: data_raw.pop(k) for k in syn_keys if k in data_raw}
    if "source_transform" in syn_raw:
        syn_raw["source_transform"] = _photometric(syn_raw["source_transform"], "data.source_transform")
    if "target_transform" in syn_raw:
        syn_raw["target_transform"] = _photometric(syn_raw["target_transform"], "data.target_transform")
    _tupled(syn_raw, "blob_count_range", "blob_scale_range")
    synthetic = _build(SyntheticShiftConfig, syn_raw, "data", seed=run_seed)
    data_cfg = _build(DataConfig, data_raw, "data", synthetic=synthetic)

    enc_raw = _tupled(dict(raw.get("encoder") or {}), "stage_channels")
    encoder = _build(EncoderConfig, enc_raw, "encoder")

    tv_raw = _tupled(dict(raw.get("train_vae") or {}), "adam_betas")
    train_vae = _build(TrainConfig, tv_raw, "train_vae", stage="vae", seed=run_seed + 5)
    ts_raw = _tupled(dict(raw.get("train_seg") or {}), "adam_betas")
    train_seg = _build(TrainConfig, ts_raw, "train_seg", stage="seg", seed=run_seed + 6)

    adapt_raw = dict(raw.get("adapt") or {})
    joint = _build(
        JointLossParams,
        {"lam": adapt_raw.pop("lambda", adapt_raw.pop("lam", 0.75)),
         "ncc_epsilon": adapt_raw.pop("ncc_epsilon", 1e-5)},
        "adapt",
    )
    ssim_params = _build(SsimParams, adapt_raw.pop("ssim", None), "adapt.ssim")
    adapt_cfg = _build(AdaptConfig, adapt_raw, "adapt", joint=joint, ssim=ssim_params, seed=run_seed + 7)

    eval_cfg = _build(EvalConfig, raw.get("eval"), "eval")

    sweep_raw = dict(raw.get("sweep") or {})
    fractions = tuple(sweep_raw.pop("fractions", (0.0, 0.10, 0.25, 0.50)))
    if sweep_raw:
        raise ConfigError(f"unknown field(s) {sorted(sweep_raw)} in section 'sweep'")

    try:
        return RunConfig(
            seed=run_seed,
            output_dir=out_dir,
            data=data_cfg,
            encoder=encoder,
            train_vae=train_vae,
            train_seg=train_seg,
            adapt=adapt_cfg,
            eval=eval_cfg,
            sweep_fractions=fractions,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def with_overrides(cfg, seed=None, output_dir=None):
    """Re-derive a RunConfig with a new seed and/or output dir."""
    if seed is None and output_dir is None:
        return cfg
    new = replace(cfg)
    if output_dir is not None:
        new.output_dir = str(output_dir)
    if seed is not None:
        new.seed = seed
        new.data = replace(new.data, synthetic=replace(new.data.synthetic, seed=seed))
        new.train_vae = replace(new.train_vae, seed=seed + 5)
        new.train_seg = replace(new.train_seg, seed=seed + 6)
        new.adapt = replace(new.adapt, seed=seed + 7)
    return new
