"""Configuration dataclasses and config-file handling.

All experiment knobs live in small frozen-ish dataclasses so that a run can be
snapshotted into a manifest and hashed. Config files are YAML with one top-level
section per dataclass (see docs/file_formats.md); flags override file values,
file values override defaults.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigurationError

GAT_ORDERS = ("channel_first", "temporal_first", "parallel_sum")
LATENT_SOURCES = ("generated", "real", "none")

# Initial value of the learnable logit-scale parameter; softplus is applied on use.
LOGIT_SCALE_INIT = math.log(1.0 / 0.07)


@dataclass
class ModelConfig:
    """Architecture hyper-parameters of the staged encoder."""

    n_visual_channels: int = 17
    n_latent_channels: int = 12
    n_timesteps: int = 175
    d_low: int = 256
    d_sem: int = 1024
    temporal_hidden: int = 128
    dropout_coarse: float = 0.1
    gat_heads: int = 1
    gat_order: str = "channel_first"
    temporal_weight_scale: str = "1"  # "1" keeps raw softmax weights, "T" rescales by n_timesteps
    share_logit_scale: bool = False
    layer_norm_eps: float = 1e-5

    def __post_init__(self):
        for name in ("n_visual_channels", "n_latent_channels", "n_timesteps",
                     "d_low", "d_sem", "temporal_hidden"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0.0 <= self.dropout_coarse < 1.0:
            raise ConfigurationError(f"dropout_coarse must be in [0, 1), got {self.dropout_coarse}")
        if self.gat_heads != 1:
            raise ConfigurationError("only single-head graph attention is supported (gat_heads=1)")
        if self.gat_order not in GAT_ORDERS:
            raise ConfigurationError(f"gat_order must be one of {GAT_ORDERS}, got {self.gat_order!r}")
        if str(self.temporal_weight_scale) not in ("1", "T"):
            raise ConfigurationError("temporal_weight_scale must be '1' or 'T'")
        self.temporal_weight_scale = str(self.temporal_weight_scale)

    @property
    def n_joint_channels(self) -> int:
        return self.n_visual_channels + self.n_latent_channels


@dataclass(frozen=True)
class VariantSpec:
    """Structural switches defining one ablation variant.

    ``latent_source`` selects where the extra semantic channels come from:
    ``generated`` (learnable projection from the visual channels), ``real``
    (recorded language-related channels fed in alongside the visual ones), or
    ``none`` (joint representation is the visual channels only).
    """

    name: str = "Ours-All"
    latent_source: str = "generated"
    use_phase1: bool = True
    use_phase2: bool = True
    use_fine: bool = True
    use_coarse: bool = True

    def __post_init__(self):
        if self.latent_source not in LATENT_SOURCES:
            raise ConfigurationError(f"latent_source must be one of {LATENT_SOURCES}")
        if not self.use_phase1 and not self.use_phase2:
            raise ConfigurationError("a variant must keep at least one of phase 1 / phase 2")
        if self.use_phase2 and not (self.use_fine or self.use_coarse):
            raise ConfigurationError("phase 2 requires at least one semantic branch")
        if not self.use_phase2 and (self.use_fine or self.use_coarse):
            raise ConfigurationError("semantic branches require phase 2")

    def joint_channels(self, config: ModelConfig) -> int:
        if self.latent_source == "none":
            return config.n_visual_channels
        return config.n_visual_channels + config.n_latent_channels

    def needs_extra_channels(self) -> bool:
        return self.use_phase2 and self.latent_source == "real"

    @property
    def stages(self) -> tuple[str, ...]:
        """Stage embeddings this variant produces (III is always present)."""
        out = []
        if self.use_phase1:
            out.append("I")
        if self.use_phase2 and self.use_fine:
            out.append("II_fine")
        if self.use_phase2 and self.use_coarse:
            out.append("II_coarse")
        out.append("III")
        return tuple(out)


FULL_VARIANT = VariantSpec()


@dataclass
class LossWeights:
    """Weights of the three phase losses in the total objective."""

    alpha1: float = 0.1
    alpha2: float = 0.2
    alpha3: float = 0.5

    def __post_init__(self):
        if min(self.alpha1, self.alpha2, self.alpha3) < 0:
            raise ConfigurationError("loss weights must be non-negative")


@dataclass
class TrainConfig:
    """Optimization settings. The optimizer is AdamW (decoupled weight decay)."""

    learning_rate: float = 1e-4
    batch_size: int = 1024
    epochs: int = 40
    seed: int = 42
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 0.0  # 0 disables clipping
    standardize: bool = True
    loss_weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigurationError("learning_rate must be >= 0")
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be >= 2 (contrastive loss degenerates at 1)")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)


@dataclass
class SyntheticSpec:
    """Desk-scale synthetic EEG corpus with planted staged structure.

    Each trial is channel noise plus two planted patterns: an early temporal
    window carrying a fixed linear encoding of the stimulus's low-level image
    feature, and a late window carrying a fixed linear encoding of the class
    text feature. Encoding matrices are drawn once per seed and shared across
    subjects; only the noise stream differs between subjects.
    """

    n_classes: int = 20
    images_per_class: int = 5
    reps: int = 4
    n_timesteps: int = 64
    noise_sd: float = 0.5
    early_window: tuple[int, int] = (4, 16)
    late_window: tuple[int, int] = (28, 56)
    seed: int = 42
    n_heldout_classes: int = 5
    test_reps: int = 8
    plant_amplitude: float = 1.0
    allow_overlap: bool = False

    def __post_init__(self):
        for name in ("n_classes", "images_per_class", "reps", "n_timesteps", "test_reps"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if not 1 <= self.n_heldout_classes < self.n_classes:
            raise ConfigurationError("n_heldout_classes must leave at least one training class")
        self.early_window = tuple(self.early_window)
        self.late_window = tuple(self.late_window)
        for win, label in ((self.early_window, "early_window"), (self.late_window, "late_window")):
            lo, hi = win
            if not (0 <= lo <= hi <= self.n_timesteps):
                raise ConfigurationError(f"{label} {win} outside [0, {self.n_timesteps}]")
        e0, e1 = self.early_window
        l0, l1 = self.late_window
        if not self.allow_overlap and max(e0, l0) < min(e1, l1):
            raise ConfigurationError("early and late windows overlap; set allow_overlap to permit")

    @property
    def n_train_classes(self) -> int:
        return self.n_classes - self.n_heldout_classes


@dataclass
class RunConfig:
    """Bundle of every section a run needs; what config files deserialize to."""

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)


def _asdict(obj):
    d = dataclasses.asdict(obj)
    return d


def config_to_dict(cfg: RunConfig) -> dict:
    return {"model": _asdict(cfg.model), "train": _asdict(cfg.train),
            "synthetic": _asdict(cfg.synthetic)}


def _build_section(cls, data: dict, label: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigurationError(f"unknown keys in [{label}]: {sorted(unknown)}")
    return cls(**data)


def config_from_dict(data: dict) -> RunConfig:
    known = {"model", "train", "synthetic"}
    unknown = set(data) - known
    if unknown:
        raise ConfigurationError(f"unknown top-level config sections: {sorted(unknown)}")
    return RunConfig(
        model=_build_section(ModelConfig, data.get("model", {}), "model"),
        train=_build_section(TrainConfig, data.get("train", {}), "train"),
        synthetic=_build_section(SyntheticSpec, data.get("synthetic", {}), "synthetic"),
    )


def load_config(path: str | Path | None) -> RunConfig:
    """Load a YAML config file; ``None`` or the literal string ``default``
    returns built-in defaults."""
    if path is None or str(path) == "default":
        return RunConfig()
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    with open(p, "r", encoding="utf-8") as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"config file {p} must contain a mapping")
    return config_from_dict(data)


def config_hash(obj) -> str:
    """Stable short hash of a (nested) config dict or dataclass."""
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        obj = dataclasses.asdict(obj)
    blob = json.dumps(obj, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:12]
