"""Run configuration: one JSON file with a schema version.

Relative paths are resolved against the directory holding the config file.
The ``full_scale`` block records the large-scale reference hyperparameters
(100 adaptation iterations, T=80, t*=8, learning rate 1e-5 on a pretrained
Stable Diffusion model); the desk-scale defaults below keep T and t* and
shrink the rest.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from trail._validation import ConfigurationError

SCHEMA_VERSION = 1

FULL_SCALE = {
    "tta_iterations": 100,
    "diffusion_steps_T": 80,
    "t_star": 8,
    "learning_rate": 1e-5,
}


@dataclass
class DataConfig:
    n_train: int = 5000
    n_val: int = 500
    n_test: int = 1000
    seed: int = 0


@dataclass
class ScheduleConfig:
    T: int = 80
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass
class CodecConfig:
    mode: str = "vae"
    epochs: int = 10
    width: int = 32
    latent_channels: int = 4
    batch_size: int = 32
    lr: float = 2e-3
    kl_weight: float = 1e-4
    max_abs_error: float = 0.1
    min_ssim: float = 0.8


@dataclass
class DenoiserConfig:
    channels: int = 32
    epochs: int = 12
    batch_size: int = 32
    lr: float = 2e-3
    max_val_loss: float = 0.5


@dataclass
class PixelDenoiserConfig:
    enabled: bool = True
    channels: int = 16
    epochs: int = 4
    batch_size: int = 32
    lr: float = 2e-3
    max_val_loss: float = 0.5


@dataclass
class ZooConfig:
    architectures: list = field(default_factory=lambda: ["small-cnn-a", "small-cnn-b", "small-resnet", "tiny-vit"])
    surrogate: str = "small-cnn-a"
    epochs: int = 15
    batch_size: int = 64
    lr: float = 2e-3
    min_accuracy: float = 0.6


@dataclass
class ObjectiveSection:
    alpha: float = 1.0
    beta: float = 300.0
    mode: str = "untargeted"
    target_label: int | None = None


@dataclass
class TTASection:
    iterations: int = 25
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    guidance_scale_tta: float = 300.0


@dataclass
class AttackSection:
    t_star: int = 8
    guidance_scale: float = 300.0
    n_images: int = 50
    jpeg_quality: int = 75


@dataclass
class PGDSection:
    epsilon: float = 8 / 255
    step_size: float | None = None
    steps: int = 10
    random_start: bool = False


@dataclass
class BoundSection:
    delta: float = 0.1
    trials: int = 200
    t_stars: list = field(default_factory=lambda: [2, 4, 8])
    c_inflation: float = 1.5
    n_sample: int = 200
    pixel_mode: bool = True


@dataclass
class SweepSection:
    t_stars: list = field(default_factory=lambda: [2, 4, 6, 8, 10])
    n_images: int = 50


_SECTIONS = {
    "data": DataConfig,
    "schedule": ScheduleConfig,
    "codec": CodecConfig,
    "denoiser": DenoiserConfig,
    "pixel_denoiser": PixelDenoiserConfig,
    "zoo": ZooConfig,
    "objective": ObjectiveSection,
    "tta": TTASection,
    "attack": AttackSection,
    "pgd": PGDSection,
    "bound": BoundSection,
    "sweep": SweepSection,
}


@dataclass
class RunConfig:
    dataset: str = "data/toy.npz"
    artifacts: str = "artifacts"
    output: str = "runs"
    seed: int = 0
    workers: int = 1
    data: DataConfig = field(default_factory=DataConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    pixel_denoiser: PixelDenoiserConfig = field(default_factory=PixelDenoiserConfig)
    zoo: ZooConfig = field(default_factory=ZooConfig)
    objective: ObjectiveSection = field(default_factory=ObjectiveSection)
    tta: TTASection = field(default_factory=TTASection)
    attack: AttackSection = field(default_factory=AttackSection)
    pgd: PGDSection = field(default_factory=PGDSection)
    bound: BoundSection = field(default_factory=BoundSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    full_scale: dict = field(default_factory=lambda: dict(FULL_SCALE))
    schema_version: int = SCHEMA_VERSION
    base_dir: str = field(default=".", repr=False, compare=False)

    def path(self, name):
        """Absolute path for the ``dataset`` / ``artifacts`` / ``output`` entries."""
        p = Path(getattr(self, name))
        return p if p.is_absolute() else Path(self.base_dir) / p

    def to_dict(self):
        d = asdict(self)
        d.pop("base_dir")
        return d

    def save(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_dict(cls, d, base_dir="."):
        d = dict(d)
        version = d.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigurationError(f"unsupported config schema_version {version}")
        known = {f.name for f in fields(cls)} - {"base_dir"}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for key, value in d.items():
            if key in _SECTIONS:
                section = _SECTIONS[key]
                allowed = {f.name for f in fields(section)}
                bad = set(value) - allowed
                if bad:
                    raise ConfigurationError(f"unknown keys in [{key}]: {sorted(bad)}")
                kwargs[key] = section(**value)
            else:
                kwargs[key] = value
        return cls(**kwargs, base_dir=str(base_dir))

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: {exc}") from exc
        return cls.from_dict(data, base_dir=path.resolve().parent)
