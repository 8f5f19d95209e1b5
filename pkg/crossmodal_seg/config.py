"""
Run configuration

The on-disk form is JSON with one object per section. Internally the JSON is
flattened to dotted keys (``encoder.image_size``, ``optimizer.lr``, ...) and
each section reads its own keys with :func:`~crossmodal_seg.util.get_settings`.
:func:`load_config` layers the sources: preset, file, ``CMS_<SECTION>_<KEY>``
environment variables, then commandline overrides. Configs rebuilt from a
stored dict never consult the environment.

"""
import copy
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Mapping, Optional

from pyramid.settings import asbool

from .exceptions import ConfigurationError
from .util import (
    aslist_of,
    flatten_settings,
    get_environ_settings,
    get_settings,
    optional,
    parse_override,
    sha256_hex,
)

LOG = logging.getLogger(__name__)

DECODER_VARIANTS = ("tcmd", "standard", "oad")
NUM_STAGES = 4


@dataclass
class EncoderConfig:

    """Vision backbone and text encoder dimensions"""

    image_size: int = 480
    patch_size: int = 4
    stage_channels: List[int] = field(default_factory=lambda: [32, 64, 128, 256])
    stage_depths: List[int] = field(default_factory=lambda: [1, 1, 1, 1])
    text_vocab_size: int = 0
    text_dim: int = 64
    text_depth: int = 1
    max_tokens: int = 48
    num_heads: int = 4
    window_size: Optional[int] = None
    mlp_ratio: int = 4
    dropout: float = 0.0
    freeze_text: bool = False

    @classmethod
    def configure(cls, settings):
        return cls(
            **get_settings(
                settings,
                "encoder.",
                image_size=int,
                patch_size=int,
                stage_channels=aslist_of(int),
                stage_depths=aslist_of(int),
                text_vocab_size=int,
                text_dim=int,
                text_depth=int,
                max_tokens=int,
                num_heads=int,
                window_size=optional(int),
                mlp_ratio=int,
                dropout=float,
                freeze_text=asbool,
            )
        )

    def stage_sizes(self, image_size: Optional[int] = None) -> List[int]:
        """Spatial side length H_i of each backbone stage"""
        size = (image_size or self.image_size) // self.patch_size
        return [size // 2 ** i for i in range(NUM_STAGES)]

    def validate(self) -> None:
        if len(self.stage_channels) != NUM_STAGES:
            raise ConfigurationError(
                "encoder.stage_channels must have %d entries" % NUM_STAGES
            )
        if len(self.stage_depths) != NUM_STAGES:
            raise ConfigurationError(
                "encoder.stage_depths must have %d entries" % NUM_STAGES
            )
        if self.patch_size < 1:
            raise ConfigurationError("encoder.patch_size must be positive")
        if self.image_size % (self.patch_size * 2 ** (NUM_STAGES - 1)):
            raise ConfigurationError(
                "encoder.image_size (%d) must be divisible by patch_size x 8 (%d)"
                % (self.image_size, self.patch_size * 8)
            )
        for i in range(NUM_STAGES - 1):
            if self.stage_channels[i + 1] != 2 * self.stage_channels[i]:
                raise ConfigurationError(
                    "encoder.stage_channels must double stage to stage, got %s"
                    % self.stage_channels
                )
        for channels in self.stage_channels + [self.text_dim]:
            if channels % self.num_heads:
                raise ConfigurationError(
                    "Width %d is not divisible by encoder.num_heads=%d"
                    % (channels, self.num_heads)
                )
        if self.max_tokens < 2:
            raise ConfigurationError("encoder.max_tokens must be at least 2")
        if self.window_size is not None and self.window_size < 1:
            raise ConfigurationError("encoder.window_size must be positive or null")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError("encoder.dropout must be in [0, 1)")


@dataclass
class SMGAMConfig:

    """Mutual guidance alignment options"""

    num_heads: Optional[int] = None
    gate_init_zero: bool = True
    project_residual: bool = False

    @classmethod
    def configure(cls, settings):
        return cls(
            **get_settings(
                settings,
                "smgam.",
                num_heads=optional(int),
                gate_init_zero=asbool,
                project_residual=asbool,
            )
        )


@dataclass
class DecoderConfig:

    """Decoder options shared by every variant"""

    num_heads: Optional[int] = None
    ffn_ratio: int = 4

    @classmethod
    def configure(cls, settings):
        return cls(
            **get_settings(
                settings, "decoder.", num_heads=optional(int), ffn_ratio=int
            )
        )


@dataclass
class LossConfig:

    """Weighting of the cross-entropy / Dice objective"""

    lam: float = 0.9
    dice_smooth: float = 1.0

    @classmethod
    def configure(cls, settings):
        kwargs = get_settings(settings, "loss.", dice_smooth=float)
        lam = settings.get("loss.lambda")
        if lam is not None:
            kwargs["lam"] = float(lam)
        return cls(**kwargs)

    def validate(self) -> None:
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigurationError("loss.lambda must be in [0, 1]")
        if self.dice_smooth <= 0:
            raise ConfigurationError("loss.dice_smooth must be positive")

    def to_dict(self) -> dict:
        return {"lambda": self.lam, "dice_smooth": self.dice_smooth}


@dataclass
class OptimizerConfig:

    """AdamW-style optimizer settings"""

    kind: str = "adamw"
    lr: float = 5e-5
    weight_decay: float = 0.01
    backbone_lr_scale: float = 1.0

    @classmethod
    def configure(cls, settings):
        return cls(
            **get_settings(
                settings,
                "optimizer.",
                kind=str,
                lr=float,
                weight_decay=float,
                backbone_lr_scale=float,
            )
        )


@dataclass
class ScheduleConfig:

    """Learning rate schedule"""

    kind: str = "poly"
    power: float = 0.9

    @classmethod
    def configure(cls, settings):
        return cls(**get_settings(settings, "schedule.", kind=str, power=float))


@dataclass
class DataConfig:

    """Dataset location, preprocessing and augmentation"""

    root: Optional[str] = None
    num_workers: int = 0
    hflip: bool = False
    vflip: bool = False
    rotate: bool = False
    mean: Optional[List[float]] = None
    std: Optional[List[float]] = None

    @classmethod
    def configure(cls, settings):
        return cls(
            **get_settings(
                settings,
                "data.",
                root=optional(str),
                num_workers=int,
                hflip=asbool,
                vflip=asbool,
                rotate=asbool,
                mean=optional(aslist_of(float)),
                std=optional(aslist_of(float)),
            )
        )


@dataclass
class EvalConfig:

    """Metric conventions"""

    thresholds: List[float] = field(default_factory=lambda: [0.5, 0.6, 0.7, 0.8, 0.9])
    empty_iou: float = 1.0

    @classmethod
    def configure(cls, settings):
        return cls(
            **get_settings(
                settings, "eval.", thresholds=aslist_of(float), empty_iou=float
            )
        )


@dataclass
class RunConfig:

    """Everything needed to build, train and evaluate one model"""

    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    smgam: SMGAMConfig = field(default_factory=SMGAMConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    decoder_variant: str = "tcmd"
    use_smgam_lgvla: bool = True
    use_smgam_vglva: bool = True
    epochs: int = 40
    batch_size: int = 2
    seed: int = 0
    device: str = "cpu"
    run_name: str = "run"
    output_dir: str = "runs"
    storage: Dict[str, Any] = field(default_factory=lambda: {"backend": "file"})

    @classmethod
    def configure(cls, settings: Mapping[str, Any]) -> "RunConfig":
        """Build a RunConfig from flat dotted settings"""
        known = _known_keys()
        unknown = sorted(
            k for k in settings if k not in known and not k.startswith("storage.")
        )
        if unknown:
            raise ConfigurationError("Unknown config keys: %s" % ", ".join(unknown))
        kwargs = get_settings(
            settings,
            "",
            decoder_variant=str,
            use_smgam_lgvla=asbool,
            use_smgam_vglva=asbool,
            epochs=int,
            batch_size=int,
            seed=int,
            device=str,
            run_name=str,
            output_dir=str,
        )
        storage = {"backend": "file"}
        for key, value in settings.items():
            if key.startswith("storage."):
                storage[key[len("storage.") :]] = value
        cfg = cls(
            encoder=EncoderConfig.configure(settings),
            smgam=SMGAMConfig.configure(settings),
            decoder=DecoderConfig.configure(settings),
            loss=LossConfig.configure(settings),
            optimizer=OptimizerConfig.configure(settings),
            schedule=ScheduleConfig.configure(settings),
            data=DataConfig.configure(settings),
            eval=EvalConfig.configure(settings),
            storage=storage,
            **kwargs
        )
        cfg.validate()
        return cfg

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunConfig":
        return cls.configure(flatten_settings(data))

    def to_dict(self) -> dict:
        data = asdict(self)
        data["loss"] = self.loss.to_dict()
        return data

    def storage_settings(self) -> Dict[str, Any]:
        """Flat ``storage.*`` settings for :func:`~crossmodal_seg.storage.get_storage_impl`"""
        settings = {"storage." + k: v for k, v in self.storage.items()}
        settings.setdefault("storage.dir", self.run_dir())
        return settings

    def run_dir(self) -> str:
        """Directory for the checkpoints and history of this run"""
        return os.path.join(self.output_dir, self.run_name)

    def replace(self, **overrides) -> "RunConfig":
        """Copy of this config with dotted-key overrides applied"""
        flat = flatten_settings(self.to_dict())
        flat.update(overrides)
        return RunConfig.configure(flat)

    @property
    def smgam_enabled(self) -> bool:
        return self.use_smgam_lgvla or self.use_smgam_vglva

    def validate(self) -> None:
        self.encoder.validate()
        self.loss.validate()
        if self.decoder_variant not in DECODER_VARIANTS:
            raise ConfigurationError(
                "decoder_variant must be one of %s" % ", ".join(DECODER_VARIANTS)
            )
        if self.optimizer.kind != "adamw":
            raise ConfigurationError("Only the 'adamw' optimizer is supported")
        if self.optimizer.lr <= 0:
            raise ConfigurationError("optimizer.lr must be positive")
        if self.schedule.kind not in ("poly", "constant"):
            raise ConfigurationError("schedule.kind must be 'poly' or 'constant'")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be at least 1")
        for heads in (self.smgam.num_heads, self.decoder.num_heads):
            if heads is not None:
                for channels in self.encoder.stage_channels + [self.encoder.text_dim]:
                    if channels % heads:
                        raise ConfigurationError(
                            "Width %d is not divisible by %d heads" % (channels, heads)
                        )

    def model_section(self) -> dict:
        """The part of the config that determines parameter shapes and forward math"""
        data = self.to_dict()
        return {
            key: data[key]
            for key in (
                "encoder",
                "smgam",
                "decoder",
                "decoder_variant",
                "use_smgam_lgvla",
                "use_smgam_vglva",
            )
        }


def _known_keys() -> set:
    return set(flatten_settings(RunConfig().to_dict())) | {"storage"}


def config_hash(
    cfg: RunConfig, vocab: Optional[List[str]] = None, normalization: Optional[dict] = None
) -> str:
    """Fingerprint of everything a checkpoint needs to match at load time"""
    return sha256_hex(
        {
            "model": cfg.model_section(),
            "vocab": list(vocab or []),
            "normalization": normalization or {},
        }
    )


def toy_config(**overrides) -> RunConfig:
    """Desk-scale preset: 64x64 images, small channels, from-scratch training"""
    cfg = RunConfig()
    flat = flatten_settings(cfg.to_dict())
    flat.update(
        {
            "encoder.image_size": 64,
            "encoder.stage_channels": [32, 64, 128, 256],
            "encoder.text_dim": 64,
            "encoder.max_tokens": 16,
            "encoder.num_heads": 4,
            "optimizer.lr": 1e-3,
        }
    )
    flat.update(overrides)
    return RunConfig.configure(flat)


def full_config(**overrides) -> RunConfig:
    """Full-size preset: 480x480 images, Swin-B-like widths, 8 heads"""
    flat = flatten_settings(RunConfig().to_dict())
    flat.update(
        {
            "encoder.image_size": 480,
            "encoder.stage_channels": [128, 256, 512, 1024],
            "encoder.stage_depths": [2, 2, 18, 2],
            "encoder.text_dim": 768,
            "encoder.text_depth": 12,
            "encoder.max_tokens": 48,
            "encoder.num_heads": 8,
            "encoder.window_size": 12,
        }
    )
    flat.update(overrides)
    return RunConfig.configure(flat)


PRESETS = {"toy": toy_config, "full": full_config}


def load_config(
    path: Optional[str] = None,
    overrides: Optional[Mapping[str, Any]] = None,
    preset: Optional[str] = None,
) -> RunConfig:
    """
    Load a RunConfig

    Parameters
    ----------
    path : str, optional
        JSON file mirroring RunConfig. May itself name a ``"preset"``.
    overrides : dict, optional
        Dotted keys to override (CLI flags). Values given as strings are parsed
        as JSON when possible.
    preset : str, optional
        Base preset ("toy" or "full") used when the file does not name one

    """
    data = {}  # type: Dict[str, Any]
    if path is not None:
        with open(path, "r") as ifile:
            try:
                data = json.load(ifile)
            except ValueError as e:
                raise ConfigurationError("Invalid JSON in %s: %s" % (path, e))
    data = copy.deepcopy(data)
    preset = data.pop("preset", preset)
    if preset is not None and preset not in PRESETS:
        raise ConfigurationError("Unknown preset %r" % preset)
    base = PRESETS[preset]() if preset else RunConfig()
    flat = flatten_settings(base.to_dict())
    flat.update(flatten_settings(data))
    for key, value in get_environ_settings(sorted(flat)).items():
        flat[key] = parse_override(value)
    for key, value in (overrides or {}).items():
        flat[key] = parse_override(value) if isinstance(value, str) else value
    return RunConfig.configure(flat)


def dump_config(cfg: RunConfig, path: str) -> None:
    with open(path, "w") as ofile:
        json.dump(cfg.to_dict(), ofile, indent=2, sort_keys=True)

