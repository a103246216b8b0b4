"""Run Configuration - validated settings for every CLI command

A run is described by one YAML document whose sections mirror ``RunConfig``.
Values can be overridden from the environment (``DEVICE_TUNING_SEED=3``,
``DEVICE_TUNING_TRAINING__STEPS=50``) or on the command line with dotted paths
(``--set training.steps=50``, ``--set tasks.1.kind=parity``).
"""

import logging
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from .channel import ChannelModel
from .errors import ConfigurationError
from .pooling import PoolingConfig
from .seeding import derive_seed
from .split_model import CloudDecoderConfig, DeviceEncoderConfig, SplitModel, TaskHeadSpec
from .synthetic_tasks import SyntheticTaskSpec
from .trainer import AdamOptimizer, GradNormState

logger = logging.getLogger(__name__)

DEFAULT_CONFIG_PATH = Path(__file__).resolve().parent.parent / "configs" / "default.yaml"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PoolingSection(_Section):
    kind: Literal["mean", "max"] = "mean"
    window: int = Field(2, ge=1)
    stride: int = Field(2, ge=1)

    @model_validator(mode="after")
    def _window_within_stride(self) -> "PoolingSection":
        if self.window > self.stride:
            raise ConfigurationError(
                f"overlapping windows are not supported (window {self.window} > stride {self.stride})",
                "encoder.pooling.window",
            )
        return self


class EncoderSection(_Section):
    vocab_size: int = Field(256, ge=1)
    max_seq_len: int = Field(64, ge=1)
    width: int = Field(32, ge=1)
    heads: int = Field(4, ge=1)
    pre_pool_layers: int = Field(2, ge=0)
    pooling_stages: int = Field(2, ge=0)
    post_pool_layers: int = Field(1, ge=0)
    ffn_ratio: int = Field(4, ge=1)
    layer_norm_eps: float = Field(1e-5, ge=0)
    pooling: PoolingSection = Field(default_factory=PoolingSection)

    @model_validator(mode="after")
    def _heads_divide_width(self) -> "EncoderSection":
        if self.width % self.heads != 0:
            raise ConfigurationError(
                f"width {self.width} is not divisible by heads {self.heads}", "encoder.heads"
            )
        return self


class DecoderSection(_Section):
    num_layers: int = Field(2, ge=0)
    task_heads_on_device: bool = False


class TaskSection(_Section):
    task_id: str = Field(min_length=1)
    kind: Literal["majority", "token_at_position", "parity"]
    num_classes: int = Field(4, ge=2)
    seq_len: Optional[int] = Field(None, ge=1)  # defaults to encoder.max_seq_len
    position: int = Field(0, ge=0)
    target: int = Field(0, ge=0)
    alphabet: Optional[int] = Field(None, ge=1)


def _default_tasks() -> List[TaskSection]:
    return [
        TaskSection(task_id="majority", kind="majority", num_classes=4),
        TaskSection(task_id="position", kind="token_at_position", num_classes=4, position=0),
    ]


class GradNormSection(_Section):
    enabled: bool = True
    alpha: float = Field(1.5, ge=0)
    beta: float = Field(0.1, ge=0)
    clip_lo: float = Field(0.01, gt=0)
    clip_hi: float = Field(100.0, gt=0)
    balance_at: Literal["cloud", "device"] = "cloud"

    @model_validator(mode="after")
    def _ordered_clip(self) -> "GradNormSection":
        if self.clip_lo > self.clip_hi:
            raise ConfigurationError(
                f"clip_lo {self.clip_lo} exceeds clip_hi {self.clip_hi}", "gradnorm.clip_lo"
            )
        return self


class OptimizerSection(_Section):
    lr: float = Field(1e-3, ge=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)


class TrainingSection(_Section):
    steps: int = Field(500, ge=1)
    batch_size: int = Field(16, ge=1)
    log_every: int = Field(50, ge=0)
    report_path: Optional[str] = None
    checkpoint_path: Optional[str] = None


class ChannelSection(_Section):
    bandwidth: float = Field(1.25e6, gt=0)
    rtt: float = Field(0.05, ge=0)
    per_message_overhead: int = Field(40, ge=0)


class GradcheckSection(_Section):
    """Tiny model used by the finite-difference suite"""

    seq_len: int = Field(8, ge=1)
    width: int = Field(8, ge=1)
    heads: int = Field(2, ge=1)
    vocab_size: int = Field(16, ge=2)
    pre_pool_layers: int = Field(1, ge=0)
    pooling_stages: int = Field(1, ge=0)
    post_pool_layers: int = Field(0, ge=0)
    decoder_layers: int = Field(1, ge=0)
    num_tasks: int = Field(2, ge=1)
    num_classes: int = Field(3, ge=2)
    epsilon: float = Field(1e-4, gt=0)
    tolerance: float = Field(1e-3, gt=0)

    @model_validator(mode="after")
    def _heads_divide_width(self) -> "GradcheckSection":
        if self.width % self.heads != 0:
            raise ConfigurationError(
                f"width {self.width} is not divisible by heads {self.heads}", "gradcheck.heads"
            )
        return self


class SimulateSection(_Section):
    seq_len: int = Field(64, ge=1)


class RunConfig(BaseSettings):
    model_config = SettingsConfigDict(
        env_prefix="DEVICE_TUNING_", env_nested_delimiter="__", extra="forbid"
    )

    seed: int = Field(0, ge=0, lt=2**64)
    encoder: EncoderSection = Field(default_factory=EncoderSection)
    decoder: DecoderSection = Field(default_factory=DecoderSection)
    tasks: List[TaskSection] = Field(default_factory=_default_tasks)
    gradnorm: GradNormSection = Field(default_factory=GradNormSection)
    optimizer: OptimizerSection = Field(default_factory=OptimizerSection)
    training: TrainingSection = Field(default_factory=TrainingSection)
    channel: ChannelSection = Field(default_factory=ChannelSection)
    gradcheck: GradcheckSection = Field(default_factory=GradcheckSection)
    simulate: SimulateSection = Field(default_factory=SimulateSection)

    @model_validator(mode="after")
    def _tasks_fit_encoder(self) -> "RunConfig":
        if not self.tasks:
            raise ConfigurationError("at least one task is required", "tasks")
        ids = [t.task_id for t in self.tasks]
        if len(set(ids)) != len(ids):
            raise ConfigurationError(f"task ids must be unique, got {ids}", "tasks")
        for i, task in enumerate(self.tasks):
            if task.seq_len is not None and task.seq_len > self.encoder.max_seq_len:
                raise ConfigurationError(
                    f"task '{task.task_id}' seq_len {task.seq_len} exceeds encoder.max_seq_len "
                    f"{self.encoder.max_seq_len}",
                    f"tasks.{i}.seq_len",
                )
            if task.alphabet is not None and task.alphabet > self.encoder.vocab_size:
                raise ConfigurationError(
                    f"task '{task.task_id}' alphabet {task.alphabet} exceeds encoder.vocab_size "
                    f"{self.encoder.vocab_size}",
                    f"tasks.{i}.alphabet",
                )
        for i, spec in enumerate(self.tasks):
            try:
                SyntheticTaskSpec(
                    spec.task_id,
                    spec.kind,
                    spec.num_classes,
                    seq_len=spec.seq_len or self.encoder.max_seq_len,
                    position=spec.position,
                    target=spec.target,
                    alphabet=spec.alphabet,
                )
            except ConfigurationError as e:
                raise ConfigurationError(str(e), f"tasks.{i}.{e.field}") from e
        if self.simulate.seq_len > self.encoder.max_seq_len:
            raise ConfigurationError(
                f"simulate.seq_len {self.simulate.seq_len} exceeds encoder.max_seq_len "
                f"{self.encoder.max_seq_len}",
                "simulate.seq_len",
            )
        return self

    # === Conversion into library types ===

    def encoder_config(self) -> DeviceEncoderConfig:
        enc = self.encoder
        return DeviceEncoderConfig(
            vocab_size=enc.vocab_size,
            max_seq_len=enc.max_seq_len,
            width=enc.width,
            heads=enc.heads,
            pre_pool_layers=enc.pre_pool_layers,
            pooling_stages=enc.pooling_stages,
            post_pool_layers=enc.post_pool_layers,
            ffn_ratio=enc.ffn_ratio,
            layer_norm_eps=enc.layer_norm_eps,
            pooling=PoolingConfig(enc.pooling.kind, enc.pooling.window, enc.pooling.stride),
            seed=derive_seed(self.seed, "init"),
        )

    def task_specs(self) -> List[SyntheticTaskSpec]:
        data_seed = derive_seed(self.seed, "data")
        return [
            SyntheticTaskSpec(
                task_id=t.task_id,
                kind=t.kind,
                num_classes=t.num_classes,
                seq_len=t.seq_len or self.encoder.max_seq_len,
                seed=derive_seed(data_seed, t.task_id),
                position=t.position,
                target=t.target,
                alphabet=t.alphabet,
            )
            for t in self.tasks
        ]

    def decoder_config(self) -> CloudDecoderConfig:
        return CloudDecoderConfig(
            num_layers=self.decoder.num_layers,
            width=self.encoder.width,
            tasks=tuple(TaskHeadSpec(t.task_id, t.num_classes) for t in self.tasks),
            task_heads_on_device=self.decoder.task_heads_on_device,
        )

    def build_model(self) -> SplitModel:
        return SplitModel.initialize(self.encoder_config(), self.decoder_config())

    def gradnorm_state(self) -> Optional[GradNormState]:
        g = self.gradnorm
        if not g.enabled:
            return None
        return GradNormState.create(
            len(self.tasks), alpha=g.alpha, beta=g.beta, clip_lo=g.clip_lo, clip_hi=g.clip_hi
        )

    def build_optimizer(self, model: SplitModel) -> AdamOptimizer:
        o = self.optimizer
        return AdamOptimizer(model.named_parameters(), lr=o.lr, beta1=o.beta1, beta2=o.beta2, eps=o.eps)

    def channel_model(self) -> ChannelModel:
        c = self.channel
        return ChannelModel(c.bandwidth, c.rtt, c.per_message_overhead)

    def training_seed(self) -> int:
        return derive_seed(self.seed, "training")

    def gradcheck_model_configs(self) -> Tuple[DeviceEncoderConfig, CloudDecoderConfig]:
        g = self.gradcheck
        encoder = DeviceEncoderConfig(
            vocab_size=g.vocab_size,
            max_seq_len=g.seq_len,
            width=g.width,
            heads=g.heads,
            pre_pool_layers=g.pre_pool_layers,
            pooling_stages=g.pooling_stages,
            post_pool_layers=g.post_pool_layers,
            seed=derive_seed(self.seed, "gradcheck"),
        )
        decoder = CloudDecoderConfig(
            num_layers=g.decoder_layers,
            width=g.width,
            tasks=tuple(TaskHeadSpec(f"task_{i}", g.num_classes) for i in range(g.num_tasks)),
        )
        return encoder, decoder


# === Loading ===


def _set_path(data: Dict[str, Any], dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node: Any = data
    for depth, key in enumerate(keys):
        last = depth == len(keys) - 1
        if isinstance(node, list):
            if not key.isdigit() or int(key) >= len(node):
                raise ConfigurationError(f"no list element '{key}' in override '{dotted}'", dotted)
            key = int(key)
        elif not isinstance(node, dict):
            raise ConfigurationError(f"'{'.'.join(keys[:depth])}' is not a section", dotted)
        if last:
            node[key] = value
        else:
            if isinstance(node, dict) and key not in node:
                node[key] = {}
            node = node[key]


def apply_overrides(data: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    """Apply ``a.b.c=value`` overrides; values are parsed as YAML scalars"""
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override '{item}' must look like key.path=value", "--set")
        dotted, raw = item.split("=", 1)
        dotted = dotted.strip()
        if not dotted:
            raise ConfigurationError(f"override '{item}' has an empty key", "--set")
        if dotted.startswith("tasks.") and "tasks" not in data:
            data["tasks"] = [t.model_dump() for t in _default_tasks()]
        _set_path(data, dotted, yaml.safe_load(raw) if raw.strip() else None)
    return data


def _read_document(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}", "config")
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as e:
        raise ConfigurationError(f"config file {path} is not valid YAML: {e}", "config")
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"config file {path} must hold a mapping at top level", "config")
    return data


def _validation_message(exc: ValidationError) -> ConfigurationError:
    first = exc.errors()[0]
    original = first.get("ctx", {}).get("error")
    if isinstance(original, ConfigurationError):
        return original
    field = ".".join(str(part) for part in first["loc"]) or "config"
    return ConfigurationError(f"{field}: {first['msg']}", field)


def load_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Sequence[str] = (),
    seed: Optional[int] = None,
) -> RunConfig:
    """Read, override and validate a run configuration.

    Args:
        path: YAML document; None uses built-in defaults
        overrides: dotted ``key=value`` strings, applied in order
        seed: replaces ``seed`` when given

    Raises:
        ConfigurationError: missing file, bad YAML, or a field that fails validation
    """
    data = _read_document(path) if path is not None else {}
    apply_overrides(data, overrides)
    if seed is not None:
        data["seed"] = seed
    try:
        config = RunConfig(**data)
    except ValidationError as e:
        raise _validation_message(e) from e
    except ConfigurationError:
        raise
    except ValueError as e:
        raise ConfigurationError(str(e), "config") from e
    logger.debug(f"loaded config from {path or 'defaults'} with {len(overrides)} override(s)")
    return config


def dump_config(config: RunConfig) -> str:
    return yaml.safe_dump(config.model_dump(), sort_keys=False)
