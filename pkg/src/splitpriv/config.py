"""Experiment configuration: a YAML file validated against a pydantic schema.

Every field has a default, so an empty file is a valid (desk-scale)
experiment. ``load_config`` reports problems as ``file:line: field: message``.
"""

from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from splitpriv.errors import ConfigError
from splitpriv.storage import canonical_json, sha256_text

LAYER_KINDS = ("dense", "relu", "conv-2d-small", "max-pool", "batch-norm")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class LayerSpec(_Strict):
    kind: Literal["dense", "relu", "conv-2d-small", "max-pool", "batch-norm"]
    out: Optional[int] = None

    @model_validator(mode="after")
    def _width(self):
        if self.kind in ("dense", "conv-2d-small"):
            if self.out is None or self.out < 1:
                raise ValueError(f"{self.kind} needs a positive 'out'")
        elif self.out is not None:
            raise ValueError(f"{self.kind} takes no 'out'")
        return self

    def as_dict(self) -> dict:
        return {"kind": self.kind} if self.out is None else {"kind": self.kind, "out": self.out}


def _default_arch():
    return [LayerSpec(kind="conv-2d-small", out=4), LayerSpec(kind="relu"), LayerSpec(kind="max-pool"),
            LayerSpec(kind="dense", out=16), LayerSpec(kind="relu"), LayerSpec(kind="dense", out=4)]


class ModelConfig(_Strict):
    arch: list[LayerSpec] = Field(default_factory=_default_arch)
    input_shape: list[int] = Field(default_factory=lambda: [1, 8, 8])
    s_max: int = 5

    @model_validator(mode="after")
    def _split_range(self):
        if not self.arch:
            raise ValueError("arch needs at least two layers")
        if not 1 <= self.s_max <= len(self.arch) - 1:
            raise ValueError(f"s_max must lie in 1..{len(self.arch) - 1} (k={len(self.arch)})")
        if any(v < 1 for v in self.input_shape):
            raise ValueError("input_shape entries must be positive")
        return self

    @property
    def k(self) -> int:
        return len(self.arch)

    def arch_dicts(self) -> list[dict]:
        return [layer.as_dict() for layer in self.arch]


class DataConfig(_Strict):
    kind: Literal["blobs", "two-spirals", "mini-images"] = "mini-images"
    n_class: int = Field(4, ge=2)
    n_per_client: int = Field(80, ge=1)
    iid: bool = True
    n_test: int = Field(200, ge=1)
    image_size: int = 8
    public_size: int = Field(200, ge=2)
    spread: float = Field(1.0, gt=0)


class DeviceConfig(_Strict):
    joules_per_byte: float = Field(2.0e-7, gt=0)
    joules_per_flop: float = Field(1.0e-9, gt=0)
    idle_watts: float = Field(1.8, gt=0)
    comm_watts: float = Field(2.5, gt=0)
    base_watts: float = Field(2.0, gt=0)
    compute_watts: float = Field(6.0, gt=0)
    p_max: float = Field(10.0, gt=0)
    latency_s: float = Field(0.002, ge=0)
    server_seconds_per_flop: float = Field(2.0e-11, gt=0)


class RosterConfig(_Strict):
    n: int = 3
    alphas: list[float] = Field(default_factory=lambda: [0.4, 0.2, 0.5])
    device: DeviceConfig = Field(default_factory=DeviceConfig)
    devices: Optional[list[DeviceConfig]] = None  # per-client overrides of ``device``
    profile_files: Optional[list[str]] = None  # fixture profiles instead of the device model
    schedule: Optional[str] = None  # attendance schedule file

    @field_validator("alphas")
    @classmethod
    def _alpha_range(cls, v):
        if any(not 0.0 <= a <= 1.0 for a in v):
            raise ValueError("every alpha must lie in [0, 1]")
        return v

    @model_validator(mode="after")
    def _roster(self):
        if self.n < 1:
            raise ValueError("roster is empty: n must be >= 1")
        if len(self.alphas) != self.n:
            raise ValueError(f"alphas has {len(self.alphas)} entries for n={self.n} clients")
        for name in ("devices", "profile_files"):
            items = getattr(self, name)
            if items is not None and len(items) != self.n:
                raise ValueError(f"{name} has {len(items)} entries for n={self.n} clients")
        return self

    def device_for(self, i: int) -> DeviceConfig:
        return self.devices[i] if self.devices is not None else self.device


class TrainingConfig(_Strict):
    epochs: int = Field(30, ge=1)
    aggregation_period: int = Field(5, ge=1)
    lr: float = Field(0.1, gt=0)
    batch_size: int = Field(16, ge=1)
    l2_lambda: float = Field(0.0, ge=0)
    noise_family: Literal["laplace", "gaussian"] = "laplace"
    split_points: Optional[list[int]] = None  # fixed assignment for ``train`` without ``optimize``
    sigmas: Optional[list[float]] = None

    @field_validator("sigmas")
    @classmethod
    def _nonneg(cls, v):
        if v is not None and any(s < 0 for s in v):
            raise ValueError("noise levels must be non-negative")
        return v


class PrivacyConfig(_Strict):
    noise_step: float = Field(0.05, gt=0)
    noise_max: float = Field(2.5, gt=0)
    samples: int = Field(8, ge=1)
    iters: int = Field(400, ge=0)
    lr_x: float = Field(0.5, gt=0)
    lr_w: float = Field(0.05, ge=0)
    tv_weight: float = Field(1e-3, ge=0)
    noise_aware: bool = True
    restarts: int = Field(3, ge=1)
    victim_epochs: int = Field(5, ge=0)  # centralised pre-training of the profiled model
    reference_epochs: int = Field(30, ge=0)
    t_fsim_bins: int = Field(8, ge=1)
    envelope: bool = True  # report max FSIM over noise levels >= sigma


class OptimizerSection(_Strict):
    beta: float = Field(0.95, gt=0, le=1)
    a_ref: Optional[float] = Field(None, ge=0, le=1)  # None: measured by ``profile privacy``
    t_fsim: Union[float, Literal["auto"]] = 0.4
    max_rounds: int = Field(5, ge=1)
    sigma_floor: float = Field(0.0, ge=0)
    probe_epochs: int = Field(30, ge=1)

    @field_validator("t_fsim")
    @classmethod
    def _t_range(cls, v):
        if v != "auto" and not 0.0 < v < 1.0:
            raise ValueError("t_fsim must lie in (0, 1) or be 'auto'")
        return v


class ReconstructAttackConfig(_Strict):
    split_points: Optional[list[int]] = None  # default: 1..s_max
    sigmas: list[float] = Field(default_factory=lambda: [0.0, 0.5, 1.0, 1.5, 2.0, 2.5])
    samples: int = Field(8, ge=1)
    iters: int = Field(400, ge=0)


class MiaAttackConfig(_Strict):
    kind: Literal["blobs", "two-spirals", "mini-images"] = "blobs"
    n_class: int = Field(4, ge=2)
    pool_size: int = Field(200, ge=2)
    spread: float = Field(3.0, gt=0)
    arch: list[LayerSpec] = Field(default_factory=lambda: [LayerSpec(kind="dense", out=64), LayerSpec(kind="relu"),
                                                            LayerSpec(kind="dense", out=64), LayerSpec(kind="relu"),
                                                            LayerSpec(kind="dense", out=4)])
    split_point: int = Field(2, ge=1)
    lr: float = Field(0.1, gt=0)
    batch_size: int = Field(8, ge=1)
    stages: list[list[int]] = Field(default_factory=lambda: [[300, 300], [300, 5]])  # (shadow, target) epochs
    l2_lambdas: list[float] = Field(default_factory=lambda: [0.0, 0.08])
    null_permutations: int = Field(20, ge=0)  # 0 disables the shuffled-membership reference

    @field_validator("stages")
    @classmethod
    def _pairs(cls, v):
        if any(len(p) != 2 or min(p) < 0 for p in v):
            raise ValueError("stages are [shadow_epochs, target_epochs] pairs of non-negative ints")
        return v


class AttackConfig(_Strict):
    reconstruct: ReconstructAttackConfig = Field(default_factory=ReconstructAttackConfig)
    mia: MiaAttackConfig = Field(default_factory=MiaAttackConfig)


class ScalingConfig(_Strict):
    client_counts: list[int] = Field(default_factory=lambda: [3, 5, 8])
    total_samples: int = Field(240, ge=1)  # training data shared out among the clients

    @field_validator("client_counts")
    @classmethod
    def _counts(cls, v):
        if not v or any(c < 1 for c in v):
            raise ValueError("client counts must be >= 1")
        return v


class ExperimentConfig(_Strict):
    seed: int = Field(0, ge=0, lt=2**64)
    model: ModelConfig = Field(default_factory=ModelConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    clients: RosterConfig = Field(default_factory=RosterConfig)
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    privacy: PrivacyConfig = Field(default_factory=PrivacyConfig)
    optimizer: OptimizerSection = Field(default_factory=OptimizerSection)
    attack: AttackConfig = Field(default_factory=AttackConfig)
    scaling: ScalingConfig = Field(default_factory=ScalingConfig)

    @model_validator(mode="after")
    def _cross(self):
        n = self.clients.n
        for name in ("split_points", "sigmas"):
            v = getattr(self.training, name)
            if v is not None and len(v) != n:
                raise ValueError(f"training.{name} has {len(v)} entries for n={n} clients")
        if self.training.split_points is not None:
            if any(not 1 <= s <= self.model.s_max for s in self.training.split_points):
                raise ValueError(f"training.split_points must lie in 1..s_max={self.model.s_max}")
        return self

    def digest(self) -> str:
        return sha256_text(canonical_json(self.model_dump(mode="json")))[:16]


def defaults_yaml() -> str:
    return yaml.safe_dump(ExperimentConfig().model_dump(mode="json"), sort_keys=False)


# ---------------------------------------------------------------------------
# loading


def _line_index(node, path=(), out=None) -> dict:
    """Map key paths to 1-based line numbers from a composed YAML node tree."""
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for key_node, value in node.value:
            p = path + (key_node.value,)
            out[p] = key_node.start_mark.line + 1
            _line_index(value, p, out)
    elif isinstance(node, yaml.SequenceNode):
        for i, value in enumerate(node.value):
            p = path + (i,)
            out[p] = value.start_mark.line + 1
            _line_index(value, p, out)
    return out


def _set_path(data: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    cur = data
    for key in keys[:-1]:
        if isinstance(cur, list):
            cur = cur[int(key)]
            continue
        nxt = cur.get(key)
        if nxt is None:
            nxt = cur[key] = {}
        cur = nxt
    last = keys[-1]
    if isinstance(cur, list):
        cur[int(last)] = value
    else:
        cur[last] = value


def apply_overrides(data: dict, overrides) -> dict:
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"--override expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"--override {key}: cannot parse value {raw!r}: {exc}") from None
        try:
            _set_path(data, key.strip(), value)
        except (IndexError, ValueError, TypeError, AttributeError):
            raise ConfigError(f"--override {key}: no such field path") from None
    return data


def _format_errors(exc: ValidationError, lines: dict, source: str) -> str:
    msgs = []
    for err in exc.errors():
        loc = tuple(err["loc"])
        field = ".".join(str(p) for p in loc) or "<root>"
        line = None
        for n in range(len(loc), -1, -1):  # nearest enclosing key that exists in the file
            line = lines.get(loc[:n])
            if line is not None:
                break
        where = f"{source}:{line}" if line is not None else source
        msgs.append(f"{where}: {field}: {err['msg']}")
    return "\n".join(msgs)


def parse_config(text: str, overrides=None, source: str = "<config>", base_dir: Path | None = None) -> ExperimentConfig:
    try:
        node = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{source}:{mark.line + 1}" if mark is not None else source
        raise ConfigError(f"{where}: malformed YAML: {getattr(exc, 'problem', exc)}") from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{source}:1: top level must be a mapping")
    lines = _line_index(node) if node is not None else {}
    data = apply_overrides(data, overrides)
    try:
        cfg = ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc, lines, source)) from None
    _check_files(cfg, base_dir or Path.cwd(), lines, source)
    return cfg


def _check_files(cfg: ExperimentConfig, base_dir: Path, lines: dict, source: str) -> None:
    refs = []
    if cfg.clients.schedule is not None:
        refs.append((("clients", "schedule"), cfg.clients.schedule))
    for i, p in enumerate(cfg.clients.profile_files or ()):
        refs.append((("clients", "profile_files", i), p))
    for loc, p in refs:
        if not resolve(p, base_dir).exists():
            line = lines.get(loc)
            where = f"{source}:{line}" if line else source
            raise ConfigError(f"{where}: {'.'.join(map(str, loc))}: file not found: {p}")


def resolve(path: str, base_dir: Path) -> Path:
    p = Path(path)
    return p if p.is_absolute() else base_dir / p


def load_config(path=None, overrides=None) -> tuple[ExperimentConfig, Path]:
    """Parse ``path`` (or defaults when None); returns the config and the directory relative paths resolve against."""
    if path is None:
        return parse_config("", overrides, "<defaults>"), Path.cwd()
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text(), overrides, str(p), p.parent), p.parent
