"""Plain-text experiment configuration: one ``key = value`` pair per line.

Lines starting with ``#`` (and inline ``#`` suffixes) are comments; blank
lines are ignored; unknown or duplicated keys are hard errors.  Serialization
is canonical (fixed key order, normalized value formatting), so
parse -> serialize -> parse is the identity.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .attacks import AttackConfig, parse_attack
from .data import Dataset, parse_dataset_spec
from .errors import ConfigError
from .models import WrnSpec, parse_arch
from .training import TrainConfig


@dataclass
class ExperimentConfig:
    """Every knob of one experiment: architecture, data, objective, attack."""

    arch: str = "wrn-28-4"
    classes: int = 10
    input_channels: int = 3
    input_size: int = 32
    data: str = "synth:blobs,n=512,classes=10,noise=0.1,size=32,seed=0"
    val_data: str = ""
    objective: str = "natural"
    epochs: int = 120
    batch_size: int = 256
    lr: float = 0.1
    decay_milestones: tuple = (60, 90)
    decay_factor: float = 10.0
    momentum: float = 0.9
    weight_decay: float = 1e-4
    kappa: float = 0.0
    m: int = 10
    lambda_inv: float = 6.0
    attack: str = "pgd:k=7,eps=8,step=2"
    augment: bool = False
    robust_val_iters: int = 0
    init_checkpoint: str = ""
    seed: int = 0

    # -- conversions ---------------------------------------------------------

    def wrn_spec(self) -> WrnSpec:
        return parse_arch(self.arch, self.classes,
                          input_channels=self.input_channels, input_size=self.input_size)

    def attack_config(self) -> AttackConfig:
        return parse_attack(self.attack, seed=self.seed)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            objective=self.objective,
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            decay_milestones=tuple(self.decay_milestones),
            decay_factor=self.decay_factor,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            kappa=self.kappa,
            attack=self.attack_config(),
            m=self.m,
            lambda_inv=self.lambda_inv,
            init_checkpoint=self.init_checkpoint or None,
            seed=self.seed,
            augment=self.augment,
            robust_val_iters=self.robust_val_iters,
        )

    def load_train_data(self) -> Dataset:
        return parse_dataset_spec(self.data, split="train")

    def load_val_data(self) -> Dataset | None:
        return parse_dataset_spec(self.val_data, split="validation") if self.val_data else None


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(field_type, key: str, raw: str):
    raw = raw.strip()
    if field_type is bool:
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"key '{key}' expects a boolean, got '{raw}'")
    if field_type is int:
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"key '{key}' expects an integer, got '{raw}'") from None
    if field_type is float:
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"key '{key}' expects a number, got '{raw}'") from None
    if field_type is tuple:
        if not raw:
            return ()
        try:
            return tuple(int(v.strip()) for v in raw.split(","))
        except ValueError:
            raise ConfigError(f"key '{key}' expects comma-separated integers, got '{raw}'") from None
    return raw


def parse_config(text: str) -> ExperimentConfig:
    """Parse ``key = value`` lines into an ExperimentConfig."""
    known = {f.name: f.type for f in fields(ExperimentConfig)}
    # dataclass field types may be strings under deferred annotations
    type_map = {"int": int, "float": float, "bool": bool, "str": str, "tuple": tuple}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        key, sep, raw = body.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value', got '{line.strip()}'")
        key = key.strip()
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key '{key}'")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key '{key}'")
        ftype = known[key]
        if isinstance(ftype, str):
            ftype = type_map.get(ftype, str)
        values[key] = _parse_value(ftype, key, raw)
    return ExperimentConfig(**values)


def serialize_config(cfg: ExperimentConfig) -> str:
    """Canonical text form: every field, declaration order, normalized values."""
    lines = [f"{f.name} = {_format_value(getattr(cfg, f.name))}" for f in fields(cfg)]
    return "\n".join(lines) + "\n"


def load_config(path: str) -> ExperimentConfig:
    with open(path) as f:
        return parse_config(f.read())


def save_config(cfg: ExperimentConfig, path: str):
    with open(path, "w") as f:
        f.write(serialize_config(cfg))
