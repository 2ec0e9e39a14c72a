"""Run configuration: a flat key=value format with dotted sections.

One schema covers data generation, the model, training, transfer, and the
rendering commands.  Unknown keys are rejected so typos fail loudly, and
every command writes its fully-resolved configuration next to its outputs
before doing real work.
"""

from dataclasses import dataclass, fields

from .encoder import EncoderConfig, every_other_block
from .errors import ConfigError


@dataclass(frozen=True)
class ModelConfig:
    """Architecture plus masking geometry; see `encoder_config` for the
    trunk view of the same numbers."""

    width: int = 32
    depth: int = 4
    heads: int = 4
    patch_size: int = 4
    image_w: int = 32
    image_h: int = 32
    mask_unit: int = 8
    mask_ratio: float = 0.6
    moe: bool = True
    num_experts: int = 4
    capacity_factor: float = 1.25
    aux_weight: float = 0.01
    ffn_mult: int = 4
    p_cross: float = 0.5

    def __post_init__(self):
        if self.image_w % self.mask_unit or self.image_h % self.mask_unit:
            raise ConfigError(
                f"image {self.image_w}x{self.image_h} not divisible by mask unit {self.mask_unit}"
            )
        if self.mask_unit % self.patch_size:
            raise ConfigError(
                f"mask unit {self.mask_unit} not divisible by patch size {self.patch_size}"
            )
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError(f"mask ratio must be in (0, 1), got {self.mask_ratio}")
        if not 0.0 <= self.p_cross <= 1.0:
            raise ConfigError(f"p_cross must be in [0, 1], got {self.p_cross}")

    @property
    def tokens(self):
        return (self.image_w // self.patch_size) * (self.image_h // self.patch_size)

    def encoder_config(self):
        return EncoderConfig(
            depth=self.depth,
            width=self.width,
            heads=self.heads,
            moe_block_indices=every_other_block(self.depth) if self.moe else (),
            num_experts=self.num_experts,
            capacity_factor=self.capacity_factor,
            aux_weight=self.aux_weight,
            ffn_mult=self.ffn_mult,
        )

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _parse_bool(s):
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {s!r}")


def _parse_int_list(s):
    s = s.strip()
    return tuple(int(v) for v in s.split(",") if v != "") if s else ()


def _parse_str_list(s):
    s = s.strip()
    return tuple(v.strip() for v in s.split(",") if v.strip()) if s else ()


_PARSERS = {
    "int": int,
    "float": float,
    "bool": _parse_bool,
    "str": str.strip,
    "ints": _parse_int_list,
    "strs": _parse_str_list,
}


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


# key -> (type name, default)
SCHEMA = {
    "seed": ("int", 0),
    "data.registry": ("str", "desk"),  # desk | pair | single
    "data.n_per_sensor": ("int", 32),
    "data.width": ("int", 32),
    "data.height": ("int", 32),
    "model.width": ("int", 32),
    "model.depth": ("int", 4),
    "model.heads": ("int", 4),
    "model.patch_size": ("int", 4),
    "model.mask_unit": ("int", 8),
    "model.mask_ratio": ("float", 0.6),
    "model.moe": ("bool", True),
    "model.num_experts": ("int", 4),
    "model.capacity_factor": ("float", 1.25),
    "model.aux_weight": ("float", 0.01),
    "model.ffn_mult": ("int", 4),
    "train.base_batch": ("int", 8),
    "train.base_lr": ("float", 1e-4),
    "train.epochs": ("int", 2),
    "train.warmup_epochs": ("int", 1),
    "train.warmup_lr": ("float", 5e-7),
    "train.milestones": ("ints", ()),
    "train.gamma": ("float", 0.1),
    "train.beta1": ("float", 0.9),
    "train.beta2": ("float", 0.999),
    "train.eps": ("float", 1e-8),
    "train.weight_decay": ("float", 0.05),
    "train.p_cross": ("float", 0.5),
    "train.checkpoint_every": ("int", 1),
    "train.log_every": ("int", 1),
    "transfer.mode": ("str", "shared_encoder_concat"),  # or channel_stack
    "transfer.head": ("str", "multilabel"),  # multilabel | dense_regression | dense_classification
    "transfer.frozen_trunk": ("bool", False),
    "transfer.sensors": ("strs", ()),  # empty -> all registered sensors
    "transfer.classes": ("int", 4),
    "transfer.steps": ("int", 100),
    "transfer.lr": ("float", 1e-3),
    "transfer.batch": ("int", 8),
    "eval.samples": ("int", 8),
    "reconstruct.samples": ("int", 4),
    "reconstruct.sensor": ("str", ""),  # empty -> first registered sensor
}

# published hyperparameters at full scale, for reference and for runs that
# can afford them; everything else inherits the desk defaults
PAPER_PRESET = {
    "data.width": 192,
    "data.height": 192,
    "model.width": 128,
    "model.depth": 18,
    "model.heads": 8,
    "model.mask_unit": 32,
    "model.mask_ratio": 0.6,
    "model.moe": True,
    "model.num_experts": 8,
    "model.capacity_factor": 1.25,
    "model.aux_weight": 0.01,
    "train.base_batch": 128,
    "train.base_lr": 1e-4,
    "train.epochs": 800,
    "train.warmup_epochs": 10,
    "train.warmup_lr": 5e-7,
    "train.milestones": (700,),
    "train.gamma": 0.1,
    "train.weight_decay": 0.05,
    "train.p_cross": 0.5,
}


class RunConfig:
    """Typed view over the flat key space, with schema defaults filled in."""

    def __init__(self, values=None):
        merged = {k: d for k, (_, d) in SCHEMA.items()}
        for k, v in (values or {}).items():
            if k not in SCHEMA:
                raise ConfigError(f"unknown config key {k!r}")
            merged[k] = v
        self._values = merged

    def __getitem__(self, key):
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        return self._values[key]

    def with_overrides(self, overrides):
        merged = dict(self._values)
        for k, raw in overrides.items():
            if k not in SCHEMA:
                raise ConfigError(f"unknown config key {k!r}")
            merged[k] = _PARSERS[SCHEMA[k][0]](raw) if isinstance(raw, str) else raw
        return RunConfig(merged)

    def to_text(self):
        lines = [f"{k} = {_fmt(self._values[k])}" for k in sorted(self._values)]
        return "\n".join(lines) + "\n"

    def model_config(self):
        return ModelConfig(
            width=self["model.width"],
            depth=self["model.depth"],
            heads=self["model.heads"],
            patch_size=self["model.patch_size"],
            image_w=self["data.width"],
            image_h=self["data.height"],
            mask_unit=self["model.mask_unit"],
            mask_ratio=self["model.mask_ratio"],
            moe=self["model.moe"],
            num_experts=self["model.num_experts"],
            capacity_factor=self["model.capacity_factor"],
            aux_weight=self["model.aux_weight"],
            ffn_mult=self["model.ffn_mult"],
            p_cross=self["train.p_cross"],
        )


def parse_config_text(text):
    """Parse `key = value` lines; `#` starts a comment, blanks are skipped."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            values[key] = _PARSERS[SCHEMA[key][0]](val)
        except ConfigError:
            raise
        except ValueError as e:
            raise ConfigError(f"line {lineno}: bad value for {key}: {e}") from e
    return RunConfig(values)


def load_config(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            return parse_config_text(f.read())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e


def paper_config():
    return RunConfig(dict(PAPER_PRESET))


def desk_config():
    return RunConfig()
