"""Run configuration: plain ``key = value`` files with dotted keys.

The file format is deliberately minimal — one assignment per line, ``#``
starts a comment, unknown keys are a hard error so typos cannot silently
fall back to defaults.  ``network.*`` keys size the model, ``foresight.*``
keys parameterize the refinement module, everything else belongs to the
training loop.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .foresight import ForesightConfig
from .network import ModalitySpec, NetworkConfig

VARIANTS = ("ufrnn", "sh", "sh_noise")


class ConfigError(Exception):
    pass


@dataclass
class TrainingConfig:
    variant: str = "ufrnn"
    epochs: int = 3000
    lr: float = 1e-4
    batch_size: int = 5
    seed: int = 0
    checkpoint_every: int = 100
    # write 0.000 in the metrics seconds column so reruns are byte-identical;
    # disable to record real wall time
    deterministic_timing: bool = True
    # ablation switch: refinement/noise hooks during training (evaluation
    # always applies the variant's hook)
    foresight_during_training: bool = True
    lower_hidden: int = 50
    shared_hidden: int = 50
    input_proj: int = 16
    feedback_proj: int = 16
    shared_proj: int = 32
    tau_lower: float = 2.0
    tau_shared: float = 12.0
    t_max: int = 10
    var_floor: float = 1e-6
    foresight: ForesightConfig = field(default_factory=ForesightConfig)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant '{self.variant}' "
                              f"(choose from {', '.join(VARIANTS)})")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")
        if self.lr <= 0.0:
            raise ConfigError("lr must be positive")

    def network_config(self, modalities) -> NetworkConfig:
        """Build the model shape for the dataset's (name, dim) modalities."""
        return NetworkConfig(
            modalities=tuple(ModalitySpec(name, dim, self.lower_hidden)
                             for name, dim in modalities),
            shared_hidden=self.shared_hidden,
            input_proj=self.input_proj,
            feedback_proj=self.feedback_proj,
            shared_proj=self.shared_proj,
            tau_lower=self.tau_lower,
            tau_shared=self.tau_shared,
            t_max=self.t_max,
            var_floor=self.var_floor,
        )


# key -> (attribute path, parser); parsers raise ValueError on bad input
def _bool(text: str) -> bool:
    if text in ("true", "false"):
        return text == "true"
    raise ValueError(f"expected true or false, got '{text}'")


def _optional(parser):
    def parse(text):
        return None if text == "none" else parser(text)
    return parse


_SCHEMA = {
    "variant": ("variant", str),
    "epochs": ("epochs", int),
    "lr": ("lr", float),
    "batch_size": ("batch_size", int),
    "seed": ("seed", int),
    "checkpoint_every": ("checkpoint_every", int),
    "deterministic_timing": ("deterministic_timing", _bool),
    "foresight_during_training": ("foresight_during_training", _bool),
    "network.lower_hidden": ("lower_hidden", int),
    "network.shared_hidden": ("shared_hidden", int),
    "network.input_proj": ("input_proj", int),
    "network.feedback_proj": ("feedback_proj", int),
    "network.shared_proj": ("shared_proj", int),
    "network.tau_lower": ("tau_lower", float),
    "network.tau_shared": ("tau_shared", float),
    "network.t_max": ("t_max", int),
    "network.var_floor": ("var_floor", float),
    "foresight.n_candidates": ("foresight.n_candidates", int),
    "foresight.t_max": ("foresight.t_max", int),
    "foresight.sigma_min": ("foresight.sigma_min", float),
    "foresight.sigma_max": ("foresight.sigma_max", float),
    "foresight.perturb_target": ("foresight.perturb_target", str),
    "foresight.baseline_candidate": ("foresight.baseline_candidate", _bool),
    "foresight.use_step_head": ("foresight.use_step_head", _bool),
    "foresight.forced_index": ("foresight.forced_index", _optional(int)),
    "foresight.trigger_threshold": ("foresight.trigger_threshold", _optional(float)),
}


def parse_config_text(text: str, source: str = "<config>") -> TrainingConfig:
    """Parse ``key = value`` lines into a TrainingConfig.

    Unknown keys, unparseable values, and lines without '=' are hard errors
    naming the source and line number.
    """
    plain = {}
    foresight_fields = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source} line {lineno}: expected 'key = value', "
                              f"got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _SCHEMA:
            raise ConfigError(f"{source} line {lineno}: unknown config key '{key}'")
        attr, parser = _SCHEMA[key]
        try:
            parsed = parser(value)
        except ValueError as e:
            raise ConfigError(f"{source} line {lineno}: bad value for '{key}': {e}") from e
        if attr.startswith("foresight."):
            foresight_fields[attr.split(".", 1)[1]] = parsed
        else:
            plain[attr] = parsed
    try:
        foresight = ForesightConfig(**foresight_fields)
        return TrainingConfig(foresight=foresight, **plain)
    except ValueError as e:
        raise ConfigError(f"{source}: {e}") from e


def load_config(path) -> TrainingConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(), source=str(path))


def config_to_dict(config: TrainingConfig, modalities=None, bounds=None) -> dict:
    """Flat JSON-ready echo of a config, embedded in checkpoints.

    modalities: (name, dim) pairs; bounds: modality -> (dim, 2) raw bounds.
    Together with the config these are everything an evaluator needs.
    """
    echo = {}
    for key, (attr, _) in _SCHEMA.items():
        if attr.startswith("foresight."):
            echo[key] = getattr(config.foresight, attr.split(".", 1)[1])
        else:
            echo[key] = getattr(config, attr)
    if modalities is not None:
        echo["modalities"] = [[name, int(dim)] for name, dim in modalities]
    if bounds is not None:
        echo["bounds"] = {name: [[float(lo), float(hi)] for lo, hi in b]
                          for name, b in bounds.items()}
    return echo


def config_from_dict(echo: dict) -> TrainingConfig:
    """Inverse of config_to_dict for the config portion of a checkpoint."""
    plain = {}
    foresight_fields = {}
    for key, value in echo.items():
        if key in ("modalities", "bounds"):
            continue
        if key not in _SCHEMA:
            raise ConfigError(f"unknown config key '{key}' in checkpoint echo")
        attr, _ = _SCHEMA[key]
        if attr.startswith("foresight."):
            foresight_fields[attr.split(".", 1)[1]] = value
        else:
            plain[attr] = value
    return TrainingConfig(foresight=ForesightConfig(**foresight_fields), **plain)


def default_config_text(config: TrainingConfig | None = None) -> str:
    """Render a config with every known key spelled out — a template users
    can edit, and a canonical snapshot when no file was supplied."""
    echo = config_to_dict(config or TrainingConfig())
    lines = []
    for key in _SCHEMA:
        value = echo[key]
        if value is None:
            text = "none"
        elif isinstance(value, bool):
            text = "true" if value else "false"
        else:
            text = repr(value) if isinstance(value, float) else str(value)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"
