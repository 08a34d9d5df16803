"""Training configuration: defaults, flat key=value files, and hashing."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    # Loss weights.
    lambda_mcr: float = 1.0
    lambda_r: float = 3.0
    lambda_c: float = 3.0
    lambda_a: float = 1.0
    r1_gamma: float = 1.0
    # Optimizers (generator / discriminator).
    lr_g: float = 1e-5
    lr_d: float = 1e-6
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    grad_clip: float = 0.0  # global-norm safety net; 0 disables
    # Loop.
    batch_size: int = 16
    iterations: int = 1000
    seed: int = 0
    log_interval: int = 10
    checkpoint_interval: int = 500
    # Ablation switches.
    use_mcr_ss: bool = True
    use_mcr_sgn: bool = True
    use_simple_sdm: bool = True
    use_skew: bool = True
    use_kurt: bool = True
    use_style_align: bool = True
    # Data shape.
    frame_len: int = 200
    n_joints: int = 21
    n_styles: int = 2
    crop_min: int = 0  # 0 -> frame_len // 8
    # Architecture.
    d_embed: int = 32
    d_model: int = 64
    d_proj: int = 64
    d_stat_inner: int = 8
    enc_blocks: int = 2
    dec_blocks: int = 2
    heads: int = 1
    ff_mult: int = 2
    d_disc: int = 32
    disc_blocks: int = 3
    # Numerical guards.
    eps_stats: float = 1e-5
    eps_in: float = 1e-5

    def effective_crop_min(self) -> int:
        return self.crop_min if self.crop_min > 0 else max(1, self.frame_len // 8)

    def dump(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        """Hash of everything that determines model structure and loss wiring.

        Loop bookkeeping (iterations, seed, intervals, batch size) is
        excluded so a checkpoint can resume with a longer schedule.
        """
        skip = {"iterations", "seed", "log_interval", "checkpoint_interval", "batch_size"}
        parts = []
        for f in dataclasses.fields(self):
            if f.name in skip:
                continue
            parts.append(f"{f.name}={getattr(self, f.name)!r}")
        return hashlib.sha256(";".join(parts).encode()).hexdigest()


_BOOL_WORDS = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Parse a flat ``key = value`` document; unknown keys are rejected."""
    cfg = dataclasses.replace(base) if base is not None else TrainConfig()
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        kind = types[key]
        try:
            if kind in ("bool", bool):
                parsed = _BOOL_WORDS[value.lower()]
            elif kind in ("int", int):
                parsed = int(value)
            else:
                parsed = float(value)
        except (KeyError, ValueError):
            raise ConfigError(f"line {lineno}: bad value {value!r} for {key}") from None
        setattr(cfg, key, parsed)
    return cfg


def load_config(path, base: TrainConfig | None = None) -> TrainConfig:
    with open(path) as fh:
        return parse_config(fh.read(), base=base)
