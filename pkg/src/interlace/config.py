"""Flat key = value run configuration with two built-in size profiles."""

from __future__ import annotations

from dataclasses import dataclass, fields

from .autodiff import ConfigurationError


@dataclass
class Config:
    # model sizes
    n_classes: int = 4
    heads: int = 4
    enc_layers: int = 3
    blocks: int = 2            # interlaced decoder blocks
    dim: int = 32
    mlp_width: int = 64
    conv_mid: int = 8
    views: int = 8             # views sampled per scene per step
    cell_size: float = 0.45
    # objective
    alpha: float = 1.0         # contrastive weight
    enc_weight: float = 1.0
    dec_weight: float = 2.0
    # optimizer
    lr: float = 3e-3
    weight_decay: float = 1e-4
    batch_size: int = 8
    epochs: int = 50
    seed: int = 0
    # inference
    cam_layers: int = 3        # encoder layers averaged for CAM refinement
    threshold: float = 0.5
    # data / modes
    data_dir: str = ""
    val_dir: str = ""
    pose_extension: bool = False
    three_d_only: bool = False
    eval_every: int = 0        # validation mIoU cadence in epochs, 0 = off

    def validate(self):
        for name in ("n_classes", "heads", "enc_layers", "blocks", "dim",
                     "mlp_width", "conv_mid", "views", "batch_size", "epochs"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.dim % self.heads != 0:
            raise ConfigurationError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.alpha < 0:
            raise ConfigurationError("alpha must be nonnegative")
        if self.cell_size <= 0:
            raise ConfigurationError("cell_size must be positive")
        return self


def paper_profile() -> Config:
    """Sizes matching the full-scale training setup (slow on one CPU)."""
    return Config(dim=96, mlp_width=96, views=16, batch_size=32,
                  lr=1e-2, epochs=500, cell_size=0.25,
                  alpha=0.5, dec_weight=1.0)


_BOOL = {"true": True, "false": False, "1": True, "0": False,
         "yes": True, "no": False}


def parse_config(text: str) -> Config:
    cfg = Config()
    known = {f.name: f.type for f in fields(Config)}
    types = {f.name: type(getattr(cfg, f.name)) for f in fields(Config)}
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {ln}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key == "profile":
            if value == "paper":
                cfg = paper_profile()
            elif value != "desk":
                raise ConfigurationError(f"line {ln}: unknown profile {value!r}")
            continue
        if key not in known:
            raise ConfigurationError(f"line {ln}: unknown key {key!r}")
        t = types[key]
        try:
            if t is bool:
                cfg_val = _BOOL[value.lower()]
            else:
                cfg_val = t(value)
        except (ValueError, KeyError) as err:
            raise ConfigurationError(f"line {ln}: bad value for {key}: {value!r}") from err
        setattr(cfg, key, cfg_val)
    return cfg.validate()


def serialize_config(cfg: Config) -> str:
    lines = []
    for f in fields(Config):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
