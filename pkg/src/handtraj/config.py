"""Run configuration: a flat dataclass with strict dict round-tripping.

Unknown keys are rejected with their full path so a typo in a JSON config
fails loudly instead of silently training the wrong model.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, asdict


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    # sequence layout
    n_past: int = 10
    n_future: int = 4
    # widths
    d_model: int = 64
    d_sem: int = 16
    d_motion: int = 16
    d_state: int = 16
    d_conv: int = 2
    expand: int = 1
    n_blocks: int = 2
    # diffusion
    s_total: int = 100
    schedule_offset: float = 1e-4
    respacing: int = 20
    cdc: bool = True
    # variants (ablation surface)
    motion_mode: str = "concat"   # concat | sum | fused-input | none
    scan_mode: str = "forward"    # forward | bidirectional
    future_semantics: str = "tile-last"  # tile-last | zeros
    # losses
    loss_weights: tuple = (1.0, 1.0, 0.2, 0.01, 0.01)
    recon_every: int = 4  # add the decoded-trajectory term when s % recon_every == 0
    # optimization
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 32
    epochs: int = 30
    grad_clip: float = 1.0
    seed: int = 0
    # geometry / canvas
    canvas_width: int = 512
    canvas_height: int = 512

    def __post_init__(self):
        if self.motion_mode not in ("concat", "sum", "fused-input", "none"):
            raise ConfigError(f"motion_mode: unknown value {self.motion_mode!r}")
        if self.scan_mode not in ("forward", "bidirectional"):
            raise ConfigError(f"scan_mode: unknown value {self.scan_mode!r}")
        if self.future_semantics not in ("tile-last", "zeros"):
            raise ConfigError(f"future_semantics: unknown value {self.future_semantics!r}")
        if self.n_past < 1 or self.n_future < 1:
            raise ConfigError("n_past and n_future must be >= 1")
        if self.s_total < 1:
            raise ConfigError("s_total must be >= 1")
        if not 1 <= self.respacing:
            raise ConfigError("respacing must be >= 1")
        if len(self.loss_weights) != 5:
            raise ConfigError("loss_weights must have exactly 5 entries")
        if any(w < 0 for w in self.loss_weights):
            raise ConfigError("loss_weights must be nonnegative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss_weights"] = list(d["loss_weights"])
        return d

    @classmethod
    def from_dict(cls, d: dict, path: str = "config") -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"{path}.{unknown[0]}: unknown key")
        defaults = cls()
        kwargs = {}
        for name, v in d.items():
            ref = getattr(defaults, name)
            if name == "loss_weights":
                if not isinstance(v, (list, tuple)):
                    raise ConfigError(f"{path}.{name}: expected a list of 5 numbers")
                v = tuple(float(w) for w in v)
            elif isinstance(ref, bool):
                if not isinstance(v, bool):
                    raise ConfigError(f"{path}.{name}: expected a boolean")
            elif isinstance(ref, int):
                if isinstance(v, bool) or not isinstance(v, int):
                    raise ConfigError(f"{path}.{name}: expected an integer")
            elif isinstance(ref, float):
                if isinstance(v, bool) or not isinstance(v, (int, float)):
                    raise ConfigError(f"{path}.{name}: expected a number")
                v = float(v)
            elif isinstance(ref, str) and not isinstance(v, str):
                raise ConfigError(f"{path}.{name}: expected a string")
            kwargs[name] = v
        return cls(**kwargs)


def toy_config(**overrides) -> ModelConfig:
    """Small preset used by the bundled experiments and tests."""
    base = dict(d_model=64, d_sem=16, d_motion=16, n_blocks=2, s_total=100,
                respacing=20, epochs=30, batch_size=32, lr=1e-3)
    base.update(overrides)
    return ModelConfig(**base)


def reference_config(**overrides) -> ModelConfig:
    """Full-scale reference preset; far too slow to train in CI but
    constructible and steppable."""
    base = dict(d_model=512, d_sem=64, d_motion=128, n_blocks=6, d_state=16,
                s_total=1000, respacing=20, lr=2e-4, batch_size=64)
    base.update(overrides)
    return ModelConfig(**base)
