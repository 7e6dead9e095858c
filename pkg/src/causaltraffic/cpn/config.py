from __future__ import annotations

from dataclasses import asdict, dataclass, fields

from ..features import D_C

# divides raw causal features so every column is roughly order one
FEATURE_SCALE = (10.0, 1.0, 1440.0, 1.0, 5.0, 1.0)


@dataclass(frozen=True)
class ModelConfig:
    lookback: int = 15
    horizon: int = 3
    hidden: int = 64
    layers: int = 2
    heads: int = 4
    neighbors: int = 5
    input_dim: int = 3
    causal_dim: int = D_C
    feature_scale: tuple[float, ...] = FEATURE_SCALE

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError(f"hidden size {self.hidden} not divisible by {self.heads} heads")
        if self.hidden % 2:
            raise ValueError("hidden size must be even for the sinusoidal encoding")
        if not self.lookback >= self.horizon >= 1:
            raise ValueError("need lookback >= horizon >= 1")
        if self.layers < 1 or self.neighbors < 0 or self.input_dim < 1:
            raise ValueError("layers >= 1, neighbors >= 0 and input_dim >= 1 required")
        if len(self.feature_scale) != self.causal_dim or min(self.feature_scale) <= 0:
            raise ValueError("feature_scale needs one positive entry per causal feature")
        object.__setattr__(self, "feature_scale", tuple(float(s) for s in self.feature_scale))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["feature_scale"] = list(self.feature_scale)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config fields: {sorted(unknown)}")
        d = dict(d)
        if "feature_scale" in d:
            d["feature_scale"] = tuple(d["feature_scale"])
        return cls(**d)
