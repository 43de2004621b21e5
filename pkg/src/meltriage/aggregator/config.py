"""Aggregator architecture configuration."""

from __future__ import annotations

from dataclasses import dataclass, fields

from ..errors import ValidationError


@dataclass(frozen=True)
class AggregatorConfig:
    feature_dim: int = 192
    model_dim: int = 192
    n_layers: int = 2
    n_heads: int = 3
    mlp_ratio: int = 4
    attention_dropout_p: float = 0.5
    n_classes: int = 2

    def __post_init__(self):
        for name in ("feature_dim", "model_dim", "n_layers", "n_heads", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be at least 1")
        if self.model_dim % self.n_heads != 0:
            raise ValidationError(
                f"model_dim {self.model_dim} not divisible by n_heads {self.n_heads}"
            )
        if not 0.0 <= self.attention_dropout_p < 1.0:
            raise ValidationError(
                f"attention_dropout_p must be in [0,1), got {self.attention_dropout_p}"
            )
        if self.n_classes != 2:
            raise ValidationError("the classifier head is two-class")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.n_heads

    @property
    def hidden_dim(self) -> int:
        return self.model_dim * self.mlp_ratio

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, obj: dict) -> "AggregatorConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValidationError(f"unknown config fields {sorted(unknown)}")
        return cls(**obj)
