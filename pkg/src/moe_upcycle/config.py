"""Architecture descriptors for the dense and MoE toy models."""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from pathlib import Path

import yaml

from .errors import ConfigError

ROUTER_ORDERS = ("softmax_then_topk", "topk_then_softmax")
COMPENSATIONS = ("none", "weight_scaling", "output_scale", "post_expert_layernorm")


@dataclass(frozen=True)
class MoeConfig:
    """MoE layer shape: expansion ``E``, granularity ``G``, top-k ``T`` and shared experts ``S``.

    ``output_scale`` is only read when ``compensation == "output_scale"``; when
    left as None it defaults to ``E*G**2/T``.
    """

    expansion: int
    granularity: int = 1
    topk: int = 1
    shared_experts: int = 0
    router_order: str = "softmax_then_topk"
    compensation: str = "none"
    output_scale: float | None = None
    aux_coeff: float = 1e-2
    z_coeff: float = 0.0

    @property
    def num_experts(self) -> int:
        return self.expansion * self.granularity

    @property
    def output_scale_value(self) -> float:
        if self.output_scale is not None:
            return float(self.output_scale)
        return self.expansion * self.granularity**2 / self.topk

    def validate(self, ffn_hidden: int | None = None) -> None:
        for name in ("expansion", "granularity", "topk"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.shared_experts < 0:
            raise ConfigError("shared_experts must be >= 0")
        if self.topk > self.num_experts:
            raise ConfigError(f"topk {self.topk} exceeds the number of experts {self.num_experts}")
        if self.router_order not in ROUTER_ORDERS:
            raise ConfigError(f"router_order must be one of {ROUTER_ORDERS}")
        if self.router_order == "topk_then_softmax" and self.topk < 2:
            raise ConfigError(
                "topk_then_softmax requires topk > 1: a softmax over one logit is constant and has no gradient"
            )
        if self.compensation not in COMPENSATIONS:
            raise ConfigError(f"compensation must be one of {COMPENSATIONS}")
        if self.aux_coeff < 0 or self.z_coeff < 0:
            raise ConfigError("loss coefficients must be non-negative")
        if ffn_hidden is not None and ffn_hidden % self.granularity:
            raise ConfigError(f"granularity {self.granularity} does not divide ffn_hidden {ffn_hidden}")

    def label(self) -> str:
        s = f"E{self.expansion}G{self.granularity}T{self.topk}"
        return s + (f"S{self.shared_experts}" if self.shared_experts else "")


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int
    hidden_size: int
    ffn_hidden: int
    vocab_size: int
    activation: str = "squared_relu"
    moe: MoeConfig | None = None

    @property
    def model_kind(self) -> str:
        return "dense" if self.moe is None else "moe"

    @property
    def expert_hidden(self) -> int:
        return self.ffn_hidden // (self.moe.granularity if self.moe else 1)

    def validate(self) -> "ModelConfig":
        if self.num_layers < 1:
            raise ConfigError("num_layers must be >= 1")
        if self.hidden_size < 1 or self.ffn_hidden < 1:
            raise ConfigError("hidden_size and ffn_hidden must be >= 1")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2")
        if self.activation not in ("squared_relu", "swiglu"):
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.moe is not None:
            self.moe.validate(self.ffn_hidden)
        return self

    def with_moe(self, moe: MoeConfig | None) -> "ModelConfig":
        return replace(self, moe=moe).validate()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model_kind"] = self.model_kind
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        kind = d.pop("model_kind", None)
        moe = d.pop("moe", None)
        try:
            cfg = cls(**d, moe=MoeConfig(**moe) if moe else None)
        except TypeError as exc:
            raise ConfigError(f"bad model config: {exc}") from None
        if kind is not None and kind != cfg.model_kind:
            raise ConfigError(f"model_kind {kind!r} disagrees with the presence of an moe section")
        return cfg.validate()


def load_yaml(path: str | Path) -> dict:
    try:
        with open(path) as f:
            data = yaml.safe_load(f)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must contain a mapping")
    return data


def load_model_config(path: str | Path) -> ModelConfig:
    data = load_yaml(path)
    return ModelConfig.from_dict(data.get("model", data))
