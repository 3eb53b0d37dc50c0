"""Flat ``key = value`` run configuration.

Every key has a typed default (see :data:`DEFAULTS`).  Lines starting with
``#`` are comments.  Unknown keys and unparsable values are rejected with the
offending key and line number.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

from .encoder import ModelConfig
from .synthdata import NoiseConfig, WorldConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


# key -> (default, description)
DEFAULTS: dict[str, tuple[Any, str]] = {
    "seed.world": (0, "attribute codebooks"),
    "seed.data": (1, "training triplets; validation uses seed.data + 10"),
    "seed.train": (2, "parameter init and batch shuffling"),
    "seed.sampler": (3, "fine-grained negative sampling"),
    "world.n_attributes": (4, "attributes per image"),
    "world.n_values": (4, "values per attribute"),
    "world.d_img": (32, "image feature width"),
    "world.d_txt": (32, "text feature width (even)"),
    "data.n_train": (4096, "training triplets"),
    "data.n_val": (512, "validation triplets"),
    "data.p_img": (0.3, "probability of image noise"),
    "data.sigma_img": (0.5, "image noise scale"),
    "data.p_txt": (0.2, "probability of vague text"),
    "data.p_mismatch": (0.2, "probability of a mismatched text"),
    "data.ambiguous_attribute": (-1, "attribute rendered ambiguous (-1: none)"),
    "data.p_ambiguous": (0.0, "probability of the ambiguous rendering"),
    "data.max_gallery": (4096, "gallery size cap"),
    "model.n_components": (32, "K fine-grained components"),
    "model.dim": (16, "D per component"),
    "model.hidden": (32, "feed-forward width"),
    "train.mode": (7, "ablation mode 0..7"),
    "train.batch_size": (32, "mini-batch size"),
    "train.epochs": (30, "passes over the training set"),
    "train.lr": (1e-3, "AdamW learning rate"),
    "train.beta1": (0.9, "AdamW beta1"),
    "train.beta2": (0.999, "AdamW beta2"),
    "train.eps": (1e-7, "AdamW epsilon"),
    "train.weight_decay": (1e-4, "decoupled weight decay on matrices"),
    "train.lambda_fc": (0.5, "fine-grained contrast weight"),
    "train.lambda_cord": (0.1, "coordination loss weight"),
    "train.cord_sign": ("intent", "coordination ranking sign: intent | printed"),
    "train.grad_clip": (5.0, "global gradient norm cap (0 disables)"),
    "train.n_comp_neg": (-1, "component-wise negatives per anchor (-1: K-1)"),
    "train.n_inst_neg": (-1, "instance-wise negatives per anchor (-1: 2(B-1))"),
    "train.n_mod_neg": (-1, "modality-wise negatives per anchor (-1: 2B)"),
    "eval.sweep_lambda_cord": ([], "lambda_cord values to retrain and evaluate"),
    "eval.sweep_lambda_fc": ([], "lambda_fc values to retrain and evaluate"),
    "eval.component": (0, "component for exemplar inspection"),
    "eval.count": (20, "exemplars per list"),
    "eval.bound_samples": (512, "validation queries for the bound check"),
}


def _parse(key: str, raw: str, default: Any) -> Any:
    raw = raw.strip()
    if isinstance(default, list):
        return [float(x) for x in raw.replace(",", " ").split()] if raw else []
    if isinstance(default, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    return type(default)(raw)


@dataclass
class RunConfig:
    values: dict[str, Any] = field(default_factory=lambda: {k: v[0] for k, v in DEFAULTS.items()})

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def set(self, key: str, value: Any) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        default = DEFAULTS[key][0]
        if isinstance(value, str) and not isinstance(default, str):
            try:
                value = _parse(key, value, default)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key!r}: {exc}") from None
        elif isinstance(default, float) and isinstance(value, int):
            value = float(value)
        self.values[key] = value

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "RunConfig":
        cfg = cls()
        for line_no, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{line_no}: expected 'key = value', got {line!r}")
            key, raw = (s.strip() for s in line.split("=", 1))
            try:
                cfg.set(key, raw)
            except ConfigError as exc:
                raise ConfigError(f"{source}:{line_no}: {exc}") from None
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        with open(path) as f:
            return cls.from_text(f.read(), str(path))

    def to_text(self) -> str:
        out = []
        for key in DEFAULTS:
            v = self.values[key]
            if isinstance(v, list):
                v = ", ".join(repr(float(x)) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            out.append(f"{key} = {v}")
        return "\n".join(out) + "\n"

    def validate(self) -> None:
        try:
            self.noise().validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self["train.mode"] not in range(8):
            raise ConfigError(f"train.mode must be 0..7, got {self['train.mode']}")
        if self["train.batch_size"] < 2:
            raise ConfigError("train.batch_size must be >= 2")
        if self["train.cord_sign"] not in ("intent", "printed"):
            raise ConfigError("train.cord_sign must be 'intent' or 'printed'")
        for key in ("data.n_train", "data.n_val", "model.n_components", "model.dim", "model.hidden"):
            if self[key] < 1:
                raise ConfigError(f"{key} must be positive")
        if self["train.epochs"] < 0:
            raise ConfigError("train.epochs must be >= 0")

    # typed views -------------------------------------------------------------

    def world(self) -> WorldConfig:
        return WorldConfig(self["world.n_attributes"], self["world.n_values"],
                           self["world.d_img"], self["world.d_txt"])

    def noise(self) -> NoiseConfig:
        return NoiseConfig(self["data.p_img"], self["data.sigma_img"], self["data.p_txt"],
                           self["data.p_mismatch"], self["data.ambiguous_attribute"], self["data.p_ambiguous"])

    def model(self) -> ModelConfig:
        return ModelConfig(self["model.n_components"], self["model.dim"], self["model.hidden"],
                           self["world.d_txt"], self["world.d_img"])

    def train(self) -> TrainConfig:
        return TrainConfig(
            mode=self["train.mode"], batch_size=self["train.batch_size"], epochs=self["train.epochs"],
            lr=self["train.lr"], beta1=self["train.beta1"], beta2=self["train.beta2"], eps=self["train.eps"],
            weight_decay=self["train.weight_decay"], lambda_fc=self["train.lambda_fc"],
            lambda_cord=self["train.lambda_cord"], cord_sign=self["train.cord_sign"],
            grad_clip=self["train.grad_clip"], n_comp_neg=self["train.n_comp_neg"],
            n_inst_neg=self["train.n_inst_neg"], n_mod_neg=self["train.n_mod_neg"],
            seed=self["seed.train"], sampler_seed=self["seed.sampler"],
        )
