"""Model and training configuration, loaded from YAML documents."""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

VARIANTS = ("sqvae2", "rsqvae", "hybrid", "vqvae2", "rqvae", "vqvae")
STOCHASTIC = ("sqvae2", "rsqvae", "hybrid")
LAYER_KINDS = ("first", "injected", "residual")


class ConfigError(ValueError):
    pass


@dataclass
class LayerSpec:
    kind: str
    resolution: int
    codebook_size: int


@dataclass
class ModelConfig:
    variant: str = "sqvae2"
    layers: list = field(default_factory=lambda: [LayerSpec("first", 8, 32), LayerSpec("injected", 16, 32)])
    d_b: int = 16
    input_shape: tuple = (3, 32, 32)
    hidden: int = 32
    n_res: int = 2
    c_mid: float = 0.5
    shared_codebook: bool = False
    progressive: bool = False
    s2_init: float = 1.0
    beta: float = 0.25
    ema_decay: float = 0.99
    codebook_reset: bool = False
    reset_threshold: float = 1.0
    kmeans_init: bool = False
    objective: str = "default"  # "naive" selects the unstable per-layer RSQ-VAE ELBO

    def __post_init__(self):
        self.layers = [l if isinstance(l, LayerSpec) else LayerSpec(**l) for l in self.layers]
        self.input_shape = tuple(self.input_shape)

    @property
    def num_layers(self):
        return len(self.layers)

    @property
    def stochastic(self):
        return self.variant in STOCHASTIC

    @property
    def resolutions(self):
        """Distinct latent resolutions, coarsest first."""
        out = []
        for l in self.layers:
            if not out or out[-1] != l.resolution:
                out.append(l.resolution)
        return out

    @property
    def groups(self):
        """Layer indices (0-based) grouped by resolution: the hybrid l_r sets."""
        out = []
        for i, l in enumerate(self.layers):
            if l.kind in ("first", "injected"):
                out.append([i])
            else:
                out[-1].append(i)
        return out

    def sites(self, layer):
        r = self.layers[layer].resolution
        return r * r

    def bits(self):
        import math

        return sum(self.sites(i) * math.log2(l.codebook_size) for i, l in enumerate(self.layers))

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if not self.layers:
            raise ConfigError("model needs at least one layer")
        for l in self.layers:
            if l.kind not in LAYER_KINDS:
                raise ConfigError(f"unknown layer kind {l.kind!r}")
            if l.codebook_size < 1 or l.resolution < 1:
                raise ConfigError("codebook_size and resolution must be positive")
        if self.layers[0].kind != "first":
            raise ConfigError("layer 1 must be of kind 'first'")
        for prev, cur in zip(self.layers, self.layers[1:]):
            if cur.kind == "first":
                raise ConfigError("only layer 1 may be of kind 'first'")
            if cur.kind == "injected" and cur.resolution <= prev.resolution:
                raise ConfigError("injected layers must strictly increase resolution")
            if cur.kind == "residual" and cur.resolution != prev.resolution:
                raise ConfigError("residual layers keep the previous layer's resolution")
        kinds = {l.kind for l in self.layers[1:]}
        if self.variant in ("sqvae2", "vqvae2") and kinds - {"injected"}:
            raise ConfigError(f"{self.variant} allows only injected layers after the first")
        if self.variant in ("rsqvae", "rqvae") and kinds - {"residual"}:
            raise ConfigError(f"{self.variant} allows only residual layers after the first")
        if self.variant == "vqvae" and self.num_layers != 1:
            raise ConfigError("vqvae has exactly one layer")
        c, h, w = self.input_shape
        if h != w:
            raise ConfigError("only square inputs are supported")
        for r in self.resolutions:
            ratio = h // r
            if h % r or ratio & (ratio - 1):
                raise ConfigError(f"latent resolution {r} must divide input size {h} by a power of two")
        if self.shared_codebook and len({l.codebook_size for l in self.layers}) != 1:
            raise ConfigError("shared codebook requires equal codebook sizes")
        if not self.beta > 0:
            raise ConfigError("beta must be positive")
        if not 0 < self.ema_decay < 1:
            raise ConfigError("EMA decay must lie in (0, 1)")
        if self.s2_init <= 0:
            raise ConfigError("s2_init must be positive")
        if self.objective not in ("default", "naive"):
            raise ConfigError("objective must be 'default' or 'naive'")
        if self.objective == "naive" and self.variant != "rsqvae":
            raise ConfigError("the naive objective applies to rsqvae only")
        return self


def preset_layers(variant, num_layers, codebook_size, top_resolution=8):
    if variant in ("sqvae2", "vqvae2"):
        return [LayerSpec("first" if i == 0 else "injected", top_resolution * 2 ** i, codebook_size)
                for i in range(num_layers)]
    if variant in ("rsqvae", "rqvae"):
        return [LayerSpec("first" if i == 0 else "residual", top_resolution, codebook_size)
                for i in range(num_layers)]
    if variant == "vqvae":
        return [LayerSpec("first", top_resolution, codebook_size)]
    raise ConfigError(f"no layer preset for variant {variant!r}; list layers explicitly")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 20
    patience: int = 3
    seed: int = 0
    temperature_floor: float = 0.0
    temperature_rate: float = 1e-5
    adam_betas: tuple = (0.9, 0.9)
    adam_eps: float = 1e-8
    sigma2_floor: float = 1e-6
    grad_clip: float | None = None
    precision: str = "float32"
    checkpoint_every: int = 1  # epochs
    log_every: int = 1  # steps

    def __post_init__(self):
        self.adam_betas = tuple(self.adam_betas)

    def validate(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("lr and batch_size must be positive, epochs non-negative")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.precision not in ("float32", "float64"):
            raise ConfigError("precision must be float32 or float64")
        return self


@dataclass
class DataConfig:
    source: str = "synth"  # synth | cifar10 | folder
    path: str | None = None
    n_train: int = 5000
    n_val: int = 500
    n_test: int = 1000
    image_size: int = 32
    seed: int = 0


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self):
        self.model.validate()
        self.train.validate()
        if self.model.input_shape[1] != self.data.image_size:
            raise ConfigError("model input size differs from data image_size")
        return self

    def to_dict(self):
        d = asdict(self)
        d["model"]["input_shape"] = list(self.model.input_shape)
        d["train"]["adam_betas"] = list(self.train.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d):
        d = copy.deepcopy(d or {})
        unknown = set(d) - {"model", "train", "data"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        return cls(
            model=_build(ModelConfig, d.get("model", {}), "model"),
            train=_build(TrainConfig, d.get("train", {}), "train"),
            data=_build(DataConfig, d.get("data", {}), "data"),
        )

    def content_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha1(b"blob %d\0" % len(blob) + blob).hexdigest()


def _build(cls, values, section):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"[{section}]: {exc}") from None


def load_config(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    text = path.read_text()
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ConfigError(f"{path}: parse error{where}: {getattr(exc, 'problem', exc)}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return RunConfig.from_dict(data)


def dump_config(cfg):
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
