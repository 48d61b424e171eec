"""Prototype classifier: MLP backbone, sub-prototype bank, mapped similarities.

Classification scores an input by cosine similarity between its feature
vector and every sub-prototype, aggregates sub-prototype scores into one
activation per prototype, and feeds those activations through a linear
head. Similarities are additionally mapped into [0, 1] for the adaptation
loss. The adaptable parameter subsets (norm parameters, attention biases,
mixing layer) are resolved by name; prototypes and head weights are never
adaptable.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DegenerateInputError, DomainError, FormatError, ShapeError

EPS_CLAMP = 1e-7

MODEL_MAGIC = b"PTTA1"

NORM_KINDS = ("layer_norm", "batch_norm")
MAPPING_KINDS = ("linear", "temp_sigmoid", "log_inverse_distance")
AGGREGATIONS = ("max", "mean", "topk_mean")
PARAM_MODES = ("norm_only", "norm_plus_addons", "all_adaptive")

_DOMAIN_TOL = 1e-6


def canonical_dumps(obj) -> str:
    """Serialize with sorted keys and no whitespace so equal objects give equal bytes."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


@dataclass(frozen=True)
class BackboneConfig:
    """Shape of the feature extractor: linear -> norm -> bias -> tanh per layer."""

    input_dim: int = 32
    hidden_dims: tuple[int, ...] = (64,)
    norm_kind: str = "layer_norm"
    has_attention_bias: bool = True
    has_onexone: bool = False

    def __post_init__(self):
        if self.input_dim < 1:
            raise ConfigError(f"input_dim must be positive, got {self.input_dim}")
        object.__setattr__(self, "hidden_dims", tuple(int(d) for d in self.hidden_dims))
        if not self.hidden_dims or any(d < 1 for d in self.hidden_dims):
            raise ConfigError(f"need at least one positive hidden dim, got {self.hidden_dims}")
        if self.norm_kind not in NORM_KINDS:
            raise ConfigError(f"norm_kind must be one of {NORM_KINDS}, got {self.norm_kind!r}")

    @property
    def feature_dim(self) -> int:
        return self.hidden_dims[-1]

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "norm_kind": self.norm_kind,
            "has_attention_bias": self.has_attention_bias,
            "has_onexone": self.has_onexone,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        return cls(
            input_dim=int(d["input_dim"]),
            hidden_dims=tuple(d["hidden_dims"]),
            norm_kind=d["norm_kind"],
            has_attention_bias=bool(d["has_attention_bias"]),
            has_onexone=bool(d["has_onexone"]),
        )


@dataclass(frozen=True)
class MappingScheme:
    """How raw similarities become s-bar values in [eps, 1-eps]."""

    kind: str = "log_inverse_distance"
    temperature: float = 5.0

    def __post_init__(self):
        if self.kind not in MAPPING_KINDS:
            raise ConfigError(f"mapping kind must be one of {MAPPING_KINDS}, got {self.kind!r}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "temperature": self.temperature}

    @classmethod
    def from_dict(cls, d: dict) -> "MappingScheme":
        return cls(kind=d["kind"], temperature=float(d["temperature"]))


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    num_classes: int = 5
    protos_per_class: int = 10
    sub_prototypes: int = 4
    aggregation: str = "topk_mean"
    agg_k: int | None = None
    mapping: MappingScheme = field(default_factory=MappingScheme)

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")
        if self.protos_per_class < 1 or self.sub_prototypes < 1:
            raise ConfigError("need at least one prototype per class and one sub-prototype")
        if self.aggregation not in AGGREGATIONS:
            raise ConfigError(f"aggregation must be one of {AGGREGATIONS}, got {self.aggregation!r}")
        if self.agg_k is None and self.aggregation == "topk_mean":
            # halfway between max and mean pooling
            object.__setattr__(self, "agg_k", math.ceil(self.sub_prototypes / 2))
        if self.agg_k is not None and not 1 <= self.agg_k <= self.sub_prototypes:
            raise ConfigError(f"agg_k must be in [1, {self.sub_prototypes}], got {self.agg_k}")

    @property
    def num_prototypes(self) -> int:
        return self.num_classes * self.protos_per_class

    def to_dict(self) -> dict:
        return {
            "backbone": self.backbone.to_dict(),
            "num_classes": self.num_classes,
            "protos_per_class": self.protos_per_class,
            "sub_prototypes": self.sub_prototypes,
            "aggregation": self.aggregation,
            "agg_k": self.agg_k,
            "mapping": self.mapping.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            backbone=BackboneConfig.from_dict(d["backbone"]),
            num_classes=int(d["num_classes"]),
            protos_per_class=int(d["protos_per_class"]),
            sub_prototypes=int(d["sub_prototypes"]),
            aggregation=d["aggregation"],
            agg_k=None if d.get("agg_k") is None else int(d["agg_k"]),
            mapping=MappingScheme.from_dict(d["mapping"]),
        )


@dataclass
class BatchOutputs:
    """Everything one forward pass produces, gradients attached where live."""

    features: Tensor  # n x D
    raw_sims: Tensor  # n x P x K
    agg_sims: Tensor  # n x P
    mapped_sims: Tensor  # n x P, in [eps, 1-eps]
    logits: Tensor  # n x C
    probs: Tensor  # n x C
    pseudo_labels: np.ndarray  # n, argmax class per sample
    confidences: np.ndarray  # n, max class probability per sample


class PrototypeModel:
    """Backbone + prototype bank + head with named parameter tensors.

    Parameter names follow a fixed order (backbone layers, mixing layer,
    prototypes, head); serialization and the adaptable-subset resolution
    both key off that order.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.class_of = np.repeat(np.arange(config.num_classes), config.protos_per_class)
        self.params: dict[str, Tensor] = {}
        # batch_norm evaluation statistics, per layer index
        self.running_stats: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self._init_params(np.random.default_rng(seed))

    def _init_params(self, rng: np.random.Generator) -> None:
        cfg = self.config
        bb = cfg.backbone
        d_in = bb.input_dim
        for i, d_out in enumerate(bb.hidden_dims):
            self.params[f"backbone.{i}.weight"] = Tensor(
                rng.normal(0.0, 1.0 / math.sqrt(d_in), size=(d_in, d_out))
            )
            self.params[f"backbone.{i}.norm.gamma"] = Tensor(np.ones(d_out))
            self.params[f"backbone.{i}.norm.beta"] = Tensor(np.zeros(d_out))
            if bb.has_attention_bias:
                self.params[f"backbone.{i}.attn_bias"] = Tensor(np.zeros(d_out))
            if bb.norm_kind == "batch_norm":
                self.running_stats[i] = (np.zeros(d_out), np.ones(d_out))
            d_in = d_out
        if bb.has_onexone:
            d = bb.feature_dim
            mix = np.eye(d) + rng.normal(0.0, 0.01, size=(d, d))
            self.params["backbone.mix.weight"] = Tensor(mix)
        protos = rng.normal(size=(cfg.num_prototypes, cfg.sub_prototypes, bb.feature_dim))
        protos /= np.linalg.norm(protos, axis=-1, keepdims=True)
        self.params["prototypes"] = Tensor(protos)
        # own-class positive, cross-class mildly negative
        head = np.full((cfg.num_classes, cfg.num_prototypes), -0.5)
        head[self.class_of, np.arange(cfg.num_prototypes)] = 1.0
        self.params["head.weight"] = Tensor(head)

    @property
    def prototypes(self) -> Tensor:
        return self.params["prototypes"]

    @property
    def head(self) -> Tensor:
        return self.params["head.weight"]

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    def param_names(self) -> list[str]:
        return list(self.params)

    def adaptable_param_names(self, mode: str) -> list[str]:
        """Resolve a parameter-subset mode to concrete names, in model order."""
        if mode not in PARAM_MODES:
            raise ConfigError(f"param mode must be one of {PARAM_MODES}, got {mode!r}")
        names = []
        for name in self.params:
            if name in ("prototypes", "head.weight"):
                continue
            is_norm = ".norm." in name
            is_addon = name.endswith("attn_bias") or name == "backbone.mix.weight"
            if mode == "norm_only" and is_norm:
                names.append(name)
            elif mode == "norm_plus_addons" and (is_norm or is_addon):
                names.append(name)
            elif mode == "all_adaptive":
                names.append(name)
        return names

    def adaptable_params(self, mode: str) -> list[tuple[str, Tensor]]:
        return [(n, self.params[n]) for n in self.adaptable_param_names(mode)]

    def set_trainable(self, names) -> None:
        wanted = set(names)
        unknown = wanted - set(self.params)
        if unknown:
            raise ConfigError(f"unknown parameter names: {sorted(unknown)}")
        for name, t in self.params.items():
            t.requires_grad = name in wanted
            t.grad = None

    def state_snapshot(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.params.items()}

    def load_snapshot(self, snap: dict[str, np.ndarray]) -> None:
        for name, t in self.params.items():
            t.data = snap[name].copy()
            t.grad = None

    def copy(self) -> "PrototypeModel":
        clone = PrototypeModel(self.config, seed=0)
        clone.load_snapshot(self.state_snapshot())
        clone.running_stats = {
            i: (m.copy(), v.copy()) for i, (m, v) in self.running_stats.items()
        }
        return clone


def log_inverse_kernel(d: Tensor | np.ndarray | float) -> Tensor:
    """Log-inverse distance response before normalization: ln((d+1)/(d+1e-4))."""
    d = ad.as_tensor(d)
    return ad.log(ad.div(ad.add(d, 1.0), ad.add(d, 1e-4)))


def map_similarity(raw: Tensor, scheme: MappingScheme) -> Tensor:
    """Map raw similarities (or distances) into clamped [eps, 1-eps] scores.

    linear and temp_sigmoid read ``raw`` as cosine-like values in [-1, 1];
    log_inverse_distance reads it as non-negative distances, applies the
    log-inverse kernel, then min-max normalizes over the whole block.
    """
    raw = ad.as_tensor(raw)
    lo, hi = EPS_CLAMP, 1.0 - EPS_CLAMP
    if scheme.kind in ("linear", "temp_sigmoid"):
        vals = raw.data
        if (vals < -1.0 - _DOMAIN_TOL).any() or (vals > 1.0 + _DOMAIN_TOL).any():
            worst = float(vals.reshape(-1)[np.argmax(np.abs(vals))])
            raise DomainError(f"similarity {worst} outside [-1, 1]")
        if scheme.kind == "linear":
            mapped = ad.scale(ad.add(raw, 1.0), 0.5)
        else:
            mapped = ad.sigmoid(ad.scale(raw, scheme.temperature))
        return ad.clamp(mapped, lo, hi)
    # log_inverse_distance
    if (raw.data < -_DOMAIN_TOL).any():
        raise DomainError(f"negative distance {float(raw.data.min())}")
    s_raw = log_inverse_kernel(raw)
    s_min = ad.reduce_min(s_raw)
    span = float(s_raw.data.max() - s_raw.data.min())
    if span <= 1e-12:
        # all distances equal: no ordering information, call everything 0.5
        return ad.clamp(ad.add(ad.scale(s_raw, 0.0), 0.5), lo, hi)
    normed = ad.div(ad.sub(s_raw, s_min), ad.sub(ad.reduce_max(s_raw), s_min))
    return ad.clamp(normed, lo, hi)


def _normalize(x: Tensor, model: PrototypeModel, layer: int, use_batch_stats: bool) -> Tensor:
    gamma = model.params[f"backbone.{layer}.norm.gamma"]
    beta = model.params[f"backbone.{layer}.norm.beta"]
    if model.config.backbone.norm_kind == "layer_norm":
        return ad.layer_norm(x, gamma, beta)
    if use_batch_stats:
        return ad.batch_norm(x, gamma, beta)
    return ad.batch_norm(x, gamma, beta, running=model.running_stats[layer])


def backbone_features(model: PrototypeModel, x: Tensor, use_batch_stats: bool = True) -> Tensor:
    h = x
    for i in range(len(model.config.backbone.hidden_dims)):
        h = ad.matmul(h, model.params[f"backbone.{i}.weight"])
        h = _normalize(h, model, i, use_batch_stats)
        bias = model.params.get(f"backbone.{i}.attn_bias")
        if bias is not None:
            h = ad.add(h, bias)
        h = ad.tanh(h)
    mix = model.params.get("backbone.mix.weight")
    if mix is not None:
        h = ad.matmul(h, mix)
    return h


def update_running_stats(model: PrototypeModel, x: np.ndarray) -> None:
    """Recompute batch_norm evaluation statistics from a reference set.

    Walks the backbone layer by layer with current parameters, storing each
    pre-norm activation's mean and variance over the whole set. No-op for
    layer_norm backbones.
    """
    bb = model.config.backbone
    if bb.norm_kind != "batch_norm":
        return
    h = np.asarray(x, dtype=np.float64)
    for i in range(len(bb.hidden_dims)):
        z = h @ model.params[f"backbone.{i}.weight"].data
        mean, var = z.mean(axis=0), z.var(axis=0)
        model.running_stats[i] = (mean, var)
        h = (z - mean) / np.sqrt(var + 1e-5)
        h = h * model.params[f"backbone.{i}.norm.gamma"].data
        h = h + model.params[f"backbone.{i}.norm.beta"].data
        bias = model.params.get(f"backbone.{i}.attn_bias")
        if bias is not None:
            h = h + bias.data
        h = np.tanh(h)


def _aggregate(raw_sims: Tensor, config: ModelConfig) -> Tensor:
    k = {"max": 1, "mean": config.sub_prototypes, "topk_mean": config.agg_k}[config.aggregation]
    return ad.topk_mean(raw_sims, k)


def model_forward(model: PrototypeModel, x: Tensor | np.ndarray, use_batch_stats: bool = True) -> BatchOutputs:
    """Full forward pass: features, similarities, mapped scores, predictions.

    Runs on the active tape, so gradients flow from any loss built on the
    outputs back to whichever parameters currently require gradients.
    batch_norm backbones use current-batch statistics unless
    ``use_batch_stats`` is off, which switches to stored running statistics.
    """
    x = ad.as_tensor(x)
    if x.data.ndim != 2 or x.shape[1] != model.config.backbone.input_dim:
        raise ShapeError(
            f"expected n x {model.config.backbone.input_dim} input, got {x.shape}"
        )
    if not np.isfinite(x.data).all():
        raise DomainError("input contains non-finite values")
    features = backbone_features(model, x, use_batch_stats)
    norms = np.linalg.norm(features.data, axis=1)
    if (norms <= 1e-12).any():
        sample = int(np.argmin(norms))
        raise DegenerateInputError(f"feature collapse: zero-norm feature for sample {sample}")
    n = x.shape[0]
    d = model.config.backbone.feature_dim
    raw_sims = ad.cosine_similarity(ad.reshape(features, (n, 1, 1, d)), model.prototypes)
    agg_sims = _aggregate(raw_sims, model.config)
    if model.config.mapping.kind == "log_inverse_distance":
        # squared euclidean distance between unit vectors: 2 * (1 - cos)
        dist = ad.scale(ad.sub(1.0, agg_sims), 2.0)
        mapped = map_similarity(dist, model.config.mapping)
    else:
        mapped = map_similarity(agg_sims, model.config.mapping)
    logits = ad.matmul(agg_sims, ad.transpose(model.head))
    probs = ad.softmax(logits)
    pseudo_labels = np.argmax(probs.data, axis=1)
    confidences = probs.data[np.arange(n), pseudo_labels].copy()
    return BatchOutputs(
        features=features,
        raw_sims=raw_sims,
        agg_sims=agg_sims,
        mapped_sims=mapped,
        logits=logits,
        probs=probs,
        pseudo_labels=pseudo_labels,
        confidences=confidences,
    )


def prototype_contributions(outputs: BatchOutputs, head: Tensor, cls: int) -> np.ndarray:
    """Per-prototype contribution toward ``cls``: activation times |head weight|."""
    if not 0 <= cls < head.shape[0]:
        raise ConfigError(f"class {cls} out of range for {head.shape[0]} classes")
    return outputs.agg_sims.data * np.abs(head.data[cls])


# ---------------------------------------------------------------------------
# persistence


def _write_container(path, magic: bytes, header: dict, blocks: list[np.ndarray]) -> None:
    payload = canonical_dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(len(payload).to_bytes(8, "little"))
        fh.write(payload)
        for block in blocks:
            fh.write(np.ascontiguousarray(block, dtype="<f8").tobytes())


def _read_container(path, magic: bytes) -> tuple[dict, memoryview]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(magic) + 8:
        raise FormatError(f"{path}: file too short for a valid container")
    if raw[: len(magic)] != magic:
        raise FormatError(f"{path}: bad magic {raw[:len(magic)]!r}, expected {magic!r}")
    hlen = int.from_bytes(raw[len(magic) : len(magic) + 8], "little")
    start = len(magic) + 8
    if len(raw) < start + hlen:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header: {exc}") from None
    return header, memoryview(raw)[start + hlen :]


def _read_blocks(body: memoryview, shapes: list[tuple[int, ...]], path) -> list[np.ndarray]:
    blocks = []
    offset = 0
    for shape in shapes:
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(body):
            raise FormatError(f"{path}: truncated tensor data")
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=offset)
        blocks.append(arr.astype(np.float64).reshape(shape))
        offset += nbytes
    if offset != len(body):
        raise FormatError(f"{path}: {len(body) - offset} trailing bytes")
    return blocks


def save_model(model: PrototypeModel, path) -> None:
    names = model.param_names()
    stat_layers = sorted(model.running_stats)
    header = {
        "config": model.config.to_dict(),
        "class_of": model.class_of.tolist(),
        "tensors": [[name, list(model.params[name].shape)] for name in names],
        "running_stat_layers": stat_layers,
    }
    blocks = [model.params[name].data for name in names]
    for i in stat_layers:
        mean, var = model.running_stats[i]
        blocks.extend([mean, var])
    _write_container(path, MODEL_MAGIC, header, blocks)


def load_model(path) -> PrototypeModel:
    header, body = _read_container(path, MODEL_MAGIC)
    try:
        config = ModelConfig.from_dict(header["config"])
        manifest = header["tensors"]
        stat_layers = header["running_stat_layers"]
    except KeyError as exc:
        raise FormatError(f"{path}: header missing field {exc}") from None
    model = PrototypeModel(config, seed=0)
    expected = model.param_names()
    if [name for name, _ in manifest] != expected:
        raise FormatError(f"{path}: tensor manifest does not match config")
    shapes = [tuple(shape) for _, shape in manifest]
    for name, shape in zip(expected, shapes):
        if shape != model.params[name].shape:
            raise FormatError(f"{path}: {name} has shape {shape}, expected {model.params[name].shape}")
    d = config.backbone.feature_dim
    stat_shapes = []
    for i in stat_layers:
        width = config.backbone.hidden_dims[i]
        stat_shapes.extend([(width,), (width,)])
    blocks = _read_blocks(body, shapes + stat_shapes, path)
    for name, block in zip(expected, blocks[: len(expected)]):
        model.params[name].data = block.copy()
    model.running_stats = {}
    rest = blocks[len(expected) :]
    for j, i in enumerate(stat_layers):
        model.running_stats[int(i)] = (rest[2 * j].copy(), rest[2 * j + 1].copy())
    model.class_of = np.asarray(header["class_of"], dtype=np.int64)
    return model
