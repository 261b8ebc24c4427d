"""MLP feature extractor with a cosine-similarity (prototype) head or a plain linear head."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError

DEFAULT_HIDDEN = (64, 64)
DEFAULT_FEAT_DIM = 16
DEFAULT_TEMPERATURE = 0.05
HEAD_KINDS = ("cosine", "linear")


@dataclass
class FeatureExtractorParams:
    weights: list[Tensor]
    biases: list[Tensor]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def feat_dim(self) -> int:
        return self.weights[-1].shape[1]

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


@dataclass
class CosineClassifierParams:
    """Prototype matrix W (feat_dim x K), one column per class, and a fixed temperature.

    Only the feature is normalized unless ``normalize_weights`` is set.
    """

    W: Tensor
    T: float = DEFAULT_TEMPERATURE
    normalize_weights: bool = False

    def __post_init__(self):
        if not self.T > 0:
            raise ConfigError(f"temperature must be positive, got {self.T}")
        if self.W.shape[1] < 2:
            raise ConfigError("need at least two classes")

    def parameters(self) -> list[Tensor]:
        return [self.W]


@dataclass
class LinearClassifierParams:
    W: Tensor
    b: Tensor

    def parameters(self) -> list[Tensor]:
        return [self.W, self.b]


@dataclass
class ModelParams:
    feature: FeatureExtractorParams
    head: CosineClassifierParams | LinearClassifierParams
    seed: int = 0
    dims: tuple[int, ...] = field(default=())

    @property
    def head_kind(self) -> str:
        return "cosine" if isinstance(self.head, CosineClassifierParams) else "linear"

    @property
    def num_classes(self) -> int:
        return self.head.W.shape[1]

    def feature_parameters(self) -> list[Tensor]:
        return self.feature.parameters()

    def classifier_parameters(self) -> list[Tensor]:
        return self.head.parameters()

    def parameters(self) -> list[Tensor]:
        return self.feature_parameters() + self.classifier_parameters()


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def init_mlp(rng: np.random.Generator, dims: tuple[int, ...]) -> FeatureExtractorParams:
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        weights.append(Tensor(glorot_uniform(rng, fan_in, fan_out), requires_grad=True))
        biases.append(Tensor(np.zeros(fan_out), requires_grad=True))
    return FeatureExtractorParams(weights, biases)


def init_model(
    seed: int,
    input_dim: int,
    num_classes: int,
    hidden: tuple[int, ...] = DEFAULT_HIDDEN,
    feat_dim: int = DEFAULT_FEAT_DIM,
    head_kind: str = "cosine",
    T: float = DEFAULT_TEMPERATURE,
    normalize_weights: bool = False,
) -> ModelParams:
    """Glorot-uniform weights and zero biases, fully determined by ``seed``."""
    if head_kind not in HEAD_KINDS:
        raise ConfigError(f"unknown head kind {head_kind!r}")
    if feat_dim < 2 or num_classes < 2 or input_dim < 1:
        raise ConfigError("need input_dim >= 1, feat_dim >= 2 and at least two classes")
    rng = np.random.default_rng(seed)
    dims = (input_dim, *hidden, feat_dim)
    feature = init_mlp(rng, dims)
    W = Tensor(glorot_uniform(rng, feat_dim, num_classes), requires_grad=True)
    if head_kind == "cosine":
        head = CosineClassifierParams(W, T, normalize_weights)
    else:
        head = LinearClassifierParams(W, Tensor(np.zeros(num_classes), requires_grad=True))
    return ModelParams(feature, head, seed=seed, dims=dims)


def mlp_forward(weights, biases, x: Tensor) -> Tensor:
    h = x
    last = len(weights) - 1
    for i, (w, b) in enumerate(zip(weights, biases)):
        h = ad.add_bias(ad.matmul(h, w), b)
        if i < last:
            h = ad.relu(h)
    return h


def extract_features(params: FeatureExtractorParams, x: Tensor) -> Tensor:
    """Raw (un-normalized) features, batch x feat_dim."""
    if x.data.ndim != 2 or x.shape[1] != params.input_dim:
        raise DimensionError(f"input of shape {x.shape} does not match input_dim={params.input_dim}")
    return mlp_forward(params.weights, params.biases, x)


def cosine_logits(c: CosineClassifierParams, f: Tensor) -> Tensor:
    if f.data.ndim != 2 or f.shape[1] != c.W.shape[0]:
        raise DimensionError(f"features {f.shape} vs prototypes {c.W.shape}")
    W = c.W
    if c.normalize_weights:
        W = _normalize_columns(W)
    return ad.scalar_mul(ad.matmul(ad.l2_normalize(f), W), 1.0 / c.T)


def _normalize_columns(W: Tensor) -> Tensor:
    # l2_normalize works along the last axis, columns are prototypes
    return ad.transpose(ad.l2_normalize(ad.transpose(W)))


def linear_logits(c: LinearClassifierParams, f: Tensor) -> Tensor:
    if f.data.ndim != 2 or f.shape[1] != c.W.shape[0]:
        raise DimensionError(f"features {f.shape} vs weights {c.W.shape}")
    return ad.add_bias(ad.matmul(f, c.W), c.b)


def head_logits(model: ModelParams, f: Tensor) -> Tensor:
    if isinstance(model.head, CosineClassifierParams):
        return cosine_logits(model.head, f)
    return linear_logits(model.head, f)


def predict_proba(model: ModelParams, x: Tensor) -> Tensor:
    return ad.softmax(head_logits(model, extract_features(model.feature, x)))


def predict(model: ModelParams, x: np.ndarray) -> np.ndarray:
    """Argmax class per row; ties go to the lowest index (np.argmax semantics)."""
    return np.argmax(predict_proba(model, Tensor(x)).data, axis=1)


def embed(model: ModelParams, x: np.ndarray) -> np.ndarray:
    """Features as seen by the head: l2-normalized for the cosine head, raw for the linear head."""
    f = extract_features(model.feature, Tensor(x))
    if model.head_kind == "cosine":
        f = ad.l2_normalize(f)
    return f.data


# -- checkpoint ---------------------------------------------------------------


def to_dict(model: ModelParams) -> dict:
    doc = {
        "dims": list(model.dims),
        "head_kind": model.head_kind,
        "seed": model.seed,
        "layers": [{"W": w.data.tolist(), "b": b.data.tolist()} for w, b in zip(model.feature.weights, model.feature.biases)],
        "classifier": {"W": model.head.W.data.tolist()},
    }
    if isinstance(model.head, CosineClassifierParams):
        doc["T"] = model.head.T
        doc["normalize_weights"] = model.head.normalize_weights
    else:
        doc["T"] = None
        doc["classifier"]["b"] = model.head.b.data.tolist()
    return doc


def from_dict(doc: dict) -> ModelParams:
    weights = [Tensor(np.array(layer["W"], dtype=np.float64), requires_grad=True) for layer in doc["layers"]]
    biases = [Tensor(np.array(layer["b"], dtype=np.float64), requires_grad=True) for layer in doc["layers"]]
    W = Tensor(np.array(doc["classifier"]["W"], dtype=np.float64), requires_grad=True)
    if doc["head_kind"] == "cosine":
        head = CosineClassifierParams(W, float(doc["T"]), bool(doc.get("normalize_weights", False)))
    else:
        head = LinearClassifierParams(W, Tensor(np.array(doc["classifier"]["b"], dtype=np.float64), requires_grad=True))
    return ModelParams(FeatureExtractorParams(weights, biases), head, seed=int(doc["seed"]), dims=tuple(doc["dims"]))


def save_checkpoint(model: ModelParams, path) -> None:
    Path(path).write_text(json.dumps(to_dict(model)) + "\n", encoding="utf-8")


def load_checkpoint(path) -> ModelParams:
    return from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def snapshot(model: ModelParams) -> ModelParams:
    """Deep copy of parameter values (no gradients)."""
    def c(t: Tensor) -> Tensor:
        return Tensor(t.data.copy(), requires_grad=True)

    feature = FeatureExtractorParams([c(w) for w in model.feature.weights], [c(b) for b in model.feature.biases])
    if isinstance(model.head, CosineClassifierParams):
        head = CosineClassifierParams(c(model.head.W), model.head.T, model.head.normalize_weights)
    else:
        head = LinearClassifierParams(c(model.head.W), c(model.head.b))
    return ModelParams(feature, head, seed=model.seed, dims=model.dims)
