"""Classification loss, unlabeled-target entropy and the per-method loss wiring.

MME places a gradient reversal between the feature extractor and the head on
the unlabeled branch, so a single backward pass over ``cls + adv`` leaves

    grad(theta_C) = d/dtheta_C (L - lambda * H)
    grad(theta_F) = d/dtheta_F (L + lambda * H)

in the parameter ``grad`` slots.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError
from .model import ModelParams, extract_features, head_logits, init_mlp, mlp_forward

METHODS = ("s+t", "ent", "dann", "mme")


@dataclass
class LabeledBatch:
    x: np.ndarray
    y: np.ndarray
    is_source: np.ndarray

    def __len__(self):
        return len(self.y)


@dataclass
class MinimaxLossSpec:
    lam: float = 0.1

    def __post_init__(self):
        if not self.lam >= 0:
            raise ContractError(f"lambda must be nonnegative, got {self.lam}")


def _check_lambda(lam: float) -> None:
    if not lam >= 0:
        raise ContractError(f"lambda must be nonnegative, got {lam}")


def cross_entropy_loss(probs: Tensor, labels) -> Tensor:
    """Mean over rows of -log probs[i, labels[i]]."""
    labels = np.asarray(labels)
    n, k = probs.shape
    if labels.shape != (n,):
        raise DimensionError(f"{labels.shape[0] if labels.ndim else 0} labels for {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ContractError(f"labels must lie in [0, {k})")
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels.astype(int)] = 1.0
    picked = ad.reduce_sum(ad.mul(ad.log(probs), Tensor(onehot)))
    return ad.scalar_mul(picked, -1.0 / n)


def conditional_entropy(probs: Tensor) -> Tensor:
    """Mean over rows of the Shannon entropy (natural log) of each row."""
    n = probs.shape[0]
    plogp = ad.reduce_sum(ad.mul(probs, ad.log(probs)))
    return ad.scalar_mul(plogp, -1.0 / n)


def entropy_rows(probs: np.ndarray) -> np.ndarray:
    """Per-row entropy of a plain probability array (no tape)."""
    p = np.asarray(probs, dtype=np.float64)
    return -(p * np.log(np.maximum(p, ad.EPS_LOG))).sum(axis=1)


def classification_loss(model: ModelParams, batch: LabeledBatch) -> Tensor:
    f = extract_features(model.feature, Tensor(batch.x))
    return cross_entropy_loss(ad.softmax(head_logits(model, f)), batch.y)


def mme_step_losses(model: ModelParams, labeled: LabeledBatch, unlabeled: np.ndarray, spec: MinimaxLossSpec | float):
    """Returns (classification loss, adversarial term ``-lambda * H``).

    The entropy branch reverses the gradient between features and head, so the
    feature extractor descends ``+lambda * H`` while the head descends ``-lambda * H``.
    """
    lam = spec.lam if isinstance(spec, MinimaxLossSpec) else float(spec)
    _check_lambda(lam)
    cls = classification_loss(model, labeled)
    if lam == 0:
        return cls, Tensor(0.0)
    if len(unlabeled) == 0:
        raise ContractError("unlabeled batch is empty")
    fu = extract_features(model.feature, Tensor(unlabeled))
    pu = ad.softmax(head_logits(model, ad.grad_reverse(fu, 1.0)))
    return cls, ad.scalar_mul(conditional_entropy(pu), -lam)


def ent_step_losses(model: ModelParams, labeled: LabeledBatch, unlabeled: np.ndarray, lam: float) -> Tensor:
    """``L + lambda * H`` with both feature extractor and head descending the entropy."""
    _check_lambda(lam)
    cls = classification_loss(model, labeled)
    if lam == 0:
        return cls
    if len(unlabeled) == 0:
        raise ContractError("unlabeled batch is empty")
    pu = ad.softmax(head_logits(model, extract_features(model.feature, Tensor(unlabeled))))
    return ad.add(cls, ad.scalar_mul(conditional_entropy(pu), lam))


@dataclass
class DomainHead:
    """Three fully connected layers, relu between them, one sigmoid logit out."""

    weights: list[Tensor]
    biases: list[Tensor] = field(default_factory=list)

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


def init_domain_head(seed: int, feat_dim: int, hidden: int = 64) -> DomainHead:
    p = init_mlp(np.random.default_rng(seed), (feat_dim, hidden, hidden, 1))
    return DomainHead(p.weights, p.biases)


def domain_features(model: ModelParams, f: Tensor) -> Tensor:
    """Features entering the domain head: what the task head sees."""
    return ad.l2_normalize(f) if model.head_kind == "cosine" else f


def binary_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    n = logits.shape[0]
    t = np.asarray(targets, dtype=np.float64).reshape(logits.shape)
    s = ad.sigmoid(logits)
    pos = ad.mul(ad.log(s), Tensor(t))
    neg = ad.mul(ad.log(ad.add(ad.scalar_mul(s, -1.0), Tensor(1.0))), Tensor(1.0 - t))
    return ad.scalar_mul(ad.reduce_sum(ad.add(pos, neg)), -1.0 / n)


def domain_loss(head: DomainHead, source_feats: Tensor, target_feats: Tensor) -> Tensor:
    """BCE of the domain head; source labelled 0, unlabeled target labelled 1."""
    feats = ad.concat_rows(source_feats, target_feats)
    logits = mlp_forward(head.weights, head.biases, feats)
    targets = np.concatenate([np.zeros(source_feats.shape[0]), np.ones(target_feats.shape[0])])
    return binary_cross_entropy(logits, targets)


def dann_step_losses(model: ModelParams, head: DomainHead, labeled: LabeledBatch, unlabeled: np.ndarray, lam: float):
    """Returns (classification loss, domain loss).

    Features reach the domain head through a gradient reversal scaled by
    ``lambda``; with ``lambda == 0`` they are detached instead.
    """
    _check_lambda(lam)
    fl = extract_features(model.feature, Tensor(labeled.x))
    cls = cross_entropy_loss(ad.softmax(head_logits(model, fl)), labeled.y)
    if len(unlabeled) == 0:
        raise ContractError("unlabeled batch is empty")
    fu = extract_features(model.feature, Tensor(unlabeled))
    src = ad.take_rows(domain_features(model, fl), np.flatnonzero(labeled.is_source))
    tgt = domain_features(model, fu)
    if lam == 0:
        src, tgt = src.detach(), tgt.detach()
    else:
        src, tgt = ad.grad_reverse(src, lam), ad.grad_reverse(tgt, lam)
    return cls, domain_loss(head, src, tgt)
