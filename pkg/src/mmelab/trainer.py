"""SGD-with-momentum training loop for S+T, ENT, DANN and MME."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import SsdaDataset
from .errors import ConfigError, ContractError, NonFiniteError, NumericalAbort
from .model import HEAD_KINDS, ModelParams, init_model, predict_proba, snapshot
from .objectives import (
    METHODS,
    LabeledBatch,
    classification_loss,
    dann_step_losses,
    ent_step_losses,
    entropy_rows,
    init_domain_head,
    mme_step_losses,
)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    method: str = "mme"
    head_kind: str = "cosine"
    lam: float = 0.1
    T: float = 0.05
    s: int = 32
    lr0: float = 0.01
    momentum: float = 0.9
    anneal_alpha: float = 10.0
    anneal_beta: float = 0.75
    max_iters: int = 10000
    patience: int = 20
    eval_every: int = 50
    seed: int = 0
    hidden: tuple[int, ...] = (64, 64)
    feat_dim: int = 16
    normalize_weights: bool = False
    domain_hidden: int = 64

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.head_kind not in HEAD_KINDS:
            raise ConfigError(f"unknown head {self.head_kind!r}; expected one of {HEAD_KINDS}")
        if self.s < 2 or self.s % 2:
            raise ConfigError(f"batch size s must be even and positive, got {self.s}")
        if not self.lr0 > 0:
            raise ConfigError("lr0 must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if not self.lam >= 0:
            raise ConfigError("lambda must be nonnegative")
        if not self.T > 0:
            raise ConfigError("temperature must be positive")
        if self.max_iters < 0 or self.eval_every < 1 or self.patience < 1:
            raise ConfigError("max_iters >= 0, eval_every >= 1 and patience >= 1 required")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        return cls(**d)


@dataclass
class MetricsRecord:
    iter: int
    train_loss: float
    unlabeled_entropy_mean: float
    val_accuracy: float
    test_accuracy: float | None
    lr: float
    domain_loss: float | None = None


@dataclass
class TrainResult:
    model: ModelParams
    records: list[MetricsRecord]
    best: MetricsRecord
    iters_run: int
    wall_time_ms: float
    config: TrainConfig
    extra: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "best_val": self.best.val_accuracy,
            "test_at_best": self.best.test_accuracy,
            "best_iter": self.best.iter,
            "iters_run": self.iters_run,
            "wall_time_ms": self.wall_time_ms,
        }


# -- pieces -------------------------------------------------------------------


def _draw(rng: np.random.Generator, pool: int, n: int) -> np.ndarray:
    if pool == 0:
        raise ConfigError("cannot sample from an empty partition")
    return rng.choice(pool, size=n, replace=pool < n)


def compose_batch(ds: SsdaDataset, s: int, rng: np.random.Generator) -> tuple[LabeledBatch, np.ndarray]:
    """``s/2`` source + ``s/2`` labeled target, and ``2s`` unlabeled target examples.

    A pool smaller than its quota is sampled with replacement.
    """
    if s < 2 or s % 2:
        raise ConfigError(f"s must be even and positive, got {s}")
    half = s // 2
    i_src = _draw(rng, len(ds.source_y), half)
    i_tgt = _draw(rng, len(ds.labeled_y), half)
    i_unl = _draw(rng, len(ds.unlabeled_x), 2 * s)
    labeled = LabeledBatch(
        x=np.vstack([ds.source_x[i_src], ds.labeled_x[i_tgt]]),
        y=np.concatenate([ds.source_y[i_src], ds.labeled_y[i_tgt]]),
        is_source=np.r_[np.ones(half, bool), np.zeros(half, bool)],
    )
    return labeled, ds.unlabeled_x[i_unl]


def lr_at(p: float, config: TrainConfig) -> float:
    """Annealed rate ``lr0 * (1 + alpha * p) ** -beta`` at training progress ``p``."""
    if not 0 <= p <= 1:
        raise ContractError(f"progress must be in [0, 1], got {p}")
    return config.lr0 * (1 + config.anneal_alpha * p) ** (-config.anneal_beta)


def sgd_momentum_step(params, grads, velocity, lr: float, momentum: float):
    """``v <- momentum * v + g``; ``theta <- theta - lr * v``. Returns new (params, velocity)."""
    new_v = [momentum * v + g for v, g in zip(velocity, grads)]
    new_p = [p - lr * v for p, v in zip(params, new_v)]
    return new_p, new_v


def evaluate(model: ModelParams, x: np.ndarray, y: np.ndarray) -> float:
    """Fraction of argmax-correct rows; ties resolve to the lowest class index."""
    if len(y) == 0:
        raise ContractError("cannot evaluate on an empty set")
    probs = predict_proba(model, Tensor(x)).data
    return float(np.mean(np.argmax(probs, axis=1) == np.asarray(y)))


def mean_entropy(model: ModelParams, x: np.ndarray) -> float:
    return float(entropy_rows(predict_proba(model, Tensor(x)).data).mean())


# -- loop -----------------------------------------------------------------------


def _step_loss(method, model, head, labeled, unlabeled, lam):
    """Scalar to backpropagate, plus the domain loss value for DANN."""
    if method == "s+t":
        return classification_loss(model, labeled), None
    if method == "ent":
        return ent_step_losses(model, labeled, unlabeled, lam), None
    if method == "mme":
        cls, adv = mme_step_losses(model, labeled, unlabeled, lam)
        return ad.add(cls, adv), None
    cls, dom = dann_step_losses(model, head, labeled, unlabeled, lam)
    return ad.add(cls, dom), dom.item()


def train(ds: SsdaDataset, config: TrainConfig) -> TrainResult:
    """Train from scratch and return the checkpoint with the best validation accuracy.

    Metrics are recorded every ``eval_every`` iterations on the parameters
    *before* that iteration's update, starting at iteration 0. A checkpoint
    whose validation accuracy ties the best so far replaces it and resets the
    patience counter.
    """
    config.validate()
    # overflow is detected and reported as NumericalAbort, not as numpy warnings
    with np.errstate(over="ignore", invalid="ignore"):
        return _train(ds, config)


def _train(ds: SsdaDataset, config: TrainConfig) -> TrainResult:
    t0 = time.perf_counter()
    model = init_model(
        config.seed,
        ds.d,
        ds.K,
        hidden=tuple(config.hidden),
        feat_dim=config.feat_dim,
        head_kind=config.head_kind,
        T=config.T,
        normalize_weights=config.normalize_weights,
    )
    head = init_domain_head([config.seed, 2], config.feat_dim, config.domain_hidden) if config.method == "dann" else None
    params = model.parameters() + (head.parameters() if head else [])
    velocity = [np.zeros_like(p.data) for p in params]
    rng = np.random.default_rng([config.seed, 1])
    has_truth = ds.unlabeled_y is not None

    records: list[MetricsRecord] = []
    best: MetricsRecord | None = None
    best_model = snapshot(model)
    stale = 0
    it = 0
    for it in range(config.max_iters + 1):
        labeled, unlabeled = compose_batch(ds, config.s, rng)
        try:
            loss, dom = _step_loss(config.method, model, head, labeled, unlabeled, config.lam)
        except NonFiniteError as exc:
            raise NumericalAbort(str(exc), {"iter": it, "method": config.method, "error": str(exc)}) from exc
        if not math.isfinite(loss.item()):
            raise NumericalAbort("non-finite loss", {"iter": it, "method": config.method, "train_loss": repr(loss.item())})
        lr = lr_at(it / config.max_iters if config.max_iters else 0.0, config)

        if it % config.eval_every == 0 or it == config.max_iters:
            rec = MetricsRecord(
                iter=it,
                train_loss=loss.item(),
                unlabeled_entropy_mean=mean_entropy(model, ds.unlabeled_x),
                val_accuracy=evaluate(model, ds.val_x, ds.val_y),
                test_accuracy=evaluate(model, ds.unlabeled_x, ds.unlabeled_y) if has_truth else None,
                lr=lr,
                domain_loss=dom,
            )
            records.append(rec)
            log.debug("iter %d loss %.4f val %.3f", it, rec.train_loss, rec.val_accuracy)
            if best is None or rec.val_accuracy >= best.val_accuracy:
                best, best_model, stale = rec, snapshot(model), 0
            else:
                stale += 1
                if stale >= config.patience:
                    break
        if it == config.max_iters:
            break

        ad.zero_grad(params)
        ad.backward(loss)
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
        new_p, velocity = sgd_momentum_step([p.data for p in params], grads, velocity, lr, config.momentum)
        for p, v in zip(params, new_p):
            p.data = v

    wall = (time.perf_counter() - t0) * 1000.0
    return TrainResult(best_model, records, best, it, wall, config)


# -- run directory artifacts ----------------------------------------------------


def write_metrics(records: list[MetricsRecord], path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(asdict(r)) + "\n")


def read_metrics(path) -> list[MetricsRecord]:
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(MetricsRecord(**json.loads(line)))
    return out
