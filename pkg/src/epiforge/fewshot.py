"""Prototype classifier, losses and the episodic meta-training loop.

Per training episode the objective is

    cross_entropy(prototype_logits(query), query_labels) + lambda_bsr * bsr(F)

where ``F`` stacks support rows then query rows of the feature matrix and
``bsr(F)`` is the sum of its squared singular values.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .dataset import ImageCache
from .encoder import DTYPE, DivergenceError, EncoderState, encode, encode_vjp, sgd_step
from .episodes import Episode

log = logging.getLogger(__name__)

DISTANCES = ("sqeuclidean", "cosine")


class DegenerateFeatureError(ValueError):
    """A zero-norm feature vector was passed to the cosine classifier."""


def _tensor(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x), dtype=DTYPE)


@dataclass(frozen=True)
class PrototypeSet:
    prototypes: torch.Tensor  # (n_way, d); row n belongs to local label n

    @property
    def n_way(self) -> int:
        return self.prototypes.shape[0]


def prototypes(features, labels: Sequence[int], n_way: int) -> PrototypeSet:
    features = _tensor(features)
    labels_t = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    if labels_t.numel() != features.shape[0]:
        raise ValueError(f"{labels_t.numel()} labels for {features.shape[0]} feature rows")
    counts = torch.bincount(labels_t, minlength=n_way)
    if counts.numel() > n_way:
        raise ValueError(f"label {int(labels_t.max())} outside 0..{n_way - 1}")
    empty = [n for n in range(n_way) if counts[n] == 0]
    if empty:
        raise ValueError(f"no support rows for classes {empty}")
    sums = torch.zeros((n_way, features.shape[1]), dtype=features.dtype).index_add(0, labels_t, features)
    return PrototypeSet(sums / counts.to(features.dtype)[:, None])


def proto_logits(protos: PrototypeSet | torch.Tensor, queries, distance: str = "sqeuclidean", temperature: float = 1.0) -> torch.Tensor:
    p = protos.prototypes if isinstance(protos, PrototypeSet) else _tensor(protos)
    q = _tensor(queries)
    if q.shape[-1] != p.shape[-1]:
        raise ValueError(f"query dim {q.shape[-1]} != prototype dim {p.shape[-1]}")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if distance == "sqeuclidean":
        diff = q[:, None, :] - p[None, :, :]
        return -(diff * diff).sum(-1) / temperature
    if distance == "cosine":
        qn, pn = q.norm(dim=1), p.norm(dim=1)
        if (qn == 0).any() or (pn == 0).any():
            raise DegenerateFeatureError("zero-norm feature vector in cosine mode")
        return (q / qn[:, None]) @ (p / pn[:, None]).T / temperature
    raise ValueError(f"unknown distance {distance!r}; expected one of {DISTANCES}")


def cross_entropy(logits, labels: Sequence[int]) -> torch.Tensor:
    """Mean negative log-softmax at the true labels, max-shifted for stability."""
    z = _tensor(logits)
    y = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    if z.ndim != 2 or y.shape != (z.shape[0],):
        raise ValueError(f"logits {tuple(z.shape)} and labels {tuple(y.shape)} do not line up")
    if y.numel() and (y.min() < 0 or y.max() >= z.shape[1]):
        raise ValueError("label outside logit columns")
    shifted = z - z.max(dim=1, keepdim=True).values.detach()
    lse = torch.log(torch.exp(shifted).sum(dim=1))
    return (lse - shifted.gather(1, y[:, None]).squeeze(1)).mean()


class _SpectralEnergy(torch.autograd.Function):
    # sum of squared singular values; its gradient is 2F regardless of multiplicity
    @staticmethod
    def forward(ctx, f):
        ctx.save_for_backward(f)
        return (torch.linalg.svdvals(f) ** 2).sum()

    @staticmethod
    def backward(ctx, grad):
        (f,) = ctx.saved_tensors
        return 2.0 * f * grad


def bsr_loss(features) -> torch.Tensor:
    """Batch spectral regularizer: sum of squared singular values of ``features``."""
    f = _tensor(features)
    if f.ndim != 2:
        raise ValueError(f"expected a 2-D feature matrix, got shape {tuple(f.shape)}")
    if not torch.isfinite(f).all():
        raise ValueError("feature matrix has non-finite entries")
    if f.numel() == 0:
        return f.sum()
    return _SpectralEnergy.apply(f)


def total_loss(cls, bsr, lam: float):
    if lam < 0:
        raise ValueError("lambda_bsr must be non-negative")
    return cls + lam * bsr


# ---------------------------------------------------------------------------
# meta-training


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-5
    epochs: int = 200
    tasks_per_epoch: int | None = None  # None -> every training episode
    episodes_per_update: int = 1
    lambda_bsr: float = 1e-3
    temperature: float = 1.0
    distance: str = "sqeuclidean"
    augment: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.lambda_bsr < 0:
            raise ValueError("lambda_bsr must be >= 0")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.episodes_per_update != 1:
            raise ValueError("parameters are updated after every episode; episodes_per_update must be 1")
        if self.distance not in DISTANCES:
            raise ValueError(f"unknown distance {self.distance!r}")


@dataclass
class TrainLog:
    epochs: list[dict] = field(default_factory=list)
    steps: list[dict] = field(default_factory=list)
    best_epoch: int | None = None

    def write_jsonl(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", encoding="utf-8") as fh:
            for rec in self.epochs:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        return path


class TrainingDiverged(DivergenceError):
    def __init__(self, epoch: int, episode: int, detail: str):
        super().__init__(f"non-finite loss at epoch {epoch}, episode {episode}: {detail}")
        self.epoch, self.episode = epoch, episode


def episode_objective(features: torch.Tensor, episode: Episode, config: TrainConfig):
    """(total, cls, bsr) on a stacked support-then-query feature matrix."""
    ns = len(episode.support)
    protos = prototypes(features[:ns], episode.support_labels, episode.spec.n_way)
    logits = proto_logits(protos, features[ns:], config.distance, config.temperature)
    cls = cross_entropy(logits, episode.query_labels)
    bsr = bsr_loss(features)
    return total_loss(cls, bsr, config.lambda_bsr), cls, bsr


def episode_batch(cache: ImageCache, episode: Episode, config: TrainConfig, epoch: int, position: int) -> np.ndarray:
    entries = episode.support_entries + episode.query_entries
    if config.augment:
        return cache.train_batch(entries, config.seed, epoch, position)
    return cache.eval_batch(entries)


def train_step(state: EncoderState, batch: np.ndarray, episode: Episode, config: TrainConfig):
    """One SGD update on one episode; returns (new_state, total, cls, bsr) with float losses."""
    feats, pullback = encode_vjp(state, batch)
    if not torch.isfinite(feats).all():
        raise DivergenceError("encoder produced non-finite features")
    leaf = feats.requires_grad_(True)
    total, cls, bsr = episode_objective(leaf, episode, config)
    if not torch.isfinite(total):
        raise DivergenceError(f"loss is {float(total)}")
    (upstream,) = torch.autograd.grad(total, leaf)
    new_state = sgd_step(state, pullback(upstream), config.learning_rate)
    return new_state, float(total.detach()), float(cls.detach()), float(bsr.detach())


def episode_accuracy(state: EncoderState, episode: Episode, cache: ImageCache, distance: str = "sqeuclidean", temperature: float = 1.0) -> float:
    """Query accuracy of the prototype classifier on eval-preprocessed images."""
    feats = encode(state, cache.eval_batch(episode.support_entries + episode.query_entries))
    ns = len(episode.support)
    protos = prototypes(feats[:ns], episode.support_labels, episode.spec.n_way)
    pred = proto_logits(protos, feats[ns:], distance, temperature).argmax(dim=1)
    return float((pred == torch.as_tensor(episode.query_labels)).double().mean())


def mean_accuracy(state: EncoderState, episodes: Sequence[Episode], cache: ImageCache, config: TrainConfig) -> float:
    return float(np.mean([episode_accuracy(state, ep, cache, config.distance, config.temperature) for ep in episodes]))


def meta_train(
    encoder: EncoderState,
    train_episodes: Sequence[Episode],
    val_episodes: Sequence[Episode],
    config: TrainConfig,
    cache: ImageCache,
    on_epoch: Callable[[dict], None] | None = None,
) -> tuple[EncoderState, TrainLog]:
    """Episodic SGD with one update per episode; keeps the best-validation state.

    Ties in validation accuracy keep the earlier epoch.  Without validation
    episodes the final state is returned.
    """
    history = TrainLog()
    if config.epochs == 0:
        return encoder, history
    episodes = list(train_episodes)
    if config.tasks_per_epoch is not None:
        episodes = episodes[: config.tasks_per_epoch]
    state = encoder
    best_state, best_acc = None, -math.inf
    for epoch in range(config.epochs):
        sums = np.zeros(3)
        for position, ep in enumerate(episodes):
            batch = episode_batch(cache, ep, config, epoch, position)
            try:
                state, total, cls, bsr = train_step(state, batch, ep, config)
            except DivergenceError as exc:
                raise TrainingDiverged(epoch, position, str(exc)) from exc
            sums += (total, cls, bsr)
            history.steps.append({"epoch": epoch, "episode": position, "loss": total, "cls": cls, "bsr": bsr})
        means = sums / max(len(episodes), 1)
        val_acc = mean_accuracy(state, val_episodes, cache, config) if val_episodes else None
        record = {
            "epoch": epoch,
            "mean_train_loss": float(means[0]),
            "mean_train_cls": float(means[1]),
            "mean_train_bsr": float(means[2]),
            "val_accuracy": val_acc,
        }
        history.epochs.append(record)
        log.info("epoch %d loss %.5f val_acc %s", epoch, means[0], val_acc)
        if on_epoch:
            on_epoch(record)
        if val_acc is not None and val_acc > best_acc:
            best_state, best_acc, history.best_epoch = state, val_acc, epoch
    final = best_state if best_state is not None else state
    if best_state is None:
        history.best_epoch = config.epochs - 1
    meta = {**final.metadata, "lambda_bsr": config.lambda_bsr, "train_config": asdict(config), "best_epoch": history.best_epoch}
    return replace(final, metadata=meta), history
