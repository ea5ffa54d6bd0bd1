"""Per-task fine-tuning on the support set.

Two adaptable models share one small protocol, ``fit(x, y, lr, steps)``
returning a fitted copy and ``predict(x)`` returning labels:

* :class:`PMTModel` swaps the prototype classifier for a linear head
  initialised from the support prototypes, then tunes head and encoder
  jointly with Adam on support cross-entropy.
* :class:`PMFModel` keeps the prototype classifier and tunes the encoder on
  the support prototype loss; predictions use prototypes recomputed from
  the adapted encoder.

:func:`lr_search` picks the learning rate per task on a stratified holdout
carved out of the support set.  Nothing here mutates the caller's states.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Protocol, Sequence

import numpy as np
import torch

from ._rng import stream
from .encoder import DTYPE, DivergenceError, EncoderState, adam_step, adam_update, encode, encode_vjp
from .fewshot import PrototypeSet, bsr_loss, cross_entropy, proto_logits, prototypes

# Augmented support batches for a given step, restricted to the given row indices.
AugmentFn = Callable[[int, Sequence[int]], np.ndarray]


@dataclass(frozen=True)
class LinearHead:
    weight: torch.Tensor  # (n_classes, d)
    bias: torch.Tensor  # (n_classes,)

    def logits(self, features) -> torch.Tensor:
        f = torch.as_tensor(features, dtype=DTYPE)
        if f.shape[-1] != self.weight.shape[1]:
            raise ValueError(f"feature dim {f.shape[-1]} != head input dim {self.weight.shape[1]}")
        return f @ self.weight.T + self.bias


@dataclass(frozen=True)
class FinetuneConfig:
    learning_rate: float = 1e-3
    steps: int = 20
    lr_candidates: tuple[float, ...] = (1e-2, 1e-3, 1e-4, 0.0)
    holdout_fraction: float = 0.2
    optimizer: str = "adam"
    search: bool = True
    lambda_bsr: float = 0.0
    augment: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.holdout_fraction < 1:
            raise ValueError("holdout_fraction must lie in (0, 1)")
        if not self.lr_candidates:
            raise ValueError("lr_candidates must be non-empty")
        if self.optimizer != "adam":
            raise ValueError("fine-tuning uses Adam")
        if self.steps < 0 or self.learning_rate < 0 or min(self.lr_candidates) < 0:
            raise ValueError("steps and learning rates must be non-negative")


def attach_head(encoder_dim: int, n_classes: int, support_features, support_labels) -> LinearHead:
    """Linear head whose rows are the support prototypes, with zero bias."""
    feats = torch.as_tensor(support_features, dtype=DTYPE)
    if feats.ndim != 2 or feats.shape[1] != encoder_dim:
        raise ValueError(f"support features {tuple(feats.shape)} do not match encoder dim {encoder_dim}")
    protos = prototypes(feats, support_labels, n_classes).prototypes.detach().clone()
    return LinearHead(protos, torch.zeros(n_classes, dtype=DTYPE))


def _steps_batch(x: np.ndarray, augment: Callable[[int], np.ndarray] | None, step: int) -> np.ndarray:
    return x if augment is None else augment(step)


def _check_loss(loss: torch.Tensor, step: int) -> float:
    value = float(loss.detach())
    if not math.isfinite(value):
        raise DivergenceError(f"fine-tune loss became {value} at step {step}")
    return value


def pmt_support_loss(encoder: EncoderState, head: LinearHead, x, y) -> float:
    return float(cross_entropy(head.logits(encode(encoder, x)), y))


def finetune_pmt(
    encoder: EncoderState,
    head: LinearHead,
    support_x,
    support_y: Sequence[int],
    lr: float,
    steps: int,
    lambda_bsr: float = 0.0,
    augment: Callable[[int], np.ndarray] | None = None,
    trace: list | None = None,
) -> tuple[EncoderState, LinearHead]:
    """Adam on support cross-entropy through the head, updating head and encoder together."""
    if lr < 0 or steps < 0:
        raise ValueError("lr and steps must be non-negative")
    if lr == 0 or steps == 0:
        return encoder, head
    enc = encoder.with_fresh_optimizer()
    hp = {"weight": head.weight, "bias": head.bias}
    moments: dict = {}
    for step in range(steps):
        feats, pullback = encode_vjp(enc, _steps_batch(support_x, augment, step))
        f = feats.requires_grad_(True)
        w = hp["weight"].detach().requires_grad_(True)
        b = hp["bias"].detach().requires_grad_(True)
        loss = cross_entropy(f @ w.T + b, support_y)
        if lambda_bsr:
            loss = loss + lambda_bsr * bsr_loss(f)
        value = _check_loss(loss, step)
        if trace is not None:
            trace.append({"step": step, "support_loss": value, "lr": lr})
        gf, gw, gb = torch.autograd.grad(loss, [f, w, b])
        enc = adam_step(enc, pullback(gf), lr)
        hp, moments = adam_update(hp, {"weight": gw, "bias": gb}, moments, lr)
    return enc, LinearHead(hp["weight"], hp["bias"])


def pmf_support_loss(encoder: EncoderState, x, y, n_way: int, distance: str = "sqeuclidean", temperature: float = 1.0) -> float:
    feats = encode(encoder, x)
    return float(cross_entropy(proto_logits(prototypes(feats, y, n_way), feats, distance, temperature), y))


def finetune_pmf_proto(
    encoder: EncoderState,
    support_x,
    support_y: Sequence[int],
    lr: float,
    steps: int,
    n_way: int | None = None,
    distance: str = "sqeuclidean",
    temperature: float = 1.0,
    lambda_bsr: float = 0.0,
    augment: Callable[[int], np.ndarray] | None = None,
    trace: list | None = None,
) -> EncoderState:
    """Adam on the encoder with support items classified against support prototypes.

    Prototypes are recomputed every step from augmentation-free support
    features; with ``augment`` the classified rows are augmented copies.
    """
    if lr < 0 or steps < 0:
        raise ValueError("lr and steps must be non-negative")
    if lr == 0 or steps == 0:
        return encoder
    n_way = n_way or int(max(support_y)) + 1
    x = np.asarray(support_x)
    ns = len(support_y)
    enc = encoder.with_fresh_optimizer()
    for step in range(steps):
        batch = x if augment is None else np.concatenate([x, augment(step)])
        feats, pullback = encode_vjp(enc, batch)
        f = feats.requires_grad_(True)
        protos = prototypes(f[:ns], support_y, n_way)
        scored = f[:ns] if augment is None else f[ns:]
        loss = cross_entropy(proto_logits(protos, scored, distance, temperature), support_y)
        if lambda_bsr:
            loss = loss + lambda_bsr * bsr_loss(scored)
        value = _check_loss(loss, step)
        if trace is not None:
            trace.append({"step": step, "support_loss": value, "lr": lr})
        (gf,) = torch.autograd.grad(loss, f)
        enc = adam_step(enc, pullback(gf), lr)
    return enc


class Adaptable(Protocol):
    def fit(self, x, y, lr: float, steps: int, augment=None, trace=None) -> "Adaptable": ...

    def predict(self, x) -> np.ndarray: ...


@dataclass(frozen=True)
class PMTModel:
    encoder: EncoderState
    n_way: int
    head: LinearHead | None = None
    lambda_bsr: float = 0.0

    def fit(self, x, y, lr: float, steps: int, augment=None, trace=None) -> "PMTModel":
        feats = encode(self.encoder, x)
        head = attach_head(self.encoder.config.embed_dim, self.n_way, feats, y)
        enc, head = finetune_pmt(self.encoder, head, x, y, lr, steps, self.lambda_bsr, augment, trace)
        return replace(self, encoder=enc, head=head)

    def predict(self, x) -> np.ndarray:
        if self.head is None:
            raise RuntimeError("PMTModel.predict before fit")
        return self.head.logits(encode(self.encoder, x)).argmax(dim=1).numpy()


@dataclass(frozen=True)
class PMFModel:
    encoder: EncoderState
    n_way: int
    prototypes: PrototypeSet | None = None
    distance: str = "sqeuclidean"
    temperature: float = 1.0
    lambda_bsr: float = 0.0

    def fit(self, x, y, lr: float, steps: int, augment=None, trace=None) -> "PMFModel":
        enc = finetune_pmf_proto(
            self.encoder, x, y, lr, steps, self.n_way, self.distance, self.temperature,
            self.lambda_bsr, augment, trace,
        )
        return replace(self, encoder=enc, prototypes=prototypes(encode(enc, x), y, self.n_way))

    def predict(self, x) -> np.ndarray:
        if self.prototypes is None:
            raise RuntimeError("PMFModel.predict before fit")
        logits = proto_logits(self.prototypes, encode(self.encoder, x), self.distance, self.temperature)
        return logits.argmax(dim=1).numpy()


def predict(model: Adaptable, query_x) -> np.ndarray:
    return np.asarray(model.predict(query_x), dtype=np.int64)


def stratified_split(labels: Sequence[int], holdout_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded per-class split into (fit, holdout) row indices; both keep every class."""
    labels = np.asarray(labels)
    fit, hold = [], []
    for c in np.unique(labels):
        rows = np.flatnonzero(labels == c)
        n_hold = max(1, int(round(holdout_fraction * len(rows))))
        if len(rows) - n_hold < 1:
            raise ValueError(f"class {c} has {len(rows)} support items; cannot keep one on each side of the holdout")
        perm = stream(seed, int(c)).permutation(rows)
        hold += perm[:n_hold].tolist()
        fit += perm[n_hold:].tolist()
    return np.sort(np.array(fit)), np.sort(np.array(hold))


def lr_search(
    model: Adaptable,
    support_x,
    support_y: Sequence[int],
    config: FinetuneConfig,
    augment: AugmentFn | None = None,
    scores: dict | None = None,
) -> float:
    """Candidate learning rate with the best holdout accuracy; ties go to the smaller rate.

    A candidate of 0 means "no fine-tuning".  ``scores``, when given, is
    filled with ``{lr: holdout_accuracy}``.
    """
    candidates = sorted(set(config.lr_candidates))
    if len(candidates) == 1:
        return candidates[0]
    x, y = np.asarray(support_x), np.asarray(support_y)
    fit_idx, hold_idx = stratified_split(y, config.holdout_fraction, config.seed)
    sub_aug = None if augment is None else (lambda step: augment(step, fit_idx))
    best_lr, best_acc = candidates[0], -1.0
    for lr in candidates:
        fitted = model.fit(x[fit_idx], y[fit_idx], lr, config.steps, augment=sub_aug)
        acc = float(np.mean(predict(fitted, x[hold_idx]) == y[hold_idx]))
        if scores is not None:
            scores[lr] = acc
        if acc > best_acc:
            best_lr, best_acc = lr, acc
    return best_lr
