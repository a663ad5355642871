"""Stability-weighted test-time adaptation on pseudo-labeled target batches.

For batch ``i`` the current model ``T`` labels batches ``i`` and ``i+1``. A
throwaway copy ``T_p`` takes one step on batch ``i``; both models are then
scored on batch ``i+1`` against ``T``'s labels. The loss improvement ``delta``
goes through a sharp softplus to give ``alpha``, and ``T`` takes one Adam step
on ``alpha * loss(batch i)``. Steps that would hurt the next batch therefore
get a near-zero weight.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .crossmodal import fused_features, train_adapters_step
from .model import Batch, FasModel, classify, take
from .numerics import ContractError, RngStream, Tensor, softplus_value
from .pseudolabel import DEFAULT_DROPOUT, deterministic_scores, naive_label, score_batch
from .synthdata import MODALITIES

TRACE_COLUMNS = ("batch_index", "loss_T_next", "loss_Tp_next", "delta", "alpha", "update_norm",
                 "n_live_pseudo", "n_spoof_pseudo")


@dataclass
class AdaptationConfig:
    lr: float = 1e-6
    batch_size: int = 32
    beta: float = 500.0
    k: int = 10
    dropout_rate: float = DEFAULT_DROPOUT
    passes: int = 1
    frozen_prefix: int = 2
    replay_size: int = 32
    adapter_lr: float = 1e-3
    refresh_adapters: bool = True
    strategy: str = "alpha"
    pseudo: str = "reliability"
    threshold: float = 0.5

    def __post_init__(self):
        if not self.lr > 0:
            raise ContractError("adaptation lr must be > 0")
        if not self.beta > 0:
            raise ContractError("beta must be > 0")
        if self.batch_size < 2:
            raise ContractError("batch_size must be >= 2")
        if self.strategy not in ("alpha", "plain"):
            raise ContractError(f"strategy must be 'alpha' or 'plain', got {self.strategy!r}")
        if self.pseudo not in ("reliability", "naive"):
            raise ContractError(f"pseudo must be 'reliability' or 'naive', got {self.pseudo!r}")
        if self.pseudo == "reliability" and self.k < 1:
            raise ContractError("reliability-aware pseudo-labels need k >= 1")


@dataclass
class TraceRow:
    batch_index: int
    loss_T_next: float
    loss_Tp_next: float
    delta: float
    alpha: float
    update_norm: float
    n_live_pseudo: int
    n_spoof_pseudo: int
    # pseudo-labels matching ground truth; -1 when truth was not supplied
    n_correct: int = -1


@dataclass
class AdaptationTrace:
    rows: list[TraceRow] = field(default_factory=list)
    order: list[int] = field(default_factory=list)
    pseudo_correct: int = 0
    pseudo_total: int = 0

    def __len__(self):
        return len(self.rows)

    @property
    def pseudo_accuracy(self) -> float:
        return self.pseudo_correct / self.pseudo_total if self.pseudo_total else math.nan

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRACE_COLUMNS)
            for r in self.rows:
                w.writerow([_fmt(getattr(r, c)) for c in TRACE_COLUMNS])


def _fmt(x):
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


# -------------------------------------------------------------------- losses


def adaptation_loss_tensor(model: FasModel, t: dict[str, Tensor], batch: Batch, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape != (len(batch),):
        raise ContractError(f"got {labels.size} labels for a batch of {len(batch)}")
    fused = fused_features(model, t, batch)
    total = None
    for mod in MODALITIES:
        term = nx.binary_cross_entropy(classify(t, mod, fused[mod]), labels, reduction="sum")
        total = term if total is None else total + term
    return total * (1.0 / len(batch))


def adaptation_loss(model: FasModel, batch: Batch, labels) -> float:
    """Mean over samples of the summed per-modality BCE on fused features."""
    return adaptation_loss_tensor(model, model.tensors(), batch, labels).item()


def adaptation_grads(model: FasModel, batch: Batch, labels, scale: float = 1.0) -> tuple[float, dict]:
    """Value of ``loss`` and gradients of ``scale * loss`` w.r.t. the adaptable parameters."""
    names = model.adaptable_names()
    t = model.tensors(names)
    loss = adaptation_loss_tensor(model, t, batch, labels)
    nx.backward(loss * scale)
    grads = {k: t[k].grad if t[k].grad is not None else np.zeros_like(t[k].data) for k in names}
    return loss.item(), grads


def _step(model: FasModel, batch: Batch, labels, lr: float, scale: float = 1.0) -> float:
    loss, grads = adaptation_grads(model, batch, labels, scale)
    nx.adam_step(model.params, grads, model.optimizer("adapt", lr), lr)
    return loss


def tentative_update(model: FasModel, batch: Batch, labels, lr: float) -> FasModel:
    """Independent copy of ``model`` advanced by one unscaled step; ``model`` is untouched.

    The copy carries its own clone of the adaptation optimizer state.
    """
    tp = model.clone()
    _step(tp, batch, labels, lr)
    return tp


def stability_weight(loss_t_next: float, loss_tp_next: float, beta: float = 500.0) -> float:
    if not (math.isfinite(loss_t_next) and math.isfinite(loss_tp_next)):
        raise FloatingPointError(f"non-finite look-ahead losses: T={loss_t_next!r}, T_p={loss_tp_next!r}")
    return softplus_value(loss_t_next - loss_tp_next, beta)


# ---------------------------------------------------------------- loop


def pseudo_targets(model: FasModel, batch: Batch, config: AdaptationConfig, rng: RngStream,
                   sink=None) -> np.ndarray:
    """Current-model pseudo-labels for ``batch`` under the configured mechanism.

    ``sink`` receives the full :class:`PseudoLabels` of the reliability path.
    """
    if config.pseudo == "naive":
        fused = fused_features(model, model.tensors(), batch)
        return naive_label(deterministic_scores(model, fused), config.threshold).astype(np.float64)
    labels = score_batch(model, batch, config.k, config.dropout_rate, rng, config.threshold)
    if sink is not None:
        sink(labels)
    return labels.y_hat.astype(np.float64)


def _param_distance(before: dict, after: dict, names) -> float:
    return math.sqrt(sum(float(((after[k] - before[k]) ** 2).sum()) for k in names))


def adapt_batch(model: FasModel, batch_i: Batch, batch_next: Batch | None, config: AdaptationConfig,
                rng: RngStream, batch_index: int = 0, alpha: float | None = None, label_hook=None,
                truth=None, pseudo_sink=None) -> tuple[FasModel, TraceRow, float]:
    """One stability-weighted update of ``model`` (in place) on ``batch_i``.

    ``batch_next`` drives the look-ahead; pass ``None`` together with a given
    ``alpha`` for the final batch. ``label_hook(batch_index, labels)`` may
    rewrite the training labels of ``batch_i`` (used to inject label noise).
    ``pseudo_sink(batch_index, labels)`` sees the reliability-path labels of ``batch_i``.
    Returns the model, the trace row and the alpha used.
    """
    sink = None if pseudo_sink is None else (lambda pl: pseudo_sink(batch_index, pl))
    y_i = pseudo_targets(model, batch_i, config, rng.child("pseudo", "cur"), sink)
    if label_hook is not None:
        y_i = np.asarray(label_hook(batch_index, y_i), dtype=np.float64)

    loss_t_next = loss_tp_next = delta = math.nan
    if config.strategy == "plain":
        alpha = 1.0
    elif batch_next is not None:
        y_next = pseudo_targets(model, batch_next, config, rng.child("pseudo", "next"))
        tp = tentative_update(model, batch_i, y_i, config.lr)
        loss_t_next = adaptation_loss(model, batch_next, y_next)
        loss_tp_next = adaptation_loss(tp, batch_next, y_next)
        delta = loss_t_next - loss_tp_next
        alpha = stability_weight(loss_t_next, loss_tp_next, config.beta)
    elif alpha is None:
        raise ContractError("the final batch needs the previous alpha")

    names = model.adaptable_names()
    before = {k: model.params[k].copy() for k in names}
    _step(model, batch_i, y_i, config.lr, scale=alpha)
    row = TraceRow(batch_index, loss_t_next, loss_tp_next, delta, alpha, _param_distance(before, model.params, names),
                   int(y_i.sum()), int(len(y_i) - y_i.sum()))
    if truth is not None:
        row.n_correct = int((y_i == np.asarray(truth, dtype=np.float64)).sum())
    return model, row, alpha


def make_batches(n: int, batch_size: int, order) -> list[np.ndarray]:
    order = np.asarray(order)
    return [order[s:s + batch_size] for s in range(0, n, batch_size)]


def adapt_stream(model: FasModel, target: Batch, source_replay: Batch | None, config: AdaptationConfig,
                 rng: RngStream, truth=None, label_hook=None, pseudo_sink=None) -> tuple[FasModel, AdaptationTrace]:
    """Adapt ``model`` in place over the target split in one (or ``config.passes``) ordered pass(es).

    Each batch first refreshes the adapters with one step on the target batch
    plus the fixed source replay buffer, then takes a stability-weighted
    update. The last batch has no successor and reuses the previous alpha.
    ``truth`` (ground-truth target labels, never used for training) only feeds
    the pseudo-label accuracy counters of the trace. ``pseudo_sink(batch_index,
    target_indices, labels)`` observes each batch's reliability-aware labels.
    """
    n = len(target)
    order = rng.child("order").generator().permutation(n)
    batches = make_batches(n, config.batch_size, order)
    if len(batches) < 2:
        raise ContractError("adaptation needs at least two target batches")
    model.frozen_prefix = config.frozen_prefix
    replay = None
    if source_replay is not None and config.refresh_adapters:
        pick = rng.child("replay").generator().choice(len(source_replay), size=min(config.replay_size, len(source_replay)),
                                                      replace=False)
        replay = take(source_replay, np.sort(pick))
    truth = None if truth is None else np.asarray(truth, dtype=np.float64)

    trace = AdaptationTrace(order=[int(i) for i in order])
    alpha = None
    step = 0
    for p in range(config.passes):
        for i, idx in enumerate(batches):
            cur = take(target, idx)
            nxt = take(target, batches[i + 1]) if i + 1 < len(batches) else None
            if config.refresh_adapters:
                train_adapters_step(model, replay, cur, config.adapter_lr)
            _, row, alpha = adapt_batch(model, cur, nxt, config, rng.child("batch", p, i), batch_index=step,
                                        alpha=alpha, label_hook=label_hook,
                                        truth=None if truth is None else truth[idx],
                                        pseudo_sink=None if pseudo_sink is None else
                                        (lambda b, pl, idx=idx: pseudo_sink(b, idx, pl)))
            if row.n_correct >= 0:
                trace.pseudo_correct += row.n_correct
                trace.pseudo_total += len(idx)
            trace.rows.append(row)
            step += 1
    return model, trace
