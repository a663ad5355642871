"""Reliability-aware pseudo-labels from fused features.

Per sample: deterministic per-modality scores, the spread of those scores
under K dropout masks on the fused features, min-max certainty weights from
the spreads, and a softmax-weighted score. Modality order everywhere is
(rgb, ir, d).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .crossmodal import FusedFeatureSet, fused_features
from .model import Batch, FasModel
from .numerics import ContractError, RngStream, dropout_mask, sigmoid_value, softmax_value
from .synthdata import MODALITIES

DEFAULT_THRESHOLD = 0.5
DEFAULT_DROPOUT = 0.3


@dataclass
class PseudoLabelRecord:
    sample_id: str | None
    p: np.ndarray
    v: np.ndarray
    mu: np.ndarray
    w: np.ndarray
    psi: np.ndarray
    p_hat: float
    y_hat: int
    y_naive: int

    def to_dict(self) -> dict:
        out = {"id": self.sample_id}
        for name in ("p", "v", "mu", "w", "psi"):
            for mod, x in zip(MODALITIES, getattr(self, name)):
                out[f"{name}_{mod}"] = float(x)
        out.update(p_hat=float(self.p_hat), y_hat=int(self.y_hat), y_naive=int(self.y_naive))
        return out


@dataclass
class PseudoLabels:
    """Batch-level arrays; row ``j`` is sample ``j``, columns are modalities."""

    p: np.ndarray
    v: np.ndarray
    mu: np.ndarray
    w: np.ndarray
    psi: np.ndarray
    p_hat: np.ndarray
    y_hat: np.ndarray
    y_naive: np.ndarray

    def records(self, ids=None) -> list[PseudoLabelRecord]:
        ids = ids if ids is not None else [None] * len(self.p_hat)
        return [
            PseudoLabelRecord(ids[j], self.p[j], self.v[j], self.mu[j], self.w[j], self.psi[j],
                              float(self.p_hat[j]), int(self.y_hat[j]), int(self.y_naive[j]))
            for j in range(len(self.p_hat))
        ]


def _as_fused_arrays(fused) -> dict[str, np.ndarray]:
    if isinstance(fused, FusedFeatureSet):
        return {m: np.asarray(getattr(fused, m))[None, :] for m in MODALITIES}
    return {m: np.asarray(getattr(f, "data", f)) for m, f in fused.items()}


def _classifier_scores(model: FasModel, feats: dict[str, np.ndarray]) -> np.ndarray:
    cols = [sigmoid_value(feats[m] @ model.params[f"C_{m}.W"][:, 0] + model.params[f"C_{m}.b"][0]) for m in MODALITIES]
    return np.stack(cols, axis=-1)


def deterministic_scores(model: FasModel, fused) -> np.ndarray:
    """Classifier scores on fused features without dropout; shape (B, 3), or (3,) for one FusedFeatureSet."""
    scores = _classifier_scores(model, _as_fused_arrays(fused))
    return scores[0] if isinstance(fused, FusedFeatureSet) else scores


def prediction_stats(passes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and population (1/K) variance over the leading axis of stacked dropout passes."""
    passes = np.asarray(passes, dtype=np.float64)
    # Shift by the first pass so identical passes give exactly zero variance;
    # min-max weighting would otherwise amplify rounding noise to full range.
    d = passes - passes[0]
    m = d.mean(axis=0)
    return ((d - m) ** 2).mean(axis=0), passes[0] + m


def mc_variance(model: FasModel, fused, k: int = 10, rate: float = DEFAULT_DROPOUT,
                rng: RngStream | np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Variance and mean of scores over ``k`` dropout-masked passes.

    Each pass draws an independent mask per modality on the fused feature.
    Returns ``(v, mu)`` with the same shape as :func:`deterministic_scores`.
    """
    if k < 1:
        raise ContractError("mc_variance needs k >= 1; use naive_label for the dropout-free path")
    feats = _as_fused_arrays(fused)
    gen = (rng or RngStream(0)).generator() if not isinstance(rng, np.random.Generator) else rng
    passes = []
    for _ in range(k):
        masked = {m: feats[m] * dropout_mask(feats[m].shape, rate, gen) for m in MODALITIES}
        passes.append(_classifier_scores(model, masked))
    v, mu = prediction_stats(np.stack(passes))
    if isinstance(fused, FusedFeatureSet):
        return v[0], mu[0]
    return v, mu


def certainty_weights(v) -> np.ndarray:
    """``1 - (v - min) / (max - min)`` over the modality axis; all ones when max == min."""
    v = np.asarray(v, dtype=np.float64)
    lo = v.min(axis=-1, keepdims=True)
    hi = v.max(axis=-1, keepdims=True)
    span = hi - lo
    flat = span == 0
    return np.where(flat, 1.0, 1.0 - (v - lo) / np.where(flat, 1.0, span))


def refined_score(p, w) -> np.ndarray | float:
    """Softmax(w)-weighted combination of the modality scores."""
    p = np.asarray(p, dtype=np.float64)
    out = (softmax_value(w, axis=-1) * p).sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def assign_label(p_hat, h: float = DEFAULT_THRESHOLD):
    out = (np.asarray(p_hat) >= h).astype(int)
    return int(out) if out.ndim == 0 else out


def naive_label(p, h: float = DEFAULT_THRESHOLD):
    return assign_label(np.asarray(p, dtype=np.float64).mean(axis=-1), h)


def score_batch(model: FasModel, batch: Batch, k: int = 10, rate: float = DEFAULT_DROPOUT,
                rng: RngStream | np.random.Generator | None = None, h: float = DEFAULT_THRESHOLD) -> PseudoLabels:
    fused = fused_features(model, model.tensors(), batch)
    p = deterministic_scores(model, fused)
    v, mu = mc_variance(model, fused, k, rate, rng)
    w = certainty_weights(v)
    psi = softmax_value(w, axis=-1)
    p_hat = (psi * p).sum(axis=-1)
    return PseudoLabels(p, v, mu, w, psi, p_hat, assign_label(p_hat, h), naive_label(p, h))


def label_batch(model: FasModel, samples, k: int = 10, rate: float = DEFAULT_DROPOUT,
                rng: RngStream | np.random.Generator | None = None, h: float = DEFAULT_THRESHOLD) -> list[PseudoLabelRecord]:
    if len(samples) == 0:
        raise ContractError("label_batch needs a nonempty batch")
    batch = samples if isinstance(samples, Batch) else Batch.from_samples(samples)
    ids = None if isinstance(samples, Batch) else [s.id for s in samples]
    return score_batch(model, batch, k, rate, rng, h).records(ids)


def dump_records(records: list[PseudoLabelRecord], path, batch_index: int | None = None):
    """Append records as JSON lines."""
    with open(path, "a") as fh:
        for r in records:
            d = r.to_dict()
            if batch_index is not None:
                d = {"batch": batch_index, **d}
            fh.write(json.dumps(d) + "\n")
