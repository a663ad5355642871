"""AUC, HTER and Youden-index thresholds for live (1) vs spoof (0) scores."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata


class UndefinedMetricError(ValueError):
    """Metric needs at least one live and one spoof sample."""


@dataclass
class ScoredSample:
    score: float
    label: int


def _split(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError(f"{scores.size} scores but {labels.size} labels")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    live, spoof = scores[labels == 1], scores[labels == 0]
    if live.size == 0 or spoof.size == 0:
        raise UndefinedMetricError(f"need both classes, got {live.size} live and {spoof.size} spoof")
    return live, spoof


def unpack(samples: list[ScoredSample]) -> tuple[np.ndarray, np.ndarray]:
    return np.array([s.score for s in samples]), np.array([s.label for s in samples])


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(live score > spoof score), ties counted one half."""
    live, spoof = _split(scores, labels)
    ranks = rankdata(np.concatenate([live, spoof]))
    n1, n0 = live.size, spoof.size
    return float((ranks[:n1].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def hter(scores, labels, threshold: float) -> tuple[float, float, float]:
    """(HTER, FAR, FRR) when a score >= threshold is called live."""
    live, spoof = _split(scores, labels)
    far = np.count_nonzero(spoof >= threshold) / spoof.size
    frr = np.count_nonzero(live < threshold) / live.size
    return (far + frr) / 2.0, far, frr


def threshold_candidates(scores) -> np.ndarray:
    u = np.unique(np.asarray(scores, dtype=np.float64))
    return np.unique(np.concatenate([[0.0, 1.0], (u[:-1] + u[1:]) / 2.0]))


def youden_threshold(scores, labels) -> float:
    """Candidate maximizing TPR - FPR; ties go to the smallest threshold.

    Candidates are the midpoints between adjacent distinct scores plus 0 and 1.
    """
    live, spoof = _split(scores, labels)
    cand = threshold_candidates(np.concatenate([live, spoof]))
    live_s, spoof_s = np.sort(live), np.sort(spoof)
    tpr = 1.0 - np.searchsorted(live_s, cand, side="left") / live.size
    fpr = 1.0 - np.searchsorted(spoof_s, cand, side="left") / spoof.size
    return float(cand[int(np.argmax(tpr - fpr))])


@dataclass
class EvalReport:
    auc: float
    hter: float
    far: float
    frr: float
    threshold: float
    threshold_mode: str
    n_live: int
    n_spoof: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> EvalReport:
        return cls(**json.loads(text))

    def table(self) -> str:
        rows = [
            ("HTER (%)", f"{100 * self.hter:.2f}"),
            ("AUC (%)", f"{100 * self.auc:.2f}"),
            ("FAR (%)", f"{100 * self.far:.2f}"),
            ("FRR (%)", f"{100 * self.frr:.2f}"),
            ("threshold", f"{self.threshold:.4f} ({self.threshold_mode})"),
            ("live / spoof", f"{self.n_live} / {self.n_spoof}"),
        ]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows) + "\n"


REPORT_SCHEMA = {
    "type": "object",
    "required": ["auc", "hter", "far", "frr", "threshold", "threshold_mode", "n_live", "n_spoof"],
    "properties": {
        "auc": {"type": "number", "minimum": 0, "maximum": 1},
        "hter": {"type": "number", "minimum": 0, "maximum": 1},
        "far": {"type": "number", "minimum": 0, "maximum": 1},
        "frr": {"type": "number", "minimum": 0, "maximum": 1},
        "threshold": {"type": "number"},
        "threshold_mode": {"type": "string"},
        "n_live": {"type": "integer", "minimum": 1},
        "n_spoof": {"type": "integer", "minimum": 1},
    },
    "additionalProperties": False,
}


def evaluate_scores(scores, labels, threshold: float, mode: str) -> EvalReport:
    live, spoof = _split(scores, labels)
    h, far, frr = hter(scores, labels, threshold)
    return EvalReport(auc(scores, labels), h, far, frr, float(threshold), mode, int(live.size), int(spoof.size))
