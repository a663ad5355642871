"""Per-modality MLP extractors and linear classifiers, with supervised source training.

Parameters live in one flat ``name -> ndarray`` dict on :class:`FasModel`.
Forward code never touches that dict directly; it works on a *view* built by
:meth:`FasModel.tensors`, which wraps every array in a :class:`Tensor` and
marks the requested names as trainable. Gradients are read back from the view.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics import AdamState, ContractError, DimensionError, RngStream, Tensor
from .synthdata import MODALITIES, MultiModalSample

MODEL_SCHEMA_VERSION = 1
ADAPTERS = ("rgb", "ir", "d")


class ModelLoadError(ValueError):
    pass


@dataclass
class Batch:
    """Stacked samples. Absent modalities are zero rows with ``present == 0``."""

    x: dict[str, np.ndarray]
    present: dict[str, np.ndarray]
    labels: np.ndarray | None = None

    @classmethod
    def from_samples(cls, samples: list[MultiModalSample], raw_dim: dict | None = None) -> Batch:
        if not samples:
            raise ContractError("cannot build a batch from zero samples")
        if any(s.rgb is None for s in samples):
            raise ContractError("every sample needs an rgb view")
        x, present = {}, {}
        for mod in MODALITIES:
            width = raw_dim[mod] if raw_dim else samples[0].rgb.shape[0]
            for s in samples:
                v = getattr(s, mod)
                if v is not None:
                    width = v.shape[0]
                    break
            arr = np.zeros((len(samples), width))
            mask = np.zeros(len(samples))
            for i, s in enumerate(samples):
                v = getattr(s, mod)
                if v is not None:
                    if v.shape[0] != width:
                        raise DimensionError(f"sample {s.id}: {mod} has dim {v.shape[0]}, expected {width}")
                    arr[i] = v
                    mask[i] = 1.0
            x[mod], present[mod] = arr, mask
        labels = None
        if all(s.label is not None for s in samples):
            labels = np.array([s.label for s in samples], dtype=np.float64)
        return cls(x, present, labels)

    def __len__(self):
        return self.x["rgb"].shape[0]


@dataclass
class FeatureSet:
    rgb: np.ndarray
    ir: np.ndarray | None = None
    d: np.ndarray | None = None


class FasModel:
    """Three extractors ``F_mod``, three classifiers ``C_mod`` and three adapters ``A_mod``.

    Extractors are ``raw -> 64 -> 64 -> 32 -> feat_dim`` with ReLU between
    layers, classifiers a single affine map to one logit, adapters
    ``feat_dim -> 32 -> feat_dim``. ``frozen_prefix`` extractor layers stay
    fixed during target adaptation.
    """

    def __init__(self, raw_dim: int = 32, feat_dim: int = 16, hidden=(64, 64, 32), adapter_hidden: int = 32,
                 frozen_prefix: int = 2, seed: int = 0):
        self.raw_dim = raw_dim
        self.feat_dim = feat_dim
        self.hidden = tuple(hidden)
        self.adapter_hidden = adapter_hidden
        self.frozen_prefix = frozen_prefix
        self.params: dict[str, np.ndarray] = {}
        self.optimizers: dict[str, AdamState] = {}
        if seed is not None:
            self._init(RngStream(seed).child("init").generator())

    @property
    def n_layers(self) -> int:
        return len(self.hidden) + 1

    def _init(self, gen):
        def dense(name, fan_in, fan_out):
            self.params[f"{name}.W"] = gen.standard_normal((fan_in, fan_out)) * math.sqrt(2.0 / fan_in)
            self.params[f"{name}.b"] = np.zeros(fan_out)

        widths = (self.raw_dim, *self.hidden, self.feat_dim)
        for mod in MODALITIES:
            for i in range(self.n_layers):
                dense(f"F_{mod}.{i}", widths[i], widths[i + 1])
        for mod in MODALITIES:
            dense(f"C_{mod}", self.feat_dim, 1)
            self.params[f"C_{mod}.W"] *= math.sqrt(0.5)
        for name in ADAPTERS:
            dense(f"A_{name}.0", self.feat_dim, self.adapter_hidden)
            dense(f"A_{name}.1", self.adapter_hidden, self.feat_dim)

    # ------------------------------------------------------------ groups

    def extractor_names(self, from_layer: int = 0) -> list[str]:
        return [f"F_{m}.{i}.{p}" for m in MODALITIES for i in range(from_layer, self.n_layers) for p in "Wb"]

    def classifier_names(self) -> list[str]:
        return [f"C_{m}.{p}" for m in MODALITIES for p in "Wb"]

    def adapter_names(self) -> list[str]:
        return [f"A_{a}.{i}.{p}" for a in ADAPTERS for i in range(2) for p in "Wb"]

    def adaptable_names(self) -> list[str]:
        """Parameters updated during target adaptation: unfrozen extractor layers and classifiers."""
        return self.extractor_names(self.frozen_prefix) + self.classifier_names()

    def tensors(self, trainable=()) -> dict[str, Tensor]:
        trainable = set(trainable)
        return {k: Tensor(v, requires_grad=k in trainable) for k, v in self.params.items()}

    def optimizer(self, group: str, lr: float) -> AdamState:
        if group not in self.optimizers:
            self.optimizers[group] = AdamState(lr=lr)
        state = self.optimizers[group]
        state.lr = lr
        return state

    def clone(self) -> FasModel:
        return copy.deepcopy(self)

    # --------------------------------------------------------- serialization

    def to_dict(self) -> dict:
        return {
            "schema_version": MODEL_SCHEMA_VERSION,
            "dims": {"raw_dim": self.raw_dim, "feat_dim": self.feat_dim, "hidden": list(self.hidden),
                     "adapter_hidden": self.adapter_hidden},
            "frozen_prefix": self.frozen_prefix,
            "params": {k: v.tolist() for k, v in self.params.items()},
            "optimizers": {k: s.to_dict() for k, s in sorted(self.optimizers.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> FasModel:
        if d.get("schema_version") != MODEL_SCHEMA_VERSION:
            raise ModelLoadError(f"unsupported model schema_version {d.get('schema_version')!r}")
        dims = d["dims"]
        m = cls(dims["raw_dim"], dims["feat_dim"], dims["hidden"], dims["adapter_hidden"], d["frozen_prefix"], seed=None)
        m.params = {k: np.asarray(v, dtype=np.float64) for k, v in d["params"].items()}
        m.optimizers = {k: AdamState.from_dict(s) for k, s in d["optimizers"].items()}
        return m

    def equals(self, other: FasModel) -> bool:
        return json.dumps(self.to_dict()) == json.dumps(other.to_dict())


def save_model(model: FasModel, path):
    Path(path).write_text(json.dumps(model.to_dict()) + "\n")


def load_model(path) -> FasModel:
    try:
        d = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ModelLoadError(f"{path}: cannot read model file ({exc})") from exc
    try:
        return FasModel.from_dict(d)
    except (KeyError, TypeError) as exc:
        raise ModelLoadError(f"{path}: malformed model file ({exc})") from exc


# ------------------------------------------------------------------ forward


def mlp(t: dict[str, Tensor], prefix: str, n_layers: int, x) -> Tensor:
    h = x
    for i in range(n_layers):
        h = nx.affine(h, t[f"{prefix}.{i}.W"], t[f"{prefix}.{i}.b"])
        if i < n_layers - 1:
            h = nx.relu(h)
    return h


def extract(model: FasModel, t: dict[str, Tensor], mod: str, x) -> Tensor:
    x = nx.as_tensor(x)
    if x.shape[-1] != model.raw_dim:
        raise DimensionError(f"{mod} input has dim {x.shape[-1]}, model expects {model.raw_dim}")
    return mlp(t, f"F_{mod}", model.n_layers, x)


def classify(t: dict[str, Tensor], mod: str, f) -> Tensor:
    """Score in (0, 1) per row; shape (B,)."""
    return nx.sigmoid(nx.affine(f, t[f"C_{mod}.W"], t[f"C_{mod}.b"]).sum(axis=1))


def batch_features(model: FasModel, t: dict[str, Tensor], batch: Batch) -> dict[str, Tensor]:
    """``f_mod = 1[x_mod present] * F_mod(x_mod)`` for every modality, absent rows zeroed."""
    feats = {}
    for mod in MODALITIES:
        f = extract(model, t, mod, batch.x[mod])
        mask = batch.present[mod]
        feats[mod] = f if mask.all() else f * mask[:, None]
    return feats


def extract_features(model: FasModel, sample: MultiModalSample) -> FeatureSet:
    if sample.rgb is None:
        raise ContractError("extract_features needs the rgb view")
    t = model.tensors()
    out = {}
    for mod in MODALITIES:
        v = getattr(sample, mod)
        out[mod] = None if v is None else extract(model, t, mod, np.asarray(v)[None, :]).data[0]
    return FeatureSet(**out)


# ---------------------------------------------------------------- training


def source_loss_tensor(model: FasModel, t: dict[str, Tensor], batch: Batch) -> Tensor:
    if batch.labels is None:
        raise ContractError("source loss needs a label on every sample")
    if not all(batch.present[m].all() for m in MODALITIES):
        raise ContractError("source samples must carry all three modalities")
    feats = batch_features(model, t, batch)
    total = None
    for mod in MODALITIES:
        term = nx.binary_cross_entropy(classify(t, mod, feats[mod]), batch.labels, reduction="sum")
        total = term if total is None else total + term
    return total * (1.0 / len(batch))


def source_loss(model: FasModel, samples) -> float:
    batch = samples if isinstance(samples, Batch) else Batch.from_samples(samples)
    return source_loss_tensor(model, model.tensors(), batch).item()


def source_step(model: FasModel, batch: Batch, lr: float) -> float:
    names = model.extractor_names() + model.classifier_names()
    t = model.tensors(names)
    loss = source_loss_tensor(model, t, batch)
    nx.backward(loss)
    grads = {k: t[k].grad if t[k].grad is not None else np.zeros_like(t[k].data) for k in names}
    nx.adam_step(model.params, grads, model.optimizer("source", lr), lr)
    return loss.item()


def train_source(model: FasModel, samples: list[MultiModalSample], epochs: int = 10, lr: float = 1e-4,
                 batch_size: int = 32, rng: RngStream | None = None) -> tuple[FasModel, list[float]]:
    """Supervised BCE training of extractors and classifiers.

    Returns the model (trained in place) and a loss curve whose first entry is
    the full-data loss before training, followed by one mean training loss per
    epoch.
    """
    if not samples:
        raise ContractError("train_source needs at least one labeled sample")
    rng = rng or RngStream(0)
    full = Batch.from_samples(samples)
    curve = [source_loss(model, full)]
    n = len(samples)
    for epoch in range(epochs):
        order = rng.child("epoch", epoch).generator().permutation(n)
        losses, weights = [], []
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            losses.append(source_step(model, take(full, idx), lr))
            weights.append(len(idx))
        curve.append(float(np.dot(losses, weights) / n))
    return model, curve


def take(batch: Batch, idx) -> Batch:
    return Batch(
        {m: a[idx] for m, a in batch.x.items()},
        {m: a[idx] for m, a in batch.present.items()},
        None if batch.labels is None else batch.labels[idx],
    )

