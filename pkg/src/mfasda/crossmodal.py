"""Cross-modal feature adapters and indicator-gated fusion.

Adapters map features between modalities:

* ``A_rgb``: IR features -> RGB-like features
* ``A_ir``:  RGB features -> IR-like features
* ``A_d``:   RGB or IR features -> depth-like features (one shared adapter)

Fusion averages each modality's own feature (when present) with every
transformed feature available for it, so missing IR / depth are substituted
and present ones are reinforced.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .model import Batch, FasModel, FeatureSet, batch_features, mlp, take
from .numerics import ContractError, RngStream, Tensor

log = logging.getLogger(__name__)


@dataclass
class TransformedSet:
    ir_hat: np.ndarray
    dr_hat: np.ndarray
    rgb_hat: np.ndarray | None = None
    di_hat: np.ndarray | None = None

    def keys(self) -> set[str]:
        return {k for k in ("rgb_hat", "ir_hat", "dr_hat", "di_hat") if getattr(self, k) is not None}


@dataclass
class FusedFeatureSet:
    rgb: np.ndarray
    ir: np.ndarray
    d: np.ndarray


@dataclass
class AdapterLosses:
    rgb: Tensor
    ir: Tensor
    d: Tensor
    counts: dict[str, int]

    @property
    def degenerate(self) -> dict[str, bool]:
        return {k: n == 0 for k, n in self.counts.items()}

    def total(self) -> Tensor:
        return self.rgb + self.ir + self.d

    def values(self) -> tuple[float, float, float]:
        return self.rgb.item(), self.ir.item(), self.d.item()


def apply_adapter(t: dict[str, Tensor], name: str, f) -> Tensor:
    return mlp(t, f"A_{name}", 2, f)


# ----------------------------------------------------------------- batched


def transform_batch(t: dict[str, Tensor], feats: dict[str, Tensor]) -> dict[str, Tensor]:
    """All four transformed features for every row; callers gate IR-derived ones."""
    return {
        "rgb_hat": apply_adapter(t, "rgb", feats["ir"]),
        "ir_hat": apply_adapter(t, "ir", feats["rgb"]),
        "dr_hat": apply_adapter(t, "d", feats["rgb"]),
        "di_hat": apply_adapter(t, "d", feats["ir"]),
    }


def fuse_batch(feats: dict[str, Tensor], hats: dict[str, Tensor], present: dict[str, np.ndarray]) -> dict[str, Tensor]:
    i_ir = present["ir"][:, None]
    i_d = present["d"][:, None]
    return {
        "rgb": (feats["rgb"] + hats["rgb_hat"] * i_ir) / (1.0 + i_ir),
        "ir": (feats["ir"] * i_ir + hats["ir_hat"]) / (1.0 + i_ir),
        "d": (feats["d"] * i_d + hats["dr_hat"] + hats["di_hat"] * i_ir) / (1.0 + i_d + i_ir),
    }


def fused_features(model: FasModel, t: dict[str, Tensor], batch: Batch) -> dict[str, Tensor]:
    """Extract, transform and fuse a batch in one graph."""
    if not batch.present["rgb"].all():
        raise ContractError("fusion needs the rgb view on every sample")
    feats = batch_features(model, t, batch)
    return fuse_batch(feats, transform_batch(t, feats), batch.present)


# -------------------------------------------------------------- per sample


def transform(features: FeatureSet, model: FasModel) -> TransformedSet:
    if features.rgb is None:
        raise ContractError("transform needs the rgb feature")
    t = model.tensors()

    def run(name, f):
        return apply_adapter(t, name, np.asarray(f)[None, :]).data[0]

    out = TransformedSet(ir_hat=run("ir", features.rgb), dr_hat=run("d", features.rgb))
    if features.ir is not None:
        out.rgb_hat = run("rgb", features.ir)
        out.di_hat = run("d", features.ir)
    return out


def fuse(features: FeatureSet, transformed: TransformedSet) -> FusedFeatureSet:
    if features.rgb is None:
        raise ContractError("fuse needs the rgb feature")
    zero = np.zeros_like(features.rgb)
    feats = {m: Tensor((zero if getattr(features, m) is None else getattr(features, m))[None, :])
             for m in ("rgb", "ir", "d")}
    hats = {k: Tensor((zero if getattr(transformed, k) is None else getattr(transformed, k))[None, :])
            for k in ("rgb_hat", "ir_hat", "dr_hat", "di_hat")}
    present = {m: np.array([0.0 if getattr(features, m) is None else 1.0]) for m in ("rgb", "ir", "d")}
    fused = fuse_batch(feats, hats, present)
    return FusedFeatureSet(**{m: v.data[0] for m, v in fused.items()})


# ---------------------------------------------------------- regularization


def adapter_regularization_loss(model: FasModel, source: Batch | None, target: Batch | None,
                                t: dict[str, Tensor] | None = None) -> AdapterLosses:
    """Cosine-alignment losses for the three adapters.

    Each loss averages ``1 - cos(f_mod, f_hat_mod)`` over its contributing
    terms: every source sample, and target samples whose indicator product is
    one. Extractor outputs are detached, so gradients reach adapters only. A
    loss with no contributing term is 0 and flagged degenerate.
    """
    if t is None:
        t = model.tensors(model.adapter_names())
    frozen = model.tensors()
    pieces = {"rgb": [], "ir": [], "d": []}

    for batch, is_target in ((source, False), (target, True)):
        if batch is None:
            continue
        feats = {m: Tensor(f.data) for m, f in batch_features(model, frozen, batch).items()}
        hats = transform_batch(t, feats)
        n = len(batch)
        ones = np.ones(n)
        i_ir = batch.present["ir"] if is_target else ones
        i_d = batch.present["d"] if is_target else ones
        pieces["rgb"].append((feats["rgb"], hats["rgb_hat"], i_ir))
        pieces["ir"].append((feats["ir"], hats["ir_hat"], i_ir))
        pieces["d"].append((feats["d"], hats["dr_hat"], i_d))
        pieces["d"].append((feats["d"], hats["di_hat"], i_d * i_ir))

    losses, counts = {}, {}
    for name, terms in pieces.items():
        total, count = None, 0
        for f, f_hat, gate in terms:
            k = int(gate.sum())
            if k == 0:
                continue
            # cos <= 1, so |1 - cos| is 1 - cos
            term = ((1.0 - nx.cosine_similarity(f, f_hat)) * gate).sum()
            total = term if total is None else total + term
            count += k
        counts[name] = count
        if count == 0:
            log.debug("adapter loss %s has no contributing terms", name)
            losses[name] = Tensor(0.0)
        else:
            losses[name] = total * (1.0 / count)
    return AdapterLosses(losses["rgb"], losses["ir"], losses["d"], counts)


def train_adapters_step(model: FasModel, source: Batch | None, target: Batch | None, lr: float) -> AdapterLosses:
    """One Adam step on the summed adapter losses; only adapter parameters move."""
    names = model.adapter_names()
    t = model.tensors(names)
    losses = adapter_regularization_loss(model, source, target, t)
    total = losses.total()
    grads = {k: np.zeros_like(model.params[k]) for k in names}
    if total.requires_grad:
        nx.backward(total)
        for k in names:
            if t[k].grad is not None:
                grads[k] = t[k].grad
    nx.adam_step(model.params, grads, model.optimizer("adapters", lr), lr)
    return losses


def pretrain_adapters(model: FasModel, source: Batch, steps: int = 300, lr: float = 1e-3, batch_size: int = 32,
                      rng: RngStream | None = None) -> list[float]:
    """Source-only adapter training run after source pre-training. Returns per-step summed loss."""
    rng = rng or RngStream(0)
    gen = rng.generator()
    history = []
    n = len(source)
    for _ in range(steps):
        idx = gen.choice(n, size=min(batch_size, n), replace=False)
        history.append(sum(train_adapters_step(model, take(source, np.sort(idx)), None, lr).values()))
    return history
