"""Synthetic multi-domain RGB / IR / depth data for live-vs-spoof experiments.

Every sample has a latent content vector shared by its three modalities, so
the modalities are complementary views of one capture. Each modality is a
linear image of the latent plus a domain offset and sensor noise::

    x_mod = M_mod @ (e(z) + is_spoof * magnitude * u) + b_mod + sigma_mod * n

Domains differ in mixing matrices, offsets, noise and (for targets) in the
spoof direction ``u``. Live sample ``j`` and spoof sample ``j`` share the
latent identity ``z_j``, mirroring datasets where each subject is recorded
both live and under attack.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .numerics import RngStream

MODALITIES = ("rgb", "ir", "d")
SCHEMA_VERSION = 1
LATENT_DIM = 8
RAW_DIM = 32


class GenerationError(ValueError):
    pass


class DatasetLoadError(ValueError):
    pass


class MissingPattern(enum.Enum):
    NONE = "none"
    MISSING_D = "d"
    MISSING_I = "i"
    MISSING_DI = "di"

    @property
    def drops(self) -> tuple[str, ...]:
        return {"none": (), "d": ("d",), "i": ("ir",), "di": ("ir", "d")}[self.value]

    @classmethod
    def parse(cls, value) -> MissingPattern:
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown missing pattern {value!r}; expected one of none, d, i, di") from None


@dataclass
class MultiModalSample:
    id: str
    domain: str
    rgb: np.ndarray
    ir: np.ndarray | None = None
    d: np.ndarray | None = None
    label: int | None = None

    def has(self, mod: str) -> bool:
        return getattr(self, mod) is not None

    def unlabeled(self) -> MultiModalSample:
        return replace(self, label=None)

    def __eq__(self, other):
        if not isinstance(other, MultiModalSample):
            return NotImplemented
        if (self.id, self.domain, self.label) != (other.id, other.domain, other.label):
            return False
        for mod in MODALITIES:
            a, b = getattr(self, mod), getattr(other, mod)
            if (a is None) != (b is None):
                return False
            if a is not None and not np.array_equal(a, b):
                return False
        return True


@dataclass
class DomainSpec:
    """Generative parameters of one domain.

    ``skew`` scales the spread of the latent content; larger values push live
    and spoof clouds into each other.
    """

    domain: str
    mixing: dict[str, np.ndarray]
    offset: dict[str, np.ndarray]
    noise: dict[str, float]
    spoof_direction: np.ndarray
    spoof_magnitude: float = 2.0
    skew: float = 1.0

    def __post_init__(self):
        for mod in MODALITIES:
            if self.noise[mod] < 0:
                raise GenerationError(f"domain {self.domain}: noise for {mod} must be >= 0")

    @property
    def raw_dim(self) -> int:
        return self.mixing["rgb"].shape[0]

    @property
    def latent_dim(self) -> int:
        return self.mixing["rgb"].shape[1]


def generate_domain(spec: DomainSpec, n_live: int, n_spoof: int, rng: RngStream) -> list[MultiModalSample]:
    if n_live <= 0 or n_spoof <= 0:
        raise GenerationError("n_live and n_spoof must both be positive")
    for mod in MODALITIES:
        m = spec.mixing[mod]
        if np.linalg.matrix_rank(m) < m.shape[1]:
            raise GenerationError(f"domain {spec.domain}: mixing matrix for {mod} is rank deficient")

    gen = rng.generator()
    n_id = max(n_live, n_spoof)
    content = np.tanh(spec.skew * gen.standard_normal((n_id, spec.latent_dim)))
    u = spec.spoof_direction / np.linalg.norm(spec.spoof_direction)
    noise = {mod: gen.standard_normal((n_live + n_spoof, spec.raw_dim)) for mod in MODALITIES}

    samples = []
    for i in range(n_live + n_spoof):
        live = i < n_live
        j = i if live else i - n_live
        latent = content[j] if live else content[j] + spec.spoof_magnitude * u
        views = {mod: spec.mixing[mod] @ latent + spec.offset[mod] + spec.noise[mod] * noise[mod][i]
                 for mod in MODALITIES}
        samples.append(
            MultiModalSample(
                id=f"{spec.domain}-{'live' if live else 'spoof'}-{j:05d}",
                domain=spec.domain,
                label=1 if live else 0,
                **views,
            )
        )
    return samples


def apply_missing(samples: list[MultiModalSample], pattern) -> list[MultiModalSample]:
    drops = MissingPattern.parse(pattern).drops
    return [replace(s, **{mod: None for mod in drops}) for s in samples]


# ---------------------------------------------------------------- protocols


def _unit(gen, n):
    v = gen.standard_normal(n)
    return v / np.linalg.norm(v)


def default_domains(
    seed: int,
    n_source: int = 3,
    shift: float = 1.0,
    target_shift: float = 1.5,
    target_depth_noise: float = 1.0,
    spoof_magnitude: float = 3.0,
    target_angle: float = 30.0,
    raw_dim: int = RAW_DIM,
    latent_dim: int = LATENT_DIM,
) -> tuple[list[DomainSpec], DomainSpec]:
    """Source domains plus one shifted target domain.

    The target gets a larger offset, a spoof direction rotated by
    ``target_angle`` degrees away from the source one (a new attack type) and
    a noisier depth sensor.
    """
    gen = RngStream(seed).child("domains").generator()
    base = {mod: gen.standard_normal((raw_dim, latent_dim)) / math.sqrt(latent_dim) for mod in MODALITIES}
    u_src = _unit(gen, latent_dim)

    def make(name, amount, u, depth_noise):
        mixing = {mod: base[mod] + 0.25 * amount * gen.standard_normal(base[mod].shape) / math.sqrt(latent_dim)
                  for mod in MODALITIES}
        offset = {mod: amount * _unit(gen, raw_dim) for mod in MODALITIES}
        noise = {"rgb": 0.3, "ir": 0.3, "d": depth_noise}
        return DomainSpec(name, mixing, offset, noise, u, spoof_magnitude)

    sources = [make(f"S{i}", shift, u_src + 0.2 * _unit(gen, latent_dim), 0.3) for i in range(n_source)]
    u_new = _unit(gen, latent_dim)
    u_perp = u_new - (u_new @ u_src) * u_src
    theta = math.radians(target_angle)
    u_tgt = math.cos(theta) * u_src + math.sin(theta) * u_perp / np.linalg.norm(u_perp)
    target = make("T", target_shift, u_tgt, target_depth_noise)
    return sources, target


# -------------------------------------------------------------------- files


@dataclass
class Dataset:
    splits: dict[str, list[MultiModalSample]]
    raw_dim: dict[str, int] = field(default_factory=lambda: {m: RAW_DIM for m in MODALITIES})
    seed: int = 0
    missing: dict[str, str] = field(default_factory=dict)
    domains: list[str] = field(default_factory=list)

    def manifest(self) -> dict:
        counts = {}
        for split, samples in self.splits.items():
            c = counts.setdefault(split, {})
            for s in samples:
                key = {1: "live", 0: "spoof", None: "unlabeled"}[s.label]
                c[key] = c.get(key, 0) + 1
        return {
            "schema_version": SCHEMA_VERSION,
            "domains": self.domains or sorted({s.domain for ss in self.splits.values() for s in ss}),
            "raw_dim": self.raw_dim,
            "counts": counts,
            "seed": self.seed,
            "missing_pattern": {k: self.missing.get(k, "none") for k in self.splits},
            "splits": list(self.splits),
        }


def _fmt_vec(v):
    if v is None:
        return "null"
    return "[" + ", ".join(format(float(x), ".17g") for x in v) + "]"


def _sample_line(s: MultiModalSample) -> str:
    return (
        "{" + f'"id": {json.dumps(s.id)}, "domain": {json.dumps(s.domain)}, '
        f'"label": {"null" if s.label is None else int(s.label)}, '
        f'"rgb": {_fmt_vec(s.rgb)}, "ir": {_fmt_vec(s.ir)}, "d": {_fmt_vec(s.d)}' + "}"
    )


def write_dataset(path, dataset: Dataset):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    (path / "manifest.json").write_text(json.dumps(dataset.manifest(), indent=2, sort_keys=True) + "\n")
    for split, samples in dataset.splits.items():
        (path / split).mkdir(exist_ok=True)
        with open(path / split / "samples.jsonl", "w") as fh:
            for s in samples:
                fh.write(_sample_line(s) + "\n")


def read_dataset(path) -> Dataset:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetLoadError(f"{path / 'manifest.json'}: cannot read manifest ({exc})") from exc
    for key in ("schema_version", "raw_dim", "splits", "seed"):
        if key not in manifest:
            raise DatasetLoadError(f"manifest missing field {key!r}")
    if manifest["schema_version"] != SCHEMA_VERSION:
        raise DatasetLoadError(f"unsupported schema_version {manifest['schema_version']}")
    raw_dim = {mod: int(manifest["raw_dim"][mod]) for mod in MODALITIES}

    splits = {}
    for split in manifest["splits"]:
        fname = path / split / "samples.jsonl"
        samples = []
        with open(fname) as fh:
            for lineno, line in enumerate(fh, start=1):
                if line.strip():
                    samples.append(_parse_line(line, raw_dim, f"{fname}:{lineno}"))
        splits[split] = samples
    return Dataset(
        splits=splits,
        raw_dim=raw_dim,
        seed=manifest["seed"],
        missing=dict(manifest.get("missing_pattern", {})),
        domains=list(manifest.get("domains", [])),
    )


def _parse_line(line: str, raw_dim: dict, where: str) -> MultiModalSample:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DatasetLoadError(f"{where}: malformed JSON ({exc.msg})") from None
    for key in ("id", "domain", "label", *MODALITIES):
        if key not in obj:
            raise DatasetLoadError(f"{where}: missing field {key!r}")
    label = obj["label"]
    if label is not None and (isinstance(label, bool) or label not in (0, 1)):
        raise DatasetLoadError(f"{where}: label must be 0, 1 or null, got {label!r}")
    views = {}
    for mod in MODALITIES:
        v = obj[mod]
        if v is None:
            if mod == "rgb":
                raise DatasetLoadError(f"{where}: rgb must be present")
            views[mod] = None
            continue
        try:
            arr = np.array(v, dtype=np.float64)
        except (TypeError, ValueError):
            raise DatasetLoadError(f"{where}: {mod} is not a numeric vector") from None
        if arr.ndim != 1 or arr.shape[0] != raw_dim[mod]:
            raise DatasetLoadError(f"{where}: {mod} has {arr.size} values, manifest raw_dim is {raw_dim[mod]}")
        if not np.all(np.isfinite(arr)):
            raise DatasetLoadError(f"{where}: {mod} contains non-finite values")
        views[mod] = arr
    return MultiModalSample(id=str(obj["id"]), domain=str(obj["domain"]), label=label, **views)
