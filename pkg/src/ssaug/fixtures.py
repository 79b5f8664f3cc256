"""Seeded Gaussian fixture datasets with controllable class structure.

Fixtures stand in for extractor output: real samples are drawn from their
class Gaussian; synthetic samples are drawn from their assigned class except
for a configurable fraction drawn from a uniformly random other class (label
noise). Probabilities come from a softmax of negative scaled squared
distances to the generating class means, so confidence and entropy are
analytically controllable, and each MC run adds independent jitter to both
activations and the softmax input. Generation is fully reproducible from the
seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .store import (
    REAL,
    SYNTHETIC,
    DatasetHeader,
    EmbeddingDataset,
    LayerShape,
    SampleRecord,
    ValidationError,
)


@dataclass(frozen=True)
class FixtureSpec:
    num_classes: int
    layers: tuple[LayerShape, ...]
    class_means: np.ndarray          # (num_classes, total flat dim)
    class_stds: tuple[float, ...]    # isotropic per-class std
    real_per_class: tuple[int, ...]
    synthetic_per_class: tuple[int, ...]
    mislabel_fraction: float = 0.0
    mc_jitter: float = 0.0
    temperature: float = 1.0
    seed: int = 0
    mc_runs: int = 5

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "class_means", np.asarray(self.class_means, dtype=np.float64))
        object.__setattr__(self, "class_stds", tuple(float(s) for s in self.class_stds))
        object.__setattr__(self, "real_per_class", tuple(int(n) for n in self.real_per_class))
        object.__setattr__(self, "synthetic_per_class", tuple(int(n) for n in self.synthetic_per_class))
        c = self.num_classes
        if c < 2:
            raise ValidationError(f"num_classes must be >= 2, got {c}")
        dim = self.total_dim
        if self.class_means.shape != (c, dim):
            raise ValidationError(
                f"class_means shape {self.class_means.shape} does not match ({c}, {dim})"
            )
        for name, seq in (("class_stds", self.class_stds), ("real_per_class", self.real_per_class),
                          ("synthetic_per_class", self.synthetic_per_class)):
            if len(seq) != c:
                raise ValidationError(f"{name} must have one entry per class")
        if any(s <= 0 for s in self.class_stds):
            raise ValidationError("degenerate covariance: class stds must be > 0")
        if any(n < 0 for n in self.real_per_class + self.synthetic_per_class):
            raise ValidationError("sample counts must be >= 0")
        if not 0.0 <= self.mislabel_fraction <= 1.0:
            raise ValidationError(f"mislabel_fraction must lie in [0, 1], got {self.mislabel_fraction}")
        if self.mc_jitter < 0:
            raise ValidationError(f"mc_jitter must be >= 0, got {self.mc_jitter}")
        if self.temperature <= 0:
            raise ValidationError(f"temperature must be > 0, got {self.temperature}")
        if self.mc_runs < 1:
            raise ValidationError(f"mc_runs must be >= 1, got {self.mc_runs}")

    @property
    def total_dim(self) -> int:
        return sum(shape.size for shape in self.layers)


def load_fixture_spec(path: str | Path) -> FixtureSpec:
    """Reads a JSON spec file whose keys mirror the FixtureSpec fields."""
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    known = {"num_classes", "layers", "class_means", "class_stds", "real_per_class",
             "synthetic_per_class", "mislabel_fraction", "mc_jitter", "temperature",
             "seed", "mc_runs"}
    unknown = set(raw) - known
    if unknown:
        raise ValidationError(f"unknown fixture spec fields: {sorted(unknown)}")
    try:
        layers = tuple(LayerShape(*triple) for triple in raw["layers"])
        return FixtureSpec(
            num_classes=raw["num_classes"],
            layers=layers,
            class_means=np.asarray(raw["class_means"], dtype=np.float64),
            class_stds=tuple(raw["class_stds"]),
            real_per_class=tuple(raw["real_per_class"]),
            synthetic_per_class=tuple(raw["synthetic_per_class"]),
            mislabel_fraction=raw.get("mislabel_fraction", 0.0),
            mc_jitter=raw.get("mc_jitter", 0.0),
            temperature=raw.get("temperature", 1.0),
            seed=raw.get("seed", 0),
            mc_runs=raw.get("mc_runs", 5),
        )
    except KeyError as exc:
        raise ValidationError(f"fixture spec missing field {exc}") from None


@dataclass
class FixtureTruth:
    """Generation-time ground truth, for experiments on the fixture."""

    generating_class: dict[str, int]
    mislabeled_ids: frozenset[str]


def _split_layers(flat: np.ndarray, layers: tuple[LayerShape, ...]) -> tuple[np.ndarray, ...]:
    out, offset = [], 0
    for shape in layers:
        out.append(np.ascontiguousarray(flat[offset:offset + shape.size], dtype="<f4"))
        offset += shape.size
    return tuple(out)


def _softmax_probs(features: np.ndarray, means: np.ndarray, temperature: float) -> np.ndarray:
    d2 = np.sum((means - features) ** 2, axis=1)
    logits = -d2 / temperature
    logits -= logits.max()
    exp = np.exp(logits)
    return exp / exp.sum()


def gen_fixture_with_truth(spec: FixtureSpec) -> tuple[EmbeddingDataset, FixtureTruth]:
    rng = np.random.default_rng(spec.seed)
    dim = spec.total_dim
    records: list[SampleRecord] = []
    generating: dict[str, int] = {}
    mislabeled: set[str] = set()

    def emit(sample_id: str, label: int, origin: str, true_class: int) -> None:
        base = spec.class_means[true_class] + spec.class_stds[true_class] * rng.standard_normal(dim)
        probs = np.empty((spec.mc_runs, spec.num_classes), dtype="<f4")
        runs = []
        for k in range(spec.mc_runs):
            jittered = base + spec.mc_jitter * rng.standard_normal(dim) if spec.mc_jitter > 0 else base
            probs[k] = _softmax_probs(jittered, spec.class_means, spec.temperature).astype("<f4")
            runs.append(_split_layers(jittered, spec.layers))
        records.append(SampleRecord(sample_id=sample_id, class_label=label, origin=origin,
                                    probs=probs, activations=tuple(runs)))
        generating[sample_id] = true_class

    for label in range(spec.num_classes):
        for j in range(spec.real_per_class[label]):
            emit(f"real-c{label}-{j:05d}", label, REAL, true_class=label)
    for label in range(spec.num_classes):
        n = spec.synthetic_per_class[label]
        n_mislabeled = int(round(spec.mislabel_fraction * n))
        flipped = set(rng.choice(n, size=n_mislabeled, replace=False).tolist()) if n_mislabeled else set()
        others = [c for c in range(spec.num_classes) if c != label]
        for j in range(n):
            sample_id = f"syn-c{label}-{j:05d}"
            if j in flipped:
                true_class = int(others[rng.integers(len(others))])
                mislabeled.add(sample_id)
            else:
                true_class = label
            emit(sample_id, label, SYNTHETIC, true_class=true_class)

    header = DatasetHeader(num_classes=spec.num_classes, mc_runs=spec.mc_runs,
                           layers=spec.layers, sample_count=len(records))
    return (EmbeddingDataset(header=header, records=records),
            FixtureTruth(generating_class=generating, mislabeled_ids=frozenset(mislabeled)))


def gen_fixture(spec: FixtureSpec) -> EmbeddingDataset:
    """Generates the dataset alone; see gen_fixture_with_truth for ground truth."""
    return gen_fixture_with_truth(spec)[0]
