"""Per-sample MC-dropout ensemble scores and class centroids.

Two scores drive selection: the mean predictive entropy of a sample's K
probability vectors (low means the extractor confidently matches the sample
to a class), and the mean spatially-normalized squared distance between the
sample's channel-unit-normalized activations and its class centroid (an
estimated cosine distance). Centroids are per-class, per-layer means of raw
activations from one designated MC run and are frozen thereafter.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Mapping, Sequence, Union

import numpy as np

from .store import (
    PROB_SUM_TOL,
    DumpFormatError,
    LayerShape,
    SampleRecord,
    ValidationError,
)

CENTROID_MAGIC = b"SSAC"
CENTROID_VERSION = 1


@dataclass(frozen=True)
class EntropyScore:
    sample_id: str
    per_run: tuple[float, ...]
    mean_entropy: float


@dataclass(frozen=True)
class DistanceScore:
    sample_id: str
    per_run: tuple[float, ...]
    mean_distance: float


@dataclass(frozen=True)
class ClassCentroid:
    """Per-layer mean of raw activations over one class's real samples."""

    class_label: int
    layers: tuple[np.ndarray, ...]
    shapes: tuple[LayerShape, ...]
    source_count: int

    def __post_init__(self) -> None:
        if self.source_count < 1:
            raise ValidationError(f"centroid for class {self.class_label}: source_count must be >= 1")
        if len(self.layers) != len(self.shapes):
            raise ValidationError(f"centroid for class {self.class_label}: layer/shape count mismatch")
        for l, (tensor, shape) in enumerate(zip(self.layers, self.shapes)):
            if np.asarray(tensor).shape != (shape.size,):
                raise ValidationError(
                    f"centroid for class {self.class_label}: layer {l + 1} length does not match {shape}"
                )


def predictive_entropy(p: Sequence[float] | np.ndarray) -> float:
    """-sum(p * ln p) of one probability vector, with 0 * ln 0 = 0.

    The vector is renormalized before use; the result lies in [0, ln C].
    """
    q = np.asarray(p, dtype=np.float64)
    if q.ndim != 1 or q.shape[0] < 1:
        raise ValidationError(f"expected a probability vector, got shape {q.shape}")
    if np.any(q < 0):
        raise ValidationError("negative probability entry")
    total = float(q.sum())
    if not abs(total - 1.0) <= PROB_SUM_TOL:
        raise ValidationError(f"probabilities sum to {total:.6f}, expected 1 within {PROB_SUM_TOL}")
    q = q / total
    nz = q > 0.0
    h = -float(np.sum(q[nz] * np.log(q[nz])))
    return min(max(h, 0.0), math.log(q.shape[0]))


def score_entropy(record: SampleRecord, runs: int | None = None) -> EntropyScore:
    """Per-run entropies and their arithmetic mean over the first ``runs`` runs.

    This is the expectation of per-run entropies, not the entropy of the mean
    distribution; the two differ whenever the runs disagree.
    """
    probs = np.asarray(record.probs)
    k = probs.shape[0] if runs is None else runs
    if not 1 <= k <= probs.shape[0]:
        raise ValidationError(f"record {record.sample_id!r}: runs {k} outside [1, {probs.shape[0]}]")
    per_run = tuple(predictive_entropy(probs[i]) for i in range(k))
    return EntropyScore(sample_id=record.sample_id, per_run=per_run,
                        mean_entropy=sum(per_run) / k)


def compute_centroids(records_by_class: Mapping[int, Sequence[SampleRecord]],
                      shapes: Sequence[LayerShape], run_index: int = 1) -> list[ClassCentroid]:
    """Elementwise mean of raw activations from one designated run (1-based).

    Summation is ordered by the given record order per class, so results are
    deterministic for a given input.
    """
    shapes = tuple(shapes)
    centroids = []
    for class_label in sorted(records_by_class):
        records = records_by_class[class_label]
        if not records:
            raise ValidationError(f"class {class_label} has zero real records; cannot form a centroid")
        layers = []
        for l, shape in enumerate(shapes):
            stacked = []
            for record in records:
                if not 1 <= run_index <= len(record.activations):
                    raise ValidationError(
                        f"record {record.sample_id!r}: run index {run_index} outside "
                        f"[1, {len(record.activations)}]"
                    )
                tensor = np.asarray(record.activations[run_index - 1][l], dtype=np.float64)
                if tensor.shape != (shape.size,):
                    raise ValidationError(
                        f"record {record.sample_id!r}: layer {l + 1} length does not match {shape}"
                    )
                stacked.append(tensor)
            layers.append(np.mean(np.stack(stacked, axis=0), axis=0))
        centroids.append(ClassCentroid(class_label=class_label, layers=tuple(layers),
                                       shapes=shapes, source_count=len(records)))
    return centroids


def channel_unit_normalize(tensor: np.ndarray, shape: LayerShape) -> np.ndarray:
    """Divides each spatial position's channel vector by its Euclidean norm.

    The flat layout is channel-major: element (a, h, w) lives at index
    a * H * W + h * W + w. All-zero channel vectors are left as zeros.
    """
    t = np.asarray(tensor, dtype=np.float64)
    if t.shape != (shape.size,):
        raise ValidationError(f"tensor length {t.shape} does not match {shape}")
    grid = t.reshape(shape.channels, shape.spatial)
    norms = np.sqrt(np.sum(grid * grid, axis=0))
    out = np.divide(grid, norms, out=np.zeros_like(grid), where=norms > 0.0)
    return out.reshape(shape.size)


def feature_distance(record: SampleRecord, centroid: ClassCentroid,
                     runs: int | None = None) -> DistanceScore:
    """Mean spatially-normalized squared distance to the centroid.

    Per run k: sum over layers l of ||n(x_l^k) - n(c_l)||^2 / (H_l * W_l),
    where n() is channel-unit normalization applied to both the sample run
    and the (run-independent) centroid. The score is the mean over the first
    ``runs`` runs, so it is invariant to positive rescaling of any activation
    tensor.
    """
    total_runs = len(record.activations)
    k = total_runs if runs is None else runs
    if not 1 <= k <= total_runs:
        raise ValidationError(f"record {record.sample_id!r}: runs {k} outside [1, {total_runs}]")
    if len(record.activations[0]) != len(centroid.shapes):
        raise ValidationError(
            f"record {record.sample_id!r}: {len(record.activations[0])} layers vs centroid "
            f"{len(centroid.shapes)}"
        )
    normalized_centroid = [channel_unit_normalize(layer, shape)
                           for layer, shape in zip(centroid.layers, centroid.shapes)]
    per_run = []
    for run in record.activations[:k]:
        dist = 0.0
        for tensor, ref, shape in zip(run, normalized_centroid, centroid.shapes):
            diff = channel_unit_normalize(tensor, shape) - ref
            dist += float(diff @ diff) / shape.spatial
        per_run.append(dist)
    return DistanceScore(sample_id=record.sample_id, per_run=tuple(per_run),
                         mean_distance=sum(per_run) / k)


PathOrIO = Union[str, Path, BinaryIO]


def write_centroids(centroids: Sequence[ClassCentroid], destination: PathOrIO,
                    run_index: int = 1) -> int:
    """Binary centroid sidecar: float32 little-endian, magic ``SSAC``."""
    if not centroids:
        raise ValidationError("no centroids to write")
    shapes = centroids[0].shapes
    labels = [c.class_label for c in centroids]
    if len(set(labels)) != len(labels):
        raise ValidationError("duplicate class labels in centroid list")
    for c in centroids:
        if c.shapes != shapes:
            raise ValidationError(f"centroid for class {c.class_label} has inconsistent layer shapes")

    if isinstance(destination, (str, Path)):
        sink, owned = open(destination, "wb"), True
    else:
        sink, owned = destination, False
    written = 0
    try:
        def put(data: bytes) -> None:
            nonlocal written
            sink.write(data)
            written += len(data)

        put(struct.pack("<4sHHHH", CENTROID_MAGIC, CENTROID_VERSION, run_index,
                        len(centroids), len(shapes)))
        for shape in shapes:
            put(struct.pack("<III", shape.channels, shape.height, shape.width))
        for c in sorted(centroids, key=lambda c: c.class_label):
            put(struct.pack("<HI", c.class_label, c.source_count))
            for layer in c.layers:
                put(np.ascontiguousarray(layer, dtype="<f4").tobytes())
    finally:
        if owned:
            sink.close()
    return written


def read_centroids(source: PathOrIO) -> tuple[list[ClassCentroid], int]:
    """Reads a centroid sidecar; returns (centroids, run_index provenance)."""
    if isinstance(source, (str, Path)):
        stream, owned = open(source, "rb"), True
    else:
        stream, owned = source, False
    try:
        head = stream.read(struct.calcsize("<4sHHHH"))
        if len(head) != struct.calcsize("<4sHHHH"):
            raise DumpFormatError("truncated centroid file header")
        magic, version, run_index, count, layer_count = struct.unpack("<4sHHHH", head)
        if magic != CENTROID_MAGIC:
            raise DumpFormatError(f"not a centroid file (magic {magic!r})")
        if version != CENTROID_VERSION:
            raise DumpFormatError(f"unsupported centroid file version {version}")
        shapes = []
        for _ in range(layer_count):
            raw = stream.read(struct.calcsize("<III"))
            if len(raw) != struct.calcsize("<III"):
                raise DumpFormatError("truncated centroid layer table")
            shapes.append(LayerShape(*struct.unpack("<III", raw)))
        shapes = tuple(shapes)
        centroids = []
        for ordinal in range(1, count + 1):
            raw = stream.read(struct.calcsize("<HI"))
            if len(raw) != struct.calcsize("<HI"):
                raise DumpFormatError(f"centroid {ordinal}: truncated entry header")
            class_label, source_count = struct.unpack("<HI", raw)
            layers = []
            for shape in shapes:
                data = stream.read(4 * shape.size)
                if len(data) != 4 * shape.size:
                    raise DumpFormatError(f"centroid {ordinal}: truncated layer tensor")
                layers.append(np.frombuffer(data, dtype="<f4").astype(np.float64))
            centroids.append(ClassCentroid(class_label=class_label, layers=tuple(layers),
                                           shapes=shapes, source_count=source_count))
        if stream.read(1) != b"":
            raise DumpFormatError("trailing data after declared centroids")
        return centroids, run_index
    finally:
        if owned:
            stream.close()
