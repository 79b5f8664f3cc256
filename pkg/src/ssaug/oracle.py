"""Naive full-sort reference for the selection pipeline.

Everything here is recomputed from first principles with plain Python loops:
entropies, normalization, centroid distances, truncation and both keep-half
stages. Nothing is shared with the production path, so agreement between the
two is evidence, not tautology. Quadratic sorting costs are fine at test
scale.
"""

from __future__ import annotations

import math
from typing import Sequence

from .ensemble import ClassCentroid
from .selection import SelectionConfig, SelectionError
from .store import (
    REAL,
    STAGE_REJECTED_DISTANCE,
    STAGE_REJECTED_ENTROPY,
    STAGE_SELECTED,
    SYNTHETIC,
    EmbeddingDataset,
    ManifestEntry,
    SampleRecord,
    SelectionManifest,
)


def _entropy_of(values: Sequence[float]) -> float:
    total = sum(float(v) for v in values)
    h = 0.0
    for v in values:
        q = float(v) / total
        if q > 0.0:
            h -= q * math.log(q)
    return min(max(h, 0.0), math.log(len(values)))


def _mean_entropy(record: SampleRecord, runs: int) -> float:
    return sum(_entropy_of(record.probs[k]) for k in range(runs)) / runs


def _unit_columns(flat: Sequence[float], channels: int, spatial: int) -> list[list[float]]:
    columns = []
    for s in range(spatial):
        col = [float(flat[a * spatial + s]) for a in range(channels)]
        norm = math.sqrt(sum(v * v for v in col))
        columns.append([v / norm for v in col] if norm > 0.0 else col)
    return columns


def _mean_distance(record: SampleRecord, centroid: ClassCentroid, runs: int) -> float:
    total = 0.0
    for k in range(runs):
        for tensor, ref, shape in zip(record.activations[k], centroid.layers, centroid.shapes):
            sample_cols = _unit_columns(tensor, shape.channels, shape.spatial)
            ref_cols = _unit_columns(ref, shape.channels, shape.spatial)
            acc = 0.0
            for u, v in zip(sample_cols, ref_cols):
                acc += sum((ui - vi) ** 2 for ui, vi in zip(u, v))
            total += acc / shape.spatial
    return total / runs


def oracle_select(dataset: EmbeddingDataset, centroids: Sequence[ClassCentroid],
                  config: SelectionConfig) -> SelectionManifest:
    """Same contract as run_selection, as an independent brute-force pass."""
    header = dataset.header
    if config.mc_runs_used > header.mc_runs:
        raise SelectionError(
            f"mc_runs_used={config.mc_runs_used} exceeds the dump's {header.mc_runs} runs"
        )
    centroid_by_class = {c.class_label: c for c in centroids}

    manifest = SelectionManifest(ratio=config.ratio, mc_runs=config.mc_runs_used,
                                 seed=config.seed, oversample_factor=config.oversample_factor)
    for class_label in range(header.num_classes):
        n_real = sum(1 for r in dataset.records
                     if r.origin == REAL and r.class_label == class_label)
        target = int(config.ratio * n_real + 1e-9)
        if target == 0:
            continue
        pool = sorted((r for r in dataset.records
                       if r.origin == SYNTHETIC and r.class_label == class_label),
                      key=lambda r: r.sample_id)
        needed = config.oversample_factor * target
        if len(pool) < needed:
            raise SelectionError(
                f"class {class_label}: synthetic pool has {len(pool)} records, "
                f"needs {needed} (short by {needed - len(pool)})"
            )
        pool = pool[:needed]
        if class_label not in centroid_by_class:
            raise SelectionError(f"class {class_label}: no centroid available")
        centroid = centroid_by_class[class_label]

        entropy = {r.sample_id: _mean_entropy(r, config.mc_runs_used) for r in pool}
        by_entropy = sorted(pool, key=lambda r: (entropy[r.sample_id], r.sample_id))
        survivors = by_entropy[: len(pool) // 2]

        distance = {r.sample_id: _mean_distance(r, centroid, config.mc_runs_used)
                    for r in survivors}
        by_distance = sorted(survivors, key=lambda r: (distance[r.sample_id], r.sample_id))
        selected_ids = {r.sample_id for r in by_distance[:target]}
        survivor_ids = {r.sample_id for r in survivors}

        for record in pool:
            rid = record.sample_id
            if rid in selected_ids:
                stage = STAGE_SELECTED
            elif rid in survivor_ids:
                stage = STAGE_REJECTED_DISTANCE
            else:
                stage = STAGE_REJECTED_ENTROPY
            manifest.entries.append(ManifestEntry(
                sample_id=rid, class_label=class_label, entropy_score=entropy[rid],
                distance_score=distance.get(rid), stage=stage,
            ))
    return manifest
