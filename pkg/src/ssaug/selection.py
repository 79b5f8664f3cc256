"""Two-stage selection of synthetic samples: entropy filter, then distance filter.

Per class i with target t_i = floor(ratio * N_i): the synthetic pool is
truncated to the oversample_factor * t_i lexicographically-smallest sample
ids, the low-entropy half of that pool survives the first stage, and the t_i
survivors nearest their class centroid are selected. Keeping an exact count
by rank replaces a strict below-the-median test so tied scores can never
shrink the selected set; for even pools of distinct scores the two rules
agree. All ordering ties fall back to lexicographic sample_id.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Sequence

from .ensemble import (
    ClassCentroid,
    DistanceScore,
    EntropyScore,
    feature_distance,
    score_entropy,
)
from .store import (
    STAGE_REJECTED_DISTANCE,
    STAGE_REJECTED_ENTROPY,
    STAGE_SELECTED,
    SYNTHETIC,
    EmbeddingDataset,
    ManifestEntry,
    SampleRecord,
    SelectionManifest,
    ValidationError,
    partition_by_origin_and_class,
)


class SelectionError(ValueError):
    """Selection preconditions are not met for some class."""


@dataclass(frozen=True)
class SelectionConfig:
    """Knobs of the selection run; ties always break on (score, sample_id)."""

    ratio: float
    oversample_factor: int = 4
    mc_runs_used: int = 5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.ratio < 0:
            raise ValidationError(f"ratio must be >= 0, got {self.ratio}")
        if self.oversample_factor < 2:
            raise ValidationError(f"oversample_factor must be >= 2, got {self.oversample_factor}")
        if self.mc_runs_used < 1:
            raise ValidationError(f"mc_runs_used must be >= 1, got {self.mc_runs_used}")


def target_counts(real_class_counts: Mapping[int, int], ratio: float) -> dict[int, int]:
    """floor(ratio * N_i) per class; the 1e-9 nudge absorbs float error in the product."""
    if ratio < 0:
        raise ValidationError(f"ratio must be >= 0, got {ratio}")
    targets = {}
    for class_label, count in real_class_counts.items():
        if count < 0:
            raise ValidationError(f"class {class_label}: negative real count {count}")
        targets[class_label] = int(math.floor(ratio * count + 1e-9))
    return targets


def entropy_stage(pool: Sequence[tuple[SampleRecord, EntropyScore]],
                  keep: int) -> list[tuple[SampleRecord, EntropyScore]]:
    """The ``keep`` records with lowest (mean_entropy, sample_id)."""
    if keep < 0:
        raise ValidationError(f"keep must be >= 0, got {keep}")
    if len(pool) < keep:
        raise SelectionError(f"pool of {len(pool)} is smaller than keep={keep}")
    return sorted(pool, key=lambda item: (item[1].mean_entropy, item[0].sample_id))[:keep]


def distance_stage(survivors: Sequence[tuple[SampleRecord, DistanceScore]],
                   keep: int) -> list[tuple[SampleRecord, DistanceScore]]:
    """The ``keep`` records with lowest (mean_distance, sample_id)."""
    if keep < 0:
        raise ValidationError(f"keep must be >= 0, got {keep}")
    if len(survivors) < keep:
        raise SelectionError(f"pool of {len(survivors)} is smaller than keep={keep}")
    return sorted(survivors, key=lambda item: (item[1].mean_distance, item[0].sample_id))[:keep]


def _select_class(pool: list[SampleRecord], centroid: ClassCentroid, target: int,
                  config: SelectionConfig) -> list[ManifestEntry]:
    pool = sorted(pool, key=lambda r: r.sample_id)[: config.oversample_factor * target]
    scored = [(r, score_entropy(r, runs=config.mc_runs_used)) for r in pool]
    survivors = entropy_stage(scored, keep=len(pool) // 2)
    survivor_ids = {r.sample_id for r, _ in survivors}
    distanced = [(r, feature_distance(r, centroid, runs=config.mc_runs_used)) for r, _ in survivors]
    selected_ids = {r.sample_id for r, _ in distance_stage(distanced, keep=target)}

    entropy_by_id = {r.sample_id: s.mean_entropy for r, s in scored}
    distance_by_id = {r.sample_id: s.mean_distance for r, s in distanced}
    entries = []
    for record in pool:
        rid = record.sample_id
        if rid in selected_ids:
            stage = STAGE_SELECTED
        elif rid in survivor_ids:
            stage = STAGE_REJECTED_DISTANCE
        else:
            stage = STAGE_REJECTED_ENTROPY
        entries.append(ManifestEntry(
            sample_id=rid, class_label=record.class_label,
            entropy_score=entropy_by_id[rid], distance_score=distance_by_id.get(rid),
            stage=stage,
        ))
    return entries


def run_selection(dataset: EmbeddingDataset, centroids: Sequence[ClassCentroid],
                  config: SelectionConfig, jobs: int = 1) -> SelectionManifest:
    """Runs both stages per class and reports every pooled sample's outcome.

    Classes are processed independently (optionally in parallel) and the
    manifest lists them in ascending label order, each class's entries in
    ascending sample_id order, so output bytes do not depend on ``jobs``.
    """
    header = dataset.header
    if config.mc_runs_used > header.mc_runs:
        raise SelectionError(
            f"mc_runs_used={config.mc_runs_used} exceeds the dump's {header.mc_runs} runs"
        )
    centroid_by_class = {c.class_label: c for c in centroids}
    for c in centroids:
        if c.shapes != header.layers:
            raise SelectionError(f"centroid for class {c.class_label} does not match the dump's layer shapes")

    partition = partition_by_origin_and_class(dataset)
    targets = target_counts(partition.real_counts, config.ratio)
    work: list[tuple[int, list[SampleRecord], ClassCentroid, int]] = []
    for class_label in range(header.num_classes):
        target = targets.get(class_label, 0)
        if target == 0:
            continue  # pool truncates to oversample_factor * 0 records
        pool = partition.pool(SYNTHETIC, class_label)
        needed = config.oversample_factor * target
        if len(pool) < needed:
            raise SelectionError(
                f"class {class_label}: synthetic pool has {len(pool)} records, "
                f"needs {needed} (short by {needed - len(pool)})"
            )
        if class_label not in centroid_by_class:
            raise SelectionError(f"class {class_label}: no centroid available")
        work.append((class_label, pool, centroid_by_class[class_label], target))

    if jobs > 1 and len(work) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as executor:
            per_class = list(executor.map(
                lambda item: _select_class(item[1], item[2], item[3], config), work))
    else:
        per_class = [_select_class(pool, centroid, target, config)
                     for _, pool, centroid, target in work]

    manifest = SelectionManifest(ratio=config.ratio, mc_runs=config.mc_runs_used,
                                 seed=config.seed, oversample_factor=config.oversample_factor)
    for (class_label, _, _, target), entries in zip(work, per_class):
        selected = sum(1 for e in entries if e.stage == STAGE_SELECTED)
        if selected != target:
            raise SelectionError(f"class {class_label}: selected {selected}, expected {target}")
        manifest.entries.extend(entries)
    return manifest


def merge_manifest(train_list: Sequence[tuple[str, int]],
                   manifest: SelectionManifest) -> list[tuple[str, int]]:
    """Original training entries followed by the selected synthetic ones."""
    train_ids = {sample_id for sample_id, _ in train_list}
    if len(train_ids) != len(train_list):
        dupes = [sid for sid, _ in train_list if sum(1 for s, _ in train_list if s == sid) > 1]
        raise ValidationError(f"duplicate sample_id {dupes[0]!r} in training list")
    merged = list(train_list)
    for entry in manifest.selected():
        if entry.sample_id in train_ids:
            raise ValidationError(f"sample_id {entry.sample_id!r} already present in the training list")
        merged.append((entry.sample_id, entry.class_label))
    return merged
