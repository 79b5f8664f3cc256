"""Selective synthetic augmentation toolkit.

Picks the best generator checkpoint from an EMA-smoothed per-epoch FID curve,
then filters a pool of generated samples in two stages (predictive-entropy
rank, then centroid-distance rank) down to an exact per-class budget, all
driven by binary embedding dumps produced by any MC-dropout feature
extractor.
"""

from .ensemble import (
    ClassCentroid,
    DistanceScore,
    EntropyScore,
    channel_unit_normalize,
    compute_centroids,
    feature_distance,
    predictive_entropy,
    read_centroids,
    score_entropy,
    write_centroids,
)
from .fid import (
    FidCurve,
    GaussianStats,
    NotPSDError,
    ema_smooth,
    features_for_fid,
    fit_gaussian,
    frechet_distance,
    select_model,
    sqrtm_psd,
)
from .fixtures import FixtureSpec, gen_fixture, gen_fixture_with_truth, load_fixture_spec
from .oracle import oracle_select
from .selection import (
    SelectionConfig,
    SelectionError,
    distance_stage,
    entropy_stage,
    merge_manifest,
    run_selection,
    target_counts,
)
from .store import (
    DatasetHeader,
    DumpFormatError,
    EmbeddingDataset,
    LayerShape,
    ManifestEntry,
    SampleRecord,
    SelectionManifest,
    ValidationError,
    load_dataset,
    partition_by_origin_and_class,
    read_dataset,
    read_manifest,
    read_training_list,
    write_dataset,
    write_manifest,
    write_training_list,
)

__version__ = "0.1.0"
