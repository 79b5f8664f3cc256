import numpy as np
import pytest

from ssaug.store import DatasetHeader, EmbeddingDataset, LayerShape, SampleRecord


def make_record(sample_id, label, origin, probs, activations):
    """Builds a record from plain lists; probs (K, C), activations[k][l] flat."""
    return SampleRecord(
        sample_id=sample_id,
        class_label=label,
        origin=origin,
        probs=np.asarray(probs, dtype="<f4"),
        activations=tuple(tuple(np.asarray(t, dtype="<f4") for t in run) for run in activations),
    )


def single_layer_dataset(records, num_classes=2, mc_runs=1, dim=2):
    header = DatasetHeader(num_classes=num_classes, mc_runs=mc_runs,
                           layers=(LayerShape(dim, 1, 1),), sample_count=len(records))
    return EmbeddingDataset(header=header, records=list(records))


def random_records(rng, header, count, origin="real", prefix="s"):
    """Valid random records under the given header."""
    out = []
    for i in range(count):
        probs = rng.random((header.mc_runs, header.num_classes)) + 0.05
        probs /= probs.sum(axis=1, keepdims=True)
        activations = tuple(
            tuple(rng.standard_normal(shape.size).astype("<f4") for shape in header.layers)
            for _ in range(header.mc_runs)
        )
        out.append(SampleRecord(
            sample_id=f"{prefix}-{i:05d}",
            class_label=int(rng.integers(header.num_classes)),
            origin=origin,
            probs=probs.astype("<f4"),
            activations=activations,
        ))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)
