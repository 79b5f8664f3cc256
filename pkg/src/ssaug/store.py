"""Embedding dump format, selection manifests, and training lists.

A dump holds the output of a stochastic feature extractor: for every sample,
K Monte Carlo forward passes, each contributing a class-probability vector
and one flattened activation tensor per exported layer. The container is the
only bridge between extractors and the selection core, so both sides of the
round trip validate every documented invariant.

Binary layout (little-endian throughout)::

    magic "SSAE" | version u16 | num_classes u16 | mc_runs u16 | layer_count u16
    per layer: channels u32, height u32, width u32
    sample_count u64
    per record: id_len u16, id utf-8 bytes, class_label u16, origin u8
                then per run k: num_classes float32 probs,
                                layer tensors as float32 runs in declared order

Selection manifests are line-delimited JSON: one config-echo object followed
by one object per pooled sample with fields ``sample_id``, ``class_label``,
``entropy_score``, ``distance_score`` and ``stage``. Training lists are plain
text, one ``<sample_id>\\t<class_label>`` per line.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator, Mapping, Sequence, Union

import numpy as np

MAGIC = b"SSAE"
FORMAT_VERSION = 1

REAL = "real"
SYNTHETIC = "synthetic"
ORIGINS = (REAL, SYNTHETIC)
_ORIGIN_CODES = {REAL: 0, SYNTHETIC: 1}
_ORIGIN_NAMES = {0: REAL, 1: SYNTHETIC}

STAGE_REJECTED_ENTROPY = "rejected_entropy"
STAGE_REJECTED_DISTANCE = "rejected_distance"
STAGE_SELECTED = "selected"
STAGES = (STAGE_REJECTED_ENTROPY, STAGE_REJECTED_DISTANCE, STAGE_SELECTED)

# each per-run probability vector must sum to 1 within this tolerance
PROB_SUM_TOL = 1e-4

_HEADER_FMT = "<4sHHHH"
_LAYER_FMT = "<III"
_COUNT_FMT = "<Q"

PathOrIO = Union[str, Path, BinaryIO]


class DumpFormatError(ValueError):
    """The byte stream is not a well-formed embedding dump."""


class ValidationError(ValueError):
    """The contents violate a documented invariant."""


@dataclass(frozen=True)
class LayerShape:
    """Shape of one exported activation layer (channels x height x width)."""

    channels: int
    height: int
    width: int

    def __post_init__(self) -> None:
        for name in ("channels", "height", "width"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ValidationError(f"layer {name} must be a positive integer, got {v!r}")

    @property
    def size(self) -> int:
        """Flattened tensor length: channels * height * width."""
        return self.channels * self.height * self.width

    @property
    def spatial(self) -> int:
        return self.height * self.width


@dataclass(frozen=True)
class DatasetHeader:
    num_classes: int
    mc_runs: int
    layers: tuple[LayerShape, ...]
    sample_count: int
    format_version: int = FORMAT_VERSION

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.num_classes < 2:
            raise ValidationError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.mc_runs < 1:
            raise ValidationError(f"mc_runs must be >= 1, got {self.mc_runs}")
        if len(self.layers) < 1:
            raise ValidationError("at least one layer shape is required")
        if self.sample_count < 0:
            raise ValidationError(f"sample_count must be >= 0, got {self.sample_count}")
        for name, bound in (("num_classes", 1 << 16), ("mc_runs", 1 << 16)):
            if getattr(self, name) >= bound:
                raise ValidationError(f"{name} does not fit the on-disk u16 field")
        if len(self.layers) >= (1 << 16):
            raise ValidationError("layer count does not fit the on-disk u16 field")


@dataclass
class SampleRecord:
    """One sample: K probability vectors and K x L flattened activation tensors.

    ``probs`` is a (K, C) float32 array; ``activations[k][l]`` is the flat
    float32 tensor of layer ``l`` from run ``k``. Loaded records are treated
    as immutable and may be shared across workers.
    """

    sample_id: str
    class_label: int
    origin: str
    probs: np.ndarray
    activations: tuple[tuple[np.ndarray, ...], ...]


@dataclass
class EmbeddingDataset:
    header: DatasetHeader
    records: list[SampleRecord]


def validate_record(record: SampleRecord, header: DatasetHeader) -> None:
    """Checks one record against the header; raises naming the sample."""
    rid = record.sample_id
    if record.origin not in ORIGINS:
        raise ValidationError(f"record {rid!r}: origin must be one of {ORIGINS}, got {record.origin!r}")
    if not 0 <= record.class_label < header.num_classes:
        raise ValidationError(
            f"record {rid!r}: class_label {record.class_label} outside [0, {header.num_classes})"
        )
    probs = np.asarray(record.probs)
    if probs.shape != (header.mc_runs, header.num_classes):
        raise ValidationError(
            f"record {rid!r}: probs shape {probs.shape} does not match "
            f"(mc_runs={header.mc_runs}, num_classes={header.num_classes})"
        )
    for k in range(header.mc_runs):
        row = probs[k].astype(np.float64)
        if np.any(row < 0):
            raise ValidationError(f"record {rid!r}: negative probability in run {k + 1}")
        s = float(row.sum())
        if not abs(s - 1.0) <= PROB_SUM_TOL:
            raise ValidationError(
                f"record {rid!r}: probabilities of run {k + 1} sum to {s:.6f}, expected 1 within {PROB_SUM_TOL}"
            )
    if len(record.activations) != header.mc_runs:
        raise ValidationError(
            f"record {rid!r}: expected activations for {header.mc_runs} runs, got {len(record.activations)}"
        )
    for k, run in enumerate(record.activations):
        if len(run) != len(header.layers):
            raise ValidationError(
                f"record {rid!r}: run {k + 1} has {len(run)} layer tensors, expected {len(header.layers)}"
            )
        for l, (tensor, shape) in enumerate(zip(run, header.layers)):
            t = np.asarray(tensor)
            if t.ndim != 1 or t.shape[0] != shape.size:
                raise ValidationError(
                    f"record {rid!r}: run {k + 1} layer {l + 1} has length "
                    f"{t.shape[0] if t.ndim == 1 else t.shape}, expected {shape.size}"
                )


def _as_f32(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(a), dtype="<f4")


def _open_sink(destination: PathOrIO):
    if isinstance(destination, (str, Path)):
        return open(destination, "wb"), True
    return destination, False


def write_dataset(header: DatasetHeader, records: Sequence[SampleRecord], destination: PathOrIO) -> int:
    """Serializes a validated dataset; returns the number of bytes written."""
    if header.sample_count != len(records):
        raise ValidationError(
            f"header declares {header.sample_count} records but {len(records)} were provided"
        )
    seen: set[str] = set()
    for record in records:
        validate_record(record, header)
        if record.sample_id in seen:
            raise ValidationError(f"duplicate sample_id {record.sample_id!r}")
        seen.add(record.sample_id)

    sink, owned = _open_sink(destination)
    written = 0
    try:
        def put(data: bytes) -> None:
            nonlocal written
            sink.write(data)
            written += len(data)

        put(struct.pack(_HEADER_FMT, MAGIC, header.format_version, header.num_classes,
                        header.mc_runs, len(header.layers)))
        for shape in header.layers:
            put(struct.pack(_LAYER_FMT, shape.channels, shape.height, shape.width))
        put(struct.pack(_COUNT_FMT, header.sample_count))
        for record in records:
            rid = record.sample_id.encode("utf-8")
            if len(rid) >= (1 << 16):
                raise ValidationError(f"sample_id {record.sample_id[:32]!r}... exceeds 65535 utf-8 bytes")
            put(struct.pack("<H", len(rid)))
            put(rid)
            put(struct.pack("<HB", record.class_label, _ORIGIN_CODES[record.origin]))
            probs = _as_f32(record.probs)
            for k in range(header.mc_runs):
                put(probs[k].tobytes())
                for tensor in record.activations[k]:
                    put(_as_f32(tensor).tobytes())
    except OSError as exc:
        raise DumpFormatError(f"byte sink failed after {written} bytes: {exc}") from exc
    finally:
        if owned:
            sink.close()
    return written


def _read_exact(source: BinaryIO, n: int, what: str) -> bytes:
    data = source.read(n)
    if len(data) != n:
        raise DumpFormatError(f"truncated dump: expected {n} bytes for {what}, got {len(data)}")
    return data


def read_header(source: BinaryIO) -> DatasetHeader:
    magic, version, num_classes, mc_runs, layer_count = struct.unpack(
        _HEADER_FMT, _read_exact(source, struct.calcsize(_HEADER_FMT), "header")
    )
    if magic != MAGIC:
        raise DumpFormatError(f"not an embedding dump (magic {magic!r})")
    if version != FORMAT_VERSION:
        raise DumpFormatError(f"unsupported dump version {version}, expected {FORMAT_VERSION}")
    layers = []
    for _ in range(layer_count):
        c, h, w = struct.unpack(_LAYER_FMT, _read_exact(source, struct.calcsize(_LAYER_FMT), "layer shape"))
        layers.append(LayerShape(c, h, w))
    (sample_count,) = struct.unpack(_COUNT_FMT, _read_exact(source, struct.calcsize(_COUNT_FMT), "sample count"))
    return DatasetHeader(num_classes=num_classes, mc_runs=mc_runs, layers=tuple(layers),
                         sample_count=sample_count, format_version=version)


def _iter_records(source: BinaryIO, header: DatasetHeader, close_after: bool) -> Iterator[SampleRecord]:
    prob_bytes = 4 * header.num_classes
    layer_sizes = [shape.size for shape in header.layers]
    seen: set[str] = set()
    try:
        for ordinal in range(1, header.sample_count + 1):
            where = f"record {ordinal}"
            try:
                (id_len,) = struct.unpack("<H", _read_exact(source, 2, "id length"))
                rid = _read_exact(source, id_len, "sample id").decode("utf-8")
                label, origin_code = struct.unpack("<HB", _read_exact(source, 3, "label and origin"))
                probs = np.empty((header.mc_runs, header.num_classes), dtype="<f4")
                activations: list[tuple[np.ndarray, ...]] = []
                for k in range(header.mc_runs):
                    probs[k] = np.frombuffer(_read_exact(source, prob_bytes, "probabilities"), dtype="<f4")
                    run = tuple(
                        np.frombuffer(_read_exact(source, 4 * size, "activation tensor"), dtype="<f4")
                        for size in layer_sizes
                    )
                    activations.append(run)
            except DumpFormatError as exc:
                raise DumpFormatError(f"{where}: {exc}") from None
            if origin_code not in _ORIGIN_NAMES:
                raise ValidationError(f"{where}: unknown origin code {origin_code}")
            record = SampleRecord(sample_id=rid, class_label=label, origin=_ORIGIN_NAMES[origin_code],
                                  probs=probs, activations=tuple(activations))
            validate_record(record, header)
            if rid in seen:
                raise ValidationError(f"{where}: duplicate sample_id {rid!r}")
            seen.add(rid)
            yield record
        if source.read(1) != b"":
            raise DumpFormatError(f"trailing data after {header.sample_count} declared records")
    finally:
        if close_after:
            source.close()


def read_dataset(source: PathOrIO) -> tuple[DatasetHeader, Iterator[SampleRecord]]:
    """Opens a dump for streaming; records are validated as they are consumed."""
    if isinstance(source, (str, Path)):
        stream: BinaryIO = open(source, "rb")
        owned = True
    else:
        stream, owned = source, False
    try:
        header = read_header(stream)
    except Exception:
        if owned:
            stream.close()
        raise
    return header, _iter_records(stream, header, close_after=owned)


def load_dataset(source: PathOrIO) -> EmbeddingDataset:
    header, records = read_dataset(source)
    return EmbeddingDataset(header=header, records=list(records))


@dataclass
class Partition:
    """Disjoint, exhaustive split of a dataset by (origin, class_label).

    ``real_counts``/``synthetic_counts`` cover every class in [0, C), so a
    class with no real records is visible as an explicit zero.
    """

    cells: dict[tuple[str, int], list[SampleRecord]]
    real_counts: dict[int, int]
    synthetic_counts: dict[int, int]

    def pool(self, origin: str, class_label: int) -> list[SampleRecord]:
        return self.cells.get((origin, class_label), [])


def partition_by_origin_and_class(dataset: EmbeddingDataset) -> Partition:
    cells: dict[tuple[str, int], list[SampleRecord]] = {}
    for record in dataset.records:
        cells.setdefault((record.origin, record.class_label), []).append(record)
    classes = range(dataset.header.num_classes)
    return Partition(
        cells=cells,
        real_counts={i: len(cells.get((REAL, i), [])) for i in classes},
        synthetic_counts={i: len(cells.get((SYNTHETIC, i), [])) for i in classes},
    )


@dataclass(frozen=True)
class ManifestEntry:
    sample_id: str
    class_label: int
    entropy_score: float
    distance_score: float | None
    stage: str

    def __post_init__(self) -> None:
        if self.stage not in STAGES:
            raise ValidationError(f"entry {self.sample_id!r}: unknown stage {self.stage!r}")
        if (self.distance_score is None) != (self.stage == STAGE_REJECTED_ENTROPY):
            raise ValidationError(
                f"entry {self.sample_id!r}: distance_score must be absent exactly when "
                f"stage is {STAGE_REJECTED_ENTROPY!r}"
            )


@dataclass
class SelectionManifest:
    """Every pooled synthetic sample with its scores and stage outcome."""

    ratio: float
    mc_runs: int
    seed: int
    oversample_factor: int
    entries: list[ManifestEntry] = field(default_factory=list)

    def selected(self) -> list[ManifestEntry]:
        return [e for e in self.entries if e.stage == STAGE_SELECTED]


def write_manifest(manifest: SelectionManifest, destination: str | Path) -> None:
    lines = [json.dumps({"config": {
        "ratio": manifest.ratio,
        "mc_runs": manifest.mc_runs,
        "seed": manifest.seed,
        "oversample_factor": manifest.oversample_factor,
    }}, separators=(",", ":"))]
    for e in manifest.entries:
        obj: dict = {"sample_id": e.sample_id, "class_label": e.class_label,
                     "entropy_score": e.entropy_score}
        if e.distance_score is not None:
            obj["distance_score"] = e.distance_score
        obj["stage"] = e.stage
        lines.append(json.dumps(obj, separators=(",", ":")))
    Path(destination).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(source: str | Path) -> SelectionManifest:
    lines = Path(source).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ValidationError("empty manifest")
    head = json.loads(lines[0])
    if "config" not in head:
        raise ValidationError("manifest must start with a config line")
    cfg = head["config"]
    manifest = SelectionManifest(ratio=cfg["ratio"], mc_runs=cfg["mc_runs"], seed=cfg["seed"],
                                 oversample_factor=cfg["oversample_factor"])
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        obj = json.loads(line)
        try:
            manifest.entries.append(ManifestEntry(
                sample_id=obj["sample_id"], class_label=obj["class_label"],
                entropy_score=obj["entropy_score"], distance_score=obj.get("distance_score"),
                stage=obj["stage"],
            ))
        except KeyError as exc:
            raise ValidationError(f"manifest line {lineno}: missing field {exc}") from None
    return manifest


def write_training_list(entries: Iterable[tuple[str, int]], destination: str | Path) -> None:
    with open(destination, "w", encoding="utf-8") as fh:
        for sample_id, label in entries:
            if "\t" in sample_id or "\n" in sample_id:
                raise ValidationError(f"sample_id {sample_id!r} cannot contain tabs or newlines")
            fh.write(f"{sample_id}\t{label}\n")


def read_training_list(source: str | Path) -> list[tuple[str, int]]:
    entries = []
    for lineno, line in enumerate(Path(source).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValidationError(f"training list line {lineno}: expected '<sample_id>\\t<class_label>'")
        try:
            entries.append((parts[0], int(parts[1])))
        except ValueError:
            raise ValidationError(f"training list line {lineno}: class label {parts[1]!r} is not an integer") from None
    return entries
