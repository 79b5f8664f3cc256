"""Single entry point exposing the pipeline as subcommands.

Stages are scriptable one at a time: generate or extract dumps, build the
FID curve and pick a checkpoint, freeze centroids, score, select, merge.
Every subcommand accepts ``--config`` (JSON with PipelineConfig field names);
explicit flags override the config file, which overrides built-in defaults.
Outputs are byte-identical across reruns and across ``--jobs`` settings.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import re
import struct
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import ensemble, fid, fixtures, selection, store

_EPOCH_FILE = re.compile(r"epoch(\d+)\.ssae$")

STATS_MAGIC = b"SSAS"
STATS_VERSION = 1


def _fail(message: str) -> int:
    line = " | ".join(str(message).splitlines()) or "unknown error"
    print(f"error: {line}", file=sys.stderr)
    return 1


def _load_config(path: str | None) -> cfgmod.PipelineConfig:
    if path is None:
        return cfgmod.PipelineConfig()
    return cfgmod.load_pipeline_config(path)


def _require(value, flag: str):
    if value is None:
        raise store.ValidationError(f"{flag} is required (flag or config file)")
    return value


def write_stats(stats: fid.GaussianStats, destination: str | Path) -> None:
    """Tiny binary stats container: float64 mean then row-major covariance."""
    with open(destination, "wb") as fh:
        fh.write(struct.pack("<4sHI", STATS_MAGIC, STATS_VERSION, stats.dim))
        fh.write(np.ascontiguousarray(stats.mean, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(stats.cov, dtype="<f8").tobytes())


def read_stats(source: str | Path) -> fid.GaussianStats:
    data = Path(source).read_bytes()
    head = struct.calcsize("<4sHI")
    magic, version, dim = struct.unpack("<4sHI", data[:head])
    if magic != STATS_MAGIC:
        raise store.DumpFormatError(f"not a stats file (magic {magic!r})")
    if version != STATS_VERSION:
        raise store.DumpFormatError(f"unsupported stats file version {version}")
    expected = head + 8 * dim + 8 * dim * dim
    if len(data) != expected:
        raise store.DumpFormatError(f"stats file has {len(data)} bytes, expected {expected}")
    mean = np.frombuffer(data, dtype="<f8", count=dim, offset=head)
    cov = np.frombuffer(data, dtype="<f8", count=dim * dim, offset=head + 8 * dim)
    return fid.GaussianStats(mean=mean.copy(), cov=cov.reshape(dim, dim).copy())


def _scan_epoch_dumps(directory: str) -> list[tuple[int, Path]]:
    found = []
    for path in sorted(Path(directory).iterdir()):
        match = _EPOCH_FILE.search(path.name)
        if match:
            found.append((int(match.group(1)), path))
    if not found:
        raise store.ValidationError(f"no epoch dumps (*epoch<N>.ssae) found in {directory}")
    epochs = [e for e, _ in found]
    if len(set(epochs)) != len(epochs):
        raise store.ValidationError(f"duplicate epoch numbers in {directory}")
    return sorted(found)


def _build_curve(args, cfg) -> fid.FidCurve:
    real_path = _require(args.real if args.real else cfg.real_dump, "--real")
    epochs_dir = _require(args.epochs_dir if args.epochs_dir else cfg.epochs_dir, "--epochs-dir")
    alpha = cfgmod.resolve(args.alpha, cfg.alpha, cfgmod.DEFAULT_ALPHA)
    jobs = cfgmod.resolve(args.jobs, cfg.jobs, cfgmod.DEFAULT_JOBS)
    real = store.load_dataset(real_path)
    epoch_sets = [(epoch, store.load_dataset(path)) for epoch, path in _scan_epoch_dumps(epochs_dir)]
    return fid.curve_from_datasets(real, epoch_sets, alpha=alpha, run_index=args.run,
                                   layer=args.layer, jobs=jobs)


def _curve_lines(curve: fid.FidCurve, run_index: int, layer: int | None) -> list[str]:
    lines = [json.dumps({"config": {"alpha": curve.alpha, "run_index": run_index,
                                    "layer": layer}}, separators=(",", ":"))]
    for (epoch, raw), smoothed in zip(curve.epochs, curve.smoothed):
        lines.append(json.dumps({"epoch": epoch, "raw_fid": raw, "smoothed_fid": smoothed},
                                separators=(",", ":")))
    return lines


def _read_curve_file(path: str) -> tuple[list[tuple[int, float]], float | None]:
    pairs: list[tuple[int, float]] = []
    alpha = None
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        if "config" in obj:
            alpha = obj["config"].get("alpha")
        else:
            pairs.append((int(obj["epoch"]), float(obj["raw_fid"])))
    if not pairs:
        raise store.ValidationError(f"curve file {path} contains no epochs")
    return sorted(pairs), alpha


def _emit(lines: list[str], out: str | None) -> None:
    text = "\n".join(lines) + "\n"
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _cmd_gen_fixture(args) -> int:
    cfg = _load_config(args.config)
    spec = fixtures.load_fixture_spec(args.spec)
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    dataset = fixtures.gen_fixture(spec)
    out = _require(args.out if args.out else cfg.out, "--out")
    written = store.write_dataset(dataset.header, dataset.records, out)
    print(f"wrote {dataset.header.sample_count} records ({written} bytes) to {out}")
    return 0


def _cmd_fit_stats(args) -> int:
    cfg = _load_config(args.config)
    dataset = store.load_dataset(_require(args.dump, "--dump"))
    features = fid.features_for_fid(dataset.records, run_index=args.run, layer=args.layer)
    stats = fid.fit_gaussian(features)
    out = _require(args.out if args.out else cfg.out, "--out")
    write_stats(stats, out)
    print(f"fit {features.shape[0]} samples of dim {stats.dim}; stats written to {out}")
    return 0


def _cmd_fid_curve(args) -> int:
    cfg = _load_config(args.config)
    curve = _build_curve(args, cfg)
    _emit(_curve_lines(curve, args.run, args.layer), args.out if args.out else cfg.out)
    return 0


def _cmd_select_model(args) -> int:
    cfg = _load_config(args.config)
    if args.curve:
        pairs, file_alpha = _read_curve_file(args.curve)
        alpha = cfgmod.resolve(args.alpha, file_alpha, cfgmod.DEFAULT_ALPHA)
        curve = fid.FidCurve.from_raw(pairs, alpha=alpha)
    else:
        curve = _build_curve(args, cfg)
    print(fid.select_model(curve))
    return 0


def _cmd_centroids(args) -> int:
    cfg = _load_config(args.config)
    dataset = store.load_dataset(_require(args.dump if args.dump else cfg.real_dump, "--dump"))
    run_index = cfgmod.resolve(args.run_index, cfg.centroid_run_index, cfgmod.DEFAULT_CENTROID_RUN_INDEX)
    partition = store.partition_by_origin_and_class(dataset)
    by_class = {label: partition.pool(store.REAL, label)
                for label, count in partition.real_counts.items() if count > 0}
    for label, count in sorted(partition.real_counts.items()):
        if count == 0:
            print(f"warning: class {label} has no real records; no centroid written", file=sys.stderr)
    if not by_class:
        raise store.ValidationError("dump contains no real records; nothing to average")
    centroids = ensemble.compute_centroids(by_class, dataset.header.layers, run_index=run_index)
    out = _require(args.out if args.out else cfg.centroids, "--out")
    ensemble.write_centroids(centroids, out, run_index=run_index)
    print(f"wrote {len(centroids)} centroids (run {run_index}) to {out}")
    return 0


def _cmd_score(args) -> int:
    cfg = _load_config(args.config)
    dataset = store.load_dataset(_require(args.dump, "--dump"))
    runs = cfgmod.resolve(args.mc_runs, cfg.mc_runs_used, cfgmod.DEFAULT_MC_RUNS_USED)
    jobs = cfgmod.resolve(args.jobs, cfg.jobs, cfgmod.DEFAULT_JOBS)
    centroid_by_class = {}
    centroids_path = args.centroids if args.centroids else cfg.centroids
    if centroids_path:
        centroids, _ = ensemble.read_centroids(centroids_path)
        centroid_by_class = {c.class_label: c for c in centroids}

    def score_one(record: store.SampleRecord) -> str:
        entropy = ensemble.score_entropy(record, runs=runs)
        obj: dict = {"sample_id": record.sample_id, "class_label": record.class_label,
                     "origin": record.origin, "entropy_score": entropy.mean_entropy,
                     "entropy_runs": list(entropy.per_run)}
        centroid = centroid_by_class.get(record.class_label)
        if centroid is not None:
            distance = ensemble.feature_distance(record, centroid, runs=runs)
            obj["distance_score"] = distance.mean_distance
            obj["distance_runs"] = list(distance.per_run)
        return json.dumps(obj, separators=(",", ":"))

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            lines = list(pool.map(score_one, dataset.records))
    else:
        lines = [score_one(r) for r in dataset.records]
    _emit(lines, args.out if args.out else cfg.out)
    return 0


def _cmd_select(args) -> int:
    cfg = _load_config(args.config)
    real_path = _require(args.real if args.real else cfg.real_dump, "--real")
    synthetic_path = _require(args.synthetic if args.synthetic else cfg.synthetic_dump, "--synthetic")
    centroids_path = _require(args.centroids if args.centroids else cfg.centroids, "--centroids")
    out = _require(args.out if args.out else cfg.manifest, "--out")
    config = selection.SelectionConfig(
        ratio=cfgmod.resolve(args.ratio, cfg.ratio, cfgmod.DEFAULT_RATIO),
        oversample_factor=cfgmod.resolve(args.oversample, cfg.oversample_factor,
                                         cfgmod.DEFAULT_OVERSAMPLE_FACTOR),
        mc_runs_used=cfgmod.resolve(args.mc_runs, cfg.mc_runs_used, cfgmod.DEFAULT_MC_RUNS_USED),
        seed=cfgmod.resolve(args.seed, cfg.seed, cfgmod.DEFAULT_SEED),
    )
    jobs = cfgmod.resolve(args.jobs, cfg.jobs, cfgmod.DEFAULT_JOBS)

    real = store.load_dataset(real_path)
    if synthetic_path == real_path:
        synthetic = real
    else:
        synthetic = store.load_dataset(synthetic_path)
        if (synthetic.header.num_classes, synthetic.header.layers) != \
                (real.header.num_classes, real.header.layers):
            raise store.ValidationError("real and synthetic dumps disagree on classes or layer shapes")
    records = [r for r in real.records if r.origin == store.REAL]
    records += [r for r in synthetic.records if r.origin == store.SYNTHETIC]
    mc_runs = min(real.header.mc_runs, synthetic.header.mc_runs)
    header = store.DatasetHeader(num_classes=real.header.num_classes, mc_runs=mc_runs,
                                 layers=real.header.layers, sample_count=len(records))
    dataset = store.EmbeddingDataset(header=header, records=records)

    centroids, _ = ensemble.read_centroids(centroids_path)
    manifest = selection.run_selection(dataset, centroids, config, jobs=jobs)
    store.write_manifest(manifest, out)
    print(f"selected {len(manifest.selected())} of {len(manifest.entries)} pooled samples; "
          f"manifest written to {out}")
    return 0


def _cmd_merge(args) -> int:
    cfg = _load_config(args.config)
    train = store.read_training_list(_require(args.train if args.train else cfg.train_list, "--train"))
    manifest = store.read_manifest(_require(args.manifest if args.manifest else cfg.manifest, "--manifest"))
    merged = selection.merge_manifest(train, manifest)
    out = _require(args.out if args.out else cfg.out, "--out")
    store.write_training_list(merged, out)
    print(f"merged {len(train)} real + {len(merged) - len(train)} synthetic entries to {out}")
    return 0


def _cmd_validate(args) -> int:
    path = Path(args.path)
    if path.suffix == ".jsonl":
        manifest = store.read_manifest(path)
        print(f"ok: manifest with {len(manifest.entries)} entries "
              f"({len(manifest.selected())} selected)")
        return 0
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == store.MAGIC:
        dataset = store.load_dataset(path)
        print(f"ok: dump with {dataset.header.sample_count} records, "
              f"{dataset.header.num_classes} classes, {dataset.header.mc_runs} runs, "
              f"{len(dataset.header.layers)} layers")
        return 0
    if magic == ensemble.CENTROID_MAGIC:
        centroids, run_index = ensemble.read_centroids(path)
        print(f"ok: {len(centroids)} centroids from run {run_index}")
        return 0
    if magic == STATS_MAGIC:
        stats = read_stats(path)
        print(f"ok: gaussian stats of dim {stats.dim}")
        return 0
    raise store.DumpFormatError(f"unrecognized file type (magic {magic!r})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ssaug",
        description="Checkpoint selection by smoothed FID and two-stage filtering "
                    "of synthetic samples from MC-dropout embedding dumps.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, seed: bool = True, jobs: bool = True) -> None:
        p.add_argument("--config", metavar="FILE",
                       help="JSON config with PipelineConfig field names; flags override it")
        if seed:
            p.add_argument("--seed", type=int,
                           help="seed for any randomness; echoed into outputs (default: 0)")
        if jobs:
            p.add_argument("--jobs", type=int,
                           help="max parallel workers; never changes output bytes (default: 1)")

    p = sub.add_parser("gen-fixture", help="generate a seeded Gaussian fixture dump")
    p.add_argument("--spec", required=True, metavar="FILE", help="fixture spec JSON")
    p.add_argument("--out", metavar="FILE", help="output dump path")
    common(p, jobs=False)
    p.set_defaults(func=_cmd_gen_fixture)

    p = sub.add_parser("fit-stats", help="fit mean/covariance of a dump's features")
    p.add_argument("--dump", metavar="FILE", help="embedding dump")
    p.add_argument("--run", type=int, default=1, help="1-based MC run used for features (default: 1)")
    p.add_argument("--layer", type=int, default=None,
                   help="1-based layer to use; omit to concatenate all layers (default: all)")
    p.add_argument("--out", metavar="FILE", help="output stats path")
    common(p, seed=False, jobs=False)
    p.set_defaults(func=_cmd_fit_stats)

    p = sub.add_parser("fid-curve",
                       help="per-epoch FID of *epoch<N>.ssae dumps against a real dump")
    p.add_argument("--real", metavar="FILE", help="dump providing the reference features")
    p.add_argument("--epochs-dir", metavar="DIR", help="directory of per-epoch dumps")
    p.add_argument("--alpha", type=float,
                   help="EMA weight on the previous smoothed value (default: 0.3)")
    p.add_argument("--run", type=int, default=1,
                   help="1-based MC run used for FID features (default: 1, the dropout-free convention)")
    p.add_argument("--layer", type=int, default=None,
                   help="1-based layer to use; omit to concatenate all layers (default: all)")
    p.add_argument("--out", metavar="FILE", help="curve output path (default: stdout)")
    common(p, seed=False)
    p.set_defaults(func=_cmd_fid_curve)

    p = sub.add_parser("select-model", help="print the epoch with minimal smoothed FID")
    p.add_argument("--curve", metavar="FILE", help="curve file from fid-curve")
    p.add_argument("--real", metavar="FILE", help="alternative to --curve: compute the curve now")
    p.add_argument("--epochs-dir", metavar="DIR", help="directory of per-epoch dumps")
    p.add_argument("--alpha", type=float,
                   help="EMA weight on the previous smoothed value (default: 0.3)")
    p.add_argument("--run", type=int, default=1, help="1-based MC run for FID features (default: 1)")
    p.add_argument("--layer", type=int, default=None, help="1-based layer to use (default: all)")
    common(p, seed=False)
    p.set_defaults(func=_cmd_select_model)

    p = sub.add_parser("centroids", help="freeze per-class mean activations from real records")
    p.add_argument("--dump", metavar="FILE", help="dump with the real records")
    p.add_argument("--run-index", type=int,
                   help="1-based MC run the centroids are averaged from (default: 1)")
    p.add_argument("--out", metavar="FILE", help="centroid sidecar output path")
    common(p, seed=False, jobs=False)
    p.set_defaults(func=_cmd_centroids)

    p = sub.add_parser("score", help="emit per-sample entropy (and distance) scores as JSONL")
    p.add_argument("--dump", metavar="FILE", help="embedding dump to score")
    p.add_argument("--centroids", metavar="FILE", help="centroid sidecar for distance scores")
    p.add_argument("--mc-runs", type=int, help="number of MC runs used per score (default: 5)")
    p.add_argument("--out", metavar="FILE", help="scores output path (default: stdout)")
    common(p, seed=False)
    p.set_defaults(func=_cmd_score)

    p = sub.add_parser("select", help="run the two-stage selection and write the manifest")
    p.add_argument("--real", metavar="FILE", help="dump with real records (defines per-class budgets)")
    p.add_argument("--synthetic", metavar="FILE", help="dump with the synthetic pool")
    p.add_argument("--centroids", metavar="FILE", help="centroid sidecar")
    p.add_argument("--ratio", type=float,
                   help="augmentation ratio r; selects floor(r * N_i) per class (default: 0.5)")
    p.add_argument("--oversample", type=int,
                   help="pool size multiple over the per-class budget (default: 4)")
    p.add_argument("--mc-runs", type=int, help="number of MC runs used per score (default: 5)")
    p.add_argument("--out", metavar="FILE", help="manifest output path")
    common(p)
    p.set_defaults(func=_cmd_select)

    p = sub.add_parser("merge", help="append selected synthetic samples to a training list")
    p.add_argument("--train", metavar="FILE", help="training list (sample_id<TAB>label per line)")
    p.add_argument("--manifest", metavar="FILE", help="selection manifest")
    p.add_argument("--out", metavar="FILE", help="merged training list output path")
    common(p, seed=False, jobs=False)
    p.set_defaults(func=_cmd_merge)

    p = sub.add_parser("validate", help="fully validate a dump, centroid, stats, or manifest file")
    p.add_argument("path", help="file to validate (type detected from magic bytes / .jsonl)")
    common(p, seed=False, jobs=False)
    p.set_defaults(func=_cmd_validate)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, KeyError, json.JSONDecodeError) as exc:
        return _fail(str(exc) if str(exc) else repr(exc))


if __name__ == "__main__":
    sys.exit(main())
