"""Frechet distance between Gaussian feature statistics and EMA curve smoothing.

The distance between two Gaussians N(mu_a, S_a) and N(mu_b, S_b) is

    d^2 = ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a^{1/2} S_b S_a^{1/2})^{1/2})

computed with the symmetrized cross term so every matrix square root is taken
of a real symmetric PSD matrix via eigendecomposition. Per-epoch scores are
smoothed with the recurrence

    s_1 = raw_1,   s_t = alpha * s_{t-1} + (1 - alpha) * raw_t

so the newest observation carries weight (1 - alpha); checkpoint selection is
the argmin of the smoothed series, ties broken toward the earliest epoch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .store import EmbeddingDataset, SampleRecord, ValidationError

# eigenvalues above -PSD_EIG_TOL * max(1, largest eigenvalue) count as PSD
PSD_EIG_TOL = 1e-6


class NotPSDError(ValueError):
    """A matrix required to be positive semidefinite is not."""


@dataclass(frozen=True)
class GaussianStats:
    """Mean vector and unbiased sample covariance of a feature set."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self) -> None:
        mean = np.asarray(self.mean, dtype=np.float64)
        cov = np.asarray(self.cov, dtype=np.float64)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        if mean.ndim != 1 or mean.shape[0] < 1:
            raise ValidationError(f"mean must be a non-empty vector, got shape {mean.shape}")
        d = mean.shape[0]
        if cov.shape != (d, d):
            raise ValidationError(f"cov shape {cov.shape} does not match dim {d}")
        if not np.allclose(cov, cov.T, rtol=1e-8, atol=1e-8):
            raise ValidationError("cov is not symmetric within 1e-8 of its transpose")
        eigvals = np.linalg.eigvalsh((cov + cov.T) / 2.0)
        tol = PSD_EIG_TOL * max(1.0, float(eigvals[-1]))
        if float(eigvals[0]) < -tol:
            raise NotPSDError(f"cov has eigenvalue {float(eigvals[0]):.3e} below -{tol:.3e}")

    @property
    def dim(self) -> int:
        return int(self.mean.shape[0])


def fit_gaussian(features: Sequence[Sequence[float]] | np.ndarray) -> GaussianStats:
    """Fits mean and unbiased covariance (divisor n - 1) to feature vectors."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValidationError(f"expected a 2-d array of feature vectors, got shape {x.shape}")
    n, d = x.shape
    if n < 2:
        raise ValidationError(f"need at least 2 feature vectors to fit a covariance, got {n}")
    if d < 1:
        raise ValidationError("feature vectors must have at least one dimension")
    mean = x.mean(axis=0)
    cov = np.cov(x, rowvar=False, ddof=1).reshape(d, d)
    cov = (cov + cov.T) / 2.0  # exact symmetrization; matmul output is not bit-symmetric
    return GaussianStats(mean=mean, cov=cov)


def sqrtm_psd(matrix: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root S with S @ S = matrix.

    Eigenvalues within -PSD_EIG_TOL * max(1, largest) of zero are clipped to
    zero; anything more negative raises :class:`NotPSDError`.
    """
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValidationError(f"expected a square matrix, got shape {m.shape}")
    if not np.allclose(m, m.T, rtol=1e-8, atol=1e-8):
        raise ValidationError("matrix is not symmetric")
    eigvals, eigvecs = np.linalg.eigh((m + m.T) / 2.0)
    tol = PSD_EIG_TOL * max(1.0, float(eigvals[-1]))
    if float(eigvals[0]) < -tol:
        raise NotPSDError(f"not PSD: eigenvalue {float(eigvals[0]):.3e} below -{tol:.3e}")
    root = eigvecs @ np.diag(np.sqrt(np.clip(eigvals, 0.0, None))) @ eigvecs.T
    return (root + root.T) / 2.0


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """Squared Frechet (2-Wasserstein) distance between two Gaussian stats.

    Results below the numerical noise floor (1e-6 relative to the combined
    covariance scale) snap to exactly 0, which also clamps the tiny negative
    values the trace difference can produce.
    """
    if a.dim != b.dim:
        raise ValidationError(f"dimension mismatch: {a.dim} vs {b.dim}")
    diff = a.mean - b.mean
    root_a = sqrtm_psd(a.cov)
    inner = root_a @ b.cov @ root_a
    cross = sqrtm_psd((inner + inner.T) / 2.0)
    value = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.trace(cross))
    noise_floor = PSD_EIG_TOL * max(1.0, abs(float(np.trace(a.cov))) + abs(float(np.trace(b.cov))))
    if value <= noise_floor:
        return 0.0
    return value


def ema_smooth(raw: Sequence[float], alpha: float) -> list[float]:
    """Exponential moving average: s_t = alpha * s_{t-1} + (1 - alpha) * raw_t."""
    if not 0.0 < alpha < 1.0:
        raise ValidationError(f"alpha must lie in (0, 1), got {alpha}")
    values = [float(v) for v in raw]
    if not values:
        raise ValidationError("cannot smooth an empty series")
    smoothed = [values[0]]
    for v in values[1:]:
        smoothed.append(alpha * smoothed[-1] + (1.0 - alpha) * v)
    return smoothed


@dataclass(frozen=True)
class FidCurve:
    """Per-epoch raw scores with their EMA-smoothed counterparts."""

    epochs: tuple[tuple[int, float], ...]
    alpha: float
    smoothed: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.smoothed) != len(self.epochs):
            raise ValidationError("smoothed series length does not match epoch list")
        if self.epochs and self.smoothed[0] != self.epochs[0][1]:
            raise ValidationError("first smoothed value must equal the first raw value")

    @classmethod
    def from_raw(cls, epochs: Sequence[tuple[int, float]], alpha: float) -> "FidCurve":
        pairs = tuple((int(t), float(v)) for t, v in epochs)
        if not pairs:
            raise ValidationError("cannot build a curve from an empty epoch list")
        if sorted(t for t, _ in pairs) != [t for t, _ in pairs]:
            raise ValidationError("epochs must be listed in ascending order")
        return cls(epochs=pairs, alpha=float(alpha),
                   smoothed=tuple(ema_smooth([v for _, v in pairs], alpha)))


def select_model(curve: FidCurve) -> int:
    """Epoch with the minimal smoothed score; earliest epoch wins ties."""
    best_epoch, best = curve.epochs[0][0], curve.smoothed[0]
    for (epoch, _), value in zip(curve.epochs[1:], curve.smoothed[1:]):
        if value < best:
            best_epoch, best = epoch, value
    return best_epoch


def features_for_fid(records: Sequence[SampleRecord] | Iterator[SampleRecord],
                     run_index: int = 1, layer: int | None = None) -> np.ndarray:
    """Feature matrix for Gaussian fitting: one flattened row per record.

    Uses run ``run_index`` (1-based; run 1 by convention carries the
    dropout-free pass). ``layer`` selects a single 1-based layer; None
    concatenates every exported layer in declared order.
    """
    rows = []
    for record in records:
        if not 1 <= run_index <= len(record.activations):
            raise ValidationError(
                f"record {record.sample_id!r}: run index {run_index} outside [1, {len(record.activations)}]"
            )
        run = record.activations[run_index - 1]
        if layer is None:
            rows.append(np.concatenate([np.asarray(t, dtype=np.float64) for t in run]))
        else:
            if not 1 <= layer <= len(run):
                raise ValidationError(f"layer index {layer} outside [1, {len(run)}]")
            rows.append(np.asarray(run[layer - 1], dtype=np.float64))
    if not rows:
        raise ValidationError("no records to extract features from")
    return np.stack(rows, axis=0)


def curve_from_datasets(real: EmbeddingDataset,
                        epoch_datasets: Sequence[tuple[int, EmbeddingDataset]],
                        alpha: float, run_index: int = 1, layer: int | None = None,
                        jobs: int = 1) -> FidCurve:
    """Raw-then-smoothed curve of each epoch dump against the real features."""
    from concurrent.futures import ThreadPoolExecutor

    real_stats = fit_gaussian(features_for_fid(real.records, run_index=run_index, layer=layer))

    def raw_fid(item: tuple[int, EmbeddingDataset]) -> tuple[int, float]:
        epoch, dataset = item
        stats = fit_gaussian(features_for_fid(dataset.records, run_index=run_index, layer=layer))
        return epoch, frechet_distance(real_stats, stats)

    ordered = sorted(epoch_datasets, key=lambda item: item[0])
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            pairs = list(pool.map(raw_fid, ordered))
    else:
        pairs = [raw_fid(item) for item in ordered]
    return FidCurve.from_raw(pairs, alpha=alpha)
