"""Datasets, synthetic generation, masking, baselines, and the error metric.

A longitudinal dataset is an N x D value matrix over a strictly increasing
time grid with a boolean observation mask; synthetic sets keep the noiseless
generating matrix so reconstruction error can be scored against the truth.
"""

import csv
import os
from dataclasses import dataclass, replace

import numpy as np

from .errors import DensityTooLow, DimensionMismatch, EmptyDimension, MissingGroundTruth


@dataclass(frozen=True)
class LongitudinalDataset:
    times: np.ndarray  # (N,), strictly increasing
    values: np.ndarray  # (N, D); entries with mask False are ignored
    mask: np.ndarray  # (N, D) bool, True = observed
    dim_names: tuple = ()
    ground_truth: np.ndarray | None = None

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).ravel()
        values = np.asarray(self.values, dtype=float)
        mask = np.asarray(self.mask, dtype=bool)
        if values.ndim != 2 or values.shape[0] != times.size:
            raise DimensionMismatch(f"values shape {values.shape} vs {times.size} times")
        if mask.shape != values.shape:
            raise DimensionMismatch("mask shape must match values")
        if np.any(np.diff(times) < 0):
            raise ValueError("times must be sorted ascending")
        names = tuple(self.dim_names) if self.dim_names else tuple(
            f"dim_{j}" for j in range(values.shape[1])
        )
        if len(names) != values.shape[1]:
            raise DimensionMismatch("dim_names length must match the value columns")
        gt = self.ground_truth
        if gt is not None:
            gt = np.asarray(gt, dtype=float)
            if gt.shape != values.shape:
                raise DimensionMismatch("ground_truth shape must match values")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "dim_names", names)
        object.__setattr__(self, "ground_truth", gt)

    @property
    def n_points(self) -> int:
        return self.times.size

    @property
    def n_dims(self) -> int:
        return self.values.shape[1]

    @property
    def density(self) -> float:
        return float(self.mask.mean())


def _latent_curves(rng, times, latent_dim, periodic_period=None):
    """Smooth latent paths: two sinusoids plus a slow trend per dimension."""
    span = times[-1] - times[0] if times[-1] > times[0] else 1.0
    X = np.empty((times.size, latent_dim))
    for q in range(latent_dim):
        if periodic_period is None:
            f1 = rng.uniform(0.15, 0.45) * 10.0 / span
            f2 = f1 * np.sqrt(2.0) * rng.uniform(0.9, 1.1)
            a1, a2 = rng.uniform(0.6, 1.4, size=2)
            p1, p2 = rng.uniform(0.0, 2.0 * np.pi, size=2)
            trend = rng.uniform(-0.5, 0.5)
            X[:, q] = (
                a1 * np.sin(2 * np.pi * f1 * times + p1)
                + a2 * np.sin(2 * np.pi * f2 * times + p2)
                + trend * (times - times[0]) / span
            )
        else:
            # Harmonics of one shared period; no trend, exactly periodic.
            harmonic = q + 1
            a = rng.uniform(0.7, 1.3)
            p = rng.uniform(0.0, 2.0 * np.pi)
            X[:, q] = a * np.sin(2 * np.pi * harmonic * times / periodic_period + p)
    return X


def _mix_to_outputs(rng, X, n_dims):
    """Fixed random nonlinear mixing: weighted sums through tanh squashing."""
    latent_dim = X.shape[1]
    W = rng.standard_normal((n_dims, latent_dim))
    b = rng.uniform(-0.3, 0.3, size=n_dims)
    amp = rng.uniform(0.8, 1.5, size=n_dims)
    return amp[None, :] * np.tanh(0.8 * X @ W.T + b[None, :])


def generate_synthetic(
    n_points: int, n_dims: int, latent_dim: int, noise_sd: float, seed: int
) -> LongitudinalDataset:
    """Fully observed synthetic set with ground truth attached.

    Latent paths are mixtures of sinusoids with incommensurate frequencies
    plus a slow trend, mapped to outputs through a fixed random tanh mixing;
    observations add Gaussian noise of the given standard deviation.
    """
    rng = np.random.default_rng(seed)
    times = np.sort(rng.uniform(0.0, 10.0, size=n_points))
    while np.any(np.diff(times) <= 0):  # measure-zero, but keep the contract
        times = np.sort(rng.uniform(0.0, 10.0, size=n_points))
    X = _latent_curves(rng, times, latent_dim)
    truth = _mix_to_outputs(rng, X, n_dims)
    noisy = truth + noise_sd * rng.standard_normal(truth.shape)
    return LongitudinalDataset(
        times=times,
        values=noisy,
        mask=np.ones_like(truth, dtype=bool),
        ground_truth=truth,
    )


def generate_periodic_synthetic(
    n_points: int, n_dims: int, period: float, noise_sd: float, seed: int
) -> LongitudinalDataset:
    """Synthetic set whose latent paths are harmonics of one shared period."""
    rng = np.random.default_rng(seed)
    times = np.sort(rng.uniform(0.0, 10.0, size=n_points))
    while np.any(np.diff(times) <= 0):
        times = np.sort(rng.uniform(0.0, 10.0, size=n_points))
    X = _latent_curves(rng, times, 2, periodic_period=period)
    truth = _mix_to_outputs(rng, X, n_dims)
    noisy = truth + noise_sd * rng.standard_normal(truth.shape)
    return LongitudinalDataset(
        times=times,
        values=noisy,
        mask=np.ones_like(truth, dtype=bool),
        ground_truth=truth,
    )


def apply_mask(data: LongitudinalDataset, density: float, seed) -> LongitudinalDataset:
    """Keep exactly round(density * N * D) entries observed, uniformly.

    Every dimension retains at least one observation; every time row does too
    whenever the budget allows it (a budget below N rows makes full row
    coverage impossible, in which case the row constraint is skipped).
    Values and ground truth are untouched.
    """
    if not (0.0 < density <= 1.0):
        raise ValueError("density must be in (0, 1]")
    if not np.all(data.mask):
        raise ValueError("apply_mask expects a fully observed dataset")
    N, D = data.values.shape
    k = int(round(density * N * D))
    if k < D:
        raise DensityTooLow(f"{k} observations cannot cover all {D} dimensions")
    rng = np.random.default_rng(seed)
    flat = rng.permutation(N * D)
    mask = np.zeros(N * D, dtype=bool)
    mask[flat[:k]] = True
    mask = mask.reshape(N, D)

    enforce_rows = k >= N

    def _repair(fix_dims: bool):
        counts = mask.sum(axis=0) if fix_dims else mask.sum(axis=1)
        for idx in np.where(counts == 0)[0]:
            if fix_dims:
                add = (int(rng.integers(N)), int(idx))
            else:
                add = (int(idx), int(rng.integers(D)))
            # Remove a cell whose loss violates nothing.
            removed = False
            for cell in rng.permutation(N * D):
                rr, dd = divmod(int(cell), D)
                if not mask[rr, dd] or (rr, dd) == add:
                    continue
                if mask[:, dd].sum() < 2:
                    continue
                if enforce_rows and mask[rr, :].sum() < 2:
                    continue
                mask[rr, dd] = False
                removed = True
                break
            if not removed:
                raise DensityTooLow(
                    f"cannot satisfy coverage constraints at density {density}"
                )
            mask[add] = True

    _repair(fix_dims=True)
    if enforce_rows:
        _repair(fix_dims=False)

    assert mask.sum() == k
    return replace(data, mask=mask)


def nn_impute(data: LongitudinalDataset) -> np.ndarray:
    """Fill every entry with the temporally nearest observed value in the
    same dimension; distance ties break toward the earlier time."""
    N, D = data.values.shape
    out = np.empty((N, D))
    for d in range(D):
        obs = np.where(data.mask[:, d])[0]
        if obs.size == 0:
            raise EmptyDimension(f"dimension {d} has no observations")
        t_obs = data.times[obs]
        pos = np.searchsorted(t_obs, data.times)
        left = np.clip(pos - 1, 0, obs.size - 1)
        right = np.clip(pos, 0, obs.size - 1)
        dist_left = np.abs(data.times - t_obs[left])
        dist_right = np.abs(data.times - t_obs[right])
        pick = np.where(dist_left <= dist_right, left, right)  # tie -> earlier
        out[:, d] = data.values[obs[pick], d]
    return out


def reconstruction_error(
    predicted: np.ndarray, data: LongitudinalDataset, masked_only: bool = False
) -> float:
    """Absolute sum of error against the ground truth, over all entries by
    default or only the masked-out ones."""
    if data.ground_truth is None:
        raise MissingGroundTruth("dataset carries no ground truth")
    predicted = np.asarray(predicted, dtype=float)
    if predicted.shape != data.ground_truth.shape:
        raise DimensionMismatch(
            f"predictions {predicted.shape} vs truth {data.ground_truth.shape}"
        )
    err = np.abs(predicted - data.ground_truth)
    if masked_only:
        return float(err[~data.mask].sum())
    return float(err.sum())


@dataclass(frozen=True)
class BenchmarkCell:
    density: float
    method: str
    errors: tuple  # per-seed errors; empty if every seed failed
    failures: tuple  # per-seed failure messages

    @property
    def mean_error(self) -> float | None:
        return float(np.mean(self.errors)) if self.errors else None

    @property
    def sd_error(self) -> float | None:
        if not self.errors:
            return None
        return float(np.std(self.errors, ddof=1)) if len(self.errors) > 1 else 0.0


@dataclass(frozen=True)
class BenchmarkTable:
    cells: tuple  # of BenchmarkCell, ordered (density, method)

    def cell(self, density: float, method: str) -> BenchmarkCell:
        for c in self.cells:
            if c.method == method and abs(c.density - density) < 1e-12:
                return c
        raise KeyError((density, method))

    def to_csv(self, path: str):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["density", "method", "mean_error", "sd_error", "n_seeds"])
            for c in self.cells:
                if c.errors:
                    w.writerow(
                        [
                            repr(c.density),
                            c.method,
                            repr(c.mean_error),
                            repr(c.sd_error),
                            len(c.errors),
                        ]
                    )
                else:
                    w.writerow([repr(c.density), c.method, "FAILED", "", 0])


def _mask_seed(seed: int, density: float) -> tuple:
    return (int(seed), int(round(density * 1_000_000)))


def evaluate_method(data: LongitudinalDataset, method: str, cfg, seed: int) -> float:
    """Reconstruction error of one method on one masked dataset."""
    from . import trainer  # local import to avoid a module cycle

    if method == "nn":
        return reconstruction_error(nn_impute(data), data)
    if method == "dgplvm":
        run_cfg = replace(cfg, sampler="none", impute_mode="mean", seed=seed)
    elif method == "vgpls":
        run_cfg = replace(cfg, seed=seed)
    else:
        raise ValueError(f"unknown method: {method!r}")
    state, _ = trainer.fit(data, run_cfg)
    mean, _ = trainer.predict(state, data.times)
    return reconstruction_error(mean, data)


def run_benchmark(
    data: LongitudinalDataset,
    densities,
    methods,
    seeds,
    cfg,
) -> BenchmarkTable:
    """Mask, fit, and score every (density, method, seed) combination.

    All methods at a given (density, seed) see the same mask. Per-seed
    failures are recorded in the cell rather than raised; cells are ordered
    by the given density then method and are deterministic under the seeds.
    """
    cells = []
    for density in densities:
        masked_by_seed = {}
        for s in seeds:
            try:
                masked_by_seed[s] = apply_mask(data, density, seed=_mask_seed(s, density))
            except Exception as exc:  # mask construction itself can fail
                masked_by_seed[s] = exc
        for method in methods:
            errors = []
            failures = []
            for s in seeds:
                masked = masked_by_seed[s]
                if isinstance(masked, Exception):
                    failures.append(f"seed {s}: {masked}")
                    continue
                try:
                    errors.append(evaluate_method(masked, method, cfg, s))
                except Exception as exc:
                    failures.append(f"seed {s}: {exc}")
            cells.append(
                BenchmarkCell(
                    density=float(density),
                    method=str(method),
                    errors=tuple(errors),
                    failures=tuple(failures),
                )
            )
    return BenchmarkTable(cells=tuple(cells))


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------


def write_long_csv(data: LongitudinalDataset, path: str):
    """Observed entries in long format (time,dim,value) plus a sidecar
    ``<path>.dims`` file naming the dimensions, one per line."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "dim", "value"])
        for i in range(data.n_points):
            for j in range(data.n_dims):
                if data.mask[i, j]:
                    w.writerow(
                        [repr(float(data.times[i])), j, repr(float(data.values[i, j]))]
                    )
    with open(path + ".dims", "w") as fh:
        fh.write("\n".join(data.dim_names) + "\n")


def write_ground_truth_csv(data: LongitudinalDataset, path: str):
    if data.ground_truth is None:
        raise MissingGroundTruth("dataset carries no ground truth")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", *data.dim_names])
        for i in range(data.n_points):
            w.writerow(
                [repr(float(data.times[i]))]
                + [repr(float(v)) for v in data.ground_truth[i]]
            )


def read_ground_truth_csv(path: str) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[0].strip() != "time":
            raise ValueError("ground-truth CSV must start with a time column")
        rows = [[float(x) for x in rec] for rec in reader if rec]
    arr = np.asarray(rows, dtype=float)
    return arr[:, 0], arr[:, 1:]


def read_long_csv(path: str, ground_truth_path: str | None = None) -> LongitudinalDataset:
    """Load a long-format data CSV; the dim column may hold 0-based integers
    or names resolved against the ``<path>.dims`` sidecar."""
    names = None
    sidecar = path + ".dims"
    if os.path.exists(sidecar):
        with open(sidecar) as fh:
            names = [line.strip() for line in fh if line.strip()]
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if [h.strip() for h in header[:3]] != ["time", "dim", "value"]:
            raise ValueError(f"unexpected header {header!r}; want time,dim,value")
        for rec in reader:
            if not rec:
                continue
            rows.append((float(rec[0]), rec[1].strip(), float(rec[2])))
    if not rows:
        raise ValueError("data CSV has no rows")

    def resolve(tag: str) -> int:
        if names is not None and tag in names:
            return names.index(tag)
        return int(tag)

    dims = [resolve(tag) for _, tag, _ in rows]
    n_dims = len(names) if names is not None else max(dims) + 1
    times = np.array(sorted({t for t, _, _ in rows}))
    index = {t: i for i, t in enumerate(times)}
    values = np.zeros((times.size, n_dims))
    mask = np.zeros((times.size, n_dims), dtype=bool)
    for (t, _, v), d in zip(rows, dims):
        i = index[t]
        if mask[i, d]:
            raise ValueError(f"duplicate entry for time {t}, dim {d}")
        values[i, d] = v
        mask[i, d] = True
    gt = None
    if ground_truth_path is not None:
        gt_times, gt = read_ground_truth_csv(ground_truth_path)
        if gt.shape != values.shape or not np.allclose(gt_times, times):
            raise DimensionMismatch("ground truth does not align with the data grid")
    return LongitudinalDataset(
        times=times,
        values=values,
        mask=mask,
        dim_names=tuple(names) if names else (),
        ground_truth=gt,
    )
