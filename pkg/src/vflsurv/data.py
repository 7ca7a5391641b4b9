"""Synthetic multimodal survival cohorts and the dataset file layout.

Generation model: each subject gets a latent Gaussian vector; every
modality observes a linear projection of its own disjoint block of latent
coordinates (plus observation noise), so the discriminative signal is
genuinely split across modalities.  Event times follow a Weibull
accelerated-failure model whose log-scale shifts with the latent risk
score; censoring times are exponential with the rate calibrated by
bisection to a target censoring fraction.

On disk a dataset is one labels file (patient_id,event,time,split) plus
one delimited matrix per modality whose first column is the patient id.
The loader treats the labels file as the reference cohort: subjects
missing from a modality file get a zero row, subjects absent from the
labels are dropped entirely.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .model import ModalityModelSpec, ModelConfig
from .rng import stream

__all__ = ["ModalityDataSpec", "CohortSpec", "Dataset", "generate_cohort",
           "write_dataset", "load_dataset", "impute", "DataFormatError",
           "default_cohort_spec"]


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ModalityDataSpec:
    name: str
    kind: str = "dense"                # "dense" | "clinical"
    width: int = 16                    # dense feature count
    vocab_sizes: tuple = (4,) * 9      # clinical categorical cardinalities
    continuous: int = 1
    signal_weight: float = 1.0
    missing_prob: float = 0.0

    def column_count(self) -> int:
        if self.kind == "dense":
            return self.width
        return len(self.vocab_sizes) + self.continuous


@dataclass(frozen=True)
class CohortSpec:
    n_subjects: int
    modalities: tuple[ModalityDataSpec, ...]
    latent_dim: int = 12
    signal_scale: float = 1.0
    weibull_shape: float = 2.0
    baseline_scale: float = 200.0
    censoring_fraction: float = 0.3
    noise_scale: float = 0.4
    split_fractions: tuple = (0.8, 0.1, 0.1)
    master_seed: int = 0

    def __post_init__(self):
        if self.n_subjects < 4:
            raise ValueError("cohort too small")
        if not 0.0 <= self.censoring_fraction < 1.0:
            raise ValueError("censoring fraction must lie in [0, 1)")
        if any(m.signal_weight < 0 for m in self.modalities):
            raise ValueError("signal weights must be non-negative")
        if any(m.column_count() < 1 for m in self.modalities):
            raise ValueError("modalities need at least one column")
        if abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")


def default_cohort_spec(n_subjects: int = 2000, master_seed: int = 0,
                        censoring_fraction: float = 0.3) -> CohortSpec:
    """Three-modality default: tabular clinical block plus two dense omics
    style blocks at the fast-profile widths."""
    mods = (
        ModalityDataSpec("clinical", kind="clinical"),
        ModalityDataSpec("mirna", kind="dense", width=64),
        ModalityDataSpec("dnam", kind="dense", width=128),
    )
    return CohortSpec(n_subjects=n_subjects, modalities=mods,
                      censoring_fraction=censoring_fraction,
                      master_seed=master_seed)


@dataclass
class Dataset:
    """Aligned in-memory view: one row per labels-file subject everywhere."""

    ids: np.ndarray
    times: np.ndarray
    events: np.ndarray
    split: np.ndarray                  # "train" | "val" | "test"
    modalities: dict[str, np.ndarray]  # name -> (N, width) aligned matrix
    present: dict[str, np.ndarray]     # name -> bool mask (row really observed)
    specs: dict[str, ModalityDataSpec]

    def subset(self, which: str) -> "Dataset":
        m = self.split == which
        return Dataset(ids=self.ids[m], times=self.times[m],
                       events=self.events[m], split=self.split[m],
                       modalities={k: v[m] for k, v in self.modalities.items()},
                       present={k: v[m] for k, v in self.present.items()},
                       specs=self.specs)

    def model_config(self, intervals: int, **overrides) -> ModelConfig:
        mods = []
        for name, spec in self.specs.items():
            if spec.kind == "clinical":
                mods.append(ModalityModelSpec(
                    name, kind="clinical", vocab_sizes=spec.vocab_sizes,
                    continuous=spec.continuous))
            else:
                mods.append(ModalityModelSpec(
                    name, kind="dense", width=self.modalities[name].shape[1]))
        return ModelConfig(modalities=tuple(mods), intervals=intervals,
                           **overrides)


def _latent_blocks(latent_dim: int, n_mod: int):
    """Disjoint, contiguous latent coordinate blocks, one per modality."""
    if latent_dim < n_mod:
        raise ValueError("latent dimension smaller than modality count")
    bounds = np.linspace(0, latent_dim, n_mod + 1).astype(int)
    return [np.arange(bounds[k], bounds[k + 1]) for k in range(n_mod)]


def _calibrate_censoring(event_times: np.ndarray, unit_exp: np.ndarray,
                         target: float, max_steps: int = 100) -> float:
    """Bisection on the exponential censoring rate; returns the rate."""
    if target == 0.0:
        return 0.0

    def frac(rate):
        return float(np.mean(unit_exp / rate < event_times))

    lo, hi = 1e-12, 1.0
    for _ in range(60):
        if frac(hi) >= target:
            break
        hi *= 4.0
    else:
        raise DataFormatError("censoring calibration failed: target unreachable")
    for _ in range(max_steps):
        mid = 0.5 * (lo + hi)
        if frac(mid) < target:
            lo = mid
        else:
            hi = mid
    return hi


def generate_cohort(spec: CohortSpec) -> Dataset:
    seed = spec.master_seed
    n = spec.n_subjects
    n_mod = len(spec.modalities)
    blocks = _latent_blocks(spec.latent_dim, n_mod)
    latent = stream(seed, "data", "latent").standard_normal((n, spec.latent_dim))

    # risk: every modality's block contributes through a fixed unit direction
    risk = np.zeros(n)
    for mspec, block in zip(spec.modalities, blocks):
        direction = np.ones(block.size) / np.sqrt(block.size)
        risk += mspec.signal_weight * (latent[:, block] @ direction)
    risk *= spec.signal_scale

    noise_rng = stream(seed, "data", "weibull")
    base_w = noise_rng.weibull(spec.weibull_shape, size=n)
    event_times = spec.baseline_scale * np.exp(-risk) * base_w
    event_times = np.maximum(event_times, 1e-3)

    unit_exp = stream(seed, "data", "censor").exponential(1.0, size=n)
    rate = _calibrate_censoring(event_times, unit_exp, spec.censoring_fraction)
    if rate > 0:
        censor_times = unit_exp / rate
    else:
        censor_times = np.full(n, np.inf)
    times = np.minimum(event_times, censor_times)
    events = (event_times <= censor_times).astype(np.int64)

    ids = np.arange(1000, 1000 + n, dtype=np.int64)
    order = stream(seed, "data", "split").permutation(n)
    n_train = int(round(spec.split_fractions[0] * n))
    n_val = int(round(spec.split_fractions[1] * n))
    split = np.empty(n, dtype=object)
    split[order[:n_train]] = "train"
    split[order[n_train:n_train + n_val]] = "val"
    split[order[n_train + n_val:]] = "test"

    modalities: dict[str, np.ndarray] = {}
    present: dict[str, np.ndarray] = {}
    specs: dict[str, ModalityDataSpec] = {}
    for mspec, block in zip(spec.modalities, blocks):
        cols = mspec.column_count()
        proj = stream(seed, "data", "proj", mspec.name).standard_normal(
            (block.size, cols)) / np.sqrt(block.size)
        raw = latent[:, block] @ proj
        raw += spec.noise_scale * stream(seed, "data", "obs-noise",
                                         mspec.name).standard_normal(raw.shape)
        raw /= np.sqrt(1.0 + spec.noise_scale ** 2)  # ~unit marginal variance
        if mspec.kind == "clinical":
            mat = np.empty_like(raw)
            n_cat = len(mspec.vocab_sizes)
            for j, vocab in enumerate(mspec.vocab_sizes):
                edges = [_norm_quantile((i + 1) / vocab) for i in range(vocab - 1)]
                mat[:, j] = np.digitize(raw[:, j], edges)
            mat[:, n_cat:] = raw[:, n_cat:]
        else:
            mat = raw
        mask = np.ones(n, dtype=bool)
        if mspec.missing_prob > 0:
            drop = stream(seed, "data", "missing", mspec.name).random(n) < mspec.missing_prob
            mask = ~drop
            mat = mat.copy()
            mat[drop] = 0.0
        modalities[mspec.name] = mat
        present[mspec.name] = mask
        specs[mspec.name] = mspec

    return Dataset(ids=ids, times=times, events=events, split=split,
                   modalities=modalities, present=present, specs=specs)


def _norm_quantile(q: float) -> float:
    """Standard normal quantile (Acklam's rational approximation); only used
    to place category thresholds, where 1e-9 accuracy is ample."""
    from numpy import log, sqrt
    if not 0.0 < q < 1.0:
        raise ValueError("quantile out of range")
    # Acklam's approximation
    a = [-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
         1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00]
    b = [-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
         6.680131188771972e+01, -1.328068155288572e+01]
    c = [-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
         -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00]
    d = [7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
         3.754408661907416e+00]
    plow, phigh = 0.02425, 1 - 0.02425
    if q < plow:
        ql = sqrt(-2 * log(q))
        x = (((((c[0] * ql + c[1]) * ql + c[2]) * ql + c[3]) * ql + c[4]) * ql + c[5]) / \
            ((((d[0] * ql + d[1]) * ql + d[2]) * ql + d[3]) * ql + 1)
    elif q <= phigh:
        ql = q - 0.5
        r = ql * ql
        x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * ql / \
            (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1)
    else:
        ql = sqrt(-2 * log(1 - q))
        x = -(((((c[0] * ql + c[1]) * ql + c[2]) * ql + c[3]) * ql + c[4]) * ql + c[5]) / \
            ((((d[0] * ql + d[1]) * ql + d[2]) * ql + d[3]) * ql + 1)
    return x


# ---------------------------------------------------------------------------
# file layout
# ---------------------------------------------------------------------------

def write_dataset(dataset: Dataset, path: str) -> None:
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, "labels.csv"), "w") as fh:
        fh.write("patient_id,event,time,split\n")
        for i in range(dataset.ids.size):
            fh.write(f"{dataset.ids[i]},{dataset.events[i]},"
                     f"{dataset.times[i]:.17g},{dataset.split[i]}\n")
    for name, mat in dataset.modalities.items():
        mask = dataset.present[name]
        with open(os.path.join(path, f"{name}.csv"), "w") as fh:
            cols = ",".join(f"f{j}" for j in range(mat.shape[1]))
            fh.write(f"patient_id,{cols}\n")
            for i in range(dataset.ids.size):
                if not mask[i]:
                    continue  # genuinely absent from this modality's file
                row = ",".join(f"{v:.17g}" for v in mat[i])
                fh.write(f"{dataset.ids[i]},{row}\n")


def _parse_labels(path: str):
    ids, events, times, split = [], [], [], []
    seen = set()
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if header != ["patient_id", "event", "time", "split"]:
            raise DataFormatError(f"{path}: unexpected header {header}")
        for lineno, line in enumerate(fh, start=2):
            parts = line.strip().split(",")
            if len(parts) != 4:
                raise DataFormatError(f"{path}:{lineno}: expected 4 fields")
            try:
                pid = int(parts[0])
                ev = int(parts[1])
                t = float(parts[2])
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from None
            if pid in seen:
                raise DataFormatError(f"{path}:{lineno}: duplicate id {pid}")
            if ev not in (0, 1):
                raise DataFormatError(f"{path}:{lineno}: event must be 0/1")
            if t <= 0:
                raise DataFormatError(f"{path}:{lineno}: non-positive time")
            if parts[3] not in ("train", "val", "test"):
                raise DataFormatError(f"{path}:{lineno}: bad split {parts[3]!r}")
            seen.add(pid)
            ids.append(pid)
            events.append(ev)
            times.append(t)
            split.append(parts[3])
    if not ids:
        raise DataFormatError(f"{path}: empty labels file")
    return (np.array(ids, dtype=np.int64), np.array(events, dtype=np.int64),
            np.array(times), np.array(split, dtype=object))


def _parse_modality(path: str):
    ids, rows = [], []
    seen = set()
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if header[0] != "patient_id":
            raise DataFormatError(f"{path}: first column must be patient_id")
        width = len(header) - 1
        for lineno, line in enumerate(fh, start=2):
            parts = line.strip().split(",")
            if len(parts) != width + 1:
                raise DataFormatError(
                    f"{path}:{lineno}: expected {width + 1} fields, got {len(parts)}")
            try:
                pid = int(parts[0])
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: bad id {parts[0]!r}") from None
            if pid in seen:
                raise DataFormatError(f"{path}:{lineno}: duplicate id {pid}")
            seen.add(pid)
            try:
                row = [float(v) for v in parts[1:]]
            except ValueError:
                bad = next(j for j, v in enumerate(parts[1:]) if not _is_float(v))
                raise DataFormatError(
                    f"{path}:{lineno}: column {bad + 1} unparseable") from None
            ids.append(pid)
            rows.append(row)
    return np.array(ids, dtype=np.int64), np.array(rows, dtype=np.float64)


def _is_float(v: str) -> bool:
    try:
        float(v)
        return True
    except ValueError:
        return False


def load_dataset(path: str, modality_specs: list[ModalityDataSpec] | None = None,
                 top_variance: int = 0) -> Dataset:
    """Load and align a dataset directory.

    ``modality_specs`` names the modality files to read (defaults to every
    *.csv next to labels.csv).  ``top_variance`` keeps only the k highest
    variance columns of each dense modality.
    """
    ids, events, times, split = _parse_labels(os.path.join(path, "labels.csv"))
    if modality_specs is None:
        names = sorted(f[:-4] for f in os.listdir(path)
                       if f.endswith(".csv") and f != "labels.csv")
        modality_specs = [ModalityDataSpec(name) for name in names]
    index = {pid: i for i, pid in enumerate(ids)}
    modalities: dict[str, np.ndarray] = {}
    present: dict[str, np.ndarray] = {}
    specs: dict[str, ModalityDataSpec] = {}
    for mspec in modality_specs:
        m_ids, m_rows = _parse_modality(os.path.join(path, f"{mspec.name}.csv"))
        mat = np.zeros((ids.size, m_rows.shape[1] if m_rows.size else 0))
        mask = np.zeros(ids.size, dtype=bool)
        for pid, row in zip(m_ids, m_rows):
            i = index.get(int(pid))
            if i is None:
                continue  # not in the reference cohort: excluded entirely
            mat[i] = row
            mask[i] = True
        if top_variance and mspec.kind == "dense" and mat.shape[1] > top_variance:
            variances = mat.var(axis=0)
            keep = np.sort(np.argsort(variances)[::-1][:top_variance])
            mat = mat[:, keep]
        modalities[mspec.name] = mat
        present[mspec.name] = mask
        specs[mspec.name] = mspec
    return Dataset(ids=ids, times=times, events=events, split=split,
                   modalities=modalities, present=present, specs=specs)


def impute(matrix: np.ndarray, column_kinds) -> np.ndarray:
    """Fill NaNs: categorical columns take the column mode (smallest value on
    ties), continuous columns the median."""
    matrix = np.array(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[1] != len(column_kinds):
        raise ValueError("column kinds must match matrix width")
    for j, kind in enumerate(column_kinds):
        col = matrix[:, j]
        missing = np.isnan(col)
        if missing.all():
            raise DataFormatError(f"column {j} entirely missing")
        if not missing.any():
            continue
        obs = col[~missing]
        if kind == "categorical":
            values, counts = np.unique(obs, return_counts=True)
            fill = values[counts == counts.max()].min()
        elif kind == "continuous":
            fill = np.median(obs)
        else:
            raise ValueError(f"unknown column kind {kind!r}")
        col[missing] = fill
    return matrix
