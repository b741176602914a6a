"""
Dataset ingestion and preparation for multistage quality data.

A dataset is a CSV with one row per product. A declarative schema (TOML)
assigns columns to stages as process features or quality labels. Loading
yields one :class:`StageFrame` per stage; label cells carry a validity mask
so outlier removal can discard individual measurements instead of rows.
"""

from __future__ import annotations

import json
import logging
import sys
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

logger = logging.getLogger(__name__)


class DatasetError(ValueError):
    """Problems with an input file or schema."""


# --------------------------------------------------------------------------
# schema
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class StageSchema:
    name: str
    features: tuple[str, ...]
    labels: tuple[str, ...]


@dataclass(frozen=True)
class DatasetSchema:
    stages: tuple[StageSchema, ...]
    name: str = "dataset"

    def __post_init__(self):
        if len(self.stages) < 2:
            raise DatasetError("a multistage schema needs at least two stages")
        seen: dict[str, str] = {}
        for st in self.stages:
            if not st.features:
                raise DatasetError(f"stage {st.name!r} has no feature columns")
            for role, cols in (("feature", st.features), ("label", st.labels)):
                for col in cols:
                    where = f"{st.name}/{role}"
                    if col in seen:
                        raise DatasetError(f"column {col!r} assigned twice ({seen[col]} and {where})")
                    seen[col] = where

    @property
    def p(self) -> list[int]:
        return [len(s.features) for s in self.stages]

    @property
    def q(self) -> list[int]:
        return [len(s.labels) for s in self.stages]

    def to_dict(self) -> dict:
        return {
            "dataset": {"name": self.name},
            "stages": [{"name": s.name, "features": list(s.features), "labels": list(s.labels)} for s in self.stages],
        }


def schema_from_dict(doc: dict) -> DatasetSchema:
    try:
        stages = tuple(
            StageSchema(str(s["name"]), tuple(s["features"]), tuple(s.get("labels", ())))
            for s in doc["stages"]
        )
    except (KeyError, TypeError) as exc:
        raise DatasetError(f"malformed schema: {exc}") from exc
    return DatasetSchema(stages, name=doc.get("dataset", {}).get("name", "dataset"))


def load_schema(path) -> DatasetSchema:
    with open(path, "rb") as fh:
        return schema_from_dict(tomllib.load(fh))


def save_schema(schema: DatasetSchema, path) -> Path:
    path = Path(path)
    path.write_bytes(tomli_w.dumps(schema.to_dict()).encode())
    return path


MCMP_EXPECTED_Q = (8, 13)


def mcmp_schema() -> DatasetSchema:
    """Bundled schema for the two-stage continuous-flow benchmark (41 + 14 features)."""
    text = resources.files("koopvm.resources").joinpath("mcmp_schema.toml").read_text()
    return schema_from_dict(tomllib.loads(text))


# --------------------------------------------------------------------------
# frames
# --------------------------------------------------------------------------

@dataclass
class StageFrame:
    """Features ``X`` (n x p), labels ``Y`` (n x q) and label validity ``mask``."""

    X: np.ndarray
    Y: np.ndarray
    mask: np.ndarray
    feature_names: tuple[str, ...]
    label_names: tuple[str, ...]
    dropped_labels: tuple[str, ...] = ()
    name: str = ""

    def __post_init__(self):
        if self.X.ndim != 2 or self.Y.ndim != 2:
            raise DatasetError("X and Y must be 2-D")
        if self.X.shape[0] != self.Y.shape[0]:
            raise DatasetError(f"row mismatch: X has {self.X.shape[0]}, Y has {self.Y.shape[0]}")
        if self.mask.shape != self.Y.shape:
            raise DatasetError(f"mask shape {self.mask.shape} differs from Y {self.Y.shape}")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def q(self) -> int:
        return self.Y.shape[1]

    def take(self, idx) -> "StageFrame":
        idx = np.asarray(idx)
        return replace(self, X=self.X[idx], Y=self.Y[idx], mask=self.mask[idx])


def _check_frames(frames: Sequence[StageFrame]) -> None:
    if not frames:
        raise DatasetError("no stage frames")
    n = frames[0].n
    for f in frames:
        if f.n != n:
            raise DatasetError(f"stage {f.name!r} has {f.n} rows, expected {n}")


def take_rows(frames: Sequence[StageFrame], idx) -> list[StageFrame]:
    return [f.take(idx) for f in frames]


def _parse_column(values: pd.Series, column: str, allow_blank: bool) -> np.ndarray:
    out = np.empty(len(values))
    for i, raw in enumerate(values):
        text = raw.strip()
        if text == "":
            if allow_blank:
                out[i] = np.nan
                continue
            raise DatasetError(f"row {i}, column {column!r}: empty cell")
        try:
            out[i] = float(text)
        except ValueError:
            raise DatasetError(f"row {i}, column {column!r}: cannot parse {raw!r} as a number") from None
    return out


def load_dataset(csv_path, schema: DatasetSchema) -> list[StageFrame]:
    """Read a CSV into per-stage frames.

    Blank label cells become invalid (masked); blank or non-numeric feature
    cells are errors. Row order is preserved.
    """
    try:
        df = pd.read_csv(csv_path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError:
        raise DatasetError(f"{csv_path}: file is empty") from None
    if df.shape[0] == 0:
        raise DatasetError(f"{csv_path}: no data rows")
    missing = [c for st in schema.stages for c in (*st.features, *st.labels) if c not in df.columns]
    if missing:
        raise DatasetError(f"{csv_path}: missing column(s) {missing}")

    frames = []
    for st in schema.stages:
        X = np.column_stack([_parse_column(df[c], c, allow_blank=False) for c in st.features])
        if st.labels:
            Y = np.column_stack([_parse_column(df[c], c, allow_blank=True) for c in st.labels])
        else:
            Y = np.empty((len(df), 0))
        frames.append(StageFrame(X, Y, np.isfinite(Y), tuple(st.features), tuple(st.labels), name=st.name))
    return frames


def frames_to_dataframe(frames: Sequence[StageFrame], apply_mask: bool = True) -> pd.DataFrame:
    cols = {}
    for f in frames:
        for j, name in enumerate(f.feature_names):
            cols[name] = f.X[:, j]
        for j, name in enumerate(f.label_names):
            col = f.Y[:, j].copy()
            if apply_mask:
                col[~f.mask[:, j]] = np.nan
            cols[name] = col
    return pd.DataFrame(cols)


def write_frames_csv(frames: Sequence[StageFrame], path, apply_mask: bool = True) -> Path:
    """Write frames as one CSV; masked label cells are left blank."""
    path = Path(path)
    frames_to_dataframe(frames, apply_mask).to_csv(path, index=False, float_format="%.17g")
    return path


def schema_from_frames(frames: Sequence[StageFrame], name: str = "dataset") -> DatasetSchema:
    return DatasetSchema(
        tuple(StageSchema(f.name or f"stage{k + 1}", f.feature_names, f.label_names) for k, f in enumerate(frames)),
        name=name,
    )


# --------------------------------------------------------------------------
# cleaning
# --------------------------------------------------------------------------

@dataclass
class StageCleaning:
    name: str
    raw_q: int
    dropped: list[str]
    outliers: dict[str, int]
    zero_variance: list[str]
    q: int


@dataclass
class CleaningReport:
    stages: list[StageCleaning]
    zero_fraction: float
    n_std: float
    notes: list[str] = field(default_factory=list)

    @property
    def q(self) -> list[int]:
        return [s.q for s in self.stages]

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def clean_labels(frames: Sequence[StageFrame], zero_fraction: float = 0.2, n_std: float = 3.5,
                 expected_q: Sequence[int] | None = None) -> tuple[list[StageFrame], CleaningReport]:
    """Drop mostly-zero label columns, then mask cells far from the column median.

    A column is dropped when more than ``zero_fraction`` of its rows read
    exactly zero. In the remaining columns a cell is invalidated when it lies
    more than ``n_std`` standard deviations (of the raw column) from the
    median. Applying this twice is a no-op. When ``expected_q`` is given and
    the surviving label counts differ, the report notes the deviation.
    """
    _check_frames(frames)
    out, stages = [], []
    for f in frames:
        keep, dropped = [], list(f.dropped_labels)
        for j, name in enumerate(f.label_names):
            col = f.Y[:, j]
            if np.mean(col == 0.0) > zero_fraction:
                dropped.append(name)
            else:
                keep.append(j)
        Y = f.Y[:, keep]
        mask = f.mask[:, keep].copy()
        names = tuple(f.label_names[j] for j in keep)
        outliers, zero_var = {}, []
        for j, name in enumerate(names):
            col = Y[:, j]
            finite = np.isfinite(col)
            if finite.sum() < 2:
                outliers[name] = 0
                continue
            med = np.median(col[finite])
            std = np.std(col[finite], ddof=1)
            bad = finite & (np.abs(col - med) > n_std * std)
            outliers[name] = int(bad.sum())
            mask[:, j] &= ~bad
            valid = col[mask[:, j]]
            if valid.size == 0 or np.std(valid) == 0.0:
                zero_var.append(name)
        out.append(replace(f, Y=Y, mask=mask, label_names=names, dropped_labels=tuple(dropped)))
        stages.append(StageCleaning(f.name, len(f.label_names) + len(f.dropped_labels), dropped, outliers, zero_var, len(names)))
    report = CleaningReport(stages, zero_fraction, n_std)
    for s in stages:
        if s.zero_variance:
            report.notes.append(f"{s.name}: zero-variance label column(s) kept: {s.zero_variance}")
    if expected_q is not None and list(expected_q) != report.q:
        report.notes.append(f"label counts after cleaning {report.q} differ from expected {list(expected_q)}")
    return out, report


# --------------------------------------------------------------------------
# scaling and splitting
# --------------------------------------------------------------------------

@dataclass
class Scaler:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray) -> "Scaler":
        return cls(X.mean(axis=0), X.std(axis=0))

    def transform(self, X: np.ndarray) -> np.ndarray:
        safe = np.where(self.std > 0, self.std, 1.0)
        Z = (X - self.mean) / safe
        Z[:, self.std == 0] = 0.0
        return Z

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}


def standardize(frames: Sequence[StageFrame], train_idx) -> tuple[list[StageFrame], list[Scaler]]:
    """Z-score features with statistics from the training rows only; labels untouched."""
    _check_frames(frames)
    train_idx = np.asarray(train_idx)
    scalers = [Scaler.fit(f.X[train_idx]) for f in frames]
    return [replace(f, X=s.transform(f.X)) for f, s in zip(frames, scalers)], scalers


@dataclass
class Split:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def to_dict(self) -> dict:
        return {"train": self.train.tolist(), "val": self.val.tolist(), "test": self.test.tolist()}


def split(n: int, ratios: Sequence[float] = (0.7, 0.1, 0.2), seed: int = 0) -> Split:
    """Random train/validation/test partition of ``range(n)``."""
    if n < 10:
        raise ValueError(f"need at least 10 rows to split, got {n}")
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(n * ratios[0]))
    n_val = int(round(n * ratios[1]))
    n_val = min(n_val, n - n_train)
    return Split(
        np.sort(perm[:n_train]),
        np.sort(perm[n_train:n_train + n_val]),
        np.sort(perm[n_train + n_val:]),
    )


# --------------------------------------------------------------------------
# synthetic generator
# --------------------------------------------------------------------------

@dataclass
class SyntheticConfig:
    n_samples: int = 5000
    p: tuple[int, ...] = (8, 6)
    q: tuple[int, ...] = (4, 4)
    latent_dim: int = 4
    coupling: float = 1.0
    noise: float = 0.1
    nonlinearity: str = "tanh"
    seed: int = 0

    def validate(self) -> None:
        if self.n_samples < 1 or self.latent_dim < 1:
            raise ValueError("n_samples and latent_dim must be positive")
        if len(self.p) != len(self.q) or len(self.p) < 2:
            raise ValueError("p and q need one entry per stage, at least two stages")
        if min(self.p) < 1 or min(self.q) < 1:
            raise ValueError("feature and label counts must be positive")
        if self.coupling < 0 or self.noise < 0:
            raise ValueError("coupling and noise must be non-negative")
        if self.nonlinearity not in ("tanh", "linear"):
            raise ValueError(f"nonlinearity must be 'tanh' or 'linear', got {self.nonlinearity!r}")


@dataclass
class SyntheticDataset:
    frames: list[StageFrame]
    config: SyntheticConfig
    A: list[np.ndarray]
    C: list[np.ndarray]
    D: list[np.ndarray]
    latents: list[np.ndarray]

    def truth_dict(self) -> dict:
        return {
            "config": asdict(self.config),
            "A": [a.tolist() for a in self.A],
            "C": [c.tolist() for c in self.C],
            "D": [d.tolist() for d in self.D],
        }


def generate_synthetic(config: SyntheticConfig) -> SyntheticDataset:
    """Sample a multistage dataset with a known latent coupling.

    ``z_1 = f(A_1 X_1)``, ``z_k = D_{k-1} z_{k-1} + f(A_k X_k)``,
    ``Y_k = C_k z_k + noise`` with ``X_k`` standard normal, ``f`` tanh or the
    identity, and ``D`` a random orthogonal matrix scaled by ``coupling``.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    m, n = config.latent_dim, config.n_samples
    f = np.tanh if config.nonlinearity == "tanh" else (lambda v: v)
    A = [rng.standard_normal((m, p)) / np.sqrt(p) for p in config.p]
    C = [rng.standard_normal((q, m)) / np.sqrt(m) for q in config.q]
    D = []
    for _ in range(len(config.p) - 1):
        Q, R = np.linalg.qr(rng.standard_normal((m, m)))
        D.append(config.coupling * Q * np.sign(np.diag(R)))
    frames, latents = [], []
    z_prev = None
    for k, (p, q) in enumerate(zip(config.p, config.q)):
        X = rng.standard_normal((n, p))
        z = f(X @ A[k].T)
        if z_prev is not None:
            z = z + z_prev @ D[k - 1].T
        Y = z @ C[k].T + config.noise * rng.standard_normal((n, q))
        frames.append(StageFrame(
            X, Y, np.ones_like(Y, dtype=bool),
            tuple(f"S{k + 1}.X{i}" for i in range(p)),
            tuple(f"S{k + 1}.Y{j}" for j in range(q)),
            name=f"stage{k + 1}",
        ))
        latents.append(z)
        z_prev = z
    return SyntheticDataset(frames, config, A, C, D, latents)


def write_synthetic(ds: SyntheticDataset, out_dir) -> dict[str, Path]:
    """Write ``data.csv``, ``schema.toml`` and ``truth.json`` into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "data": write_frames_csv(ds.frames, out_dir / "data.csv"),
        "schema": save_schema(schema_from_frames(ds.frames, "synthetic"), out_dir / "schema.toml"),
        "truth": out_dir / "truth.json",
    }
    paths["truth"].write_text(json.dumps(ds.truth_dict(), indent=1))
    return paths
