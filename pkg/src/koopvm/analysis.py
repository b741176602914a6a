"""
Post-training analyses of a fitted model.

* gradient sensitivity of final-stage predictions to every process variable
* export of Koopman eigenvalues at the nominal operating point
* latent-size sweep
* mean absolute error binned by the norm of the final-stage labels
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numcore as nc
from .data import StageFrame
from .koopman import StaticKoopman, StochasticEigenKoopman
from .model import MultistageModel
from .numcore import Tensor

logger = logging.getLogger(__name__)


def _write_csv(path, header: Sequence[str], rows: Sequence[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    return path


# --------------------------------------------------------------------------
# sensitivity
# --------------------------------------------------------------------------

@dataclass
class SensitivityMatrix:
    """Mean absolute gradient of each output (row) w.r.t. each input variable (column)."""

    values: np.ndarray
    output_names: list[str]
    input_names: list[str]

    def to_csv(self, path) -> Path:
        rows = [[name, *map(repr, row)] for name, row in zip(self.output_names, self.values.tolist())]
        return _write_csv(path, ["output", *self.input_names], rows)

    def top_mass_share(self, fraction: float = 0.1) -> float:
        """Share of total sensitivity carried by the largest ``fraction`` of entries."""
        flat = np.sort(self.values.reshape(-1))[::-1]
        total = flat.sum()
        if total == 0:
            return 0.0
        k = max(1, int(np.ceil(fraction * flat.size)))
        return float(flat[:k].sum() / total)


def input_sensitivity(forward: Callable[[list[Tensor]], Tensor], xs: Sequence[np.ndarray]) -> np.ndarray:
    """``mean_rows |d out_j / d x_i|`` for a row-wise map ``forward``.

    Rows must not interact inside ``forward`` (true for every model here), so
    the gradient of a column sum yields the per-row gradients.
    """
    inputs = [Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in xs]
    out = forward(inputs)
    if out.ndim != 2:
        raise nc.ShapeError(f"sensitivity: expected a 2-D output, got {out.shape}")
    n, q = out.shape
    widths = [x.shape[1] for x in inputs]
    result = np.zeros((q, sum(widths)))
    for j in range(q):
        for t in inputs:
            t.grad = np.zeros_like(t.data)
        selector = np.zeros((n, q))
        selector[:, j] = 1.0
        nc.backward(nc.reduce_sum(nc.mul(out, Tensor(selector))))
        result[j] = np.concatenate([np.abs(t.grad).mean(axis=0) for t in inputs])
    return result


def sensitivity(model, frames: Sequence[StageFrame]) -> SensitivityMatrix:
    """Sensitivity of the last stage's predictions to all stage inputs (eps = 0).

    ``model`` is a :class:`MultistageModel` or any callable mapping a single
    input tensor to predictions (treated as a one-stage model).
    """
    if isinstance(model, MultistageModel):
        def forward(ts):
            return model.forward(ts, mode="eval")[-1].y_pred
        xs = [f.X for f in frames]
        out_names = list(frames[-1].label_names)
        in_names = [name for f in frames for name in f.feature_names]
    else:
        def forward(ts):
            return model(ts[0])
        xs = [frames[0].X]
        out_names = list(frames[0].label_names)
        in_names = list(frames[0].feature_names)
    values = input_sensitivity(forward, xs)
    if len(out_names) != values.shape[0]:
        out_names = [f"y{j}" for j in range(values.shape[0])]
    return SensitivityMatrix(values, out_names, in_names)


# --------------------------------------------------------------------------
# Koopman export
# --------------------------------------------------------------------------

def normalize_eigenvalues(eigenvalues, tau: float = 0.01) -> tuple[np.ndarray, int]:
    """Scale ``|lambda|`` into [0, 1] by its maximum and count entries above ``tau``."""
    mag = np.abs(np.asarray(eigenvalues, dtype=np.float64))
    peak = mag.max() if mag.size else 0.0
    if peak == 0:
        return np.zeros_like(mag), 0
    normalized = mag / peak
    return normalized, int(np.sum(normalized > tau))


@dataclass
class OperatorExport:
    name: str
    from_stage: int
    eigenvalues: list[float]
    normalized: list[float]
    nonzero: int
    matrix: list[list[float]] | None = None


@dataclass
class KoopmanExport:
    operators: list[OperatorExport]
    tau: float
    nominal: str = "mean upstream latent mean over the evaluation rows, eps = 0"

    def counts(self) -> dict[str, int]:
        return {op.name: op.nonzero for op in self.operators}

    def to_csv(self, path) -> Path:
        rows = []
        for op in self.operators:
            for i, (lam, norm) in enumerate(zip(op.eigenvalues, op.normalized)):
                rows.append([op.name, op.from_stage, i, repr(lam), repr(norm)])
        return _write_csv(path, ["operator", "from_stage", "index", "eigenvalue", "normalized"], rows)

    def to_json(self, **kw) -> str:
        return json.dumps(asdict(self), **kw)


def export_koopman(model: MultistageModel, frames: Sequence[StageFrame], tau: float = 0.01) -> KoopmanExport:
    """Koopman operators evaluated at the nominal operating point of ``frames``."""
    trace = model.forward([f.X for f in frames], mode="eval")
    ops: list[OperatorExport] = []
    for k in range(model.n_stages - 1):
        transition = model.stages[k].transition
        up = trace[k]
        if isinstance(transition, StaticKoopman):
            K = transition.matrix()
            diag = np.diag(K)
            mag = np.abs(K)
            peak = mag.max()
            norm_matrix = mag / peak if peak > 0 else np.zeros_like(mag)
            normalized, count = normalize_eigenvalues(diag, tau)
            ops.append(OperatorExport(f"K{k + 1}", k + 1, diag.tolist(), normalized.tolist(), count, norm_matrix.tolist()))
        elif isinstance(transition, StochasticEigenKoopman):
            nominal = up.mu.data.mean(axis=0, keepdims=True)
            lam_mu, lam_sigma = transition.eigenvalues(nominal)
            for tag, lam in (("mu", lam_mu), ("sigma", lam_sigma)):
                values = lam.data[0]
                normalized, count = normalize_eigenvalues(values, tau)
                ops.append(OperatorExport(f"K{k + 1}_{tag}", k + 1, values.tolist(), normalized.tolist(), count))
        else:
            nominal = up.h.data.mean(axis=0, keepdims=True)
            values = transition.eigenvalues(nominal).data[0]
            normalized, count = normalize_eigenvalues(values, tau)
            ops.append(OperatorExport(f"K{k + 1}", k + 1, values.tolist(), normalized.tolist(), count))
    return KoopmanExport(ops, tau)


# --------------------------------------------------------------------------
# latent-size sweep
# --------------------------------------------------------------------------

@dataclass
class SweepRow:
    latent_dim: int
    val_mse_last_stage: float
    seconds: float
    error: str = ""


@dataclass
class SweepResult:
    rows: list[SweepRow] = field(default_factory=list)

    def to_csv(self, path) -> Path:
        return _write_csv(path, ["latent_dim", "val_mse_last_stage", "seconds", "error"],
                          [[r.latent_dim, repr(r.val_mse_last_stage), f"{r.seconds:.3f}", r.error] for r in self.rows])

    def best(self) -> SweepRow | None:
        ok = [r for r in self.rows if not r.error]
        return min(ok, key=lambda r: r.val_mse_last_stage) if ok else None


def latent_sweep(frames: Sequence[StageFrame], base_config, sizes: Sequence[int], data=None) -> SweepResult:
    """Train one model per latent size with a fixed seed; record final-stage validation MSE."""
    from .train import prepare, train_model

    if not sizes:
        raise ValueError("sizes must be non-empty")
    if any(int(s) < 1 for s in sizes):
        raise ValueError("latent sizes must be at least 1")
    data = data or prepare(frames, base_config)
    result = SweepResult()
    for size in sizes:
        cfg = replace(base_config, latent_dim=int(size))
        start = time.perf_counter()
        try:
            run = train_model(frames, cfg, data)
            result.rows.append(SweepRow(int(size), run.val_report.stage_mse[-1], time.perf_counter() - start))
        except Exception as exc:  # noqa: BLE001 - recorded, sweep continues
            logger.warning("latent size %s failed: %s", size, exc)
            result.rows.append(SweepRow(int(size), float("nan"), time.perf_counter() - start, repr(exc)))
    return result


# --------------------------------------------------------------------------
# binned MAE
# --------------------------------------------------------------------------

@dataclass
class BinRow:
    center: float
    mae_mean: float
    mae_std: float
    count: int


def binned_mae_table(y_true: np.ndarray, y_pred: np.ndarray, mask: np.ndarray | None = None,
                     spacing: float = 0.1, half_width: float = 0.1) -> list[BinRow]:
    """Per-row MAE grouped by the 2-norm of the true label vector.

    Bin centres lie on a ``spacing`` grid covering the observed norms and each
    bin takes the rows within ``half_width`` of its centre, so neighbouring
    bins overlap. Rows with any invalid label are skipped; empty bins are
    omitted.
    """
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    keep = np.all(np.isfinite(y_true), axis=1)
    if mask is not None:
        keep &= np.all(np.asarray(mask, dtype=bool), axis=1)
    if not keep.any():
        return []
    yt, yp = y_true[keep], y_pred[keep]
    norms = np.linalg.norm(yt, axis=1)
    row_mae = np.abs(yt - yp).mean(axis=1)
    lo = int(np.floor(norms.min() / spacing + 1e-9))
    hi = int(np.ceil(norms.max() / spacing - 1e-9))
    table = []
    for i in range(lo, hi + 1):
        center = round(i * spacing, 10)
        members = np.abs(norms - center) <= half_width + 1e-9
        count = int(members.sum())
        if count == 0:
            continue
        values = row_mae[members]
        table.append(BinRow(center, float(values.mean()), float(values.std()), count))
    return table


def binned_mae(model: MultistageModel, frames: Sequence[StageFrame], stage: int = -1) -> list[BinRow]:
    """Binned MAE of ``model``'s eval-mode predictions at ``stage`` (default: last)."""
    preds = model.predict([f.X for f in frames])
    f = frames[stage]
    return binned_mae_table(f.Y, preds[stage], f.mask)


def write_bins_csv(rows: Sequence[BinRow], path) -> Path:
    return _write_csv(path, ["center", "mae_mean", "mae_std", "count"],
                      [[r.center, repr(r.mae_mean), repr(r.mae_std), r.count] for r in rows])
