"""
Two-step training, evaluation and multi-seed experiments.

Step 1 (pre-training) fits each stage's autoencoder on reconstruction alone,
then, stage by stage, fits the inbound transition and the prediction head
with everything upstream frozen. Step 2 (fine-tuning) trains every module
jointly on the full weighted loss with early stopping on validation loss.
"""

from __future__ import annotations

import logging
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numcore as nc
from .data import Scaler, Split, StageFrame, split, standardize, take_rows
from .model import (
    LossWeights,
    MultistageModel,
    build_model,
    loss_kld,
    loss_pred,
    loss_recon,
    loss_total,
    normalize_variant,
)
from .nn import MLP, sample_latent
from .numcore import Tensor

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

logger = logging.getLogger(__name__)


class TrainingDivergence(RuntimeError):
    """A loss became non-finite; carries the phase, epoch and loss trace so far."""

    def __init__(self, phase: str, epoch: int, trace: list[float]):
        super().__init__(f"non-finite loss in {phase} at epoch {epoch}; last losses {trace[-5:]}")
        self.phase = phase
        self.epoch = epoch
        self.trace = trace


@dataclass
class TrainConfig:
    variant: str = "sdk"
    latent_dim: int = 60
    batch_size: int = 64
    pretrain_lr: float = 1e-3
    finetune_lr: float = 3e-4
    rho: float = 1.0
    theta: float = 0.1
    omega: float = 5e-5
    recon_epochs: int = 200
    predict_epochs: int = 200
    finetune_epochs: int = 500
    patience: int = 20
    clip_norm: float = 5.0
    pred_hidden: int = 0  # 0 means "same as latent_dim"
    seed: int = 0
    split_seed: int = 0
    split_ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)
    standardize_labels: bool = True
    ann_hidden: int = 256
    ann_lr: float = 1e-3
    ann_epochs: int = 500

    def __post_init__(self):
        self.split_ratios = tuple(float(r) for r in self.split_ratios)
        if self.variant != "ann":
            self.variant = normalize_variant(self.variant)

    def validate(self) -> None:
        if self.pretrain_lr <= 0 or self.finetune_lr <= 0 or self.ann_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1 or self.latent_dim < 1:
            raise ValueError("batch_size and latent_dim must be at least 1")
        for name in ("recon_epochs", "predict_epochs", "finetune_epochs", "ann_epochs", "patience"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        for name in ("rho", "theta", "omega", "clip_norm"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.rho, self.theta, self.omega)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split_ratios"] = list(self.split_ratios)
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config key(s): {sorted(unknown)}")
        return cls(**doc)


def load_config(path, overrides: dict | None = None) -> TrainConfig:
    """Read a TOML config; keys live at top level or under ``[train]``."""
    doc: dict = {}
    if path is not None:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
        doc = dict(raw.get("train", raw))
    doc.update({k: v for k, v in (overrides or {}).items() if v is not None})
    cfg = TrainConfig.from_dict(doc)
    cfg.validate()
    return cfg


# --------------------------------------------------------------------------
# data preparation
# --------------------------------------------------------------------------

@dataclass
class PreparedData:
    frames: list[StageFrame]
    split: Split
    scalers: list[Scaler]
    label_shift: list[np.ndarray]
    label_scale: list[np.ndarray]

    @property
    def train(self) -> list[StageFrame]:
        return take_rows(self.frames, self.split.train)

    @property
    def val(self) -> list[StageFrame]:
        return take_rows(self.frames, self.split.val)

    @property
    def test(self) -> list[StageFrame]:
        return take_rows(self.frames, self.split.test)

    def subset(self, name: str) -> list[StageFrame]:
        if name not in ("train", "val", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)

    @property
    def p(self) -> list[int]:
        return [f.p for f in self.frames]

    @property
    def q(self) -> list[int]:
        return [f.q for f in self.frames]


def label_statistics(frames: Sequence[StageFrame], rows, enabled: bool = True) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Per-label mean and std over valid training cells (zero/one when disabled)."""
    shifts, scales = [], []
    for f in frames:
        if not enabled:
            shifts.append(np.zeros(f.q))
            scales.append(np.ones(f.q))
            continue
        Y, M = f.Y[rows], f.mask[rows]
        mu = np.array([Y[M[:, j], j].mean() if M[:, j].any() else 0.0 for j in range(f.q)])
        sd = np.array([Y[M[:, j], j].std() if M[:, j].sum() > 1 else 1.0 for j in range(f.q)])
        shifts.append(mu)
        scales.append(np.where(sd > 0, sd, 1.0))
    return shifts, scales


def prepare(frames: Sequence[StageFrame], config: TrainConfig) -> PreparedData:
    """Split rows and z-score features using training statistics."""
    parts = split(frames[0].n, config.split_ratios, config.split_seed)
    scaled, scalers = standardize(frames, parts.train)
    shift, scale = label_statistics(scaled, parts.train, config.standardize_labels)
    return PreparedData(scaled, parts, scalers, shift, scale)


def _batches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, size):
        yield order[start:start + size]


def _rngs(seed: int) -> tuple[np.random.Generator, np.random.Generator, np.random.Generator]:
    init, batch, noise = np.random.SeedSequence(seed).spawn(3)
    return np.random.default_rng(init), np.random.default_rng(batch), np.random.default_rng(noise)


def _ys_out(model: MultistageModel, frames: Sequence[StageFrame]) -> list[np.ndarray]:
    return [model.to_output_units(k, f.Y) for k, f in enumerate(frames)]


def _check_finite(value: float, phase: str, epoch: int, trace: list[float]) -> None:
    if not np.isfinite(value):
        raise TrainingDivergence(phase, epoch, trace + [value])


def new_model(data: PreparedData, config: TrainConfig, rng: np.random.Generator) -> MultistageModel:
    model = build_model(config.variant, data.p, data.q, config.latent_dim, rng, config.pred_hidden or None)
    model.set_label_scaling(data.label_shift, data.label_scale)
    return model


# --------------------------------------------------------------------------
# step 1: pre-training
# --------------------------------------------------------------------------

def _autoencoder_loss(model: MultistageModel, k: int, x: np.ndarray, omega: float, rng: np.random.Generator | None) -> Tensor:
    st = model.stages[k]
    h_hat = st.encoder(Tensor(x))
    if st.head is None:
        return loss_recon(x, st.decoder(h_hat))
    mu, sigma, log_sigma = st.head(h_hat)
    eps = rng.standard_normal(mu.shape) if rng is not None else None
    rec = loss_recon(x, st.decoder(sample_latent(mu, sigma, eps)))
    return nc.add(rec, nc.scale(loss_kld(mu, sigma, log_sigma), omega))


def pretrain(model: MultistageModel, data: PreparedData, config: TrainConfig,
             rng: np.random.Generator | None = None) -> tuple[MultistageModel, dict]:
    """Stagewise pre-training; returns the model (modified in place) and loss history."""
    config.validate()
    rng = rng if rng is not None else _rngs(config.seed)[1]
    train, val = data.train, data.val
    n = train[0].n
    history: dict = {"recon": [], "predict": []}

    # phase A: each autoencoder on its own
    for k in range(model.n_stages):
        params = model.stages[k].autoencoder_parameters()
        opt = nc.Adam(params, lr=config.pretrain_lr)
        X = train[k].X
        trace: list[float] = []
        for epoch in range(1, config.recon_epochs + 1):
            total, seen = 0.0, 0
            for idx in _batches(n, config.batch_size, rng):
                loss = _autoencoder_loss(model, k, X[idx], config.omega, rng)
                value = float(loss.data)
                _check_finite(value, f"pretrain/recon stage {k + 1}", epoch, trace)
                opt.zero_grad()
                nc.backward(loss)
                opt.step()
                total += value * len(idx)
                seen += len(idx)
            trace.append(total / seen)
        history["recon"].append(trace)

    # phase B: inbound transition + prediction head, upstream frozen
    ys_train = _ys_out(model, train)
    ys_val = _ys_out(model, val)
    xs_train = [f.X for f in train]
    xs_val = [f.X for f in val]
    for k in range(model.n_stages):
        st = model.stages[k]
        modules = [st.predictor] + ([model.stages[k - 1].transition] if k > 0 else [])
        params = [p for m in modules for p in m.parameters()]
        opt = nc.Adam(params, lr=config.pretrain_lr)

        def val_loss() -> float:
            tr = model.forward(xs_val, mode="eval", upto=k + 1)
            return float(loss_pred(ys_val[k], tr[k].y_out, val[k].mask).data)

        best = val_loss()
        best_state = [p.data.copy() for p in params]
        curve = [best]
        stale = 0
        for epoch in range(1, config.predict_epochs + 1):
            for idx in _batches(n, config.batch_size, rng):
                tr = model.forward([x[idx] for x in xs_train], mode="train", rng=rng, upto=k + 1)
                loss = loss_pred(ys_train[k][idx], tr[k].y_out, train[k].mask[idx])
                _check_finite(float(loss.data), f"pretrain/predict stage {k + 1}", epoch, curve)
                opt.zero_grad()
                nc.backward(loss)
                opt.step()
            current = val_loss()
            _check_finite(current, f"pretrain/predict stage {k + 1}", epoch, curve)
            curve.append(current)
            if current < best:
                best, stale = current, 0
                best_state = [p.data.copy() for p in params]
            else:
                stale += 1
                if config.patience and stale >= config.patience:
                    break
        for p, v in zip(params, best_state):
            p.data[...] = v
        history["predict"].append(curve)
    return model, history


# --------------------------------------------------------------------------
# step 2: fine-tuning
# --------------------------------------------------------------------------

def validation_loss(model: MultistageModel, frames: Sequence[StageFrame], config: TrainConfig) -> float:
    trace = model.forward([f.X for f in frames], mode="eval")
    total, _ = loss_total(trace, _ys_out(model, frames), [f.mask for f in frames], config.weights)
    return float(total.data)


def finetune(model: MultistageModel, data: PreparedData, config: TrainConfig,
             rng: np.random.Generator | None = None) -> tuple[MultistageModel, list[dict]]:
    """Joint training on the full loss; the best-on-validation weights are restored."""
    config.validate()
    rng = rng if rng is not None else _rngs(config.seed)[1]
    train, val = data.train, data.val
    n = train[0].n
    xs = [f.X for f in train]
    ys = _ys_out(model, train)
    masks = [f.mask for f in train]
    params = model.parameters()
    opt = nc.Adam(params, lr=config.finetune_lr)
    weights = config.weights

    best = validation_loss(model, val, config)
    best_state = model.state_dict()
    history = [{"epoch": 0, "val_total": best}]
    stale = 0
    for epoch in range(1, config.finetune_epochs + 1):
        sums = None
        seen = 0
        for idx in _batches(n, config.batch_size, rng):
            trace = model.forward([x[idx] for x in xs], mode="train", rng=rng)
            loss, bd = loss_total(trace, [y[idx] for y in ys], [m[idx] for m in masks], weights)
            _check_finite(bd.total, "finetune", epoch, [h["val_total"] for h in history])
            opt.zero_grad()
            nc.backward(loss)
            if config.clip_norm > 0:
                nc.clip_grad_norm(params, config.clip_norm)
            opt.step()
            row = np.array([bd.total, *bd.pred, *bd.recon, *bd.kld]) * len(idx)
            sums = row if sums is None else sums + row
            seen += len(idx)
        means = sums / seen
        N = model.n_stages
        current = validation_loss(model, val, config)
        entry = {
            "epoch": epoch,
            "train_total": float(means[0]),
            "train_pred": means[1:1 + N].tolist(),
            "train_recon": means[1 + N:1 + 2 * N].tolist(),
            "train_kld": means[1 + 2 * N:].tolist(),
            "val_total": current,
        }
        history.append(entry)
        _check_finite(current, "finetune", epoch, [h["val_total"] for h in history[:-1]])
        if current < best:
            best, stale = current, 0
            best_state = model.state_dict()
        else:
            stale += 1
            if config.patience and stale >= config.patience:
                break
    model.load_state_dict(best_state)
    return model, history


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------

@dataclass
class EvalReport:
    """Per-stage and total errors over valid label cells, in label units."""

    stage_mse: list[float]
    stage_mae: list[float]
    stage_cells: list[int]
    total_mse: float
    total_mae: float
    split: str = "test"

    def to_dict(self) -> dict:
        return asdict(self)

    def metrics(self) -> dict[str, float]:
        out = {"total_mse": self.total_mse, "total_mae": self.total_mae}
        for k, (mse, mae) in enumerate(zip(self.stage_mse, self.stage_mae)):
            out[f"stage{k + 1}_mse"] = mse
            out[f"stage{k + 1}_mae"] = mae
        return out


def report_from_predictions(preds: Sequence[np.ndarray], frames: Sequence[StageFrame], split_name: str = "test") -> EvalReport:
    mses, maes, cells = [], [], []
    sq_all = abs_all = 0.0
    for pred, f in zip(preds, frames):
        valid = f.mask & np.isfinite(f.Y)
        err = np.where(valid, np.asarray(pred) - np.where(valid, f.Y, 0.0), 0.0)
        count = int(valid.sum())
        if count == 0:
            mses.append(float("nan"))
            maes.append(float("nan"))
        else:
            mses.append(float(np.sum(err * err) / count))
            maes.append(float(np.sum(np.abs(err)) / count))
        cells.append(count)
        sq_all += float(np.sum(err * err))
        abs_all += float(np.sum(np.abs(err)))
    total = sum(cells)
    if total == 0:
        raise ValueError("no valid label cells to evaluate")
    return EvalReport(mses, maes, cells, sq_all / total, abs_all / total, split_name)


def evaluate(model: MultistageModel, frames: Sequence[StageFrame], split_name: str = "test") -> EvalReport:
    """Evaluation-mode (eps = 0) errors of ``model`` on ``frames``."""
    if not frames or frames[0].n == 0:
        raise ValueError("cannot evaluate on an empty split")
    preds = model.predict([f.X for f in frames])
    return report_from_predictions(preds, frames, split_name)


# --------------------------------------------------------------------------
# full pipeline and experiments
# --------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: MultistageModel
    data: PreparedData
    config: TrainConfig
    pretrain_history: dict
    finetune_history: list[dict]
    test_report: EvalReport
    val_report: EvalReport
    seconds: float


def train_model(frames: Sequence[StageFrame], config: TrainConfig, data: PreparedData | None = None,
                pretrain_only: bool = False) -> TrainResult:
    """Prepare data, pre-train and fine-tune one Koopman model, then evaluate it."""
    config.validate()
    if config.variant == "ann":
        raise ValueError("use train_ann_baseline for the ANN baseline")
    start = time.perf_counter()
    data = data or prepare(frames, config)
    init_rng, batch_rng, _ = _rngs(config.seed)
    model = new_model(data, config, init_rng)
    model, pre_hist = pretrain(model, data, config, batch_rng)
    ft_hist: list[dict] = []
    if not pretrain_only:
        model, ft_hist = finetune(model, data, config, batch_rng)
    return TrainResult(
        model, data, config, pre_hist, ft_hist,
        evaluate(model, data.test, "test"), evaluate(model, data.val, "val"),
        time.perf_counter() - start,
    )


@dataclass
class AnnResult:
    models: list[MLP]
    inputs: str
    test_report: EvalReport
    val_report: EvalReport

    def predict(self, frames: Sequence[StageFrame], shift, scale) -> list[np.ndarray]:
        return [
            shift[k] + scale[k] * m(Tensor(_ann_inputs(frames, k, self.inputs))).data
            for k, m in enumerate(self.models)
        ]


def _ann_inputs(frames: Sequence[StageFrame], k: int, inputs: str) -> np.ndarray:
    if inputs == "local":
        return frames[k].X
    return np.hstack([f.X for f in frames[:k + 1]])


def train_ann_baseline(data: PreparedData, config: TrainConfig, inputs: str = "cumulative") -> AnnResult:
    """Independent two-layer ReLU network per stage.

    ``inputs="cumulative"`` feeds stage ``k`` with the features of stages
    ``1..k``; ``inputs="local"`` uses stage ``k`` features only.
    """
    if inputs not in ("cumulative", "local"):
        raise ValueError(f"inputs must be 'cumulative' or 'local', got {inputs!r}")
    config.validate()
    init_rng, batch_rng, _ = _rngs(config.seed)
    train, val = data.train, data.val
    n = train[0].n
    models = []
    for k in range(len(train)):
        X_tr, X_va = _ann_inputs(train, k, inputs), _ann_inputs(val, k, inputs)
        shift, scale = data.label_shift[k], data.label_scale[k]
        y_tr, y_va = (train[k].Y - shift) / scale, (val[k].Y - shift) / scale
        net = MLP([X_tr.shape[1], config.ann_hidden, train[k].q], init_rng)
        params = net.parameters()
        opt = nc.Adam(params, lr=config.ann_lr)

        def val_loss() -> float:
            return float(loss_pred(y_va, net(Tensor(X_va)), val[k].mask).data)

        best, stale = val_loss(), 0
        best_state = net.state_dict()
        curve = [best]
        for epoch in range(1, config.ann_epochs + 1):
            for idx in _batches(n, config.batch_size, batch_rng):
                loss = loss_pred(y_tr[idx], net(Tensor(X_tr[idx])), train[k].mask[idx])
                _check_finite(float(loss.data), f"ann stage {k + 1}", epoch, curve)
                opt.zero_grad()
                nc.backward(loss)
                opt.step()
            current = val_loss()
            curve.append(current)
            if current < best:
                best, stale = current, 0
                best_state = net.state_dict()
            else:
                stale += 1
                if config.patience and stale >= config.patience:
                    break
        net.load_state_dict(best_state)
        models.append(net)
    result = AnnResult(models, inputs, None, None)
    result.test_report = report_from_predictions(result.predict(data.test, data.label_shift, data.label_scale), data.test, "test")
    result.val_report = report_from_predictions(result.predict(data.val, data.label_shift, data.label_scale), data.val, "val")
    return result


@dataclass
class ExperimentReport:
    variant: str
    seeds: list[int]
    per_seed: list[dict]
    mean: dict[str, float]
    std: dict[str, float]
    failures: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def aggregate(metrics: Sequence[dict[str, float]]) -> tuple[dict[str, float], dict[str, float]]:
    """Mean and sample standard deviation (0 for a single run) of each metric."""
    if not metrics:
        return {}, {}
    keys = list(metrics[0])
    mean, std = {}, {}
    for key in keys:
        values = np.array([m[key] for m in metrics], dtype=np.float64)
        mean[key] = float(values.mean())
        std[key] = float(values.std(ddof=1)) if len(values) > 1 else 0.0
    return mean, std


def run_one(frames: Sequence[StageFrame], config: TrainConfig, data: PreparedData | None = None) -> EvalReport:
    if config.variant == "ann":
        return train_ann_baseline(data or prepare(frames, config), config).test_report
    return train_model(frames, config, data).test_report


def run_experiment(frames: Sequence[StageFrame], config: TrainConfig, repeats: int = 10, jobs: int = 1) -> ExperimentReport:
    """Train with seeds ``0..repeats-1`` on a fixed split and aggregate test metrics.

    Failed seeds are recorded and excluded from the aggregate.
    """
    if repeats < 1:
        raise ValueError("repeats must be at least 1")
    data = prepare(frames, config)
    configs = [replace(config, seed=s) for s in range(repeats)]
    outcomes: list[EvalReport | Exception] = []
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(run_one, frames, c, data) for c in configs]
            for fut in futures:
                try:
                    outcomes.append(fut.result())
                except Exception as exc:  # noqa: BLE001 - recorded per seed
                    outcomes.append(exc)
    else:
        for c in configs:
            try:
                outcomes.append(run_one(frames, c, data))
            except Exception as exc:  # noqa: BLE001 - recorded per seed
                outcomes.append(exc)

    per_seed, failures, ok_seeds = [], [], []
    for c, outcome in zip(configs, outcomes):
        if isinstance(outcome, Exception):
            logger.warning("seed %d failed: %s", c.seed, outcome)
            failures.append({"seed": c.seed, "error": repr(outcome)})
        else:
            per_seed.append({"seed": c.seed, **outcome.metrics()})
            ok_seeds.append(c.seed)
    if failures:
        logger.warning("%d of %d seed runs failed; aggregating %d", len(failures), repeats, len(per_seed))
    mean, std = aggregate([{k: v for k, v in m.items() if k != "seed"} for m in per_seed])
    return ExperimentReport(config.variant, ok_seeds, per_seed, mean, std, failures)


def write_loss_history_csv(history: list[dict], path) -> Path:
    """One row per fine-tuning epoch with every loss term."""
    import csv

    path = Path(path)
    rows = []
    for h in history:
        row = {"epoch": h["epoch"], "val_total": h["val_total"], "train_total": h.get("train_total", "")}
        for term in ("pred", "recon", "kld"):
            for k, v in enumerate(h.get(f"train_{term}", [])):
                row[f"train_{term}_{k + 1}"] = v
        rows.append(row)
    header = list(dict.fromkeys(key for r in rows for key in r))
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=header)
        writer.writeheader()
        writer.writerows(rows)
    return path
