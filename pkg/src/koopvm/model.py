"""
Multistage deep Koopman model: assembly, forward pass, losses, checkpoints.

The forward pass visits stages in order. Each stage encodes its own process
measurements, adds the Koopman-propagated upstream latent (nothing for the
first stage), and predicts that stage's quality indices from the result. A
stage therefore never sees measurements from later stages.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numcore as nc
from .koopman import TRANSITIONS
from .nn import MLP, GaussianHead, Module, make_decoder, make_encoder, sample_latent
from .numcore import Tensor

# variant name -> transition kind
VARIANTS = {"s-aek": "static", "e-aek": "eigen", "sdk": "stochastic"}

CHECKPOINT_FORMAT = "koopvm-checkpoint"
CHECKPOINT_VERSION = 1


def normalize_variant(name: str) -> str:
    key = name.strip().lower().replace("_", "-")
    aliases = {"saek": "s-aek", "eaek": "e-aek", "static": "s-aek", "eigen": "e-aek", "stochastic": "sdk"}
    key = aliases.get(key, key)
    if key not in VARIANTS:
        raise ValueError(f"unknown model variant {name!r}; expected one of {sorted(VARIANTS)}")
    return key


class StageModel(Module):
    def __init__(self, encoder: MLP, decoder: MLP, predictor: MLP, head: GaussianHead | None = None, transition: Module | None = None):
        if decoder.in_features != encoder.out_features:
            raise nc.ShapeError(f"stage: decoder input {decoder.in_features} != encoder output {encoder.out_features}")
        if decoder.out_features != encoder.in_features:
            raise nc.ShapeError(f"stage: decoder output {decoder.out_features} != encoder input {encoder.in_features}")
        if predictor.in_features != encoder.out_features:
            raise nc.ShapeError(f"stage: predictor input {predictor.in_features} != latent width {encoder.out_features}")
        self.encoder = encoder
        self.decoder = decoder
        self.head = head
        self.predictor = predictor
        self.transition = transition

    @property
    def p(self) -> int:
        return self.encoder.in_features

    @property
    def q(self) -> int:
        return self.predictor.out_features

    @property
    def d_h(self) -> int:
        return self.encoder.out_features

    def autoencoder_parameters(self) -> list[Tensor]:
        params = self.encoder.parameters() + self.decoder.parameters()
        if self.head is not None:
            params += self.head.parameters()
        return params


@dataclass
class StageTrace:
    x: Tensor
    h_hat: Tensor
    h: Tensor
    y_out: Tensor
    y_pred: Tensor
    x_rec: Tensor
    mu_hat: Tensor | None = None
    sigma_hat: Tensor | None = None
    log_sigma_hat: Tensor | None = None
    mu: Tensor | None = None
    sigma: Tensor | None = None
    log_sigma: Tensor | None = None
    lam: Tensor | None = None
    lam_mu: Tensor | None = None
    lam_sigma: Tensor | None = None
    eps: dict[str, np.ndarray] | None = None

    def to_dict(self) -> dict:
        out = {}
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                out[name] = value.data.tolist()
            elif isinstance(value, dict):
                out[name] = {k: np.asarray(v).tolist() for k, v in value.items()}
        return out


@dataclass
class ForwardTrace:
    stages: list[StageTrace]
    mode: str

    def __len__(self) -> int:
        return len(self.stages)

    def __getitem__(self, k: int) -> StageTrace:
        return self.stages[k]

    @property
    def eps(self) -> list[dict[str, np.ndarray] | None]:
        return [s.eps for s in self.stages]

    def predictions(self) -> list[np.ndarray]:
        return [s.y_pred.data for s in self.stages]

    def to_json(self) -> str:
        return json.dumps({"mode": self.mode, "stages": [s.to_dict() for s in self.stages]})


class MultistageModel(Module):
    """Ordered stage models joined by Koopman transitions.

    ``label_shift``/``label_scale`` are fixed per-stage affine maps from the
    network output to label units; training losses are taken in network
    output units (see :meth:`to_output_units`).
    """

    def __init__(self, stages: list[StageModel], variant: str):
        variant = normalize_variant(variant)
        if len(stages) < 2:
            raise ValueError("a multistage model needs at least two stages")
        d_h = stages[0].d_h
        for k, st in enumerate(stages):
            if st.d_h != d_h:
                raise nc.ShapeError(f"stage {k + 1} latent width {st.d_h} differs from {d_h}")
            if (st.head is not None) != (variant == "sdk"):
                raise ValueError(f"stage {k + 1}: Gaussian head must be present iff variant is sdk")
            if k < len(stages) - 1 and st.transition is None:
                raise ValueError(f"stage {k + 1} needs an outbound transition")
            if k == len(stages) - 1 and st.transition is not None:
                raise ValueError("the last stage has no outbound transition")
        self.stages = stages
        self.variant = variant
        self.label_shift = [np.zeros(st.q) for st in stages]
        self.label_scale = [np.ones(st.q) for st in stages]

    @property
    def n_stages(self) -> int:
        return len(self.stages)

    @property
    def d_h(self) -> int:
        return self.stages[0].d_h

    @property
    def stochastic(self) -> bool:
        return self.variant == "sdk"

    def architecture(self) -> dict:
        return {
            "variant": self.variant,
            "p": [st.p for st in self.stages],
            "q": [st.q for st in self.stages],
            "d_h": self.d_h,
            "pred_hidden": self.stages[0].predictor.widths[1],
        }

    def set_label_scaling(self, shift: Sequence[np.ndarray], scale: Sequence[np.ndarray]) -> None:
        self.label_shift = [np.asarray(s, dtype=np.float64).copy() for s in shift]
        self.label_scale = [np.asarray(s, dtype=np.float64).copy() for s in scale]

    def to_output_units(self, k: int, y: np.ndarray) -> np.ndarray:
        return (np.asarray(y, dtype=np.float64) - self.label_shift[k]) / self.label_scale[k]

    def forward(self, xs: Sequence, mode: str = "eval", rng: np.random.Generator | None = None,
                eps: Sequence[dict | None] | None = None, upto: int | None = None) -> ForwardTrace:
        """Run the stages in order and return every intermediate quantity.

        In ``train`` mode the stochastic variant draws fresh ``eps`` from ``rng``
        unless ``eps`` is given (one dict per stage with ``latent`` and
        ``recon`` arrays). ``eval`` mode always uses ``eps = 0``. ``upto``
        stops after that many stages.
        """
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        n_run = self.n_stages if upto is None else upto
        if len(xs) < n_run:
            raise ValueError(f"expected {n_run} stage inputs, got {len(xs)}")
        xs = [nc.as_tensor(x) for x in xs[:n_run]]
        batch = xs[0].shape[0]
        for k, x in enumerate(xs):
            if x.ndim != 2 or x.shape[0] != batch:
                raise nc.ShapeError(f"forward: stage {k + 1} input shape {x.shape} inconsistent with batch size {batch}")
            if x.shape[1] != self.stages[k].p:
                raise nc.ShapeError(f"forward: stage {k + 1} expects {self.stages[k].p} features, got {x.shape[1]}")
        if batch == 0:
            raise ValueError("forward: empty batch")
        draw = mode == "train" and self.stochastic
        if draw and eps is None and rng is None:
            raise ValueError("train-mode forward of a stochastic model needs rng or eps")

        traces: list[StageTrace] = []
        prev: StageTrace | None = None
        for k in range(n_run):
            st = self.stages[k]
            h_hat = st.encoder(xs[k])
            if self.stochastic:
                if draw:
                    e = eps[k] if eps is not None and eps[k] is not None else {
                        "recon": rng.standard_normal((batch, st.d_h)),
                        "latent": rng.standard_normal((batch, st.d_h)),
                    }
                else:
                    e = None
                mu_hat, sigma_hat, log_sigma_hat = st.head(h_hat)
                x_rec = st.decoder(sample_latent(mu_hat, sigma_hat, e["recon"] if e else None))
                lam_mu = lam_sigma = None
                if prev is None:
                    mu, sigma, log_sigma = mu_hat, sigma_hat, log_sigma_hat
                else:
                    g, lam_mu, lam_sigma = self.stages[k - 1].transition(mu_hat, log_sigma_hat, prev.mu, prev.log_sigma)
                    mu, sigma, log_sigma = g.mu, g.sigma, g.log_sigma
                h = sample_latent(mu, sigma, e["latent"] if e else None)
                y_out = st.predictor(h)
                trace = StageTrace(xs[k], h_hat, h, y_out, self._to_labels(k, y_out), x_rec,
                                   mu_hat=mu_hat, sigma_hat=sigma_hat, log_sigma_hat=log_sigma_hat,
                                   mu=mu, sigma=sigma, log_sigma=log_sigma,
                                   lam_mu=lam_mu, lam_sigma=lam_sigma, eps=e)
            else:
                x_rec = st.decoder(h_hat)
                lam = None
                if prev is None:
                    h = h_hat
                else:
                    h, lam = self.stages[k - 1].transition(h_hat, prev.h)
                y_out = st.predictor(h)
                trace = StageTrace(xs[k], h_hat, h, y_out, self._to_labels(k, y_out), x_rec, lam=lam)
            traces.append(trace)
            prev = trace
        return ForwardTrace(traces, mode)

    __call__ = forward

    def _to_labels(self, k: int, y_out: Tensor) -> Tensor:
        shift, scale = self.label_shift[k], self.label_scale[k]
        if np.all(shift == 0) and np.all(scale == 1):
            return y_out
        return nc.add(nc.mul(y_out, Tensor(scale)), Tensor(shift))

    def predict(self, xs: Sequence[np.ndarray]) -> list[np.ndarray]:
        """Evaluation-mode label predictions for every stage."""
        return self.forward(xs, mode="eval").predictions()


def build_model(variant: str, p_dims: Sequence[int], q_dims: Sequence[int], d_h: int = 60,
                rng: np.random.Generator | None = None, pred_hidden: int | None = None) -> MultistageModel:
    """Construct a model with freshly initialised weights (all zero when ``rng`` is None)."""
    variant = normalize_variant(variant)
    if len(p_dims) != len(q_dims):
        raise ValueError("p_dims and q_dims must have one entry per stage")
    pred_hidden = pred_hidden or d_h
    kind = VARIANTS[variant]
    stages = []
    n = len(p_dims)
    for k, (p, q) in enumerate(zip(p_dims, q_dims)):
        stages.append(StageModel(
            encoder=make_encoder(p, d_h, rng),
            decoder=make_decoder(d_h, p, rng),
            predictor=MLP([d_h, pred_hidden, q], rng),
            head=GaussianHead(d_h, rng) if variant == "sdk" else None,
            transition=TRANSITIONS[kind](d_h, rng) if k < n - 1 else None,
        ))
    return MultistageModel(stages, variant)


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------

def _masked_squared_error(name: str, target, pred: Tensor, mask=None) -> Tensor:
    pred = nc.as_tensor(pred)
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if target.shape != pred.shape:
        raise nc.ShapeError(f"{name}: target shape {target.shape} differs from prediction {pred.shape}")
    if pred.ndim != 2 or pred.shape[0] == 0:
        raise ValueError(f"{name}: empty batch")
    width = pred.shape[1]
    if mask is None:
        valid = np.isfinite(target)
    else:
        valid = np.asarray(mask, dtype=bool) & np.isfinite(target)
    n_valid = int(valid.sum())
    if n_valid == 0:
        return Tensor(0.0)
    diff = nc.sub(pred, Tensor(np.where(valid, target, 0.0)))
    if not valid.all():
        diff = nc.mul(diff, Tensor(valid.astype(np.float64)))
    # per-row squared norm averaged over the effective number of rows
    return nc.scale(nc.reduce_sum(nc.square(diff)), width / n_valid)


def loss_recon(x, x_rec, mask=None) -> Tensor:
    """Mean squared Euclidean reconstruction distance per row."""
    return _masked_squared_error("loss_recon", x, x_rec, mask)


def loss_pred(y, y_pred, mask=None) -> Tensor:
    """Mean squared Euclidean prediction error per row; masked cells are ignored."""
    return _masked_squared_error("loss_pred", y, y_pred, mask)


def loss_kld(mu, sigma, log_sigma: Tensor | None = None) -> Tensor:
    """KL divergence to a standard normal, summed over dims and averaged over rows."""
    mu, sigma = nc.as_tensor(mu), nc.as_tensor(sigma)
    if mu.shape != sigma.shape:
        raise nc.ShapeError(f"loss_kld: mu {mu.shape} and sigma {sigma.shape} differ")
    if np.any(sigma.data <= 0):
        raise ValueError("loss_kld: sigma must be strictly positive")
    if log_sigma is None:
        log_sigma = nc.log(sigma)
    n = mu.shape[0] if mu.ndim == 2 else 1
    terms = nc.sub(nc.add(nc.square(mu), nc.square(sigma)), nc.add(nc.scale(log_sigma, 2.0), 1.0))
    return nc.scale(nc.reduce_sum(terms), 0.5 / n)


@dataclass
class LossWeights:
    rho: float | list[float] = 1.0
    theta: float | list[float] = 0.1
    omega: float | list[float] = 5e-5

    def at(self, k: int) -> tuple[float, float, float]:
        def pick(v):
            return float(v[k]) if isinstance(v, (list, tuple, np.ndarray)) else float(v)
        return pick(self.rho), pick(self.theta), pick(self.omega)

    def validate(self) -> None:
        for name, v in asdict(self).items():
            if not np.all(np.isfinite(np.asarray(v, dtype=float))):
                raise ValueError(f"loss weight {name} must be finite")


@dataclass
class LossBreakdown:
    total: float
    pred: list[float]
    recon: list[float]
    kld: list[float]
    weights: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def loss_total(trace: ForwardTrace, ys: Sequence, masks: Sequence | None,
               weights: LossWeights) -> tuple[Tensor, LossBreakdown]:
    """Weighted multi-stage objective ``sum rho*pred + theta*(recon + omega*kld)``.

    ``ys`` must already be in network output units.
    """
    weights.validate()
    total = Tensor(0.0)
    pred_terms, recon_terms, kld_terms = [], [], []
    for k, st in enumerate(trace.stages):
        rho, theta, omega = weights.at(k)
        mask = masks[k] if masks is not None else None
        lp = loss_pred(ys[k], st.y_out, mask)
        lr = loss_recon(st.x, st.x_rec)
        term = nc.add(nc.scale(lp, rho), nc.scale(lr, theta))
        kld_value = 0.0
        if st.mu_hat is not None:
            lk = loss_kld(st.mu_hat, st.sigma_hat, st.log_sigma_hat)
            term = nc.add(term, nc.scale(lk, theta * omega))
            kld_value = float(lk.data)
        total = nc.add(total, term)
        pred_terms.append(float(lp.data))
        recon_terms.append(float(lr.data))
        kld_terms.append(kld_value)
    breakdown = LossBreakdown(float(total.data), pred_terms, recon_terms, kld_terms, asdict(weights))
    return total, breakdown


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def _atomic_write_text(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def save_checkpoint(model: MultistageModel, path, config: dict | None = None) -> Path:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "architecture": model.architecture(),
        "label_shift": [s.tolist() for s in model.label_shift],
        "label_scale": [s.tolist() for s in model.label_scale],
        "config": config or {},
        "parameters": {
            name: {"shape": list(value.shape), "values": value.reshape(-1).tolist()}
            for name, value in model.state_dict().items()
        },
    }
    path = Path(path)
    _atomic_write_text(path, json.dumps(payload))
    return path


def load_checkpoint(path) -> tuple[MultistageModel, dict]:
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a koopvm checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    arch = payload["architecture"]
    model = build_model(arch["variant"], arch["p"], arch["q"], arch["d_h"], rng=None, pred_hidden=arch["pred_hidden"])
    state = {name: np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])
             for name, entry in payload["parameters"].items()}
    model.load_state_dict(state)
    model.set_label_scaling(payload["label_shift"], payload["label_scale"])
    return model, payload.get("config", {})

