"""Training loop and the six debiasing trainers.

Every trainer is ``prepare`` + shared mini-batch Adam loop + optional
``finalize``:

========  ==========================================  ==================
method    training objective / data                   after training
========  ==========================================  ==================
erm       cross-entropy                               -
poe_*     CE on log p_main + log p_bias (bias frozen)  -
sigma_damp CE on logits / tau_damp                    -
dfr       cross-entropy                               retrain last layer
psg       CE on data resampled by bias-model grads    -
========  ==========================================  ==================

The same ``prepare``/``finalize`` pair is reused by distillation, where the
objective above replaces the hard-label term of the KD loss.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from . import models
from . import tensor as T
from .models import ModelSpec, TrainedModel
from .synthdata import DataBundle, GroupedDataset, spurious_view
from .tensor import Tensor, make_rng

log = logging.getLogger(__name__)

METHODS = ("erm", "poe_biasfeature", "poe_weak", "sigma_damp", "dfr", "psg")

LossFn = Callable[[Tensor, np.ndarray], Tensor]


class TrainingDiverged(FloatingPointError):
    pass


class BiasModelTooWeak(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int = 10
    min_delta: float = 1e-4

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @classmethod
    def paper_default(cls, family: str, seed: int = 0) -> "TrainConfig":
        """Adam settings reported for the full-size runs (text: 5e-5 x 5, image: 4e-5 x 100)."""
        if family == "attn":
            return cls(lr=5e-5, epochs=5, seed=seed)
        return cls(lr=4e-5, epochs=100, seed=seed)


@dataclass(frozen=True)
class DebiasMethod:
    id: str = "erm"
    tau_damp: float = 4.0
    bias_lr: float = 1e-2
    bias_epochs: int = 1
    dfr_lr: float = 1e-2
    dfr_epochs: int = 100
    psg_full_params: bool = False
    chance_margin: float = 0.02

    def __post_init__(self):
        if self.id not in METHODS:
            raise ValueError(f"unknown debiasing method {self.id!r}")
        if self.tau_damp < 1:
            raise ValueError("tau_damp must be >= 1")


def stable_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# generic loop


@dataclass
class FitResult:
    params: dict[str, np.ndarray]
    losses: list[float] = field(default_factory=list)
    epochs_run: int = 0


def fit(model: TrainedModel, x: np.ndarray, y: np.ndarray, loss_fn: LossFn, cfg: TrainConfig,
        trainable: list[str] | None = None) -> FitResult:
    """Mini-batch Adam on ``loss_fn(logits, batch_index)``; returns new params.

    Stops early once the epoch-mean loss fails to improve by ``min_delta``
    for ``patience`` consecutive epochs.
    """
    names = list(model.params) if trainable is None else list(trainable)
    params = dict(model.params)
    state = T.AdamState.fresh([params[k] for k in names], cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    n = len(y)
    best, stale, losses = np.inf, 0, []
    epoch = 0
    for epoch in range(1, cfg.epochs + 1):
        order = make_rng(cfg.seed, "shuffle", epoch).permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            current = TrainedModel(model.spec, params, model.role, model.provenance)
            try:
                fwd = models.build(current, x[idx], trainable=names)
                loss = loss_fn(fwd.logits, idx)
            except T.NonFiniteError as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}") from exc
            grads = T.backward(loss, [fwd.params[k] for k in names])
            new, state = T.adam_update([params[k] for k in names], grads, state)
            if not all(np.isfinite(p).all() for p in new):
                raise TrainingDiverged(f"epoch {epoch}: non-finite parameters")
            params.update(zip(names, new))
            total += float(loss.data) * len(idx)
        losses.append(total / n)
        if losses[-1] < best - cfg.min_delta:
            best, stale = losses[-1], 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return FitResult(params, losses, epoch)


def ce_loss(y: np.ndarray) -> LossFn:
    return lambda logits, idx: T.batch_cross_entropy(logits, y[idx])


def mean_ce(model: TrainedModel, x, y) -> float:
    z = models.forward_batched(model, x)
    lp = T.log_softmax_vec(z)
    return float(-lp[np.arange(len(y)), y].mean())


def accuracy(model: TrainedModel, x, y) -> float:
    return float(np.mean(models.predict(model, x) == y))


# ---------------------------------------------------------------------------
# method pieces


def poe_combine(debias_logits, bias_logits) -> np.ndarray:
    """Normalised log-scores of the product of the two experts' distributions."""
    a = np.asarray(debias_logits, dtype=np.float64)
    b = np.asarray(bias_logits, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"poe_combine: shape mismatch {a.shape} vs {b.shape}")
    return T.log_softmax_vec(T.log_softmax_vec(a) + T.log_softmax_vec(b))


def poe_loss(y: np.ndarray, bias_logp: np.ndarray) -> LossFn:
    """CE on the product of experts; the bias log-probs are constants."""
    def loss(logits: Tensor, idx: np.ndarray) -> Tensor:
        combined = T.add(T.log_softmax(logits), Tensor(bias_logp[idx]))
        return T.batch_cross_entropy(combined, y[idx])
    return loss


def sigma_damp_loss(y: np.ndarray, tau_damp: float) -> LossFn:
    if tau_damp < 1:
        raise ValueError("tau_damp must be >= 1")
    if tau_damp == 1:
        return ce_loss(y)
    return lambda logits, idx: T.batch_cross_entropy(T.mul(logits, 1.0 / tau_damp), y[idx])


def train_bias_model(spec: ModelSpec, x: np.ndarray, y: np.ndarray, cfg: TrainConfig,
                     method: DebiasMethod, kind: str) -> TrainedModel:
    bias_cfg = replace(cfg, lr=method.bias_lr, epochs=method.bias_epochs)
    model = models.init_params(spec, cfg.seed)
    res = fit(model, x, y, ce_loss(y), bias_cfg)
    trained = TrainedModel(spec, res.params, "student_scratch",
                           {"method": f"bias_{kind}", "seed": cfg.seed})
    acc = accuracy(trained, x, y)
    chance = max(np.mean(y), 1 - np.mean(y))
    if acc <= chance + method.chance_margin:
        raise BiasModelTooWeak(f"{kind} bias model train accuracy {acc:.3f} does not beat chance {chance:.3f}")
    return trained


def bias_spec(spec: ModelSpec, kind: str) -> ModelSpec:
    if kind == "biasfeature":
        return models.spec_for("mlp", "T", in_dim=1)
    return models.spec_like(spec, "T")


def bias_inputs(kind: str, bundle: DataBundle, ds: GroupedDataset) -> np.ndarray:
    return spurious_view(ds, bundle.config) if kind == "biasfeature" else ds.x


def final_layer_grad_norms(model: TrainedModel, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-sample ||d CE_i / d(W_out, b_out)||_2 in closed form.

    For softmax CE the head gradient of sample i is feat_i (p_i - e_y) for
    the weights and (p_i - e_y) for the bias.
    """
    feats = models.features(model, x)
    p = T.softmax_temp(feats @ model.params["W_out"] + model.params["b_out"])
    r = p.copy()
    r[np.arange(len(y)), y] -= 1.0
    return np.linalg.norm(r, axis=1) * np.sqrt((feats ** 2).sum(axis=1) + 1.0)


def full_grad_norms(model: TrainedModel, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    out = np.empty(len(y))
    for i in range(len(y)):
        fwd = models.build(model, x[i:i + 1])
        loss = T.batch_cross_entropy(fwd.logits, y[i:i + 1])
        grads = T.backward(loss, list(fwd.params.values()))
        out[i] = np.sqrt(sum(float((g ** 2).sum()) for g in grads))
    return out


def psg_weights(bias_model: TrainedModel, data: GroupedDataset, full_params: bool = False) -> np.ndarray:
    norms = (full_grad_norms if full_params else final_layer_grad_norms)(bias_model, data.x, data.y)
    total = norms.sum()
    if not total > 0:
        raise ValueError("psg_weights: all per-sample gradient norms are zero")
    return norms / total


def resample(data: GroupedDataset, weights: np.ndarray, seed: int) -> GroupedDataset:
    rng = make_rng(seed, "psg_resample")
    idx = rng.choice(len(data), size=len(data), replace=True, p=weights)
    return data.subset(idx)


def dfr_retrain(model: TrainedModel, heldout: GroupedDataset, cfg: TrainConfig,
                method: DebiasMethod = DebiasMethod("dfr")) -> TrainedModel:
    """Refit only ``W_out``/``b_out`` on group-balanced held-out data."""
    if len(heldout) == 0:
        raise ValueError("dfr_retrain: empty held-out split")
    counts = heldout.group_counts()
    if len(set(counts)) != 1:
        raise ValueError(f"dfr_retrain: held-out split is not group-balanced {counts}")
    feats = models.features(model, heldout.x)
    head_spec = models.ModelSpec("mlp", "T", 0, model.spec.d, in_dim=model.spec.d)
    init = models.init_params(head_spec, cfg.seed)
    head = TrainedModel(head_spec, {"W_out": init.params["W_out"], "b_out": init.params["b_out"]})
    res = fit(head, feats, heldout.y, ce_loss(heldout.y),
              replace(cfg, lr=method.dfr_lr, epochs=method.dfr_epochs))
    params = dict(model.params)
    params["W_out"], params["b_out"] = res.params["W_out"], res.params["b_out"]
    prov = dict(model.provenance, dfr={"epochs": res.epochs_run, "n_heldout": len(heldout)})
    return TrainedModel(model.spec, params, model.role, prov)


# ---------------------------------------------------------------------------
# trainer interface


@dataclass
class Prepared:
    """Training data and objective for one method, before the main loop."""

    train: GroupedDataset
    loss: LossFn
    info: dict = field(default_factory=dict)


def prepare(method: DebiasMethod, spec: ModelSpec, bundle: DataBundle, cfg: TrainConfig,
            train: GroupedDataset | None = None) -> Prepared:
    train = bundle["train"] if train is None else train
    y = train.y
    if method.id in ("erm", "dfr"):
        return Prepared(train, ce_loss(y))
    if method.id == "sigma_damp":
        return Prepared(train, sigma_damp_loss(y, method.tau_damp), {"tau_damp": method.tau_damp})
    if method.id in ("poe_biasfeature", "poe_weak"):
        kind = method.id.split("_", 1)[1]
        bx = bias_inputs(kind, bundle, train)
        bias = train_bias_model(bias_spec(spec, kind), bx, y, cfg, method, kind)
        bias_logp = T.log_softmax_vec(models.forward_batched(bias, bx))
        info = {"bias_model": bias.digest(), "bias_kind": kind, "bias_in_dim": bx.shape[1],
                "bias_train_acc": accuracy(bias, bx, y)}
        return Prepared(train, poe_loss(y, bias_logp), info)
    if method.id == "psg":
        bias = train_erm(spec, bundle, cfg, train=train)
        w = psg_weights(bias, train, method.psg_full_params)
        resampled = resample(train, w, cfg.seed)
        return Prepared(resampled, ce_loss(resampled.y), {"bias_model": bias.digest()})
    raise ValueError(method.id)


def finalize(method: DebiasMethod, model: TrainedModel, bundle: DataBundle, cfg: TrainConfig) -> TrainedModel:
    if method.id == "dfr":
        return dfr_retrain(model, bundle["heldout"], cfg, method)
    return model


def train(method: DebiasMethod, spec: ModelSpec, bundle: DataBundle, cfg: TrainConfig,
          role: str = "student_scratch", train: GroupedDataset | None = None,
          init: TrainedModel | None = None) -> TrainedModel:
    prep = prepare(method, spec, bundle, cfg, train)
    start = models.init_params(spec, cfg.seed, role) if init is None else init
    res = fit(start, prep.train.x, prep.train.y, prep.loss, cfg)
    prov = {
        "method": method.id,
        "seed": cfg.seed,
        "config_hash": stable_hash([asdict(method), asdict(cfg), spec.to_dict()]),
        "epochs_run": res.epochs_run,
        "loss_first": res.losses[0],
        "loss_last": res.losses[-1],
        **prep.info,
    }
    model = TrainedModel(spec, res.params, role, prov)
    return finalize(method, model, bundle, cfg)


def train_erm(spec: ModelSpec, bundle: DataBundle, cfg: TrainConfig, **kw) -> TrainedModel:
    return train(DebiasMethod("erm"), spec, bundle, cfg, **kw)


def train_poe(spec: ModelSpec, bundle: DataBundle, cfg: TrainConfig, bias_kind: str = "biasfeature",
              method: DebiasMethod | None = None, **kw) -> TrainedModel:
    if bias_kind not in ("biasfeature", "weak"):
        raise ValueError(f"unknown bias kind {bias_kind!r}")
    method = method or DebiasMethod(f"poe_{bias_kind}")
    return train(replace(method, id=f"poe_{bias_kind}"), spec, bundle, cfg, **kw)


def train_sigma_damp(spec: ModelSpec, bundle: DataBundle, cfg: TrainConfig, tau_damp: float = 4.0, **kw) -> TrainedModel:
    return train(DebiasMethod("sigma_damp", tau_damp=tau_damp), spec, bundle, cfg, **kw)


def train_dfr(spec: ModelSpec, bundle: DataBundle, cfg: TrainConfig, method: DebiasMethod | None = None, **kw) -> TrainedModel:
    return train(method or DebiasMethod("dfr"), spec, bundle, cfg, **kw)


def train_psg(spec: ModelSpec, bundle: DataBundle, cfg: TrainConfig, **kw) -> TrainedModel:
    return train(DebiasMethod("psg"), spec, bundle, cfg, **kw)
