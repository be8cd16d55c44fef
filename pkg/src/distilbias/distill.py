"""Logit distillation across the scale ladder, with the IKD and Init remedies."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import debias, models
from . import tensor as T
from .debias import DebiasMethod, TrainConfig, stable_hash
from .models import ModelSpec, ScaleTag, TrainedModel
from .synthdata import DataBundle, GroupedDataset

REMEDIES = ("none", "da", "ikd", "init")


class ScaleOrderError(ValueError):
    pass


@dataclass(frozen=True)
class DistillConfig:
    alpha: float = 0.5
    tau: float = 2.0
    train: TrainConfig = field(default_factory=TrainConfig)
    remedy: str = "none"
    combine_debias: bool = True

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.remedy not in REMEDIES:
            raise ValueError(f"unknown remedy {self.remedy!r}")


def kd_loss(student_logits, teacher_logits, label: int, alpha: float, tau: float) -> float:
    """alpha * CE(student, label) + (1 - alpha) * tau^2 * KL(p_teacher^tau || p_student^tau)."""
    s = np.asarray(student_logits, dtype=np.float64)
    t = np.asarray(teacher_logits, dtype=np.float64)
    if s.shape != t.shape:
        raise ValueError("kd_loss: logit shapes differ")
    if not 0.0 <= alpha <= 1.0 or not tau > 0:
        raise ValueError("kd_loss: alpha must lie in [0, 1] and tau be positive")
    ce = T.cross_entropy(s, label) if alpha > 0 else 0.0
    if alpha == 1.0:
        return ce
    kl = T.kl_div(T.softmax_temp(t, tau), T.softmax_temp(s, tau))
    return alpha * ce + (1.0 - alpha) * tau * tau * kl


def kd_term(student_logits: T.Tensor, teacher_probs: np.ndarray, tau: float) -> T.Tensor:
    """Batch-mean tau^2 * KL(teacher || softmax(student / tau)) as a graph node."""
    p = np.clip(teacher_probs, 1e-300, None)
    entropy = float(-(teacher_probs * np.log(p)).sum(axis=1).mean())
    soft_ce = T.batch_soft_cross_entropy(T.mul(student_logits, 1.0 / tau), teacher_probs)
    return T.mul(T.add(soft_ce, T.Tensor(-entropy)), tau * tau)


def distill(teacher: TrainedModel, student_spec: ModelSpec, bundle: DataBundle, dcfg: DistillConfig,
            method: DebiasMethod = DebiasMethod("erm"), train: GroupedDataset | None = None,
            init: TrainedModel | None = None) -> TrainedModel:
    """Train ``student_spec`` against frozen ``teacher`` on the train split."""
    if teacher.spec.family != student_spec.family:
        raise ScaleOrderError("teacher and student must share a family")
    if teacher.spec.scale < student_spec.scale:
        raise ScaleOrderError(f"teacher scale {teacher.spec.scale} is below student scale {student_spec.scale}")
    cfg = dcfg.train
    before = teacher.digest()
    if dcfg.combine_debias:
        prep = debias.prepare(method, student_spec, bundle, cfg, train)
    else:
        data = bundle["train"] if train is None else train
        prep = debias.Prepared(data, debias.ce_loss(data.y))
    data = prep.train
    teacher_probs = T.softmax_temp(models.forward_batched(teacher, data.x), dcfg.tau)
    alpha, tau = dcfg.alpha, dcfg.tau

    def loss(logits: T.Tensor, idx: np.ndarray) -> T.Tensor:
        if alpha == 1.0:
            return prep.loss(logits, idx)
        kd = kd_term(logits, teacher_probs[idx], tau)
        if alpha == 0.0:
            return kd
        return T.add(T.mul(prep.loss(logits, idx), alpha), T.mul(kd, 1.0 - alpha))

    start = models.init_params(student_spec, cfg.seed) if init is None else init
    res = debias.fit(start, data.x, data.y, loss, cfg)
    if teacher.digest() != before:
        raise RuntimeError("distill mutated the teacher")
    prov = {
        "method": method.id,
        "seed": cfg.seed,
        "teacher_scale": teacher.spec.scale.value,
        "teacher_digest": before,
        "chain": list(teacher.provenance.get("chain", [teacher.spec.scale.value])) + [student_spec.scale.value],
        "config_hash": stable_hash([asdict(method), asdict(dcfg), student_spec.to_dict()]),
        "epochs_run": res.epochs_run,
        "loss_first": res.losses[0],
        "loss_last": res.losses[-1],
        "init_from": start.provenance.get("init_from"),
        **prep.info,
    }
    model = TrainedModel(student_spec, res.params, "distilled", prov)
    return debias.finalize(method, model, bundle, cfg)


def ikd_chain(teacher: TrainedModel, target, bundle: DataBundle, dcfg: DistillConfig,
              method: DebiasMethod = DebiasMethod("erm"), train: GroupedDataset | None = None,
              distill_fn: Callable[..., TrainedModel] = distill) -> TrainedModel:
    """Distill one ladder step at a time from ``teacher`` down to ``target``."""
    target = ScaleTag(target)
    if target >= teacher.spec.scale:
        raise ScaleOrderError(f"IKD target {target} must be below teacher scale {teacher.spec.scale}")
    current = teacher
    steps = [s for s in models.SCALES if target <= s < teacher.spec.scale][::-1]
    intermediates = []
    for scale in steps:
        current = distill_fn(current, models.spec_like(teacher.spec, scale), bundle, dcfg, method, train)
        intermediates.append(current.digest())
    prov = dict(current.provenance, ikd_intermediates=intermediates)
    return TrainedModel(current.spec, current.params, current.role, prov)


def _leading_block(src: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if any(a < b for a, b in zip(src.shape, shape)):
        raise ValueError(f"cannot slice {src.shape} down to {shape}")
    return src[tuple(slice(0, n) for n in shape)].copy()


def init_from_teacher(teacher: TrainedModel, student_spec: ModelSpec, seed: int = 0,
                      reinit_head: bool | None = None) -> TrainedModel:
    """Student initialised from the teacher's early layers.

    Each student parameter takes the leading sub-block of the teacher
    parameter with the same name (student layer ``l`` <- teacher layer
    ``l``).  The classifier head is freshly initialised unless the scales
    match, in which case everything is copied.
    """
    if teacher.spec.family != student_spec.family:
        raise ValueError("init_from_teacher: family mismatch")
    if teacher.spec.scale < student_spec.scale:
        raise ScaleOrderError("init_from_teacher: teacher is smaller than the student")
    if reinit_head is None:
        reinit_head = teacher.spec.scale != student_spec.scale
    fresh = models.init_params(student_spec, seed)
    head = set(fresh.head_names())
    params = {}
    for name, value in fresh.params.items():
        if name in head and reinit_head:
            params[name] = value
        else:
            params[name] = _leading_block(teacher.params[name], value.shape)
    prov = {"seed": seed, "init_from": teacher.digest(), "reinit_head": reinit_head}
    return TrainedModel(student_spec, params, "student_scratch", prov)
