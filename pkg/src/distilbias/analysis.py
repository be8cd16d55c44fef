"""Evaluation metrics and internal-mechanism diagnostics.

Conventions:

* ``ood_score`` is worst-group accuracy on ``ood_test`` for vector data and
  the plain metric on ``ood_test`` for token data.
* CKA grids are indexed ``[student layer, teacher layer]``.
* EAP cells score the edge from a component into the logit: the change in
  the component's output between the clean and corrupted run, dotted with
  the clean-run gradient of the logit margin ``z1 - z0`` with respect to
  the residual stream the classifier reads.  Because that stream is the sum
  of the embedding, every head contribution and every MLP output, the grid
  plus ``input_score`` is a first-order estimate of the total margin change.
  The MLP family has no residual stream; its cells use the total
  derivative at each hidden layer instead.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import models
from . import tensor as T
from .models import TrainedModel
from .synthdata import GROUPS, DataBundle, GroupedDataset
from .tensor import make_rng


class EmptySplitError(ValueError):
    pass


class DegenerateActivations(ValueError):
    pass


def _nonempty(ds: GroupedDataset) -> GroupedDataset:
    if len(ds) == 0:
        raise EmptySplitError(f"split {ds.split!r} is empty")
    return ds


def accuracy_score(y, pred) -> float:
    return float(np.mean(np.asarray(y) == np.asarray(pred)))


def f1_score(y, pred) -> float:
    """F1 of the positive class; 0 when there are no true positives."""
    y = np.asarray(y)
    pred = np.asarray(pred)
    tp = np.sum((pred == 1) & (y == 1))
    if tp == 0:
        return 0.0
    precision = tp / np.sum(pred == 1)
    recall = tp / np.sum(y == 1)
    return float(2 * precision * recall / (precision + recall))


METRICS = {"accuracy": accuracy_score, "f1": f1_score}


@dataclass
class EvalReport:
    id_score: float
    ood_score: float
    transfer_score: float
    spurious_gap: float
    group_acc: tuple[float, ...]
    metric: str = "accuracy"
    protocol: str = "worst_group"

    def check(self) -> None:
        assert abs(self.spurious_gap - (self.id_score - self.ood_score)) < 1e-12
        if self.protocol == "worst_group":
            assert self.ood_score == min(a for a in self.group_acc if not np.isnan(a))


def group_accuracies(y, s, pred) -> tuple[float, ...]:
    g = 2 * np.asarray(y) + np.asarray(s)
    ok = np.asarray(pred) == np.asarray(y)
    return tuple(float(ok[g == k].mean()) if np.any(g == k) else float("nan") for k in range(len(GROUPS)))


def evaluate(model: TrainedModel, splits: DataBundle | dict, metric: str = "accuracy",
             protocol: str | None = None) -> EvalReport:
    score = METRICS[metric]
    kind = splits.kind if isinstance(splits, DataBundle) else splits["id_test"].kind
    protocol = protocol or ("worst_group" if kind == "vec" else "split")
    id_ds = _nonempty(splits["id_test"])
    ood_ds = _nonempty(splits["ood_test"])
    tr_ds = _nonempty(splits["transfer_test"])
    id_score = score(id_ds.y, models.predict(model, id_ds.x))
    ood_pred = models.predict(model, ood_ds.x)
    groups = group_accuracies(ood_ds.y, ood_ds.s, ood_pred)
    if protocol == "worst_group":
        ood_score = min(a for a in groups if not np.isnan(a))
    else:
        ood_score = score(ood_ds.y, ood_pred)
    transfer = score(tr_ds.y, models.predict(model, tr_ds.x))
    return EvalReport(id_score, ood_score, transfer, id_score - ood_score, groups, metric, protocol)


def agreement(a: TrainedModel, b: TrainedModel, ds: GroupedDataset) -> float:
    ds = _nonempty(ds)
    return float(np.mean(models.predict(a, ds.x) == models.predict(b, ds.x)))


def venn_counts(teacher: TrainedModel, student: TrainedModel, ds: GroupedDataset) -> tuple[int, int, int, int]:
    """(both correct, teacher only, student only, both wrong)."""
    ds = _nonempty(ds)
    t = models.predict(teacher, ds.x) == ds.y
    s = models.predict(student, ds.x) == ds.y
    return int(np.sum(t & s)), int(np.sum(t & ~s)), int(np.sum(~t & s)), int(np.sum(~t & ~s))


@dataclass
class ProbabilityRecord:
    probs: np.ndarray
    edges: np.ndarray
    counts: np.ndarray
    split: str

    @property
    def mean_confidence(self) -> float:
        """Mean of max(p, 1 - p)."""
        return float(np.mean(np.maximum(self.probs, 1 - self.probs)))


def prob_density(model: TrainedModel, ds: GroupedDataset, bins: int = 10) -> ProbabilityRecord:
    if bins < 2:
        raise ValueError("prob_density needs at least 2 bins")
    p = models.proba(model, ds.x)
    edges = np.linspace(0.0, 1.0, bins + 1)
    counts, _ = np.histogram(p, bins=edges)
    return ProbabilityRecord(p, edges, counts, ds.split)


# ---------------------------------------------------------------------------
# CKA


def linear_cka(X, Y) -> float:
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0]:
        raise ValueError("linear_cka: need (n, d1) and (n, d2) with the same n")
    if X.shape[0] < 2:
        raise ValueError("linear_cka: need at least two samples")
    X = X - X.mean(axis=0)
    Y = Y - Y.mean(axis=0)
    xx = np.linalg.norm(X.T @ X)
    yy = np.linalg.norm(Y.T @ Y)
    if xx == 0 or yy == 0:
        raise DegenerateActivations("linear_cka: an input has zero variance")
    return float(np.linalg.norm(Y.T @ X) ** 2 / (xx * yy))


@dataclass
class CKAMatrix:
    grid: np.ndarray                      # (student layers, teacher layers)
    split: str
    degenerate: list[tuple[int, int]] = field(default_factory=list)

    def mean(self) -> float:
        return float(np.nanmean(self.grid))


def probe_indices(n: int, probe_size: int, seed: int = 0) -> np.ndarray:
    if probe_size > n:
        raise ValueError(f"probe size {probe_size} exceeds split size {n}")
    return np.sort(make_rng(seed, "cka_probe").choice(n, size=probe_size, replace=False))


def cka_matrix(teacher: TrainedModel, student: TrainedModel, ds: GroupedDataset,
               probe_size: int = 256, seed: int = 0) -> CKAMatrix:
    idx = probe_indices(len(ds), probe_size, seed)
    x = ds.x[idx]
    _, ta = models.forward_traced(teacher, x)
    _, sa = models.forward_traced(student, x)
    grid = np.full((student.spec.h, teacher.spec.h), np.nan)
    bad = []
    for i, s_act in enumerate(sa.layers):
        for j, t_act in enumerate(ta.layers):
            try:
                grid[i, j] = linear_cka(s_act, t_act)
            except DegenerateActivations:
                bad.append((i, j))
    return CKAMatrix(grid, ds.split, bad)


# ---------------------------------------------------------------------------
# EAP


@dataclass
class EdgeAttribution:
    grid: np.ndarray                      # (layers, heads + 1); last column is the MLP
    input_score: float = 0.0
    per_sample: np.ndarray | None = None  # (n, layers, heads + 1)
    per_sample_input: np.ndarray | None = None
    columns: list[str] = field(default_factory=list)

    def total_per_sample(self) -> np.ndarray:
        return self.per_sample.sum(axis=(1, 2)) + self.per_sample_input


def logit_margin(model: TrainedModel, x) -> np.ndarray:
    z = models.forward_batched(model, x)
    return z[:, 1] - z[:, 0]


def eap_scores(model: TrainedModel, clean_x, corrupt_x) -> EdgeAttribution:
    clean_x = np.asarray(clean_x)
    corrupt_x = np.asarray(corrupt_x)
    if clean_x.shape != corrupt_x.shape:
        raise ValueError("eap_scores: clean and corrupted batches must be element-aligned")
    spec = model.spec
    fwd = models.build(model, clean_x, trainable=(), grad_inputs=True)
    margin = T.sum_(T.add(T.index(fwd.logits, (slice(None), 1)), T.neg(T.index(fwd.logits, (slice(None), 0)))))
    _, corr = models.forward_traced(model, corrupt_x)
    clean = fwd.trace

    if spec.family == "mlp":
        grads = T.backward(margin, fwd.hidden)
        per = np.stack([((c - a) * g).sum(axis=1) for a, c, g in zip(clean.layers, corr.layers, grads)], axis=1)
        per = per[:, :, None]
        return EdgeAttribution(per.mean(axis=0), 0.0, per, np.zeros(len(clean_x)), ["MLP"])

    (g,) = T.backward(margin, [fwd.resid_final])
    n, H = len(clean_x), spec.heads
    per = np.zeros((n, spec.h, H + 1))
    for l in range(spec.h):
        dh = corr.head_out[l] - clean.head_out[l]                    # (n, H, L, d)
        per[:, l, :H] = np.einsum("nhtd,ntd->nh", dh, g)
        per[:, l, H] = np.einsum("ntd,ntd->n", corr.mlp_out[l] - clean.mlp_out[l], g)
    per_input = np.einsum("ntd,ntd->n", corr.embed - clean.embed, g)
    cols = [f"head_{h}" for h in range(H)] + ["MLP"]
    return EdgeAttribution(per.mean(axis=0), float(per_input.mean()), per, per_input, cols)
