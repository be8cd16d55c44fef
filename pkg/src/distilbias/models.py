"""Five-scale model ladders: a tanh MLP for vectors, a small attention net for tokens.

Parameters live in plain ``dict[str, np.ndarray]`` (insertion-ordered, so the
checkpoint byte layout is stable).  ``forward`` wraps them as graph leaves when
gradients are wanted and as constants otherwise.

Attention blocks are pre-LN with residual connections::

    x  = tok_emb[ids] + pos_emb
    x += sum_h head_h(LN(x)) @ Wo[h] + bo      # per-head contributions traced
    x += tanh(LN(x) @ W1 + b1) @ W2 + b2
    logits = mean_seq(x) @ W_out + b_out

There is no final LayerNorm, so the logits are affine in the last residual
stream.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any

import numpy as np

from . import tensor as T
from .tensor import Tensor, make_rng

CKPT_TAG = "distilbias-ckpt/1"


class ScaleTag(str, Enum):
    T = "T"
    S = "S"
    M = "M"
    B = "B"
    L = "L"

    @property
    def rank(self) -> int:
        return "TSMBL".index(self.value)

    def __lt__(self, other):
        return self.rank < ScaleTag(other).rank

    def __le__(self, other):
        return self.rank <= ScaleTag(other).rank

    def __gt__(self, other):
        return self.rank > ScaleTag(other).rank

    def __ge__(self, other):
        return self.rank >= ScaleTag(other).rank

    def __hash__(self):
        return hash(self.value)

    def __str__(self) -> str:
        return self.value


SCALES = tuple(ScaleTag)

MLP_DIMS = {"T": (1, 16), "S": (2, 32), "M": (2, 64), "B": (3, 128), "L": (4, 256)}
ATTN_DIMS = {"T": (1, 32, 2), "S": (2, 48, 2), "M": (2, 64, 4), "B": (3, 96, 4), "L": (4, 128, 8)}

# h (hidden layers) and d (hidden size) of the BERT ladder these mirror
BERT_LADDER = {"T": (2, 128), "S": (4, 256), "M": (8, 512), "B": (12, 768), "L": (24, 1024)}

ROLES = ("teacher_scratch", "student_scratch", "distilled")


@dataclass(frozen=True)
class ModelSpec:
    family: str
    scale: ScaleTag
    h: int
    d: int
    heads: int = 0
    in_dim: int = 0
    vocab_size: int = 0
    seq_len: int = 0
    n_classes: int = 2

    def __post_init__(self):
        object.__setattr__(self, "scale", ScaleTag(self.scale))
        if self.family not in ("mlp", "attn"):
            raise ValueError(f"unknown family {self.family!r}")
        if self.family == "attn" and (self.heads <= 0 or self.d % self.heads):
            raise ValueError("attn spec needs heads dividing d")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scale"] = self.scale.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


def ladder(family: str, in_dim: int = 8, vocab_size: int = 16, seq_len: int = 8) -> list[ModelSpec]:
    if family == "mlp":
        return [ModelSpec("mlp", ScaleTag(k), h, d, in_dim=in_dim) for k, (h, d) in MLP_DIMS.items()]
    if family == "attn":
        return [ModelSpec("attn", ScaleTag(k), h, d, heads, vocab_size=vocab_size, seq_len=seq_len)
                for k, (h, d, heads) in ATTN_DIMS.items()]
    raise ValueError(f"unknown family {family!r}")


def spec_for(family: str, scale, **dims) -> ModelSpec:
    scale = ScaleTag(scale)
    return next(s for s in ladder(family, **dims) if s.scale == scale)


def spec_like(spec: ModelSpec, scale) -> ModelSpec:
    """Same family and input dims as ``spec``, at another ladder scale."""
    return spec_for(spec.family, scale, in_dim=spec.in_dim or 8,
                    vocab_size=spec.vocab_size or 16, seq_len=spec.seq_len or 8)


@dataclass
class TrainedModel:
    spec: ModelSpec
    params: dict[str, np.ndarray]
    role: str = "student_scratch"
    provenance: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        teacher = self.provenance.get("teacher_scale")
        if (self.role == "distilled") != (teacher is not None):
            raise ValueError("distilled role requires a teacher scale, and only then")
        if teacher is not None and ScaleTag(teacher) < self.spec.scale:
            raise ValueError("teacher scale must not be below the student scale")

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def param_bytes(self, names=None) -> bytes:
        names = self.params if names is None else names
        return b"".join(np.ascontiguousarray(self.params[k], dtype="<f8").tobytes() for k in names)

    def digest(self, names=None) -> str:
        return hashlib.sha256(self.param_bytes(names)).hexdigest()

    def head_names(self) -> tuple[str, str]:
        return ("W_out", "b_out")


def n_params(spec: ModelSpec) -> int:
    return sum(p.size for p in init_params(spec, 0).params.values())


# ---------------------------------------------------------------------------
# initialisation


def _normal(rng, fan_in: int, shape) -> np.ndarray:
    return rng.standard_normal(shape) / np.sqrt(fan_in)


def init_params(spec: ModelSpec, seed: int, role: str = "student_scratch") -> TrainedModel:
    """Fan-in scaled normal weights, zero biases, unit LayerNorm gains."""
    rng = make_rng(seed, "init", spec.family, spec.scale.value)
    p: dict[str, np.ndarray] = {}
    d = spec.d
    if spec.family == "mlp":
        width = spec.in_dim
        for l in range(spec.h):
            p[f"W{l}"] = _normal(rng, width, (width, d))
            p[f"b{l}"] = np.zeros(d)
            width = d
    else:
        p["tok_emb"] = rng.standard_normal((spec.vocab_size, d))
        p["pos_emb"] = rng.standard_normal((spec.seq_len, d))
        for l in range(spec.h):
            p[f"ln1_g{l}"] = np.ones(d)
            p[f"ln1_b{l}"] = np.zeros(d)
            for w in ("Wq", "Wk", "Wv", "Wo"):
                p[f"{w}{l}"] = _normal(rng, d, (d, d))
            p[f"bo{l}"] = np.zeros(d)
            p[f"ln2_g{l}"] = np.ones(d)
            p[f"ln2_b{l}"] = np.zeros(d)
            p[f"W1_{l}"] = _normal(rng, d, (d, 2 * d))
            p[f"b1_{l}"] = np.zeros(2 * d)
            p[f"W2_{l}"] = _normal(rng, 2 * d, (2 * d, d))
            p[f"b2_{l}"] = np.zeros(d)
    p["W_out"] = _normal(rng, d, (d, spec.n_classes))
    p["b_out"] = np.zeros(spec.n_classes)
    return TrainedModel(spec, p, role, {"seed": seed})


# ---------------------------------------------------------------------------
# forward


@dataclass
class ActivationTrace:
    """Per-layer activations from one forward pass.

    ``layers[l]`` is (batch, d): the hidden state for the MLP family, the
    sequence-mean of the post-block residual stream for the attention family.
    Attention-only fields keep the full (batch, seq, d) shape.
    """

    layers: list[np.ndarray]
    head_out: list[np.ndarray] = field(default_factory=list)   # (batch, heads, seq, d)
    attn_bias: list[np.ndarray] = field(default_factory=list)  # (d,)
    attn_out: list[np.ndarray] = field(default_factory=list)   # (batch, seq, d)
    mlp_out: list[np.ndarray] = field(default_factory=list)    # (batch, seq, d)
    embed: np.ndarray | None = None                            # (batch, seq, d)
    resid_final: np.ndarray | None = None                      # (batch, seq, d)


@dataclass
class Forward:
    """Graph handles from a differentiable forward pass."""

    logits: Tensor
    params: dict[str, Tensor]
    hidden: list[Tensor]
    resid_final: Tensor | None = None
    trace: ActivationTrace | None = None


def _check_batch(spec: ModelSpec, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if spec.family == "mlp":
        if x.ndim != 2 or x.shape[1] != spec.in_dim:
            raise ValueError(f"mlp {spec.scale} expects (n, {spec.in_dim}) floats, got {x.shape}")
        return x.astype(np.float64)
    if x.ndim != 2 or x.shape[1] != spec.seq_len or not np.issubdtype(x.dtype, np.integer):
        raise ValueError(f"attn {spec.scale} expects (n, {spec.seq_len}) token ids, got {x.shape} {x.dtype}")
    if x.min(initial=0) < 0 or x.max(initial=0) >= spec.vocab_size:
        raise ValueError("token id outside vocabulary")
    return x


def build(model: TrainedModel, x, trainable=None, head_mask: dict | None = None,
          grad_inputs: bool = False) -> Forward:
    """Differentiable forward pass.

    ``trainable``: names wrapped as graph leaves (``None`` = all, ``()`` = none).
    ``head_mask``: ``{(layer, head): factor}`` applied to per-head contributions.
    ``grad_inputs``: make the input (MLP) or embedding sum (attention) a leaf,
    so gradients reach every activation even with frozen parameters.
    """
    spec = model.spec
    x = _check_batch(spec, x)
    names = model.params.keys() if trainable is None else set(trainable)
    P = {k: Tensor(v, requires_grad=k in names, name=k) for k, v in model.params.items()}
    hidden: list[Tensor] = []
    trace = ActivationTrace([])
    if spec.family == "mlp":
        a = Tensor(x, requires_grad=grad_inputs)
        for l in range(spec.h):
            a = T.tanh(T.add(T.matmul(a, P[f"W{l}"]), P[f"b{l}"]))
            hidden.append(a)
            trace.layers.append(a.data)
        logits = T.add(T.matmul(a, P["W_out"]), P["b_out"])
        return Forward(logits, P, hidden, None, trace)

    n, L = x.shape
    H, d = spec.heads, spec.d
    dh = d // H
    positions = np.broadcast_to(np.arange(L), (n, L))
    resid = T.embedding(P["tok_emb"], x) + T.embedding(P["pos_emb"], positions)
    if grad_inputs:
        resid = Tensor(resid.data, requires_grad=True, name="embed")
    trace.embed = resid.data
    for l in range(spec.h):
        hn = T.layer_norm(resid, P[f"ln1_g{l}"], P[f"ln1_b{l}"])

        def heads_of(w):
            return T.transpose(T.reshape(T.matmul(hn, P[f"{w}{l}"]), (n, L, H, dh)), (0, 2, 1, 3))

        o = T.scaled_dot_attention(heads_of("Wq"), heads_of("Wk"), heads_of("Wv"))
        contrib = T.matmul(o, T.reshape(P[f"Wo{l}"], (H, dh, d)))          # (n, H, L, d)
        if head_mask:
            factors = np.array([head_mask.get((l, h), 1.0) for h in range(H)])
            contrib = T.mul(contrib, np.broadcast_to(factors[None, :, None, None], contrib.shape))
        attn = T.add(T.sum_(contrib, axis=1), P[f"bo{l}"])
        resid = resid + attn
        mlp_in = T.layer_norm(resid, P[f"ln2_g{l}"], P[f"ln2_b{l}"])
        mid = T.tanh(T.add(T.matmul(mlp_in, P[f"W1_{l}"]), P[f"b1_{l}"]))
        mlp = T.add(T.matmul(mid, P[f"W2_{l}"]), P[f"b2_{l}"])
        resid = resid + mlp
        hidden.append(resid)
        trace.layers.append(resid.data.mean(axis=1))
        trace.head_out.append(contrib.data)
        trace.attn_bias.append(P[f"bo{l}"].data)
        trace.attn_out.append(attn.data)
        trace.mlp_out.append(mlp.data)
    trace.resid_final = resid.data
    pooled = T.mean_pool(resid)
    logits = T.add(T.matmul(pooled, P["W_out"]), P["b_out"])
    return Forward(logits, P, hidden, resid, trace)


def forward(model: TrainedModel, x, head_mask: dict | None = None) -> np.ndarray:
    return build(model, x, trainable=(), head_mask=head_mask).logits.data


def forward_traced(model: TrainedModel, x, head_mask: dict | None = None) -> tuple[np.ndarray, ActivationTrace]:
    f = build(model, x, trainable=(), head_mask=head_mask)
    return f.logits.data, f.trace


def forward_batched(model: TrainedModel, x, batch: int = 512) -> np.ndarray:
    x = np.asarray(x)
    return np.concatenate([forward(model, x[i:i + batch]) for i in range(0, len(x), batch)]) \
        if len(x) else np.zeros((0, model.spec.n_classes))


def features(model: TrainedModel, x) -> np.ndarray:
    """Input to the classifier head (frozen feature extractor output)."""
    f = build(model, x, trainable=())
    if model.spec.family == "mlp":
        return f.hidden[-1].data
    return f.resid_final.data.mean(axis=1)


def predict(model: TrainedModel, x) -> np.ndarray:
    return np.argmax(forward_batched(model, x), axis=1)


def proba(model: TrainedModel, x) -> np.ndarray:
    """P(y=1) per sample."""
    return T.softmax_temp(forward_batched(model, x), 1.0)[:, 1]


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: TrainedModel, path: str | Path) -> None:
    header = {
        "format": CKPT_TAG,
        "spec": model.spec.to_dict(),
        "role": model.role,
        "provenance": model.provenance,
        "params": [[k, list(v.shape)] for k, v in model.params.items()],
    }
    path = Path(path)
    tmp = path.with_name(f"{path.name}.{os.getpid()}.tmp")
    with open(tmp, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(model.param_bytes())
    tmp.replace(path)


def read_header(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        return json.loads(fh.readline().decode("utf-8"))


def load_checkpoint(path: str | Path) -> TrainedModel:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        payload = fh.read()
    if header.get("format") != CKPT_TAG:
        raise ValueError(f"{path}: not a {CKPT_TAG} file")
    params, offset = {}, 0
    for name, shape in header["params"]:
        count = int(np.prod(shape)) if shape else 1
        params[name] = np.frombuffer(payload, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
        offset += 8 * count
    if offset != len(payload):
        raise ValueError(f"{path}: payload size does not match header")
    return TrainedModel(ModelSpec.from_dict(header["spec"]), params, header["role"], header["provenance"])
