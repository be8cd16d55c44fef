"""Grouped binary-classification datasets with a tunable spurious attribute.

Two generators share one container:

* ``gen_vecspur`` draws real vectors whose coordinate 0 carries the label
  (core) and coordinate 1 carries the spurious attribute.  Coordinates
  ``2 .. 2+nuisance_dims`` are nuisance inputs ``z``; a share of the core
  coordinate's noise equals ``noise_sd * sqrt(2) * sin(freq * sum(z)/sqrt(k))``,
  so a model with enough capacity can subtract it and see a cleaner core
  while a small model sees a noisy core and leans on the spurious
  coordinate.  The remaining coordinates are pure noise.
* ``gen_tokspur`` draws token sequences where the label is the relative
  order of two core tokens and the spurious attribute is whether a "slot"
  position holds the bias token or a neutral placeholder token.

Every bundle has five splits: ``train``, ``id_test``, ``ood_test``,
``transfer_test`` and ``heldout``.  Group id is ``2*y + s``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator, NamedTuple, Union

import numpy as np

from .tensor import make_rng

SPLITS = ("train", "id_test", "ood_test", "transfer_test", "heldout")
GROUPS = ((0, 0), (0, 1), (1, 0), (1, 1))
RHO_TRANSFER = 0.5
TRANSFER_NOISE_FACTOR = 1.25
FORMAT_TAG = "distilbias-data/1"


class ConfigError(ValueError):
    pass


def group_id(y, s):
    return 2 * np.asarray(y) + np.asarray(s)


@dataclass(frozen=True)
class VecSpurConfig:
    dim: int = 8
    rho_train: float = 0.95
    rho_ood: float = 0.5
    core_margin: float = 1.0
    spur_margin: float = 2.0
    noise_sd: float = 1.3
    nuisance_dims: int = 2
    nuisance_share: float = 0.9
    nuisance_freq: float = 1.5
    n_train: int = 2000
    n_id_test: int = 2000
    n_ood_test: int = 2000
    n_transfer_test: int = 2000
    n_heldout: int = 400

    kind = "vec"
    core_index = 0
    spur_index = 1

    def validate(self) -> None:
        if self.dim < 2 + self.nuisance_dims:
            raise ConfigError("dim must cover core, spurious and nuisance coordinates")
        if not 0.0 <= self.nuisance_share <= 1.0:
            raise ConfigError("nuisance_share must lie in [0, 1]")
        if not 0.5 <= self.rho_train <= 1.0:
            raise ConfigError("rho_train must lie in [0.5, 1]")
        if not 0.0 <= self.rho_ood <= 0.5:
            raise ConfigError("rho_ood must lie in [0, 0.5]")
        if self.core_margin <= 0 or self.spur_margin <= 0 or self.noise_sd < 0:
            raise ConfigError("margins must be positive and noise_sd non-negative")
        _check_counts(self)


@dataclass(frozen=True)
class TokSpurConfig:
    vocab_size: int = 16
    seq_len: int = 8
    rho_train: float = 0.95
    rho_ood: float = 0.1
    bias_token: int = 2
    null_token: int = 3
    core_tokens: tuple[int, int] = (0, 1)
    n_train: int = 2000
    n_id_test: int = 1000
    n_ood_test: int = 1000
    n_transfer_test: int = 1000
    n_heldout: int = 400

    kind = "tok"

    @property
    def fillers(self) -> np.ndarray:
        special = {self.bias_token, self.null_token, *self.core_tokens}
        return np.array([t for t in range(self.vocab_size) if t not in special], dtype=np.int64)

    def validate(self) -> None:
        if self.seq_len < 4:
            raise ConfigError("seq_len must be >= 4")
        if not 0.5 <= self.rho_train <= 1.0:
            raise ConfigError("rho_train must lie in [0.5, 1]")
        if not 0.0 <= self.rho_ood <= 0.5:
            raise ConfigError("rho_ood must lie in [0, 0.5]")
        a, b = self.core_tokens
        special = [a, b, self.bias_token, self.null_token]
        if len(set(special)) != 4:
            raise ConfigError("core, bias and null tokens must be distinct")
        if any(not 0 <= t < self.vocab_size for t in special):
            raise ConfigError("special tokens must lie inside the vocabulary")
        if len(self.fillers) < 4:
            raise ConfigError("vocabulary leaves fewer than 4 filler tokens")
        _check_counts(self)


DataConfig = Union[VecSpurConfig, TokSpurConfig]


def _check_counts(cfg) -> None:
    for name in SPLITS:
        if getattr(cfg, f"n_{name}") <= 0:
            raise ConfigError(f"n_{name} must be positive")
    if cfg.n_heldout % 4:
        raise ConfigError("n_heldout must be divisible by 4 (group-balanced)")


def config_to_dict(cfg: DataConfig) -> dict:
    d = asdict(cfg)
    d["kind"] = cfg.kind
    return d


def config_from_dict(d: dict) -> DataConfig:
    d = dict(d)
    kind = d.pop("kind", "vec")
    if kind == "vec":
        return VecSpurConfig(**d)
    if kind == "tok":
        if "core_tokens" in d:
            d["core_tokens"] = tuple(d["core_tokens"])
        return TokSpurConfig(**d)
    raise ConfigError(f"unknown data kind {kind!r}")


class Sample(NamedTuple):
    x: np.ndarray
    y: int
    s: int
    group: int


@dataclass
class GroupedDataset:
    """One split: inputs ``x`` (n, dim) floats or (n, seq) ints, labels, attributes."""

    x: np.ndarray
    y: np.ndarray
    s: np.ndarray
    split: str
    kind: str

    def __post_init__(self) -> None:
        self.y = np.asarray(self.y, dtype=np.int64)
        self.s = np.asarray(self.s, dtype=np.int64)

    @property
    def group(self) -> np.ndarray:
        return group_id(self.y, self.s)

    def __len__(self) -> int:
        return len(self.y)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.x[i], int(self.y[i]), int(self.s[i]), int(self.group[i]))

    def __iter__(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield self[i]

    def subset(self, idx) -> "GroupedDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return GroupedDataset(self.x[idx], self.y[idx], self.s[idx], self.split, self.kind)

    def group_counts(self) -> tuple[int, int, int, int]:
        counts = np.bincount(self.group, minlength=4)
        return tuple(int(c) for c in counts)

    def row_hashes(self) -> list[str]:
        return [hashlib.sha1(np.ascontiguousarray(r).tobytes()).hexdigest() for r in self.x]


@dataclass
class DataBundle:
    config: DataConfig
    seed: int
    splits: dict[str, GroupedDataset] = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return self.config.kind

    def __getitem__(self, split: str) -> GroupedDataset:
        return self.splits[split]

    def with_split(self, name: str, ds: GroupedDataset) -> "DataBundle":
        splits = dict(self.splits)
        splits[name] = ds
        return DataBundle(self.config, self.seed, splits)


# ---------------------------------------------------------------------------
# generators


def _draw_ys(rng, n: int, rho: float, balanced: bool) -> tuple[np.ndarray, np.ndarray]:
    if balanced:
        g = np.repeat(np.arange(4), n // 4)
        rng.shuffle(g)
        return g // 2, g % 2
    y = rng.integers(0, 2, size=n)
    agree = rng.random(n) < rho
    return y, np.where(agree, y, 1 - y)


def _vec_split(cfg: VecSpurConfig, rng, n: int, rho: float, noise: float, balanced=False):
    y, s = _draw_ys(rng, n, rho, balanced)
    x = noise * rng.standard_normal((n, cfg.dim))
    core_noise = x[:, cfg.core_index]
    if cfg.nuisance_dims:
        z = rng.standard_normal((n, cfg.nuisance_dims))
        x[:, 2:2 + cfg.nuisance_dims] = z
        u = z.sum(axis=1) / np.sqrt(cfg.nuisance_dims)
        explained = np.sqrt(2.0) * np.sin(cfg.nuisance_freq * u)
        core_noise = np.sqrt(1 - cfg.nuisance_share) * core_noise + np.sqrt(cfg.nuisance_share) * noise * explained
    x[:, cfg.core_index] = cfg.core_margin * (2 * y - 1) + core_noise
    x[:, cfg.spur_index] += cfg.spur_margin * (2 * s - 1)
    return x, y, s


def gen_vecspur(cfg: VecSpurConfig, seed: int) -> DataBundle:
    cfg.validate()
    plan = {
        "train": (cfg.rho_train, cfg.noise_sd, False),
        "id_test": (cfg.rho_train, cfg.noise_sd, False),
        "ood_test": (cfg.rho_ood, cfg.noise_sd, False),
        "transfer_test": (RHO_TRANSFER, cfg.noise_sd * TRANSFER_NOISE_FACTOR, False),
        "heldout": (cfg.rho_train, cfg.noise_sd, True),
    }
    splits = {}
    for name in SPLITS:
        rho, noise, balanced = plan[name]
        rng = make_rng(seed, "vecspur", name)
        x, y, s = _vec_split(cfg, rng, getattr(cfg, f"n_{name}"), rho, noise, balanced)
        splits[name] = GroupedDataset(x, y, s, name, "vec")
    _ensure_id_groups(splits["id_test"], cfg)
    return DataBundle(cfg, seed, splits)


def _tok_rows(cfg: TokSpurConfig, rng, y: np.ndarray, s: np.ndarray, fillers: np.ndarray) -> np.ndarray:
    n, L = len(y), cfg.seq_len
    a, b = cfg.core_tokens
    out = fillers[rng.integers(0, len(fillers), size=(n, L))]
    for i in range(n):
        p1, p2, slot = rng.choice(L, size=3, replace=False)
        first, second = (a, b) if y[i] == 1 else (b, a)
        lo, hi = min(p1, p2), max(p1, p2)
        out[i, lo], out[i, hi] = first, second
        out[i, slot] = cfg.bias_token if s[i] == 1 else cfg.null_token
    return out


def gen_tokspur(cfg: TokSpurConfig, seed: int) -> DataBundle:
    """Token bundle; rows never repeat across splits (rejection on content hash)."""
    cfg.validate()
    fillers = cfg.fillers
    shifted = fillers[len(fillers) // 2:]
    plan = {
        "train": (cfg.rho_train, fillers, False),
        "id_test": (cfg.rho_train, fillers, False),
        "ood_test": (cfg.rho_ood, fillers, False),
        "transfer_test": (RHO_TRANSFER, shifted, False),
        "heldout": (cfg.rho_train, fillers, True),
    }
    seen: set[bytes] = set()
    splits = {}
    for name in SPLITS:
        rho, pool, balanced = plan[name]
        rng = make_rng(seed, "tokspur", name)
        n = getattr(cfg, f"n_{name}")
        y, s = _draw_ys(rng, n, rho, balanced)
        x = _tok_rows(cfg, rng, y, s, pool)
        for _ in range(1000):
            local: set[bytes] = set()
            clash = []
            for i in range(n):
                key = x[i].tobytes()
                if key in seen or key in local:
                    clash.append(i)
                else:
                    local.add(key)
            if not clash:
                break
            x[clash] = _tok_rows(cfg, rng, y[clash], s[clash], pool)
        else:
            raise ConfigError("token space too small for disjoint splits")
        seen.update(r.tobytes() for r in x)
        splits[name] = GroupedDataset(x, y, s, name, "tok")
    _ensure_id_groups(splits["id_test"], cfg)
    return DataBundle(cfg, seed, splits)


def generate(cfg: DataConfig, seed: int) -> DataBundle:
    return gen_vecspur(cfg, seed) if cfg.kind == "vec" else gen_tokspur(cfg, seed)


def _ensure_id_groups(ds: GroupedDataset, cfg: DataConfig) -> None:
    # at rho_train == 1 the minority groups cannot exist
    if cfg.rho_train < 1.0 and min(ds.group_counts()) == 0:
        raise ConfigError("id_test has an empty group; raise n_id_test or lower rho_train")


# ---------------------------------------------------------------------------
# transforms


def group_balance(ds: GroupedDataset, seed: int) -> GroupedDataset:
    """Subsample every group to the smallest group's size, then shuffle."""
    counts = ds.group_counts()
    if min(counts) == 0:
        raise ConfigError(f"group_balance: empty group in counts {counts}")
    rng = make_rng(seed, "group_balance", ds.split)
    k = min(counts)
    groups = ds.group
    keep = np.concatenate([
        np.sort(rng.choice(np.flatnonzero(groups == g), size=k, replace=False)) for g in range(4)
    ])
    return ds.subset(rng.permutation(keep))


def concat(a: GroupedDataset, b: GroupedDataset, split: str | None = None) -> GroupedDataset:
    return GroupedDataset(np.concatenate([a.x, b.x]), np.concatenate([a.y, b.y]),
                          np.concatenate([a.s, b.s]), split or a.split, a.kind)


def spurious_view(ds: GroupedDataset, cfg: DataConfig) -> np.ndarray:
    """The known-biased partial input: a single column per sample."""
    if cfg.kind == "vec":
        return ds.x[:, [cfg.spur_index]].astype(np.float64)
    return (ds.x == cfg.bias_token).any(axis=1, keepdims=True).astype(np.float64)


def corrupt_counterpart(sample: Sample, cfg: DataConfig) -> Sample:
    """Flip the spurious attribute, leaving core content and label alone."""
    x = np.array(sample.x, copy=True)
    if cfg.kind == "vec":
        x[cfg.spur_index] = -x[cfg.spur_index]
    else:
        bias = x == cfg.bias_token
        null = x == cfg.null_token
        x[bias] = cfg.null_token
        x[null] = cfg.bias_token
    s = 1 - sample.s
    return Sample(x, sample.y, s, int(group_id(sample.y, s)))


def corrupt(ds: GroupedDataset, cfg: DataConfig) -> GroupedDataset:
    x = ds.x.copy()
    if cfg.kind == "vec":
        x[:, cfg.spur_index] = -x[:, cfg.spur_index]
    else:
        bias = ds.x == cfg.bias_token
        null = ds.x == cfg.null_token
        x[bias] = cfg.null_token
        x[null] = cfg.bias_token
    return GroupedDataset(x, ds.y.copy(), 1 - ds.s, ds.split, ds.kind)


def core_oracle(ds: GroupedDataset, cfg: DataConfig) -> np.ndarray:
    """Label predictions that read only the core content."""
    if cfg.kind == "vec":
        return (ds.x[:, cfg.core_index] > 0).astype(np.int64)
    a, b = cfg.core_tokens
    pos_a = np.argmax(ds.x == a, axis=1)
    pos_b = np.argmax(ds.x == b, axis=1)
    return (pos_a < pos_b).astype(np.int64)


def mutual_information_bits(a: np.ndarray, b: np.ndarray) -> float:
    """Plug-in mutual information between two binary arrays."""
    joint = np.zeros((2, 2))
    np.add.at(joint, (np.asarray(a), np.asarray(b)), 1.0)
    joint /= joint.sum()
    pa = joint.sum(axis=1, keepdims=True)
    pb = joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    return float(np.sum(joint[nz] * np.log2(joint[nz] / (pa @ pb)[nz])))


# ---------------------------------------------------------------------------
# serialisation


def _fmt_payload(row: np.ndarray, kind: str) -> str:
    if kind == "vec":
        return ",".join(repr(float(v)) for v in row)
    return ",".join(str(int(v)) for v in row)


def save_bundle(bundle: DataBundle, path: str | Path) -> None:
    header = {"format": FORMAT_TAG, "seed": bundle.seed, "config": config_to_dict(bundle.config)}
    lines = [json.dumps(header, sort_keys=True)]
    for name in SPLITS:
        ds = bundle.splits[name]
        for row, y, s, g in zip(ds.x, ds.y, ds.s, ds.group):
            lines.append(f"{name},{y},{s},{g},{_fmt_payload(row, ds.kind)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_bundle(path: str | Path) -> DataBundle:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    header = json.loads(text[0])
    if header.get("format") != FORMAT_TAG:
        raise ConfigError(f"{path}: not a {FORMAT_TAG} file")
    cfg = config_from_dict(header["config"])
    rows: dict[str, list] = {name: [] for name in SPLITS}
    for line in text[1:]:
        if not line:
            continue
        split, y, s, g, payload = line.split(",", 4)
        if int(g) != 2 * int(y) + int(s):
            raise ConfigError(f"{path}: group id inconsistent with (y, s)")
        rows[split].append((int(y), int(s), payload))
    splits = {}
    for name, recs in rows.items():
        if cfg.kind == "vec":
            x = np.array([[float(v) for v in p.split(",")] for _, _, p in recs], dtype=np.float64)
        else:
            x = np.array([[int(v) for v in p.split(",")] for _, _, p in recs], dtype=np.int64)
        splits[name] = GroupedDataset(x, [r[0] for r in recs], [r[1] for r in recs], name, cfg.kind)
    return DataBundle(cfg, int(header["seed"]), splits)


def balanced_train(bundle: DataBundle, seed: int) -> GroupedDataset:
    """Group-balanced training data: balanced train subsample plus the held-out split."""
    bal = group_balance(bundle["train"], seed)
    return replace(concat(bal, bundle["heldout"]), split="train")
