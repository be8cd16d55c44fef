"""Experiment configuration: a YAML tree with a ``schema_version`` field.

Schema (version 1)::

    schema_version: 1
    output_dir: runs/example          # result store; relative to the config file
    data: {kind: vec | tok, <VecSpurConfig / TokSpurConfig fields>}
    methods: [erm, poe_weak, ...]
    scales: [T, M, L]
    remedies: [none, da, ikd, init]
    seeds: [17, 23, 42]
    train: {lr, epochs, batch_size, patience, min_delta, beta1, beta2, eps}
    distill: {alpha, tau}
    method_params: {tau_damp, bias_lr, bias_epochs, dfr_lr, dfr_epochs, ...}
    analysis: {cka: true, cka_probe: 256, eap: true, eap_pairs: 64, density_bins: 10,
               metric: accuracy | f1}

Only ``data`` is required.  Missing ``train`` keys take the per-family
defaults of :meth:`TrainConfig.paper_default`.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .. import models, synthdata
from ..debias import METHODS, DebiasMethod, TrainConfig, stable_hash
from ..distill import REMEDIES, DistillConfig

SCHEMA_VERSION = 1
DEFAULT_SEEDS = (17, 23, 42)
FAMILY_OF_KIND = {"vec": "mlp", "tok": "attn"}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AnalysisConfig:
    cka: bool = True
    cka_probe: int = 256
    eap: bool = True
    eap_pairs: int = 64
    density_bins: int = 10
    metric: str = "accuracy"

    def __post_init__(self):
        if self.metric not in ("accuracy", "f1"):
            raise ConfigError("analysis.metric must be accuracy or f1")
        if self.cka_probe < 2 or self.eap_pairs < 1 or self.density_bins < 2:
            raise ConfigError("analysis sizes out of range")


@dataclass(frozen=True)
class ExperimentConfig:
    data: synthdata.VecSpurConfig | synthdata.TokSpurConfig = field(default_factory=synthdata.VecSpurConfig)
    methods: tuple[str, ...] = ("erm",)
    scales: tuple[str, ...] = ("T", "M", "L")
    remedies: tuple[str, ...] = ("none",)
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    train: TrainConfig | None = None
    distill: DistillConfig = field(default_factory=DistillConfig)
    method_params: dict = field(default_factory=dict)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    output_dir: str = "runs/default"

    def __post_init__(self):
        try:
            self.data.validate()
        except synthdata.ConfigError as exc:
            raise ConfigError(str(exc)) from exc
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        for name, values, allowed in (("methods", self.methods, METHODS),
                                      ("scales", self.scales, [s.value for s in models.SCALES]),
                                      ("remedies", self.remedies, REMEDIES)):
            if not values:
                raise ConfigError(f"{name} must be non-empty")
            bad = [v for v in values if v not in allowed]
            if bad:
                raise ConfigError(f"{name}: unknown entries {bad}; allowed {list(allowed)}")
            if len(set(values)) != len(values):
                raise ConfigError(f"{name} has duplicates")
        known = {f.name for f in fields(DebiasMethod)} - {"id"}
        extra = set(self.method_params) - known
        if extra:
            raise ConfigError(f"method_params: unknown keys {sorted(extra)}")
        for m in self.methods:
            self.method(m)

    @property
    def family(self) -> str:
        return FAMILY_OF_KIND[self.data.kind]

    @property
    def scale_tags(self) -> list[models.ScaleTag]:
        return sorted(models.ScaleTag(s) for s in self.scales)

    def train_config(self, seed: int) -> TrainConfig:
        base = self.train or TrainConfig.paper_default(self.family)
        return replace(base, seed=seed)

    def distill_config(self, seed: int, remedy: str) -> DistillConfig:
        return replace(self.distill, train=self.train_config(seed), remedy=remedy)

    def method(self, method_id: str) -> DebiasMethod:
        return DebiasMethod(method_id, **self.method_params)

    def spec(self, scale) -> models.ModelSpec:
        d = self.data
        if self.family == "mlp":
            return models.spec_for("mlp", scale, in_dim=d.dim)
        return models.spec_for("attn", scale, vocab_size=d.vocab_size, seq_len=d.seq_len)

    def with_seed_offset(self, offset: int) -> "ExperimentConfig":
        return replace(self, seeds=tuple(s + offset for s in self.seeds)) if offset else self

    def to_dict(self) -> dict:
        train = None
        if self.train is not None:
            train = {k: v for k, v in asdict(self.train).items() if k != "seed"}
        return {
            "schema_version": SCHEMA_VERSION,
            "output_dir": self.output_dir,
            "data": {k: list(v) if isinstance(v, tuple) else v
                     for k, v in synthdata.config_to_dict(self.data).items()},
            "methods": list(self.methods),
            "scales": list(self.scales),
            "remedies": list(self.remedies),
            "seeds": list(self.seeds),
            "train": train,
            "distill": {"alpha": self.distill.alpha, "tau": self.distill.tau},
            "method_params": dict(self.method_params),
            "analysis": asdict(self.analysis),
        }

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("output_dir")
        return stable_hash(d)


def from_dict(d: dict, base_dir: Path | None = None) -> ExperimentConfig:
    d = dict(d)
    version = d.pop("schema_version", None)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")
    allowed = {f.name for f in fields(ExperimentConfig)}
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    if "data" not in d:
        raise ConfigError("config needs a 'data' section")
    try:
        kw = {"data": synthdata.config_from_dict(d["data"])}
        for key in ("methods", "scales", "remedies", "seeds"):
            if key in d:
                kw[key] = tuple(d[key])
        family = FAMILY_OF_KIND[kw["data"].kind]
        if d.get("train") is not None:
            base = asdict(TrainConfig.paper_default(family))
            base.update(d["train"])
            kw["train"] = TrainConfig(**base)
        if d.get("distill"):
            kw["distill"] = DistillConfig(**d["distill"])
        if d.get("method_params"):
            kw["method_params"] = dict(d["method_params"])
        if d.get("analysis"):
            kw["analysis"] = AnalysisConfig(**d["analysis"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    out = d.get("output_dir", "runs/default")
    if base_dir is not None and not Path(out).is_absolute():
        out = str((base_dir / out).resolve())
    kw["output_dir"] = str(out)
    return ExperimentConfig(**kw)


def load(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a mapping at top level")
    return from_dict(raw, base_dir=path.parent)


def dump(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
