"""The C1/C2 experiment matrix and its on-disk result store.

Store layout::

    <store>/config.yaml              the emitting config (seeds already offset)
    <store>/models/<key>.ckpt        trained models, keyed by recipe hash
    <store>/cells/<cell_id>.json     rows and diagnostics of a completed cell
    <store>/cells/<cell_id>.failed.json
    <store>/reports/                 written by ``emit_reports``

A cell is ``(method, teacher scale, student scale, remedy, seed)`` with
teacher scale >= student scale.  It yields three rows (teacher_scratch,
student_scratch, distilled).  Diagonal cells only feed the C2 comparison.
"""

from __future__ import annotations

import functools
import json
import logging
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .. import analysis, debias, distill, models, synthdata
from ..debias import stable_hash
from ..models import ScaleTag, TrainedModel
from . import config as config_mod
from .config import ExperimentConfig

log = logging.getLogger(__name__)

ROW_FIELDS = (
    "method", "family", "teacher_scale", "student_scale", "remedy", "seed", "role", "model_scale",
    "metric", "id_score", "ood_score", "transfer_score", "spurious_gap",
    "group_acc_0", "group_acc_1", "group_acc_2", "group_acc_3",
    "agree_distilled_id", "agree_distilled_ood", "conf_id", "conf_ood",
    "config_hash", "wall_time",
)


@dataclass(frozen=True)
class Cell:
    method: str
    teacher: str
    student: str
    remedy: str
    seed: int

    @property
    def id(self) -> str:
        return f"{self.method}__{self.teacher}-{self.student}__{self.remedy}__s{self.seed}"

    @property
    def diagonal(self) -> bool:
        return self.teacher == self.student

    def coords(self) -> dict:
        return asdict(self)


def enumerate_cells(cfg: ExperimentConfig) -> list[Cell]:
    tags = cfg.scale_tags
    return [Cell(m, t.value, s.value, r, seed)
            for m in cfg.methods for r in cfg.remedies for seed in cfg.seeds
            for t in tags for s in tags if s <= t]


def parse_cell_filter(text: str) -> dict:
    """``method=erm,teacher=L,student=T,remedy=none,seed=17`` (any subset of keys)."""
    out = {}
    for part in filter(None, (p.strip() for p in text.split(","))):
        if "=" not in part:
            raise ValueError(f"cell coordinate {part!r} is not key=value")
        key, value = (v.strip() for v in part.split("=", 1))
        if key in ("t", "s"):
            key = {"t": "teacher", "s": "student"}[key]
        if key not in Cell.__dataclass_fields__:
            raise ValueError(f"unknown cell coordinate {key!r}")
        out[key] = int(value) if key == "seed" else value
    return out


def select_cells(cells: list[Cell], flt: dict | None) -> list[Cell]:
    if not flt:
        return cells
    return [c for c in cells if all(getattr(c, k) == v for k, v in flt.items())]


def row_config_hash(cfg: ExperimentConfig, cell: Cell) -> str:
    return stable_hash({"config": cfg.hash(), "cell": cell.coords()})


# ---------------------------------------------------------------------------
# model cache


class ModelCache:
    """Content-addressed checkpoint cache; one file per training recipe."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.hits = 0
        self.trained = 0

    def path(self, key: str) -> Path:
        return self.root / f"{key}.ckpt"

    def get(self, recipe: dict, make) -> TrainedModel:
        key = stable_hash(recipe)
        path = self.path(key)
        if path.exists():
            self.hits += 1
            return models.load_checkpoint(path)
        model = make()
        self.trained += 1
        models.save_checkpoint(model, path)
        # reload so cached and fresh runs see identical float bytes
        return models.load_checkpoint(path)


@functools.lru_cache(maxsize=8)
def _bundle(data_cfg, seed: int) -> synthdata.DataBundle:
    return synthdata.generate(data_cfg, seed)


def _relabel(model: TrainedModel, role: str) -> TrainedModel:
    return TrainedModel(model.spec, model.params, role, model.provenance)


class Recipes:
    """Training recipes for one (config, seed) pair, backed by the cache."""

    def __init__(self, cfg: ExperimentConfig, seed: int, cache: ModelCache):
        self.cfg, self.seed, self.cache = cfg, seed, cache
        self.bundle = _bundle(cfg.data, seed)
        self.tcfg = cfg.train_config(seed)
        self.base = {"data": synthdata.config_to_dict(cfg.data), "seed": seed, "train": asdict(self.tcfg)}

    def train_set(self, balanced: bool):
        return synthdata.balanced_train(self.bundle, self.seed) if balanced else None

    def scratch(self, method_id: str, scale, balanced: bool) -> TrainedModel:
        spec = self.cfg.spec(scale)
        method = self.cfg.method(method_id)
        recipe = {**self.base, "kind": "scratch", "method": asdict(method), "spec": spec.to_dict(),
                  "balanced": balanced}
        return self.cache.get(recipe, lambda: debias.train(method, spec, self.bundle, self.tcfg,
                                                           train=self.train_set(balanced)))

    def distilled(self, teacher: TrainedModel, scale, method_id: str, balanced: bool,
                  init_from: TrainedModel | None = None) -> TrainedModel:
        spec = self.cfg.spec(scale)
        method = self.cfg.method(method_id)
        dcfg = self.cfg.distill_config(self.seed, "none")
        recipe = {**self.base, "kind": "distill", "teacher": teacher.digest(), "spec": spec.to_dict(),
                  "method": asdict(method), "alpha": dcfg.alpha, "tau": dcfg.tau,
                  "combine_debias": dcfg.combine_debias, "balanced": balanced,
                  "init_from": None if init_from is None else init_from.digest()}

        def make():
            init = None if init_from is None else distill.init_from_teacher(init_from, spec, self.seed)
            return distill.distill(teacher, spec, self.bundle, dcfg, method, self.train_set(balanced), init)

        return self.cache.get(recipe, make)

    def ikd(self, teacher: TrainedModel, scale, method_id: str) -> TrainedModel:
        def step(current, spec, bundle, dcfg, method, train):
            return self.distilled(current, spec.scale, method.id, balanced=False)

        return distill.ikd_chain(teacher, ScaleTag(scale), self.bundle, self.cfg.distill_config(self.seed, "ikd"),
                                 self.cfg.method(method_id), distill_fn=step)


def cell_models(cell: Cell, rec: Recipes) -> dict[str, TrainedModel]:
    balanced = cell.remedy == "da"
    teacher = _relabel(rec.scratch(cell.method, cell.teacher, balanced), "teacher_scratch")
    student = rec.scratch(cell.method, cell.student, balanced)
    if cell.remedy == "ikd" and not cell.diagonal:
        g = rec.ikd(teacher, cell.student, cell.method)
    elif cell.remedy == "init":
        g = rec.distilled(teacher, cell.student, cell.method, False, init_from=teacher)
    else:
        g = rec.distilled(teacher, cell.student, cell.method, balanced)
    return {"teacher_scratch": teacher, "student_scratch": student, "distilled": g}


# ---------------------------------------------------------------------------
# one cell


def _eap_record(model: TrainedModel, bundle: synthdata.DataBundle, cfg: ExperimentConfig) -> dict:
    ds = bundle["id_test"]
    idx = np.arange(min(cfg.analysis.eap_pairs, len(ds)))
    clean = ds.subset(idx)
    ea = analysis.eap_scores(model, clean.x, synthdata.corrupt(clean, cfg.data).x)
    true = analysis.logit_margin(model, synthdata.corrupt(clean, cfg.data).x) - analysis.logit_margin(model, clean.x)
    return {"columns": ea.columns, "grid": ea.grid.tolist(), "input_score": ea.input_score,
            "total": float(ea.total_per_sample().mean()), "true_change": float(true.mean())}


def run_cell(cfg: ExperimentConfig, cell: Cell, cache: ModelCache) -> dict:
    start = time.perf_counter()
    rec = Recipes(cfg, cell.seed, cache)
    ms = cell_models(cell, rec)
    bundle = rec.bundle
    g = ms["distilled"]
    a = cfg.analysis
    chash = row_config_hash(cfg, cell)
    rows, density = [], []
    for role, m in ms.items():
        rep = analysis.evaluate(m, bundle, a.metric)
        confs = {}
        for split in ("id_test", "ood_test"):
            pr = analysis.prob_density(m, bundle[split], a.density_bins)
            confs[split] = pr.mean_confidence
            density.append({"role": role, "split": split, "edges": pr.edges.tolist(),
                            "counts": pr.counts.tolist(), "mean_confidence": pr.mean_confidence})
        rows.append({
            **{k: v for k, v in cell.coords().items() if k not in ("teacher", "student")},
            "family": cfg.family, "teacher_scale": cell.teacher, "student_scale": cell.student,
            "role": role, "model_scale": m.spec.scale.value, "metric": rep.metric,
            "id_score": rep.id_score, "ood_score": rep.ood_score, "transfer_score": rep.transfer_score,
            "spurious_gap": rep.spurious_gap,
            **{f"group_acc_{i}": v for i, v in enumerate(rep.group_acc)},
            "agree_distilled_id": analysis.agreement(m, g, bundle["id_test"]),
            "agree_distilled_ood": analysis.agreement(m, g, bundle["ood_test"]),
            "conf_id": confs["id_test"], "conf_ood": confs["ood_test"],
            "config_hash": chash,
        })
    venn = [{"pair": f"{first}-distilled", "split": split,
             "counts": list(analysis.venn_counts(ms[first], g, bundle[split]))}
            for first in ("teacher_scratch", "student_scratch") for split in ("id_test", "ood_test")]
    out = {"cell": cell.coords(), "config_hash": chash, "rows": rows, "venn": venn, "density": density}
    if a.cka:
        out["cka"] = {}
        for split in ("id_test", "ood_test"):
            cm = analysis.cka_matrix(ms["teacher_scratch"], g, bundle[split], min(a.cka_probe, len(bundle[split])),
                                     seed=cell.seed)
            grid = [[None if np.isnan(v) else float(v) for v in row] for row in cm.grid]
            out["cka"][split] = {"grid": grid, "degenerate": [list(c) for c in cm.degenerate]}
    if a.eap and cfg.family == "attn":
        out["eap"] = {role: _eap_record(m, bundle, cfg) for role, m in ms.items()}
    wall = time.perf_counter() - start
    for r in rows:
        r["wall_time"] = wall
    return out


# ---------------------------------------------------------------------------
# store


class ResultStore:
    def __init__(self, root: str | Path):
        self.root = Path(root)

    @property
    def cells_dir(self) -> Path:
        return self.root / "cells"

    @property
    def models_dir(self) -> Path:
        return self.root / "models"

    @property
    def reports_dir(self) -> Path:
        return self.root / "reports"

    def config(self) -> ExperimentConfig:
        path = self.root / "config.yaml"
        if not path.exists():
            raise FileNotFoundError(f"{self.root} is not a result store (no config.yaml)")
        cfg = config_mod.load(path)
        return replace(cfg, output_dir=str(self.root))

    def cell_path(self, cell: Cell) -> Path:
        return self.cells_dir / f"{cell.id}.json"

    def failure_path(self, cell: Cell) -> Path:
        return self.cells_dir / f"{cell.id}.failed.json"

    def load_cell(self, cell: Cell) -> dict | None:
        p = self.cell_path(cell)
        if not p.exists():
            return None
        return json.loads(p.read_text())

    def is_complete(self, cfg: ExperimentConfig, cell: Cell) -> bool:
        rec = self.load_cell(cell)
        return rec is not None and rec.get("config_hash") == row_config_hash(cfg, cell)

    def write_json(self, path: Path, obj) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(f"{path.name}.{os.getpid()}.tmp")
        tmp.write_text(json.dumps(obj, indent=1, sort_keys=True))
        tmp.replace(path)

    def failures(self, cfg: ExperimentConfig) -> list[dict]:
        out = []
        for cell in enumerate_cells(cfg):
            p = self.failure_path(cell)
            if p.exists() and not self.is_complete(cfg, cell):
                out.append(json.loads(p.read_text()))
        return out


@dataclass
class RunSummary:
    store: Path
    cells: int = 0
    completed: int = 0
    skipped: int = 0
    failed: int = 0
    trained: int = 0
    cache_hits: int = 0

    def merge(self, other: dict) -> None:
        for k in ("completed", "skipped", "failed", "trained", "cache_hits"):
            setattr(self, k, getattr(self, k) + other.get(k, 0))


def _cell_job(cfg_dict: dict, store_root: str, cell: Cell) -> dict:
    cfg = config_mod.from_dict(cfg_dict)
    store = ResultStore(store_root)
    cache = ModelCache(store.models_dir)
    try:
        rec = run_cell(cfg, cell, cache)
    except Exception as exc:  # record-and-continue
        log.warning("cell %s failed: %s", cell.id, exc)
        store.write_json(store.failure_path(cell), {
            "cell": cell.coords(), "cell_id": cell.id, "error": type(exc).__name__,
            "message": str(exc), "traceback": traceback.format_exc(),
        })
        return {"failed": 1, "trained": cache.trained, "cache_hits": cache.hits}
    store.write_json(store.cell_path(cell), rec)
    fp = store.failure_path(cell)
    if fp.exists():
        fp.unlink()
    return {"completed": 1, "trained": cache.trained, "cache_hits": cache.hits}


def _scratch_job(cfg_dict: dict, store_root: str, task: tuple) -> dict:
    cfg = config_mod.from_dict(cfg_dict)
    cache = ModelCache(ResultStore(store_root).models_dir)
    method, scale, balanced, seed = task
    try:
        Recipes(cfg, seed, cache).scratch(method, scale, balanced)
    except Exception as exc:
        # the owning cells will hit the same error and record it
        log.warning("scratch model %s failed: %s", task, exc)
    return {"trained": cache.trained, "cache_hits": cache.hits}


def _scratch_tasks(cells: list[Cell]) -> list[tuple]:
    tasks = set()
    for c in cells:
        for scale in (c.teacher, c.student):
            tasks.add((c.method, scale, c.remedy == "da", c.seed))
    # largest first keeps the pool busy
    return sorted(tasks, key=lambda t: (-ScaleTag(t[1]).rank, t[0], t[2], t[3]))


def run_matrix(cfg: ExperimentConfig, jobs: int = 1, cell_filter: dict | None = None,
               store_dir: str | Path | None = None) -> RunSummary:
    """Train and analyse every pending cell; completed cells are skipped."""
    store = ResultStore(store_dir or cfg.output_dir)
    store.root.mkdir(parents=True, exist_ok=True)
    cfg = replace(cfg, output_dir=str(store.root))
    config_mod.dump(cfg, store.root / "config.yaml")
    cells = select_cells(enumerate_cells(cfg), cell_filter)
    summary = RunSummary(store.root, cells=len(cells))
    pending = []
    for c in cells:
        if store.is_complete(cfg, c):
            summary.skipped += 1
        else:
            pending.append(c)
    if not pending:
        return summary
    cfg_dict = cfg.to_dict()
    root = str(store.root)
    tasks = _scratch_tasks(pending)
    if jobs <= 1:
        for t in tasks:
            summary.merge(_scratch_job(cfg_dict, root, t))
        for c in pending:
            summary.merge(_cell_job(cfg_dict, root, c))
        return summary
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        for res in pool.map(_scratch_job, [cfg_dict] * len(tasks), [root] * len(tasks), tasks):
            summary.merge(res)
        for res in pool.map(_cell_job, [cfg_dict] * len(pending), [root] * len(pending), pending):
            summary.merge(res)
    return summary


def load_rows(store: ResultStore, cfg: ExperimentConfig | None = None) -> list[dict]:
    cfg = cfg or store.config()
    rows = []
    for cell in enumerate_cells(cfg):
        if store.is_complete(cfg, cell):
            rows.extend(store.load_cell(cell)["rows"])
    return rows


def verify_rows(store: ResultStore) -> list[str]:
    """Cell ids whose rows do not carry the hash of the stored config."""
    cfg = store.config()
    bad = []
    for cell in enumerate_cells(cfg):
        rec = store.load_cell(cell)
        if rec is None:
            continue
        want = row_config_hash(cfg, cell)
        if any(r["config_hash"] != want for r in rec["rows"]):
            bad.append(cell.id)
    return bad
