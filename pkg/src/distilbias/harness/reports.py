"""Report emission: flat CSV (or JSON) tables materialised from a result store.

Differences are oriented so that a positive value means the distilled
student ``g`` is worse than its reference ``r`` (the teacher for C1, the
scratch student of equal scale for C2)::

    d_id      = r.id_score  - g.id_score
    d_ood     = r.ood_score - g.ood_score
    d_spugap  = g.spurious_gap - r.spurious_gap

Tables (file stem: columns):

* ``rows``: every ResultRow field except ``wall_time``
* ``heatmap_<remedy>``: method, remedy, comparison, teacher_scale,
  student_scale, n_seeds, d_id_mean, d_id_sd, d_ood_mean, d_ood_sd,
  d_spugap_mean, d_spugap_sd
* ``remedy_summary``: remedy, label, n_cells, C1_ID, C1_OOD, C1_SpuGap,
  C2_ID, C2_OOD, C2_SpuGap
* ``agreement``: method, remedy, teacher_scale, student_scale, seed, pair,
  split, agreement
* ``venn``: method, remedy, teacher_scale, student_scale, seed, pair, split,
  both_correct, first_only, distilled_only, both_wrong
* ``density``: method, remedy, teacher_scale, student_scale, seed, role,
  split, bin_lo, bin_hi, count
* ``confidence``: method, remedy, teacher_scale, student_scale, seed, role,
  split, mean_confidence
* ``cka_summary``: method, remedy, teacher_scale, student_scale, seed,
  split, mean_cka
* ``cka/<cell>_<split>``: student_layer, t0 .. t{h-1}
* ``eap/<cell>_<role>``: layer, head_0 .. head_{k-1}, MLP
* ``eap_summary``: cell coordinates, role, input_score, total, true_change
* ``failures``: cell_id, error, message

Reals are written as positional decimals with 6 significant digits; standard
deviations over a single seed are reported as 0.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

from .matrix import ROW_FIELDS, ResultStore, enumerate_cells, load_rows

REMEDY_LABELS = {"none": "Vanilla", "da": "DA", "ikd": "IKD", "init": "Init"}
DIFF_COLUMNS = ("d_id", "d_ood", "d_spugap")
CELL_KEYS = ("method", "remedy", "teacher_scale", "student_scale", "seed")


def fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        if not np.isfinite(v):
            raise ValueError(f"non-finite value {v!r} in report")
        if v == 0:
            return "0"
        return np.format_float_positional(float(v), precision=6, unique=False, fractional=False, trim="-")
    return str(v)


def diffs(ref: dict, g: dict) -> dict:
    return {
        "d_id": ref["id_score"] - g["id_score"],
        "d_ood": ref["ood_score"] - g["ood_score"],
        "d_spugap": g["spurious_gap"] - ref["spurious_gap"],
    }


def comparisons(rows: list[dict]) -> list[dict]:
    """One record per (cell, seed, comparison) with the three differences."""
    by_cell: dict[tuple, dict] = {}
    for r in rows:
        by_cell.setdefault(tuple(r[k] for k in CELL_KEYS), {})[r["role"]] = r
    out = []
    for key, roles in by_cell.items():
        if len(roles) != 3:
            continue
        base = dict(zip(CELL_KEYS, key))
        g = roles["distilled"]
        if base["teacher_scale"] != base["student_scale"]:
            out.append({**base, "comparison": "C1", **diffs(roles["teacher_scratch"], g)})
        out.append({**base, "comparison": "C2", **diffs(roles["student_scratch"], g)})
    return out


def _sd(vals) -> float:
    return float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0


def heatmap(cfg, comps: list[dict], remedy: str) -> list[dict]:
    out = []
    tags = [t.value for t in cfg.scale_tags]
    for method in cfg.methods:
        for comparison in ("C1", "C2"):
            for t in tags:
                for s in tags:
                    if tags.index(s) > tags.index(t) or (comparison == "C1" and s == t):
                        continue
                    sel = [c for c in comps if c["method"] == method and c["remedy"] == remedy
                           and c["comparison"] == comparison and c["teacher_scale"] == t and c["student_scale"] == s]
                    if not sel:
                        continue
                    rec = {"method": method, "remedy": remedy, "comparison": comparison,
                           "teacher_scale": t, "student_scale": s, "n_seeds": len(sel)}
                    for col in DIFF_COLUMNS:
                        vals = [c[col] for c in sel]
                        rec[f"{col}_mean"] = float(np.mean(vals))
                        rec[f"{col}_sd"] = _sd(vals)
                    out.append(rec)
    return out


def remedy_summary(cfg, comps: list[dict]) -> list[dict]:
    """Unweighted means over (method, scale pair, seed) records per remedy."""
    out = []
    for remedy in ("none", "da", "ikd", "init"):
        if remedy not in cfg.remedies:
            continue
        rec = {"remedy": remedy, "label": REMEDY_LABELS[remedy]}
        n = 0
        for comparison in ("C1", "C2"):
            sel = [c for c in comps if c["remedy"] == remedy and c["comparison"] == comparison]
            if not sel:
                break
            n += len(sel)
            for col, name in zip(DIFF_COLUMNS, ("ID", "OOD", "SpuGap")):
                rec[f"{comparison}_{name}"] = float(np.mean([c[col] for c in sel]))
        else:
            rec["n_cells"] = n
            out.append(rec)
    return [{k: r[k] for k in ("remedy", "label", "n_cells", "C1_ID", "C1_OOD", "C1_SpuGap",
                               "C2_ID", "C2_OOD", "C2_SpuGap")} for r in out]


def _cell_tables(store: ResultStore, cfg) -> dict[str, list[dict]]:
    t = {"agreement": [], "venn": [], "density": [], "confidence": [], "cka_summary": [], "eap_summary": []}
    grids = {}
    for cell in enumerate_cells(cfg):
        if not store.is_complete(cfg, cell):
            continue
        rec = store.load_cell(cell)
        base = {"method": cell.method, "remedy": cell.remedy, "teacher_scale": cell.teacher,
                "student_scale": cell.student, "seed": cell.seed}
        for r in rec["rows"]:
            if r["role"] == "distilled":
                continue
            for split, key in (("id_test", "agree_distilled_id"), ("ood_test", "agree_distilled_ood")):
                t["agreement"].append({**base, "pair": f"{r['role']}-distilled", "split": split, "agreement": r[key]})
        for v in rec["venn"]:
            both, first, second, neither = v["counts"]
            t["venn"].append({**base, "pair": v["pair"], "split": v["split"], "both_correct": both,
                              "first_only": first, "distilled_only": second, "both_wrong": neither})
        for d in rec["density"]:
            edges = d["edges"]
            for i, count in enumerate(d["counts"]):
                t["density"].append({**base, "role": d["role"], "split": d["split"], "bin_lo": edges[i],
                                     "bin_hi": edges[i + 1], "count": count})
            t["confidence"].append({**base, "role": d["role"], "split": d["split"],
                                    "mean_confidence": d["mean_confidence"]})
        for split, c in rec.get("cka", {}).items():
            grid = np.array(c["grid"], dtype=float)
            t["cka_summary"].append({**base, "split": split, "mean_cka": float(np.nanmean(grid))})
            grids[f"cka/{cell.id}_{split}"] = [
                {"student_layer": i, **{f"t{j}": v for j, v in enumerate(row)}} for i, row in enumerate(c["grid"])]
        for role, e in rec.get("eap", {}).items():
            t["eap_summary"].append({**base, "role": role, "input_score": e["input_score"],
                                     "total": e["total"], "true_change": e["true_change"]})
            grids[f"eap/{cell.id}_{role}"] = [
                {"layer": i, **dict(zip(e["columns"], row))} for i, row in enumerate(e["grid"])]
    return {**t, **grids}


def build_tables(store: ResultStore) -> dict[str, list[dict]]:
    cfg = store.config()
    rows = load_rows(store, cfg)
    if not rows:
        raise ValueError(f"{store.root}: no completed cells to report")
    comps = comparisons(rows)
    tables = {"rows": [{k: r[k] for k in ROW_FIELDS if k != "wall_time"} for r in rows]}
    for remedy in cfg.remedies:
        tables[f"heatmap_{remedy}"] = heatmap(cfg, comps, remedy)
    tables["remedy_summary"] = remedy_summary(cfg, comps)
    tables.update(_cell_tables(store, cfg))
    tables["failures"] = [{"cell_id": f["cell_id"], "error": f["error"], "message": f["message"]}
                          for f in store.failures(cfg)]
    return tables


def _csv_text(records: list[dict], columns: list[str] | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    columns = columns or (list(records[0]) if records else [])
    w.writerow(columns)
    for r in records:
        w.writerow([fmt(r[c]) for c in columns])
    return buf.getvalue()


def _json_value(v):
    if isinstance(v, (float, np.floating)):
        return float(fmt(v))
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


EMPTY_COLUMNS = {"failures": ["cell_id", "error", "message"]}


def emit_reports(store: ResultStore | str | Path, fmt_kind: str = "csv", out_dir: str | Path | None = None) -> list[Path]:
    """Write every table; returns the written paths (sorted)."""
    if fmt_kind not in ("csv", "json"):
        raise ValueError("format must be csv or json")
    store = store if isinstance(store, ResultStore) else ResultStore(store)
    tables = build_tables(store)
    out = Path(out_dir) if out_dir else store.reports_dir
    written = []
    for name, records in sorted(tables.items()):
        if not records and name not in EMPTY_COLUMNS:
            continue
        path = out / f"{name}.{fmt_kind}"
        path.parent.mkdir(parents=True, exist_ok=True)
        if fmt_kind == "csv":
            text = _csv_text(records, EMPTY_COLUMNS.get(name) if not records else None)
        else:
            text = json.dumps([{k: _json_value(v) for k, v in r.items()} for r in records], indent=1) + "\n"
        try:
            path.write_text(text)
        except OSError as exc:
            raise OSError(f"failed to write report {path}: {exc}") from exc
        written.append(path)
    return sorted(written)
