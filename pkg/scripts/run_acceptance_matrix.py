"""Run the vector-data distillation matrix and print the directional checks.

    python3 scripts/run_acceptance_matrix.py [--config configs/acceptance_vec.yaml] [--jobs N]

Prints the Table-2-shaped remedy summary plus the ID-vs-OOD CKA means and
the largest "distilled only" OOD venn count.
"""

import argparse
from pathlib import Path

import numpy as np

from distilbias.harness import config, matrix, reports

ROOT = Path(__file__).resolve().parents[1]


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", type=Path, default=ROOT / "configs" / "acceptance_vec.yaml")
    ap.add_argument("--store", type=Path, default=None)
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()

    cfg = config.load(args.config)
    summary = matrix.run_matrix(cfg, jobs=args.jobs, store_dir=args.store)
    print(f"{summary.cells} cells: {summary.completed} run, {summary.skipped} cached, {summary.failed} failed")
    store = matrix.ResultStore(summary.store)
    reports.emit_reports(store)
    tables = reports.build_tables(store)

    print("\nremedy  " + "  ".join(f"{c:>10}" for c in ("C1_ID", "C1_OOD", "C1_SpuGap", "C2_ID", "C2_OOD", "C2_SpuGap")))
    for r in tables["remedy_summary"]:
        print(f"{r['label']:<7} " + "  ".join(f"{r[c]:+10.4f}" for c in
                                              ("C1_ID", "C1_OOD", "C1_SpuGap", "C2_ID", "C2_OOD", "C2_SpuGap")))

    cka = tables["cka_summary"]
    for split in ("id_test", "ood_test"):
        print(f"mean CKA {split}: {np.mean([r['mean_cka'] for r in cka if r['split'] == split]):.4f}")
    venn = [r for r in tables["venn"] if r["split"] == "ood_test"]
    print(f"max distilled-only OOD count: {max(r['distilled_only'] for r in venn)}")
    print(f"reports in {store.reports_dir}")


if __name__ == "__main__":
    main()
