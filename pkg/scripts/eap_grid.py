"""Train a teacher and a distilled student on token data and print their EAP grids.

    python3 scripts/eap_grid.py [--teacher B] [--student T] [--seed 17] [--pairs 64]
"""

import argparse

import numpy as np

from distilbias import analysis, debias, distill, models, synthdata


def show(name, res):
    print(f"\n{name}: rows are layers, columns {res.columns}; input edge {res.input_score:+.4f}")
    for l, row in enumerate(res.grid):
        print(f"  L{l}  " + " ".join(f"{v:+8.4f}" for v in row))


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--teacher", default="B")
    ap.add_argument("--student", default="T")
    ap.add_argument("--seed", type=int, default=17)
    ap.add_argument("--pairs", type=int, default=64)
    args = ap.parse_args()

    cfg = synthdata.TokSpurConfig()
    bundle = synthdata.generate(cfg, args.seed)
    dims = {"vocab_size": cfg.vocab_size, "seq_len": cfg.seq_len}
    tcfg = debias.TrainConfig.paper_default("attn", args.seed)
    teacher = debias.train_erm(models.spec_for("attn", args.teacher, **dims), bundle, tcfg, role="teacher_scratch")
    student = distill.distill(teacher, models.spec_for("attn", args.student, **dims), bundle,
                              distill.DistillConfig(train=tcfg))

    clean = bundle["id_test"].subset(np.arange(args.pairs))
    corrupt = synthdata.corrupt(clean, cfg)
    for name, m in (("teacher", teacher), ("student", student)):
        res = analysis.eap_scores(m, clean.x, corrupt.x)
        true = analysis.logit_margin(m, corrupt.x) - analysis.logit_margin(m, clean.x)
        show(name, res)
        print(f"  sum of edges {res.total_per_sample().mean():+.4f} vs patched margin change {true.mean():+.4f}")


if __name__ == "__main__":
    main()
