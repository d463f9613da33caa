"""Read a finished run and look at what the background logit adds.

Usage: python demos/03_domain_and_fused_scores.py RUN_DIR

RUN_DIR is the output directory of ``xdom all``.  For each OOD split the
script prints how well the background logit alone separates ID from OOD,
how MSP does on the semantic logits, and how the fused score moves as the
temperature grows.
"""

import sys
from pathlib import Path

from xdom import metrics, pipeline

run = Path(sys.argv[1])
scores = pipeline.read_scores(run / "scores" / "msp.csv")
report = pipeline.load_report(pipeline.Run(None, run))

for split in pipeline.EVAL_SPLITS + (pipeline.UNION_SPLIT,):
    ood = pipeline.ood_view(scores, split)
    ids = scores["id_test"]
    print(f"\n{split}")
    print(f"  background logit alone  AUROC {metrics.auroc(ids['S_d'], ood['S_d']):.3f}")
    print(f"  MSP on semantic logits  AUROC {metrics.auroc(ids['S_h'], ood['S_h']):.3f}")
    for c in report["temperature_sweep"][split]["msp"]:
        print(f"  fused, T={c['temperature']:<5}      AUROC {c['auroc']:.3f}")
