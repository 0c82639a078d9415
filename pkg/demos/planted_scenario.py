"""Walk through the synthetic planted-defect scenario end to end.

The knowledge base starts with three planted documentation defects. The
optimizer repairs them one at a time and only keeps an edit when training
accuracy strictly improves.

    python3 demos/planted_scenario.py [out_dir]
"""

import sys
import tempfile
from pathlib import Path

from toolctx.evalharness import collect_mismatches, evaluate_set
from toolctx.optimizer import OptimizerConfig, run
from toolctx.synthetic import generate_synthetic_scenario


def show(label, report):
    m = report.metrics()
    print(f"{label:<8}" + "  ".join(f"{k}={v:.3f}" for k, v in m.items()))


def main(out_dir):
    sc = generate_synthetic_scenario()
    print(f"{len(sc.kb)} tools, {len(sc.examples)} labeled queries, {len(sc.planted)} queries fail on a planted defect")

    before = evaluate_set(sc.kb, sc.examples, sc.inference_backend(), sc.eval_config())
    show("before", before)
    for level in ("retrieval", "tool", "parameter"):
        for mm in collect_mismatches(before, level):
            print(f"  {level:<9} mismatch on {mm.query!r}")

    state = run(sc.kb, sc.examples, sc.inference_backend(), sc.editor_backend(),
                OptimizerConfig(iterations=3, eval=sc.eval_config()), out_dir=out_dir)
    for p in state.ledger:
        verdict = "accepted" if p.accepted else "rejected"
        print(f"  iter {p.iteration} {p.level:<9} {p.tools()} {p.pre_score:.3f} -> {p.post_score:.3f} {verdict}")
    show("after", state.best_report)
    print(f"artifacts in {out_dir}")


if __name__ == "__main__":
    main(Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="planted-")))
