"""Turn an optimizer ledger into post-training corpora and score them.

Accepted edits become SFT targets. Accepted and rejected edits for the same
mismatch become DPO pairs and GRPO groups. In this scenario every rejected
edit repeats a fix already applied for another query, so only SFT rows come
out. Log-probabilities below are made up to exercise the loss functions.

    python3 demos/preference_export.py [out_dir]
"""

import sys
import tempfile
from pathlib import Path

from toolctx.optimizer import OptimizerConfig, run
from toolctx.posttrain import LogProbRecord, dpo_loss, export_preferences, sft_loss
from toolctx.synthetic import generate_synthetic_scenario


def main(out_dir):
    sc = generate_synthetic_scenario()
    state = run(sc.kb, sc.examples, sc.inference_backend(), sc.editor_backend(),
                OptimizerConfig(eval=sc.eval_config()), out_dir=out_dir)
    corpus = export_preferences(state.ledger)
    paths = corpus.write(out_dir / "prefs", {"ledger": str(out_dir / "ledger.jsonl")})
    print(f"sft={len(corpus.sft)} dpo={len(corpus.dpo)} grpo={len(corpus.grpo)} -> {paths['manifest'].parent}")

    # pretend the policy assigns -2 nats per accepted response
    records = [LogProbRecord(row["completion"], -2.0) for row in corpus.sft]
    if records:
        print(f"SFT loss on accepted edits: {sft_loss(records):.3f}")
    pos, neg = LogProbRecord("chosen", -1.0, -2.0), LogProbRecord("rejected", -2.0, -2.0)
    print(f"DPO loss for a unit margin: {dpo_loss([(pos, neg)], beta=1.0):.6f}")


if __name__ == "__main__":
    main(Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="prefs-")))
