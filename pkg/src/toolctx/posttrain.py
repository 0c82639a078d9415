"""Post-training objectives over externally supplied log-probabilities, and
preference-data export from optimizer ledgers.

Nothing here computes gradients; the losses are the scalar objectives a
trainer would minimize, useful for checking exported corpora and for unit
tests of a training stack.
"""

from __future__ import annotations

import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .editors import EditProposal

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LogProbRecord:
    sequence_id: str
    logprob_theta: float
    logprob_ref: float = 0.0

    def __post_init__(self):
        for name in ("logprob_theta", "logprob_ref"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValueError(f"{name} must be finite, got {v}")
            if v > 0:
                raise ValueError(f"{name} is a log-probability and must be <= 0, got {v}")

    @property
    def log_ratio(self) -> float:
        return self.logprob_theta - self.logprob_ref


@dataclass(frozen=True)
class PreferenceGroup:
    prompt_id: str
    members: tuple  # (response_id, score, LogProbRecord)
    beta: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "members", tuple(tuple(m) for m in self.members))
        if len(self.members) < 2:
            raise ValueError("a preference group needs at least two members")
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if not all(math.isfinite(m[1]) for m in self.members):
            raise ValueError("group scores must be finite")


def _logprobs(records) -> list[float]:
    return [r.logprob_theta if isinstance(r, LogProbRecord) else float(r) for r in records]


def sft_loss(records: Sequence[LogProbRecord | float]) -> float:
    """Negative mean log-likelihood of the target sequences."""
    lps = _logprobs(records)
    if not lps:
        raise ValueError("sft_loss needs at least one record")
    return -math.fsum(lps) / len(lps)


def log_sigmoid(x):
    """``log(1 / (1 + exp(-x)))`` without overflow."""
    return -np.logaddexp(0.0, -np.asarray(x, dtype=float))


def dpo_margin(pos: LogProbRecord, neg: LogProbRecord) -> float:
    return pos.log_ratio - neg.log_ratio


def dpo_loss(pairs: Sequence[tuple[LogProbRecord, LogProbRecord]], beta: float = 0.1) -> float:
    if beta <= 0:
        raise ValueError("beta must be positive")
    if not pairs:
        raise ValueError("dpo_loss needs at least one pair")
    margins = np.array([dpo_margin(p, n) for p, n in pairs])
    return float(-np.mean(log_sigmoid(beta * margins)))


def grpo_weights(scores: Sequence[float], beta: float = 1.0) -> np.ndarray:
    """Softmax of ``beta * scores`` with max-shift stabilization."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    s = np.asarray(scores, dtype=float)
    if s.size == 0:
        raise ValueError("grpo_weights needs at least one score")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    z = beta * s
    e = np.exp(z - z.max())
    return e / e.sum()


def grpo_loss(groups: Sequence[PreferenceGroup]) -> float:
    """Mean over groups of the weight-averaged negative log-likelihood."""
    if not groups:
        raise ValueError("grpo_loss needs at least one group")
    total = 0.0
    for g in groups:
        w = grpo_weights([m[1] for m in g.members], g.beta)
        lp = np.array([m[2].logprob_theta for m in g.members])
        total += float(w @ lp)
    return -total / len(groups)


# -- export -------------------------------------------------------------------------------


def proposal_text(p: EditProposal) -> str:
    return p.raw_response or json.dumps(p.to_dict()["modifications"], ensure_ascii=False)


@dataclass
class PreferenceCorpora:
    sft: list
    dpo: list
    grpo: list
    skipped: dict

    def write(self, out_dir: str | Path, provenance: Mapping | None = None) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {}
        for name, rows in (("sft", self.sft), ("dpo", self.dpo), ("grpo", self.grpo)):
            path = out / f"{name}.jsonl"
            with path.open("w") as fh:
                for row in rows:
                    fh.write(json.dumps(row, ensure_ascii=False) + "\n")
            paths[name] = path
        manifest = {"counts": {"sft": len(self.sft), "dpo": len(self.dpo), "grpo": len(self.grpo)},
                    "skipped": self.skipped, "provenance": dict(provenance or {})}
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
        paths["manifest"] = out / "manifest.json"
        return paths


def export_preferences(ledger: Iterable[EditProposal | Mapping]) -> PreferenceCorpora:
    """Build SFT rows, DPO pairs and GRPO groups from evaluated proposals.

    Proposals are grouped by mismatch context (level plus the queries they
    were asked to fix). Within a context every accepted proposal is paired
    with every rejected one; the GRPO group holds all evaluated proposals
    with score ``post_score - pre_score``.
    """
    proposals = [p if isinstance(p, EditProposal) else EditProposal.from_dict(p) for p in ledger]
    evaluated = [p for p in proposals if p.accepted is not None and p.post_score is not None and p.pre_score is not None]
    skipped = {"not_evaluated": len(proposals) - len(evaluated), "dpo_contexts_one_sided": 0, "grpo_singletons": 0}
    if not proposals:
        logger.warning("empty ledger; nothing to export")

    sft = [{"context": p.context_key(), "level": p.level, "prompt": p.prompt, "completion": proposal_text(p),
            "delta": p.delta} for p in evaluated if p.accepted]

    by_context: dict[str, list[EditProposal]] = defaultdict(list)
    for p in evaluated:
        by_context[p.context_key()].append(p)

    dpo, grpo = [], []
    for ctx in sorted(by_context):
        group = by_context[ctx]
        pos = [p for p in group if p.accepted]
        neg = [p for p in group if not p.accepted]
        if pos and neg:
            for a in pos:
                for b in neg:
                    dpo.append({"context": ctx, "level": a.level, "prompt": a.prompt, "chosen": proposal_text(a),
                                "rejected": proposal_text(b), "chosen_delta": a.delta, "rejected_delta": b.delta})
        else:
            skipped["dpo_contexts_one_sided"] += 1
        if len(group) >= 2:
            grpo.append({"context": ctx, "level": group[0].level, "prompt": group[0].prompt,
                         "responses": [proposal_text(p) for p in group], "scores": [p.delta for p in group]})
        else:
            skipped["grpo_singletons"] += 1
    return PreferenceCorpora(sft, dpo, grpo, skipped)


def read_ledger(path: str | Path) -> list[EditProposal]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            data = json.loads(line)
            data.pop("seq", None)
            out.append(EditProposal.from_dict(data))
    return out
