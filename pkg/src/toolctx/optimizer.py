"""Greedy, verification-guided optimization of a tool knowledge base.

For each iteration and each level (top-down), the mismatches of the current
snapshot are handed one at a time to that level's editor. Every proposal is
applied to a candidate snapshot and re-evaluated on the training split; the
candidate replaces the incumbent only if the chosen metric strictly improves.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

from .editors import DEFAULT_ICL_CAP, MAX_PARSE_RETRIES, EditProposal, allowed_tools, enforce_constraints, request_proposal, select_icl
from .evalharness import (
    LEVEL_METRIC,
    EvalConfig,
    EvalReport,
    MismatchRecord,
    ValidationExample,
    cached_reevaluate,
    collect_mismatches,
    evaluate_set,
)
from .llmclient import BackendError
from .pipeline import PipelineConfig
from .retrieval import RetrieverConfig
from .callparse import MatchPolicy
from .tooldoc import LEVELS, ToolKnowledgeBase, apply_modifications, diff_snapshots, kb_from_dict, kb_to_dict, save_kb

logger = logging.getLogger(__name__)

ACCEPT_METRICS = ("final_acc_product", "final_acc_joint", "level_metric")
EVAL_MODES = ("full", "cached", "auto")
CACHED_ABOVE_TOOLS = 20
CHECKPOINT_FORMAT = "toolctx-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    iterations: int = 3
    levels: tuple = LEVELS
    accept_metric: str = "final_acc_product"
    strict_improvement: bool = True
    eval_mode: str = "auto"
    seed: int = 0
    batch: bool = False  # one proposal per level pass instead of one per mismatch
    icl_cap: int = DEFAULT_ICL_CAP
    parse_retries: int = MAX_PARSE_RETRIES
    editor_model: str = "default"
    eval: EvalConfig = EvalConfig()

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(self.levels))
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.levels:
            raise ValueError("at least one level is required")
        unknown = [lv for lv in self.levels if lv not in LEVELS]
        if unknown:
            raise ValueError(f"unknown levels {unknown}")
        order = [LEVELS.index(lv) for lv in self.levels]
        if order != sorted(set(order)):
            raise ValueError("levels must be distinct and in retrieval, tool, parameter order")
        if self.accept_metric not in ACCEPT_METRICS:
            raise ValueError(f"unknown accept metric {self.accept_metric!r}")
        if self.eval_mode not in EVAL_MODES:
            raise ValueError(f"unknown eval mode {self.eval_mode!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["levels"] = list(self.levels)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "OptimizerConfig":
        data = dict(data)
        ev = dict(data.pop("eval", {}))
        eval_cfg = EvalConfig(
            pipeline=PipelineConfig(**ev.pop("pipeline", {})),
            retriever=RetrieverConfig(**ev.pop("retriever", {})),
            policy=MatchPolicy(**ev.pop("policy", {})),
            **ev,
        )
        return cls(eval=eval_cfg, **data)


@dataclass
class OptimizerState:
    current_kb: ToolKnowledgeBase
    best_report: EvalReport
    initial_report: EvalReport
    ledger: list = field(default_factory=list)
    trace: list = field(default_factory=list)  # metrics after each (iteration, level) pass
    iteration: int = 1
    level_index: int = 0
    mismatch_index: int = 0
    pending: list | None = None  # E_c fixed at the start of the current level pass
    skipped: int = 0  # proposals lost to unparseable editor output
    finished: bool = False
    stopped: str | None = None  # reason for a graceful early stop

    def accepted_scores(self) -> list[float]:
        return [p.post_score for p in self.ledger if p.accepted]

    def to_dict(self) -> dict:
        return {
            "current_kb": kb_to_dict(self.current_kb),
            "best_report": self.best_report.to_dict(),
            "initial_report": self.initial_report.to_dict(),
            "ledger": [p.to_dict() for p in self.ledger],
            "trace": self.trace,
            "iteration": self.iteration,
            "level_index": self.level_index,
            "mismatch_index": self.mismatch_index,
            "pending": None if self.pending is None else [m.to_dict() for m in self.pending],
            "skipped": self.skipped,
            "finished": self.finished,
            "stopped": self.stopped,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "OptimizerState":
        pending = data.get("pending")
        return cls(
            current_kb=kb_from_dict(data["current_kb"]),
            best_report=EvalReport.from_dict(data["best_report"]),
            initial_report=EvalReport.from_dict(data["initial_report"]),
            ledger=[EditProposal.from_dict(p) for p in data["ledger"]],
            trace=list(data["trace"]),
            iteration=data["iteration"],
            level_index=data["level_index"],
            mismatch_index=data["mismatch_index"],
            pending=None if pending is None else [MismatchRecord.from_dict(m) for m in pending],
            skipped=data.get("skipped", 0),
            finished=data.get("finished", False),
            stopped=data.get("stopped"),
        )


def metric_value(report: EvalReport, cfg: OptimizerConfig, level: str | None = None) -> float:
    if cfg.accept_metric == "final_acc_product":
        return report.final_acc
    if cfg.accept_metric == "final_acc_joint":
        return report.final_acc_joint
    if level is None:
        raise ValueError("level_metric acceptance needs the level being edited")
    return report.metric(LEVEL_METRIC[level])


def accept_if_improved(state: OptimizerState, candidate_kb: ToolKnowledgeBase, candidate_report: EvalReport,
                       cfg: OptimizerConfig, proposal: EditProposal | None = None, level: str | None = None):
    """Greedy acceptance. Returns ``(state, accepted)``; ``state`` is updated in place.

    With ``level_metric`` the level's own metric must improve and the joint
    accuracy may not drop.
    """
    if candidate_report.kb_snapshot_id != candidate_kb.snapshot_id:
        raise ValueError("candidate report was not computed on the candidate snapshot")
    level = level or (proposal.level if proposal is not None else None)
    pre = metric_value(state.best_report, cfg, level)
    post = metric_value(candidate_report, cfg, level)
    accepted = post > pre if cfg.strict_improvement else post >= pre
    if accepted and cfg.accept_metric == "level_metric":
        accepted = candidate_report.final_acc_joint >= state.best_report.final_acc_joint
    if accepted:
        state.current_kb = candidate_kb
        state.best_report = candidate_report
    if proposal is not None:
        state.ledger.append(replace(proposal, pre_score=pre, post_score=post, accepted=accepted))
    return state, accepted


# -- persistence ----------------------------------------------------------------


def _checksum(body: Any) -> str:
    return hashlib.sha256(json.dumps(body, sort_keys=True, ensure_ascii=False).encode()).hexdigest()


def checkpoint(state: OptimizerState, path: str | Path, config: OptimizerConfig | None = None) -> Path:
    """Atomically write ``state`` with an integrity checksum."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    body = {"state": state.to_dict(), "config": None if config is None else config.to_dict()}
    payload = {"format": CHECKPOINT_FORMAT, "format_version": CHECKPOINT_VERSION, "checksum": _checksum(body), "body": body}
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(payload, ensure_ascii=False))
    os.replace(tmp, path)
    return path


def restore(path: str | Path) -> tuple[OptimizerState, OptimizerConfig | None]:
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from None
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not an optimizer checkpoint")
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {payload.get('format_version')!r}")
    body = payload.get("body")
    if _checksum(body) != payload.get("checksum"):
        raise CheckpointError(f"checksum mismatch in {path}")
    try:
        state = OptimizerState.from_dict(body["state"])
        config = None if body.get("config") is None else OptimizerConfig.from_dict(body["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint body: {exc}") from None
    return state, config


class RunRecorder:
    """Writes the append-only ledger, the diff log, accepted snapshots and checkpoints."""

    def __init__(self, out_dir: str | Path, config: OptimizerConfig):
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.config = config
        self.ledger_path = self.out / "ledger.jsonl"
        self.diff_path = self.out / "diffs.jsonl"
        self.checkpoint_path = self.out / "checkpoint.json"

    def sync(self, state: OptimizerState) -> None:
        """Drop ledger lines written after the last checkpoint (crash between the two writes)."""
        if not self.ledger_path.exists():
            return
        lines = self.ledger_path.read_text().splitlines()
        if len(lines) > len(state.ledger):
            logger.warning("trimming %d ledger lines not covered by the checkpoint", len(lines) - len(state.ledger))
            self.ledger_path.write_text("".join(line + "\n" for line in lines[: len(state.ledger)]))

    def record(self, state: OptimizerState, before: ToolKnowledgeBase | None = None) -> None:
        entry = state.ledger[-1]
        with self.ledger_path.open("a") as fh:
            fh.write(json.dumps({"seq": len(state.ledger) - 1, **entry.to_dict()}, ensure_ascii=False) + "\n")
        if entry.accepted and before is not None:
            with self.diff_path.open("a") as fh:
                for ch in diff_snapshots(before, state.current_kb):
                    row = {
                        "seq": len(state.ledger) - 1,
                        "iteration": entry.iteration,
                        "snapshot_id": state.current_kb.snapshot_id,
                        "tool": ch.tool,
                        "level": ch.level,
                        "before": _jsonable(ch.before),
                        "after": _jsonable(ch.after),
                    }
                    fh.write(json.dumps(row, ensure_ascii=False) + "\n")
            save_kb(state.current_kb, self.out / "snapshots" / f"{len(state.ledger) - 1:04d}_{state.current_kb.snapshot_id[:12]}")

    def save(self, state: OptimizerState) -> None:
        checkpoint(state, self.checkpoint_path, self.config)


def _jsonable(content):
    if isinstance(content, tuple):
        return [p.to_dict() for p in content]
    return content


# -- the loop -----------------------------------------------------------------------


def _evaluate_candidate(state: OptimizerState, candidate: ToolKnowledgeBase, touched, dataset, backend,
                        cfg: OptimizerConfig, embedder) -> EvalReport:
    mode = cfg.eval_mode
    if mode == "auto":
        mode = "cached" if len(candidate) > CACHED_ABOVE_TOOLS else "full"
    if mode == "cached":
        return cached_reevaluate(state.best_report, candidate, touched, dataset, backend, cfg.eval, embedder)
    return evaluate_set(candidate, dataset, backend, cfg.eval, embedder)


def _step(state: OptimizerState, level: str, unit: Sequence[MismatchRecord], dataset, inference_backend,
          editor_backend, cfg: OptimizerConfig, embedder, recorder: RunRecorder | None) -> str | None:
    """Process one editor call. Returns a stop reason, or None to continue."""
    kb = state.current_kb
    icl = select_icl(level, state.ledger, cap=cfg.icl_cap)
    try:
        proposal = request_proposal(level, kb, unit, editor_backend, state.ledger, icl,
                                    retries=cfg.parse_retries, model=cfg.editor_model)
    except BackendError as exc:
        return f"editor backend failed: {exc}"
    if proposal is None:
        state.skipped += 1
        logger.info("skipping %s-level mismatch %r: editor output unparseable", level, unit[0].query[:60])
        return None
    proposal, _ = enforce_constraints(proposal, allowed_tools(level, unit), kb)
    proposal = replace(proposal, iteration=state.iteration,
                       before={name: kb[name].content(level) for name in proposal.modifications})
    pre = metric_value(state.best_report, cfg, level)
    if not proposal.modifications:
        state.ledger.append(replace(proposal, pre_score=pre, post_score=None, accepted=False))
        if recorder:
            recorder.record(state)
        return None
    candidate = apply_modifications(kb, level, proposal.modifications, iteration=state.iteration)
    if candidate.same_content(kb):
        # Nothing changed, so the score cannot change either.
        state.ledger.append(replace(proposal, pre_score=pre, post_score=pre, accepted=False))
        if recorder:
            recorder.record(state)
        return None
    report = _evaluate_candidate(state, candidate, set(proposal.modifications), dataset, inference_backend, cfg, embedder)
    if not report.complete:
        return f"inference backend failed on {report.n_errored} queries while evaluating a candidate"
    accept_if_improved(state, candidate, report, cfg, proposal, level)
    logger.info("iteration %d %s edit of %s: %.4f -> %.4f %s", state.iteration, level, proposal.tools(), pre,
                state.ledger[-1].post_score, "accepted" if state.ledger[-1].accepted else "rejected")
    if recorder:
        recorder.record(state, before=kb)
    return None


def _trace_row(iteration: int, level: str | None, report: EvalReport) -> dict:
    return {"iteration": iteration, "level": level, "snapshot_id": report.kb_snapshot_id, **report.metrics(),
            "final_acc_joint": report.final_acc_joint}


def initial_state(kb0: ToolKnowledgeBase, dataset: Sequence[ValidationExample], inference_backend,
                  cfg: OptimizerConfig, embedder=None) -> OptimizerState:
    report = evaluate_set(kb0, dataset, inference_backend, cfg.eval, embedder)
    state = OptimizerState(current_kb=kb0, best_report=report, initial_report=report)
    state.trace.append(_trace_row(0, None, report))
    return state


def run(kb0: ToolKnowledgeBase | None, dataset: Sequence[ValidationExample], inference_backend, editor_backend,
        cfg: OptimizerConfig = OptimizerConfig(), *, state: OptimizerState | None = None,
        out_dir: str | Path | None = None, embedder=None) -> OptimizerState:
    """Run (or resume, when ``state`` is given) the greedy editing loop.

    Only ``dataset`` (the training split) is ever evaluated here.
    """
    if not dataset:
        raise ValueError("empty training dataset")
    recorder = RunRecorder(out_dir, cfg) if out_dir is not None else None
    if state is None:
        if kb0 is None:
            raise ValueError("need either an initial knowledge base or a state to resume")
        state = initial_state(kb0, dataset, inference_backend, cfg, embedder)
        if recorder:
            for p in (recorder.ledger_path, recorder.diff_path):
                p.unlink(missing_ok=True)
    elif recorder:
        recorder.sync(state)
    state.stopped = None

    if not state.best_report.complete:
        state.stopped = "initial evaluation incomplete"
    while state.stopped is None and not state.finished and state.iteration <= cfg.iterations:
        if state.level_index == 0 and state.pending is None and not state.best_report.mismatches:
            logger.info("no mismatches left at iteration %d; stopping", state.iteration)
            break
        while state.level_index < len(cfg.levels):
            level = cfg.levels[state.level_index]
            if state.pending is None:
                state.pending = collect_mismatches(state.best_report, level)
                state.mismatch_index = 0
            units = ([state.pending] if state.pending else []) if cfg.batch else [[m] for m in state.pending]
            while state.mismatch_index < len(units):
                reason = _step(state, level, units[state.mismatch_index], dataset, inference_backend,
                               editor_backend, cfg, embedder, recorder)
                if reason is not None:
                    logger.warning("stopping early: %s", reason)
                    state.stopped = reason
                    break
                state.mismatch_index += 1
                if recorder:
                    recorder.save(state)
            if state.stopped:
                break
            state.trace.append(_trace_row(state.iteration, level, state.best_report))
            state.level_index += 1
            state.pending = None
            state.mismatch_index = 0
        if state.stopped:
            break
        state.iteration += 1
        state.level_index = 0
    if state.stopped is None:
        state.finished = True
    if recorder:
        recorder.save(state)
        save_kb(state.current_kb, recorder.out / "final_kb")
    return state
