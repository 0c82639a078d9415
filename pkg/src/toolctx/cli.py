"""Command-line entry point: ``toolctx <command> [options]``.

Exit codes: 0 success, 1 configuration or user error, 2 partial result,
3 internal error. Every option can also be set through an environment
variable named ``TOOLCTX_<OPTION>`` (upper case, dashes as underscores);
command-line flags win.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any

from . import __version__
from .callparse import DEFAULT_POLICY
from .datasets import DatasetError, load_bfcl, load_xlam, read_examples, split_by_answer, write_examples
from .evalharness import EvalConfig, evaluate_set, format_summary, summarize_trials
from .llmclient import BackendError, ScriptedBackend, load_backend
from .optimizer import CheckpointError, OptimizerConfig, restore, run
from .pipeline import PipelineConfig
from .posttrain import export_preferences, read_ledger
from .retrieval import RetrieverConfig
from .synthetic import ScenarioSpec, generate_synthetic_scenario, scenario_backends
from .tooldoc import LEVELS, load_kb, save_kb

logger = logging.getLogger("toolctx")

EXIT_OK, EXIT_USAGE, EXIT_PARTIAL, EXIT_INTERNAL = 0, 1, 2, 3
ENV_PREFIX = "TOOLCTX_"


class UsageError(Exception):
    pass


# -- helpers ---------------------------------------------------------------------------


def file_sha256(path: str | Path) -> str:
    p = Path(path)
    h = hashlib.sha256()
    if p.is_dir():
        for f in sorted(p.rglob("*")):
            if f.is_file():
                h.update(str(f.relative_to(p)).encode())
                h.update(f.read_bytes())
    else:
        h.update(p.read_bytes())
    return h.hexdigest()


def provenance(args: argparse.Namespace, inputs: dict[str, Any]) -> dict:
    config = {k: v for k, v in vars(args).items() if k != "func"}
    return {
        "toolctx_version": __version__,
        "command": args.command,
        "config": config,
        "inputs": {name: {"path": str(p), "sha256": file_sha256(p)} for name, p in inputs.items() if p},
    }


def _require(path: str | None, what: str) -> Path:
    if not path:
        raise UsageError(f"missing {what}")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {path}")
    return p


def _write_json(path: Path, data: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, ensure_ascii=False))
    return path


def load_backends(args) -> dict:
    """Resolve inference/editor/embedding backends from ``--backend-config`` or ``--scripted-fixtures``."""
    if args.scripted_fixtures:
        data = json.loads(_require(args.scripted_fixtures, "scripted fixtures").read_text())
        if data.get("kind") == "synthetic-scenario":
            inference, editor = scenario_backends(data)
            return {"inference": inference, "editor": editor, "embedding": inference}
        out = {}
        for role in ("inference", "editor"):
            if role in data:
                out[role] = ScriptedBackend.from_dict(data[role])
        out["embedding"] = out.get("inference")
        return out
    if args.backend_config:
        cfg = json.loads(_require(args.backend_config, "backend config").read_text())
        out = {}
        for role in ("inference", "editor", "embedding"):
            if role in cfg:
                out[role] = load_backend(cfg[role])
        out.setdefault("embedding", out.get("inference"))
        return out
    raise UsageError("no backend configured: pass --backend-config or --scripted-fixtures")


def eval_config(args) -> EvalConfig:
    return EvalConfig(
        pipeline=PipelineConfig(k=args.k, max_tokens=args.max_tokens),
        retriever=RetrieverConfig(k=args.k, scorer=args.scorer, chunk_size=args.chunk_size, overlap=args.overlap),
        policy=DEFAULT_POLICY,
        mode=args.mode,
        workers=args.workers,
    )


def _levels(text: str) -> tuple:
    levels = tuple(x.strip() for x in text.split(",") if x.strip())
    bad = [lv for lv in levels if lv not in LEVELS]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown levels {bad}")
    return tuple(lv for lv in LEVELS if lv in levels)


# -- commands -------------------------------------------------------------------------------


def cmd_evaluate(args) -> int:
    kb = load_kb(_require(args.kb, "--kb"))
    dataset = read_examples(_require(args.dataset, "--dataset"))
    backends = load_backends(args)
    cfg = eval_config(args)
    embedder = backends.get("embedding") if args.scorer != "lexical" else None
    reports = [evaluate_set(kb, dataset, backends["inference"], cfg, embedder) for _ in range(args.trials)]
    trials = summarize_trials(reports) if args.trials > 1 else None
    summary = format_summary(reports[0], trials)
    print(summary)
    out = Path(args.out)
    _write_json(out / "report.json", {
        "provenance": provenance(args, {"kb": args.kb, "dataset": args.dataset}),
        "trials": [r.metrics() | {"final_acc_joint": r.final_acc_joint, "complete": r.complete} for r in reports],
        "summary": {m: {"mean": mean, "stdev": sd} for m, (mean, sd) in (trials or summarize_trials(reports)).items()},
        "report": reports[0].to_dict(),
    })
    (out / "summary.txt").write_text(summary + "\n")
    return EXIT_OK if all(r.complete for r in reports) else EXIT_PARTIAL


def cmd_optimize(args) -> int:
    out = Path(args.out)
    backends = load_backends(args)
    if "editor" not in backends:
        raise UsageError("optimize needs an editor backend")
    train = read_examples(_require(args.train, "--train"))
    state = None
    kb0 = None
    if args.resume:
        state, saved_cfg = restore(_require(str(out / "checkpoint.json"), "checkpoint to resume"))
        cfg = saved_cfg or _optimizer_config(args)
    else:
        kb0 = load_kb(_require(args.kb, "--kb"))
        cfg = _optimizer_config(args)
    embedder = backends.get("embedding") if cfg.eval.retriever.scorer != "lexical" else None
    state = run(kb0, train, backends["inference"], backends["editor"], cfg, state=state, out_dir=out, embedder=embedder)

    inputs = {"kb": args.kb, "train": args.train, "test": args.test}
    result = {
        "provenance": provenance(args, inputs),
        "optimizer_config": cfg.to_dict(),
        "train_before": state.initial_report.metrics() | {"final_acc_joint": state.initial_report.final_acc_joint},
        "train_after": state.best_report.metrics() | {"final_acc_joint": state.best_report.final_acc_joint},
        "final_snapshot_id": state.current_kb.snapshot_id,
        "proposals": len(state.ledger),
        "accepted": sum(1 for p in state.ledger if p.accepted),
        "skipped_unparseable": state.skipped,
        "stopped": state.stopped,
        "trace": state.trace,
    }
    print("train before:\n" + format_summary(state.initial_report))
    print("train after:\n" + format_summary(state.best_report))
    if args.test and state.stopped is None:
        test = read_examples(_require(args.test, "--test"))
        test_report = evaluate_set(state.current_kb, test, backends["inference"], cfg.eval, embedder)
        result["test_after"] = test_report.metrics() | {"final_acc_joint": test_report.final_acc_joint}
        _write_json(out / "test_report.json", {"provenance": result["provenance"], "report": test_report.to_dict()})
        print("test (final snapshot):\n" + format_summary(test_report))
    _write_json(out / "run.json", result)
    _write_json(out / "ledger.provenance.json", {"provenance": result["provenance"], "ledger": "ledger.jsonl",
                                                 "diffs": "diffs.jsonl"})
    if state.stopped:
        print(f"stopped early: {state.stopped}", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def _optimizer_config(args) -> OptimizerConfig:
    return OptimizerConfig(
        iterations=args.iterations,
        levels=args.levels,
        accept_metric=args.accept_metric,
        eval_mode=args.eval_mode,
        seed=args.seed,
        batch=args.batch,
        icl_cap=args.icl_cap,
        eval=eval_config(args),
    )


def cmd_split(args) -> int:
    examples = read_examples(_require(args.dataset, "--dataset"))
    split = split_by_answer(examples, seed=args.seed, rule=args.rule, key_by=args.key_by)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_examples(split.train, out / "train.jsonl")
    write_examples(split.test, out / "test.jsonl")
    _write_json(out / "manifest.json", {"provenance": provenance(args, {"dataset": args.dataset}), **split.manifest(),
                                        "train_sha256": file_sha256(out / "train.jsonl"),
                                        "test_sha256": file_sha256(out / "test.jsonl")})
    print(f"train {len(split.train)}  test {len(split.test)}")
    return EXIT_OK


def cmd_export(args) -> int:
    ledger_path = _require(args.ledger, "--ledger")
    ledger = read_ledger(ledger_path)
    if not ledger:
        print("warning: ledger is empty; writing empty corpora", file=sys.stderr)
    corpora = export_preferences(ledger)
    corpora.write(args.out, provenance(args, {"ledger": ledger_path}))
    print(f"sft {len(corpora.sft)}  dpo {len(corpora.dpo)}  grpo {len(corpora.grpo)}  skipped {corpora.skipped}")
    return EXIT_OK


def accuracy_by_iteration(ledger, iterations: int | None = None) -> list[tuple[int, float]]:
    """Incumbent score at the end of each iteration, starting from the initial score."""
    if not ledger:
        return []
    scored = [p for p in ledger if p.pre_score is not None]
    current = scored[0].pre_score if scored else 0.0
    last = max((p.iteration or 0) for p in ledger)
    last = max(last, iterations or 0)
    rows = [(0, current)]
    for t in range(1, last + 1):
        for p in ledger:
            if p.iteration == t and p.accepted:
                current = p.post_score
        rows.append((t, current))
    return rows


def cmd_report(args) -> int:
    ledger = read_ledger(_require(args.ledger, "--ledger"))
    rows = accuracy_by_iteration(ledger, args.iterations)
    lines = ["iteration  accuracy  accepted  proposed"]
    for t, acc in rows:
        acc_n = sum(1 for p in ledger if p.iteration == t and p.accepted)
        prop_n = sum(1 for p in ledger if p.iteration == t)
        lines.append(f"{t:>9}  {100 * acc:8.1f}  {acc_n:>8}  {prop_n:>8}")
    text = "\n".join(lines)
    print(text)
    if args.out:
        _write_json(Path(args.out) / "iteration_report.json",
                    {"provenance": provenance(args, {"ledger": args.ledger}),
                     "rows": [{"iteration": t, "accuracy": a} for t, a in rows]})
    return EXIT_OK


def cmd_import(args) -> int:
    src = _require(args.input, "--input")
    if args.format == "xlam":
        result = load_xlam(src, top_n=args.top_n)
    else:
        result = load_bfcl(src, args.category, answers_path=args.answers)
    out = Path(args.out)
    save_kb(result.kb, out / "kb")
    write_examples(result.examples, out / "dataset.jsonl")
    _write_json(out / "manifest.json", {"provenance": provenance(args, {"input": src, "answers": args.answers}),
                                        "tools": len(result.kb), "examples": len(result.examples),
                                        "dropped": result.dropped})
    print(f"{len(result.kb)} tools, {len(result.examples)} examples ({result.dropped} dropped)")
    return EXIT_OK


def cmd_scenario(args) -> int:
    spec = ScenarioSpec(tool_count=args.tools, defects=tuple(d for d in args.defects.split(",") if d), k=args.k)
    sc = generate_synthetic_scenario(spec)
    out = Path(args.out)
    save_kb(sc.kb, out / "kb")
    write_examples(sc.examples, out / "dataset.jsonl")
    _write_json(out / "fixtures.json", sc.fixture() | {"provenance": provenance(args, {})})
    print(f"scenario with {len(sc.kb)} tools and {len(sc.examples)} queries written to {out}")
    return EXIT_OK


# -- parser -------------------------------------------------------------------------------------


def _env(name: str, default, cast=str):
    raw = os.environ.get(ENV_PREFIX + name.upper().replace("-", "_"))
    if raw is None:
        return default
    try:
        return cast(raw)
    except (TypeError, ValueError, argparse.ArgumentTypeError) as exc:
        raise UsageError(f"bad value for {ENV_PREFIX}{name.upper()}: {exc}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="toolctx", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"toolctx {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, need_backend=True):
        p.add_argument("--seed", type=int, default=_env("seed", 0, int))
        p.add_argument("--out", default=_env("out", "toolctx-out"))
        if need_backend:
            p.add_argument("--backend-config", default=_env("backend_config", None))
            p.add_argument("--scripted-fixtures", default=_env("scripted_fixtures", None))
            p.add_argument("--k", type=int, default=_env("k", 10, int))
            p.add_argument("--scorer", choices=("lexical", "external_embedding", "hybrid"), default=_env("scorer", "lexical"))
            p.add_argument("--chunk-size", type=int, default=_env("chunk_size", 300, int))
            p.add_argument("--overlap", type=int, default=_env("overlap", 20, int))
            p.add_argument("--mode", choices=("product", "joint"), default=_env("mode", "product"))
            p.add_argument("--max-tokens", type=int, default=_env("max_tokens", 4096, int))
            p.add_argument("--workers", type=int, default=_env("workers", 1, int))

    p = sub.add_parser("evaluate", help="evaluate a knowledge base on a labeled dataset")
    common(p)
    p.add_argument("--kb", default=_env("kb", None))
    p.add_argument("--dataset", default=_env("dataset", None))
    p.add_argument("--trials", type=int, default=_env("trials", 1, int))
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("optimize", help="run the greedy editing loop on a training split")
    common(p)
    p.add_argument("--kb", default=_env("kb", None))
    p.add_argument("--train", default=_env("train", None))
    p.add_argument("--test", default=_env("test", None))
    p.add_argument("--iterations", type=int, default=_env("iterations", 3, int))
    p.add_argument("--levels", type=_levels, default=_env("levels", LEVELS, _levels))
    p.add_argument("--accept-metric", choices=("final_acc_product", "final_acc_joint", "level_metric"),
                   default=_env("accept_metric", "final_acc_product"))
    p.add_argument("--eval-mode", choices=("full", "cached", "auto"), default=_env("eval_mode", "auto"))
    p.add_argument("--batch", action="store_true", default=_env("batch", False, lambda s: s.lower() in ("1", "true", "yes")))
    p.add_argument("--icl-cap", type=int, default=_env("icl_cap", 4, int))
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("split", help="answer-grouped train/test split")
    common(p, need_backend=False)
    p.add_argument("--dataset", default=_env("dataset", None))
    p.add_argument("--rule", choices=("ceil", "floor"), default=_env("rule", "ceil"))
    p.add_argument("--key-by", choices=("calls", "names"), default=_env("key_by", "calls"))
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("export-preferences", help="SFT/DPO/GRPO corpora from an optimizer ledger")
    common(p, need_backend=False)
    p.add_argument("--ledger", default=_env("ledger", None))
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("report", help="accuracy-per-iteration table from a ledger")
    p.add_argument("--ledger", default=_env("ledger", None))
    p.add_argument("--iterations", type=int, default=_env("iterations", None, int))
    p.add_argument("--out", default=_env("out", None))
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("import", help="convert xLAM/BFCL records into a knowledge base and dataset")
    common(p, need_backend=False)
    p.add_argument("--format", choices=("xlam", "bfcl"), required=True)
    p.add_argument("--input", default=_env("input", None))
    p.add_argument("--answers", default=None, help="BFCL ground-truth file, when separate")
    p.add_argument("--category", choices=("simple", "multiple", "parallel", "parallel_multiple"), default="simple")
    p.add_argument("--top-n", type=int, default=_env("top_n", 100, int))
    p.set_defaults(func=cmd_import)

    p = sub.add_parser("scenario", help="write the synthetic planted-defect scenario")
    common(p, need_backend=False)
    p.add_argument("--tools", type=int, default=10)
    p.add_argument("--defects", default="retrieval,ambiguity,param_format")
    p.add_argument("--k", type=int, default=3)
    p.set_defaults(func=cmd_scenario)
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        parser = build_parser()
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports its own usage errors
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, DatasetError, CheckpointError, FileNotFoundError, json.JSONDecodeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_PARTIAL
    except Exception:  # noqa: BLE001 - last-resort contract: exit 3
        logger.exception("internal error")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
