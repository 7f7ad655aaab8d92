"""Command-line driver: ``ft-evolve <command> [flags]``.

Exit status is 0 on success, 1 on a usage error and 2 when the pipeline
itself fails. Settings come from an optional JSON file given by ``--config``;
flags override it.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from .errors import FTEvolveError
from .evaluation import EvaluationConfig, cross_validated_score
from .explore import ExplorerConfig, explore
from .expr import DEFAULT_OPERATORS, parse_sequence
from .library import DatasetSignature, ExperienceLibrary, SelectionParams
from .loop import CallRecord, LoopConfig, run_closed_loop, run_one_shot, usage_stats
from .policy import GenerationRules, HTTPPolicy, MockPolicy
from .refine import CheckThresholds, build_trajectory, check_sequence, enhance_trajectory, filter_outliers
from .table import execute_sequence, load_csv


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# flag dest -> config-file key
_FLAG_KEYS = {
    "data": "data",
    "target": "target",
    "task": "task",
    "library": "library",
    "policy": "policy",
    "seed": "seed",
    "iterations": "iterations",
    "candidates": "candidates",
    "keep_top": "keep_top",
    "lam": "lambda",
    "mu": "mu",
    "context_size": "context_size",
    "jobs": "jobs",
    "out": "out",
}

_DEFAULTS = {
    "task": "regression",
    "library": "library.json",
    "policy": "mock",
    "seed": 0,
    "out": "out",
}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration; flags override its values")
    p.add_argument("--data", help="CSV file with a header row")
    p.add_argument("--target", help="target column (default: last column)")
    p.add_argument("--task", choices=("regression", "classification"))
    p.add_argument("--library", help="experience library JSON file")
    p.add_argument("--policy", choices=("mock", "http"))
    p.add_argument("--seed", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--candidates", type=int)
    p.add_argument("--keep-top", dest="keep_top", type=int)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--mu", type=float)
    p.add_argument("--context-size", dest="context_size", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ft-evolve", description="Evolve feature transformations for tabular data.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("explore", help="seed or extend a library by exploration")
    _common(p)
    p.add_argument("--episodes", type=int)

    p = sub.add_parser("refine", help="re-check, filter and optionally enhance a library")
    _common(p)
    p.add_argument("--enhance", action="store_true", help="ask the policy for gap-filling variants")

    p = sub.add_parser("loop", help="closed-loop generation with write-back")
    _common(p)

    p = sub.add_parser("oneshot", help="same call budget without write-back")
    _common(p)
    p.add_argument("--mode", choices=("fixed", "resample"), default="resample")

    p = sub.add_parser("eval", help="score a dataset, optionally after a transformation sequence")
    _common(p)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--sequence", help="postfix sequence text")
    g.add_argument("--sequence-file", help="file holding a postfix sequence")

    p = sub.add_parser("report", help="CSV tables and SVG charts from a run JSONL")
    p.add_argument("--run", required=True, help="run JSONL written by loop or oneshot")
    p.add_argument("--out", help="output directory (default: next to the run file)")
    p.add_argument("--features", type=int, help="feature count (default: from the run summary)")
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults, the config file and explicit flags (in that order)."""
    cfg = dict(_DEFAULTS)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            loaded = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise UsageError(f"config file {path} must hold a JSON object")
        cfg.update(loaded)
        base = path.parent
        for key in ("data", "library", "out"):
            if isinstance(cfg.get(key), str) and key in loaded and not Path(cfg[key]).is_absolute():
                cfg[key] = str(base / cfg[key])
    for dest, key in _FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is not None:
            cfg[key] = value
    return cfg


def _dataset(cfg: dict):
    if not cfg.get("data"):
        raise UsageError("--data is required (flag or config file)")
    if not Path(cfg["data"]).is_file():
        raise UsageError(f"data file not found: {cfg['data']}")
    return load_csv(cfg["data"], cfg.get("target"), cfg.get("task", "regression"))


def _eval_config(cfg: dict) -> EvaluationConfig:
    return EvaluationConfig(**{"seed": cfg.get("seed", 0), **cfg.get("evaluation", {})})


def _selection(cfg: dict) -> SelectionParams:
    base = SelectionParams()
    return SelectionParams(
        int(cfg.get("context_size", base.K)), float(cfg.get("lambda", base.lam)), float(cfg.get("mu", base.mu))
    )


def _loop_config(cfg: dict) -> LoopConfig:
    base = LoopConfig()
    return LoopConfig(
        iterations=int(cfg.get("iterations", base.iterations)),
        candidates=int(cfg.get("candidates", base.candidates)),
        keep_top=int(cfg.get("keep_top", base.keep_top)),
        selection=_selection(cfg),
        dedup_threshold=float(cfg.get("dedup_threshold", base.dedup_threshold)),
        seed=int(cfg.get("seed", 0)),
        jobs=int(cfg.get("jobs", base.jobs)),
        eval=_eval_config(cfg),
        thresholds=CheckThresholds(**cfg.get("thresholds", {})),
    )


def _policy(cfg: dict):
    if cfg.get("policy", "mock") == "mock":
        return MockPolicy()
    endpoint = cfg.get("endpoint", {})
    if not endpoint.get("base_url") or not endpoint.get("model"):
        raise UsageError("--policy http needs endpoint.base_url and endpoint.model in the config file")
    return HTTPPolicy(
        endpoint["base_url"],
        endpoint["model"],
        timeout=float(endpoint.get("timeout", 60.0)),
        audit_path=endpoint.get("audit"),
    )


def _library(cfg: dict, must_exist: bool = False) -> ExperienceLibrary:
    path = Path(cfg["library"])
    if path.is_file():
        return ExperienceLibrary.load(path)
    if must_exist:
        raise UsageError(f"library file not found: {path}")
    return ExperienceLibrary()


def _explore_into(lib: ExperienceLibrary, d, cfg: dict, episodes: int | None = None) -> int:
    ex = dict(cfg.get("explorer", {}))
    ex.setdefault("seed", cfg.get("seed", 0))
    if episodes is not None:
        ex["episodes"] = episodes
    result = explore(d, _eval_config(cfg), ExplorerConfig(**ex), CheckThresholds(**cfg.get("thresholds", {})))
    return len(lib.write_back(result.experiences, float(cfg.get("dedup_threshold", 0.9))))


def cmd_explore(args, cfg) -> None:
    d = _dataset(cfg)
    lib = _library(cfg)
    added = _explore_into(lib, d, cfg, args.episodes)
    lib.save(cfg["library"])
    print(json.dumps({"library": cfg["library"], "added": added, "version": lib.version, "size": len(lib)}))


def cmd_refine(args, cfg) -> None:
    d = _dataset(cfg)
    lib = _library(cfg, must_exist=True)
    sig = DatasetSignature.of(d)
    th = CheckThresholds(**cfg.get("thresholds", {}))
    pool = lib.for_dataset(sig)
    valid = [e for e in pool if check_sequence(e.sequence, d, th).passed]
    kept = filter_outliers(valid)
    lib.replace_dataset(sig, kept)
    enhanced = 0
    if args.enhance and len(kept) >= 2:
        traj = build_trajectory(kept, _selection(cfg).K, _selection(cfg))
        result = enhance_trajectory(
            traj, _policy(cfg), d, _eval_config(cfg), th,
            GenerationRules(DEFAULT_OPERATORS, d.n_features), seed=int(cfg.get("seed", 0)),
        )
        enhanced = len(lib.write_back(result.kept, float(cfg.get("dedup_threshold", 0.9))))
    lib.save(cfg["library"])
    print(json.dumps({
        "checked": len(pool),
        "invalid": len(pool) - len(valid),
        "outliers": len(valid) - len(kept),
        "enhanced": enhanced,
        "version": lib.version,
    }))


def _generate(args, cfg, one_shot: str | None) -> None:
    d = _dataset(cfg)
    lib = _library(cfg)
    if not lib.for_dataset(DatasetSignature.of(d)):
        _explore_into(lib, d, cfg)
    lcfg = _loop_config(cfg)
    policy = _policy(cfg)
    if one_shot is None:
        report = run_closed_loop(d, lib, policy, lcfg)
    else:
        report = run_one_shot(d, lib, policy, lcfg, one_shot)
    lib.save(cfg["library"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    report.save(out / "run.jsonl", out / "summary.json")
    print(json.dumps({
        "mode": report.mode,
        "calls": len(report.records),
        "initial_best": report.initial_best.value,
        "final_best": report.final_best.value,
        "library_version": lib.version,
        "run": str(out / "run.jsonl"),
    }))


def cmd_eval(args, cfg) -> None:
    d = _dataset(cfg)
    text = args.sequence
    if args.sequence_file:
        text = Path(args.sequence_file).read_text(encoding="utf-8")
    if text:
        seq = parse_sequence(text.strip(), DEFAULT_OPERATORS, d.n_features)
        d = execute_sequence(seq, d)
    print(json.dumps(cross_validated_score(d, _eval_config(cfg)).to_dict()))


# --------------------------------------------------------------- report


def _read_run(path: Path) -> list[CallRecord]:
    records = []
    with path.open(encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if line.strip():
                try:
                    records.append(CallRecord.from_dict(json.loads(line)))
                except (json.JSONDecodeError, TypeError) as exc:
                    raise ValueError(f"{path}:{n}: not a call record ({exc})") from exc
    return records


def _feature_count(run: Path, records: list[CallRecord], explicit: int | None) -> int:
    if explicit is not None:
        return explicit
    summary = run.with_name("summary.json")
    if summary.is_file():
        names = json.loads(summary.read_text(encoding="utf-8")).get("feature_names")
        if names:
            return len(names)
    highest = 0
    for r in records:
        for tok in (r.sequence or "").replace("<SEP>", ",").split(","):
            tok = tok.strip()
            if tok.startswith("f") and tok[1:].isdigit():
                highest = max(highest, int(tok[1:]))
    return highest


def _write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _svg(width: int, height: int, body: list[str], title: str) -> str:
    return "\n".join([
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-family="sans-serif" font-size="14">{title}</text>',
        *body,
        "</svg>",
        "",
    ])


def line_chart(values: list[float], title: str, width: int = 640, height: int = 360) -> str:
    left, right, top, bottom = 60, 20, 30, 40
    pw, ph = width - left - right, height - top - bottom
    lo, hi = (min(values), max(values)) if values else (0.0, 1.0)
    if hi - lo < 1e-9:
        lo, hi = lo - 0.5, hi + 0.5
    n = max(len(values) - 1, 1)

    def xy(i, v):
        return left + pw * i / n, top + ph * (1 - (v - lo) / (hi - lo))

    pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in (xy(i, v) for i, v in enumerate(values)))
    body = [
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
        f'<text x="{left - 6}" y="{top + 4}" text-anchor="end" font-family="sans-serif" font-size="11">{hi:.3f}</text>',
        f'<text x="{left - 6}" y="{top + ph}" text-anchor="end" font-family="sans-serif" font-size="11">{lo:.3f}</text>',
        f'<text x="{left + pw / 2:.1f}" y="{height - 8}" text-anchor="middle" font-family="sans-serif" font-size="11">call</text>',
    ]
    if values:
        body.append(f'<polyline fill="none" stroke="steelblue" stroke-width="2" points="{pts}"/>')
    return _svg(width, height, body, title)


def bar_chart(labels: list[str], values: list[float], title: str, width: int = 640, height: int = 360) -> str:
    left, right, top, bottom = 50, 20, 30, 70
    pw, ph = width - left - right, height - top - bottom
    peak = max(values, default=0) or 1
    slot = pw / max(len(values), 1)
    body = [f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>']
    for i, (label, v) in enumerate(zip(labels, values)):
        h = ph * v / peak
        x = left + i * slot + slot * 0.1
        body.append(f'<rect x="{x:.2f}" y="{top + ph - h:.2f}" width="{slot * 0.8:.2f}" height="{h:.2f}" fill="steelblue"/>')
        cx = x + slot * 0.4
        body.append(
            f'<text x="{cx:.2f}" y="{top + ph + 12}" font-family="sans-serif" font-size="10" '
            f'transform="rotate(45 {cx:.2f} {top + ph + 12})">{label}</text>'
        )
        body.append(f'<text x="{cx:.2f}" y="{top + ph - h - 3:.2f}" text-anchor="middle" font-family="sans-serif" font-size="10">{v:g}</text>')
    return _svg(width, height, body, title)


def cmd_report(args, cfg) -> None:
    run = Path(args.run)
    if not run.is_file():
        raise UsageError(f"run file not found: {run}")
    records = _read_run(run)
    out = Path(args.out) if args.out else run.parent
    out.mkdir(parents=True, exist_ok=True)
    n_features = _feature_count(run, records, args.features)
    stats = usage_stats((r.sequence for r in records if r.sequence), n_features)

    _write_csv(
        out / "best_so_far.csv",
        ["iteration", "call", "valid", "score", "best_so_far"],
        [[r.iteration, r.call, int(bool(r.valid)), "" if r.score is None else repr(r.score),
          "" if r.best_so_far is None else repr(r.best_so_far)] for r in records],
    )
    ops = stats["operator_counts"]
    _write_csv(out / "operator_usage.csv", ["operator", "count"], list(ops.items()))
    feats = stats["feature_counts"]
    _write_csv(out / "feature_usage.csv", ["feature", "count"], [[f"f{i + 1}", c] for i, c in enumerate(feats)])

    curve = [r.best_so_far for r in records if r.best_so_far is not None]
    (out / "best_so_far.svg").write_text(line_chart(curve, "Best score so far"), encoding="utf-8")
    (out / "operator_usage.svg").write_text(
        bar_chart(list(ops), list(ops.values()), "Operator usage"), encoding="utf-8"
    )
    (out / "feature_usage.svg").write_text(
        bar_chart([f"f{i + 1}" for i in range(len(feats))], feats, "Feature usage"), encoding="utf-8"
    )
    print(json.dumps({"rows": len(records), "out": str(out), "simple_ratio": stats["simple_ratio"]}))


COMMANDS = {
    "explore": cmd_explore,
    "refine": cmd_refine,
    "loop": lambda a, c: _generate(a, c, None),
    "oneshot": lambda a, c: _generate(a, c, a.mode),
    "eval": cmd_eval,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = resolve(args) if args.command != "report" else {}
        COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except FTEvolveError as exc:
        print(f"{exc.tag}: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, TypeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
